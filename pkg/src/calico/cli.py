"""Command-line entry point: build, train, eval, profile, overlay, gradcheck.

Exit status is 0 on success, 1 when a command fails and 2 on usage errors.
Diagnostics go to stderr; machine-readable results go to files or stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import ExitStack
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from calico.dataset.pipeline import StageError, build_dataset, load_image, load_samples, write_outputs
from calico.dataset.samples import PairSample
from calico.errors import CalicoError, ConfigurationError, TrainingDiverged
from calico.evaluation.metrics import EvalRecord, dump_records, evaluate
from calico.fixtures import GRADCHECK_CONFIG, gradcheck_problem
from calico.grounding.masks import MaskSet
from calico.model import CalicoModel
from calico.multimodal.config import ModelConfig, config_diff, parse_config
from calico.multimodal.sequence import ImageBatch, tokenize_prompt
from calico.numerics.checkpoint import atomic_write_bytes, decode_checkpoint, encode_checkpoint
from calico.numerics.gradcheck import grad_check
from calico.numerics.tensor import corrupt_backward
from calico.overlay import write_pair_overlays
from calico.profiling import PROFILE_CONFIGS, run_profile
from calico.training.loop import TrainSample, sample_loss, train_toy
from calico.training.optim import OptimizerState

CONFIG_KEY = "__config__"
TRAIN_KEY = "__train__"


class UsageError(Exception):
    pass


def _env_seed() -> int:
    raw = os.environ.get("CALICO_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CALICO_SEED must be an integer, got {raw!r}") from None


def _seed(args) -> int:
    return args.seed if args.seed is not None else _env_seed()


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


# -- run configuration ------------------------------------------------------------

@dataclass
class TrainSettings:
    lr: float = 1e-3
    warmup: int = 100
    prompt: str = "short"  # "short" or "full"
    batch_size: int = 0  # 0 means full batch
    max_samples: int = 0  # 0 means all


def parse_run_config(text: str, base: ModelConfig | None = None) -> tuple[ModelConfig, TrainSettings]:
    """Model keys go to ModelConfig; ``train.*`` keys set the training run."""
    settings = TrainSettings()
    model_lines = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body.startswith("train."):
            model_lines.append(line)
            continue
        key, _, raw = body.partition("=")
        name = key.strip()[len("train."):]
        if not hasattr(settings, name):
            raise ConfigurationError(f"line {lineno}: unknown training key {key.strip()!r}")
        kind = type(getattr(settings, name))
        try:
            setattr(settings, name, kind(raw.strip()))
        except ValueError:
            raise ConfigurationError(f"line {lineno}: bad value {raw.strip()!r} for {key.strip()}") from None
    if settings.prompt not in ("short", "full"):
        raise ConfigurationError(f"train.prompt must be 'short' or 'full', got {settings.prompt!r}")
    return parse_config("\n".join(model_lines), base), settings


def _read_config(path: str | None) -> tuple[ModelConfig, TrainSettings]:
    if path is None:
        return ModelConfig(), TrainSettings()
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def _train_samples(data_dir: Path, settings: TrainSettings):
    samples = load_samples(data_dir / "samples.jsonl")
    if settings.max_samples:
        samples = samples[:settings.max_samples]
    short = settings.prompt == "short"
    out = []
    for s in samples:
        pixels = np.stack([load_image(data_dir / "images" / f"{s.image_a}.png"),
                           load_image(data_dir / "images" / f"{s.image_b}.png")])
        out.append(TrainSample(ImageBatch(pixels), s.prompt(short=short), s.answer(prefix="" if short else None),
                               s.answer_masks(), s.sample_id))
    return samples, out


def _check_extents(cfg: ModelConfig, h: int, w: int) -> None:
    if (cfg.H, cfg.W) != (h, w):
        diff = config_diff(cfg, cfg.replace(H=h, W=w))
        lines = "\n".join(f"  {k}: model {a} vs data {b}" for k, (a, b) in diff.items())
        raise CalicoError(f"data does not fit the model configuration:\n{lines}")


# -- commands -----------------------------------------------------------------

def cmd_build(args) -> int:
    for flag, path in (("--annotations", args.annotations), ("--allowlist", args.allowlist),
                       ("--mapping", args.mapping)):
        if path is not None and not Path(path).is_file():
            raise UsageError(f"{flag}: no such file {path}")
    seed = _seed(args)
    result = build_dataset(args.annotations, args.allowlist, args.mapping, seed, args.per_source_quota, args.cap)
    inputs = {"annotations": args.annotations, "allowlist": args.allowlist, "mapping": args.mapping}
    manifest = write_outputs(result, args.out, inputs, seed)
    for key, n in sorted(result.shortfall.items()):
        print(f"warning: stratum {key[0]}/{key[1]} is short by {n} samples", file=sys.stderr)
    print(json.dumps(manifest["counts"], sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg, settings = _read_config(args.config)
    seed = _seed(args)
    cfg = cfg.replace(seed=seed)
    data = Path(args.data)
    _, samples = _train_samples(data, settings)
    if not samples:
        raise CalicoError(f"no samples in {data}")
    _check_extents(cfg, *samples[0].images.extents)
    model = CalicoModel(cfg)
    opt = OptimizerState(base_lr=settings.lr, warmup_steps=min(settings.warmup, args.steps),
                         total_steps=args.steps)
    result = train_toy(model, samples, args.steps, opt, batch_size=settings.batch_size or None, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = dict(model.store.state())
    state[CONFIG_KEY] = np.frombuffer(cfg.to_text().encode(), dtype=np.uint8).astype(np.float64)
    state[TRAIN_KEY] = np.frombuffer(json.dumps(settings.__dict__, sort_keys=True).encode(),
                                     dtype=np.uint8).astype(np.float64)
    atomic_write_bytes(out / "model.ckpt", encode_checkpoint(state))
    atomic_write_bytes(out / "curve.csv", result.curve_csv().encode())
    summary = {"variant": cfg.variant_label, "steps": result.steps, "token_accuracy": result.token_accuracy,
               "mean_iou": result.mean_iou, "final_loss": result.curve[-1]["total"] if result.curve else None}
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _text_of(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode()


def load_trained(path: str | os.PathLike):
    state = decode_checkpoint(Path(path).read_bytes())
    if CONFIG_KEY not in state:
        raise CalicoError(f"{path} has no embedded model configuration")
    cfg = parse_config(_text_of(state.pop(CONFIG_KEY)))
    settings = TrainSettings(**json.loads(_text_of(state.pop(TRAIN_KEY)))) if TRAIN_KEY in state else TrainSettings()
    model = CalicoModel(cfg)
    try:
        model.store.load_state(state, strict=True)
    except (KeyError, ValueError, CalicoError) as exc:
        raise CalicoError(f"checkpoint does not match its configuration: {exc}") from exc
    return model, settings


def cmd_eval(args) -> int:
    model, settings = load_trained(args.checkpoint)
    samples, train = _train_samples(Path(args.data), settings)
    if not samples:
        raise CalicoError(f"no samples in {args.data}")
    records = []
    for s, ts in zip(samples, train):
        _check_extents(model.cfg, *ts.images.extents)
        prompt = tokenize_prompt(ts.prompt, ts.images, model.tok, model.cfg.S_I)
        pred = model.predict(ts.images, prompt)
        ranks = [[n for n, sp in enumerate(pred.spans) if sp.image_index == k + 1] for k in range(2)]
        records.append(EvalRecord(s.sample_id, s.task, pred.mask_sets, s.gt, ranks))
    report = evaluate(records)
    out = Path(args.out)
    _write_json(out, report)
    atomic_write_bytes(out.with_suffix(".records.jsonl"), dump_records(records).encode())
    print(json.dumps(report["average"], sort_keys=True))
    return 0


def cmd_profile(args) -> int:
    names = [n.strip() for n in args.configs.split(",") if n.strip()]
    unknown = [n for n in names if n not in PROFILE_CONFIGS]
    if not names or unknown:
        raise UsageError(f"unknown profile config(s) {unknown}; choose from {sorted(PROFILE_CONFIGS)}")
    report = run_profile(names, args.images, _seed(args))
    text = json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"
    if args.out:
        atomic_write_bytes(Path(args.out), text.encode())
    sys.stdout.write(text)
    return 0


def _load_sample(path: Path, sample_id: str | None):
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    objs = [json.loads(l) for l in lines] if path.suffix == ".jsonl" else [json.loads("\n".join(lines))]
    samples = [PairSample.from_json(o) for o in objs]
    if sample_id is None:
        return samples[0]
    for s in samples:
        if s.sample_id == sample_id:
            return s
    raise CalicoError(f"sample {sample_id!r} not found in {path}")


def _load_prediction(path: Path):
    obj = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(obj, dict):
        obj = obj.get("preds", obj.get("mask_sets"))
    if not isinstance(obj, list):
        raise CalicoError(f"{path}: expected a list of mask sets")
    return [MaskSet.from_json(m) for m in obj]


def cmd_overlay(args) -> int:
    sample_path = Path(args.sample)
    sample = _load_sample(sample_path, args.sample_id)
    image_dir = Path(args.images) if args.images else sample_path.parent / "images"
    images = [load_image(image_dir / f"{i}.png") for i in (sample.image_a, sample.image_b)]
    masks = _load_prediction(Path(args.prediction)) if args.prediction else sample.gt
    for p in write_pair_overlays(sample.sample_id, images, masks, args.out):
        print(p)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = parse_run_config(Path(args.config).read_text(encoding="utf-8"), GRADCHECK_CONFIG)[0] if args.config \
        else GRADCHECK_CONFIG
    problem = gradcheck_problem(_seed(args), cfg)
    corrupt = os.environ.get("CALICO_CORRUPT_BACKWARD")  # test hook: "op" or "op:factor"
    with ExitStack() as stack:
        if corrupt:
            op, _, factor = corrupt.partition(":")
            stack.enter_context(corrupt_backward(op, float(factor or 2.0)))
        report = grad_check(lambda: sample_loss(problem.model, problem.example).loss.total,
                            problem.model.store.trainable(), rel_tol=args.rel_tol)
    print(report.summary())
    if not report.passed:
        note = f" (backward of '{op}' corrupted by test hook)" if corrupt else ""
        print(f"gradient check failed{note}; parameters over tolerance: {', '.join(report.failing)}",
              file=sys.stderr)
        return 1
    return 0


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calico", description="Multi-image part co-segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    b = sub.add_parser("build", help="build a pair dataset from part annotations")
    b.add_argument("--annotations", required=True)
    b.add_argument("--allowlist", required=True)
    b.add_argument("--mapping")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--per-source-quota", type=int)
    b.add_argument("--cap", type=int, default=1000, help="samples kept per category pairing")
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="train the toy model on a built dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint's predictions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", help="token counts and forward FLOPs per configuration")
    pr.add_argument("--configs", default="calico,lisa_like,glamm_like")
    pr.add_argument("--images", type=int, default=2)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_profile)

    o = sub.add_parser("overlay", help="render mask overlays for one sample")
    o.add_argument("--sample", required=True, help="sample JSON, or samples.jsonl (first or --sample-id)")
    o.add_argument("--prediction", help="JSON list of mask sets; ground truth is drawn when omitted")
    o.add_argument("--out", required=True)
    o.add_argument("--sample-id")
    o.add_argument("--images", help="image directory (default: images/ next to the sample file)")
    o.set_defaults(func=cmd_overlay)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--rel-tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        if isinstance(exc, StageError):
            print(f"error: stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        elif isinstance(exc, (CalicoError, OSError, ValueError, KeyError)):
            print(f"error: {exc}", file=sys.stderr)
        else:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
