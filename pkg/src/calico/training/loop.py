"""Teacher-forced toy training loop."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from calico.errors import NonFiniteError, TrainingDataError, TrainingDiverged
from calico.grounding.parser import parse_with_issues
from calico.model import CalicoModel, EncodedImages
from calico.multimodal.sequence import ImageBatch, TokenSequence, tokenize_prompt
from calico.multimodal.tokenizer import EOS
from calico.numerics.tensor import no_grad
from calico.training.losses import LossBreakdown, LossWeights, combined_loss, text_loss
from calico.training.optim import OptimizerState, optimizer_step

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "lr", "text_loss", "focal_loss", "dice_loss", "total", "variant")


@dataclass
class TrainSample:
    """One pair: images, the prompt, the grounded target answer, and one GT
    mask per [SEG] in the answer (answer order)."""

    images: ImageBatch
    prompt: str
    answer: str
    masks: list[np.ndarray]
    sample_id: str = ""


@dataclass
class Prepared:
    enc: EncodedImages
    prompt: TokenSequence
    seq: TokenSequence
    targets: np.ndarray  # answer ids incl. EOS
    seg_rows: np.ndarray  # rows of [SEG] tokens in seq
    spans: list  # parsed answer spans (image routing per SEG)
    masks: list[np.ndarray]


def prepare(model: CalicoModel, sample: TrainSample) -> Prepared:
    tok = model.tok
    prompt = tokenize_prompt(sample.prompt, sample.images, tok, model.cfg.S_I)
    answer = tok.encode(sample.answer)
    spans, issues = parse_with_issues(answer, tok, len(sample.images))
    if issues:
        raise TrainingDataError(f"{sample.sample_id or 'sample'}: answer is not well-formed grounded text: "
                                f"{[i.kind for i in issues]}")
    if len(spans) != len(sample.masks):
        raise TrainingDataError(f"{sample.sample_id or 'sample'}: {len(spans)} [SEG] tokens but "
                                f"{len(sample.masks)} masks")
    for m in sample.masks:
        if np.asarray(m).shape != (model.cfg.H, model.cfg.W):
            raise TrainingDataError(f"mask shape {np.asarray(m).shape} != image extents")
    targets = np.array(answer + [EOS], dtype=np.int64)
    seq = prompt.extend(answer)  # EOS is only ever a target
    seg_rows = np.array([len(prompt) + s.seg_position for s in spans], dtype=np.int64)
    return Prepared(model.encode(sample.images), prompt, seq, targets, seg_rows, spans,
                    [np.asarray(m, dtype=np.float64) for m in sample.masks])


@dataclass
class SampleOutput:
    loss: LossBreakdown
    correct_tokens: int
    n_tokens: int
    ious: list[float]


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def sample_loss(model: CalicoModel, ex: Prepared, weights: LossWeights = LossWeights()) -> SampleOutput:
    res = model.forward(ex.seq, ex.enc, guidance_index=ex.prompt.last_text_index())
    P = len(ex.prompt)
    rows = np.arange(P - 1, len(ex.seq))
    logits = res.out.logits[rows]
    text = text_loss(logits, ex.targets)
    pred = logits.data.argmax(axis=1)
    mask_logits = []
    if len(ex.spans):
        states = res.out.final[ex.seg_rows]
        mask_logits = model.decode_for_spans(ex.enc, ex.spans, states)
    loss = combined_loss(text, mask_logits, ex.masks, weights)
    ious = [_iou(m.data > 0, g > 0.5) for m, g in zip(mask_logits, ex.masks)]
    return SampleOutput(loss, int((pred == ex.targets).sum()), len(ex.targets), ious)


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    token_accuracy: float = 0.0
    mean_iou: float = 0.0
    steps: int = 0

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.curve:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def evaluate_fit(model: CalicoModel, prepared: Sequence[Prepared], weights: LossWeights = LossWeights()
                 ) -> tuple[float, float]:
    """Teacher-forced next-token accuracy and mean mask IoU over the samples."""
    correct = total = 0
    ious: list[float] = []
    with no_grad():
        for ex in prepared:
            out = sample_loss(model, ex, weights)
            correct += out.correct_tokens
            total += out.n_tokens
            ious.extend(out.ious)
    return correct / max(total, 1), float(np.mean(ious)) if ious else 1.0


def train_toy(model: CalicoModel, samples: Sequence[TrainSample], steps: int, opt: OptimizerState | None = None,
              weights: LossWeights = LossWeights(), batch_size: int | None = None, seed: int = 0,
              log_every: int = 0) -> TrainResult:
    """Full-batch (or seeded mini-batch) AdamW on the combined loss.

    Per-sample gradients are accumulated in sample order and averaged, so a
    run is bit-reproducible for a given seed.
    """
    if not samples:
        raise TrainingDataError("training needs at least one sample")
    opt = opt or OptimizerState(total_steps=steps)
    prepared = [prepare(model, s) for s in samples]
    params = model.store.trainable()
    rng = np.random.default_rng(seed)
    bs = len(prepared) if batch_size is None else min(batch_size, len(prepared))
    result = TrainResult()
    variant = model.cfg.variant_label
    for step in range(1, steps + 1):
        batch = prepared if bs == len(prepared) else [prepared[i] for i in rng.permutation(len(prepared))[:bs]]
        for p in params:
            p.tensor.grad = None
        sums = np.zeros(4)
        try:
            for ex in batch:
                out = sample_loss(model, ex, weights)
                (out.loss.total * (1.0 / len(batch))).backward()
                sums += [out.loss.text, out.loss.focal, out.loss.dice, out.loss.total.item()]
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        sums /= len(batch)
        if not np.isfinite(sums).all():
            raise TrainingDiverged(step, "loss is not finite")
        lr = optimizer_step(params, opt)
        row = {"step": step, "lr": lr, "text_loss": sums[0], "focal_loss": sums[1], "dice_loss": sums[2],
               "total": sums[3], "variant": variant}
        result.curve.append({k: (float(v) if isinstance(v, np.floating) else v) for k, v in row.items()})
        if log_every and step % log_every == 0:
            log.info("step %d lr %.2e total %.5f", step, lr, sums[3])
    result.steps = steps
    result.token_accuracy, result.mean_iou = evaluate_fit(model, prepared, weights)
    return result


def smoothed(values: Sequence[float], window: int = 20) -> list[float]:
    """Means over consecutive non-overlapping windows (a trailing partial window is dropped)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[:n * window].reshape(n, window).mean(axis=1).tolist()


__all__ = ["Prepared", "TrainResult", "TrainSample", "evaluate_fit", "prepare", "sample_loss",
           "smoothed", "train_toy"]
