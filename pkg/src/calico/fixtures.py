"""Small deterministic setups shared by the CLI and the tests: the overfit
set of synthetic pairs and the tiny end-to-end gradient-check problem."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from calico.dataset.annotations import AnnotatedImage, dump_annotations
from calico.dataset.pipeline import remap_images
from calico.dataset.samples import TASKS, PairSample, generate_pair_samples
from calico.dataset.synthetic import SYNTHETIC_ALLOWLIST, SYNTHETIC_MAPPING, generate_corpus, render_image
from calico.dataset.taxonomy import PartTaxonomy, apply_curation, derive_shared_part_pairs, remap_categories
from calico.model import CalicoModel
from calico.multimodal.config import ModelConfig
from calico.multimodal.sequence import ImageBatch
from calico.training.loop import Prepared, TrainSample, prepare

OVERFIT_CONFIG = ModelConfig(H=16, W=16, S_C=64, D_C=32, S_S=16, D_S=32, S_I=32, D_I=32, D=128, N=8,
                             S_D=16, D_D=32, heads=4)

# widths are tiny so the check stays cheap (the vocabulary dominates the parameter count);
# the trainable layer norms (D, D_D) get width 4 because a width-2 layer norm is a near-step
# function of x0 - x1 whose curvature swamps a central difference
GRADCHECK_CONFIG = ModelConfig(N_I_max=2, H=4, W=4, S_C=4, D_C=2, S_S=1, D_S=2, S_I=2, D_I=2, D=4, N=2,
                               S_D=4, D_D=4, vocab=265, heads=2, cem_heads=2, encoder_layers=1,
                               decoder_blocks=1, cam_k=1)


def taxonomy_of(images: list[AnnotatedImage]) -> PartTaxonomy:
    tax = PartTaxonomy()
    for im in images:
        for inst in im.instances:
            tax.add_category(inst.category, im.source)
            for p in inst.parts:
                tax.add(inst.category, p.name, im.source)
    return tax


def synthetic_pairs(n_images: int, seed: int, size: int = 32, **corpus_kw) -> tuple[list[PairSample], dict]:
    """All task samples from a remapped, curated synthetic corpus, plus the images by id."""
    corpus = generate_corpus(n_images, seed, size=size, **corpus_kw)
    remap_images(corpus.images, SYNTHETIC_MAPPING)
    candidates = derive_shared_part_pairs(taxonomy_of(corpus.images))
    known = {(r.a, r.b) for r in candidates.rows}
    table, _ = apply_curation(candidates, [p for p in SYNTHETIC_ALLOWLIST if tuple(sorted(p)) in known])
    samples = [s for t in TASKS for s in generate_pair_samples(corpus.images, table, t, seed)]
    return samples, {im.id: im for im in corpus.images}


def to_train_sample(s: PairSample, images: dict[str, AnnotatedImage], short: bool = True) -> TrainSample:
    pixels = np.stack([render_image(images[s.image_a]), render_image(images[s.image_b])])
    return TrainSample(ImageBatch(pixels), s.prompt(short=short), s.answer(prefix="" if short else None),
                       s.answer_masks(), s.sample_id)


def overfit_samples(n: int = 8, max_masks: int = 4) -> list[TrainSample]:
    """``n`` pairs of 16x16 images spread over the three tasks, short prompts and bare answers."""
    samples, images = synthetic_pairs(24, 3, size=16, max_parts=2, second_instance_prob=0.0)
    chosen: list[PairSample] = []
    per_task = -(-n // len(TASKS))
    for task in TASKS:
        pool = [s for s in samples if s.task == task and s.n_instances() <= max_masks]
        idx = np.linspace(0, len(pool) - 1, num=min(per_task, len(pool))).round().astype(int)
        chosen += [pool[i] for i in idx]
    return [to_train_sample(s, images) for s in chosen[:n]]


@dataclass
class GradcheckProblem:
    model: CalicoModel
    example: Prepared


def gradcheck_problem(seed: int, cfg: ModelConfig = GRADCHECK_CONFIG) -> GradcheckProblem:
    """Tiny model with its zero-initialized adapters randomized, so every path
    (fusion, adaptation, reintegration) carries gradient."""
    model = CalicoModel(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    for name, p in model.store.items():
        if p.trainable and not p.data.any():
            p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
    pixels = rng.random((2, 3, cfg.H, cfg.W))
    masks = [rng.random((cfg.H, cfg.W)) < 0.5 for _ in range(3)]
    sample = TrainSample(ImageBatch(pixels), "<image> (IMAGE1) <image> (IMAGE2) x",
                         "<p> a </p> [SEG] (IMAGE1) <p> b </p> [SEG] (IMAGE2) <p> c </p> [SEG] (IMAGE1)", masks,
                         f"gradcheck-{seed}")
    return GradcheckProblem(model, prepare(model, sample))


def write_synthetic_inputs(out_dir, n_images: int, seed: int, size: int = 32, **corpus_kw) -> dict[str, Path]:
    """Annotation JSON, allowlist TSV and mapping TSV for a synthetic corpus (no remapping applied)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(n_images, seed, size=size, **corpus_kw)
    paths = {"annotations": out / "annotations.json", "allowlist": out / "allowlist.tsv",
             "mapping": out / "mapping.tsv"}
    paths["annotations"].write_text(dump_annotations(corpus.images), encoding="utf-8")
    # only rows that are candidates for this corpus; a small corpus may miss a category
    known = {(r.a, r.b) for r in derive_shared_part_pairs(
        remap_categories(taxonomy_of(corpus.images), SYNTHETIC_MAPPING)).rows}
    rows = [p for p in SYNTHETIC_ALLOWLIST if tuple(sorted(p)) in known]
    paths["allowlist"].write_text("".join(f"{a}\t{b}\n" for a, b in rows), encoding="utf-8")
    paths["mapping"].write_text("".join(f"{a}\t{b}\n" for a, b in SYNTHETIC_MAPPING.items()), encoding="utf-8")
    return paths
