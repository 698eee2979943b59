"""End-to-end dataset build: load, remap, derive, curate, generate, stratify, summarize."""
from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from calico.dataset.annotations import AnnotatedImage, AnnotationSet, load_annotations
from calico.dataset.samples import TASKS, PairSample, generate_pair_samples
from calico.dataset.stats import compute_statistics
from calico.dataset.stratify import equal_proportions, stratify
from calico.dataset.synthetic import render_image
from calico.dataset.taxonomy import (
    CategoryPairTable,
    apply_curation,
    derive_shared_part_pairs,
    load_allowlist,
    load_mapping,
    remap_categories,
    resolve_mapping,
)
from calico.numerics.checkpoint import atomic_write_bytes


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


def remap_images(images: Sequence[AnnotatedImage], mapping: Mapping[str, str]) -> None:
    resolved = resolve_mapping(mapping)
    for im in images:
        for inst in im.instances:
            inst.category = resolved.get(inst.category, inst.category)


@dataclass
class BuildResult:
    annotations: AnnotationSet
    table: CategoryPairTable
    samples: list[PairSample]
    stats: dict
    shortfall: dict = field(default_factory=dict)


def build_dataset(annotations: str | os.PathLike, allowlist: str | os.PathLike, mapping: str | os.PathLike | None,
                  seed: int, per_source_quota: int | None = None, cap: int = 1000) -> BuildResult:
    stage = "load"
    try:
        ann = load_annotations(annotations)
        stage = "remap"
        if mapping is not None:
            table_map = load_mapping(mapping)
            ann.taxonomy = remap_categories(ann.taxonomy, table_map)
            remap_images(ann.images, table_map)
        stage = "derive"
        candidates = derive_shared_part_pairs(ann.taxonomy)
        stage = "curate"
        table, _ = apply_curation(candidates, load_allowlist(allowlist))
        stage = "generate"
        samples: list[PairSample] = []
        for task in TASKS:
            samples.extend(generate_pair_samples(ann.images, table, task, seed, cap))
        stage = "stratify"
        shortfall = {}
        if per_source_quota is not None:
            sources = sorted({s.source for s in samples})
            props = equal_proportions(sources, TASKS)
            res = stratify(samples, props, per_source_quota * len(sources), seed)
            samples, shortfall = res.selected, res.shortfall
        stage = "stats"
        stats = compute_statistics(samples) if samples else {}
    except StageError:
        raise
    except Exception as exc:  # every stage failure is reported with its stage name
        raise StageError(stage, exc) from exc
    return BuildResult(ann, table, samples, stats, shortfall)


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def png_bytes(pixels: np.ndarray) -> bytes:
    """(3, H, W) floats in [0, 1] -> PNG bytes (no metadata, so output is byte-stable)."""
    arr = np.clip(np.round(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_outputs(result: BuildResult, out_dir: str | os.PathLike, inputs: Mapping[str, str | os.PathLike | None],
                  seed: int) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, bytes] = {
        "samples.jsonl": "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in result.samples).encode(),
        "stats.json": (json.dumps(result.stats, sort_keys=True, indent=2) + "\n").encode(),
        "pairs.tsv": result.table.to_tsv().encode(),
    }
    used = {s.image_a for s in result.samples} | {s.image_b for s in result.samples}
    for im in result.annotations.images:
        if im.id in used:
            files[f"images/{im.id}.png"] = png_bytes(render_image(im))
    for name, blob in sorted(files.items()):
        atomic_write_bytes(out / name, blob)
    manifest = {
        "seed": seed,
        "inputs": {k: sha256_file(v) for k, v in sorted(inputs.items()) if v is not None},
        "outputs": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())},
        "counts": {"samples": len(result.samples), "candidate_pairs": len(result.table),
                   "curated_pairs": len(result.table.curated_rows())},
        "shortfall": {f"{k[0]}/{k[1]}": v for k, v in sorted(result.shortfall.items())},
    }
    atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())
    return manifest


def load_samples(path: str | os.PathLike) -> list[PairSample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [PairSample.from_json(json.loads(line)) for line in lines if line.strip()]


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)
