"""Synthetic part-annotated corpus with generator bookkeeping.

Images are laid out on a G x G grid of cells. Each object instance covers a
block of cells; each visible part owns one or more cells inside that block
and the remaining object cells are plain body. Pixels are rendered from the
annotation alone: every part name and every category has a fixed color.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from calico.dataset.annotations import AnnotatedImage, ObjectInstance, PartInstance

# (source, category, parts)
SYNTHETIC_TAXONOMY: list[tuple[str, str, list[str]]] = [
    ("ade20k", "chair", ["apron", "arm", "back", "leg", "seat"]),
    ("ade20k", "ottoman", ["back", "leg", "seat"]),
    ("ade20k", "armchair", ["arm", "back", "back pillow", "leg", "seat"]),
    ("ade20k", "swivel chair", ["back", "base", "seat", "wheel"]),
    ("paco", "mug", ["base", "body", "handle", "rim"]),
    ("paco", "bowl", ["base", "body", "rim"]),
    ("paco", "bottle", ["body", "cap", "neck"]),
    ("partimagenet", "quadruped", ["body", "foot", "head", "tail"]),
    ("partimagenet", "biped", ["body", "foot", "hand", "head"]),
]

SYNTHETIC_ALLOWLIST: list[tuple[str, str]] = [
    ("chair", "ottoman"), ("armchair", "chair"), ("armchair", "swivel chair"),
    ("bowl", "mug"), ("bottle", "mug"), ("biped", "dog"),
]

SYNTHETIC_MAPPING: dict[str, str] = {"quadruped": "dog"}


def color_of(name: str) -> np.ndarray:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=3).digest()
    return 0.2 + 0.8 * np.frombuffer(digest, dtype=np.uint8).astype(np.float64) / 255.0


def render_image(image: AnnotatedImage) -> np.ndarray:
    """(3, H, W) in [0, 1]: black background, category color, part colors on top."""
    out = np.zeros((3, image.height, image.width))
    for inst in image.instances:
        out[:, inst.mask] = color_of("object:" + inst.category)[:, None]
        for part in inst.parts:
            out[:, part.mask] = color_of("part:" + part.name)[:, None]
    return out


@dataclass
class PlannedInstance:
    category: str
    parts: list[str]


@dataclass
class SyntheticCorpus:
    images: list[AnnotatedImage]
    plan: dict[str, list[PlannedInstance]] = field(default_factory=dict)  # image id -> instances

    def visible_parts(self, image_id: str, category: str) -> set[str]:
        return {p for inst in self.plan[image_id] if inst.category == category for p in inst.parts}


def generate_corpus(n_images: int, seed: int, size: int = 32, grid: int = 4,
                    taxonomy: list[tuple[str, str, list[str]]] | None = None,
                    second_instance_prob: float = 0.25, max_parts: int = 3) -> SyntheticCorpus:
    if size % grid:
        raise ValueError(f"image size {size} is not a multiple of the grid {grid}")
    taxonomy = taxonomy or SYNTHETIC_TAXONOMY
    rng = np.random.default_rng(seed)
    cell = size // grid
    images, plan = [], {}
    for n in range(n_images):
        image_id = f"img{n:05d}"
        src_idx = int(rng.integers(len(taxonomy)))
        source = taxonomy[src_idx][0]
        same_source = [t for t in taxonomy if t[0] == source]
        n_inst = 2 if rng.random() < second_instance_prob else 1
        bands = [(0, grid)] if n_inst == 1 else [(0, grid // 2), (grid // 2, grid)]
        image = AnnotatedImage(image_id, size, size, source)
        planned = []
        for k, (r0, r1) in enumerate(bands):
            _, category, parts = taxonomy[src_idx] if k == 0 else same_source[int(rng.integers(len(same_source)))]
            n_parts = int(rng.integers(1, min(max_parts, len(parts)) + 1))
            visible = sorted(rng.choice(parts, size=n_parts, replace=False).tolist())
            rows = r1 - r0
            width = int(rng.integers(-(-(n_parts + 1) // rows), grid + 1))
            c0 = int(rng.integers(0, grid - width + 1))
            cells = [(r, c) for r in range(r0, r1) for c in range(c0, c0 + width)]
            order = rng.permutation(len(cells))
            obj_mask = np.zeros((size, size), dtype=bool)
            for r, c in cells:
                obj_mask[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = True
            inst = ObjectInstance(category, obj_mask)
            for j, name in enumerate(visible):
                r, c = cells[order[j]]
                pm = np.zeros((size, size), dtype=bool)
                pm[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = True
                inst.parts.append(PartInstance(name, pm))
            image.instances.append(inst)
            planned.append(PlannedInstance(category, visible))
        images.append(image)
        plan[image_id] = planned
    return SyntheticCorpus(images, plan)
