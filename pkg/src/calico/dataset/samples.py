"""Pair-sample generation for the three co-segmentation tasks."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from calico.dataset.annotations import AnnotatedImage
from calico.dataset.taxonomy import CategoryPairTable
from calico.grounding.masks import MaskSet
from calico.grounding.parser import format_answer

log = logging.getLogger(__name__)

COMMON_OBJECT = "common-object"
COMMON_PART = "common-part"
UNIQUE_PART = "unique-part"
TASKS = (COMMON_OBJECT, COMMON_PART, UNIQUE_PART)

PROMPTS = {
    COMMON_OBJECT: "Can you segment the common object in these images?",
    COMMON_PART: "Can you segment the common parts in these images?",
    UNIQUE_PART: "Can you segment the unique parts in these images?",
}
ANSWER_PREFIX = {
    COMMON_OBJECT: "The common object is",
    COMMON_PART: "The detected common parts are",
    UNIQUE_PART: "The unique parts present are",
}


@dataclass
class PairSample:
    task: str
    image_a: str
    image_b: str
    gt: list[MaskSet]  # one per image, image_index 1 and 2
    pair: tuple[str, str]  # category pairing the sample came from
    source: str

    @property
    def sample_id(self) -> str:
        return f"{self.task}:{self.image_a}:{self.image_b}:{self.pair[0]}|{self.pair[1]}"

    def label_sets(self) -> list[set[str]]:
        return [set(ms.labels) for ms in self.gt]

    def n_instances(self) -> int:
        return sum(len(ms) for ms in self.gt)

    def check(self) -> None:
        """Task constraints: common tasks share a label; unique-part label sets are disjoint."""
        a, b = self.label_sets()
        if self.task in (COMMON_OBJECT, COMMON_PART):
            if not a & b:
                raise ValueError(f"{self.sample_id}: common-task label sets do not intersect")
        elif self.task == UNIQUE_PART:
            if a & b:
                raise ValueError(f"{self.sample_id}: unique-part label sets overlap on {sorted(a & b)}")
        else:
            raise ValueError(f"unknown task {self.task!r}")

    def to_json(self) -> dict[str, Any]:
        return {"task": self.task, "image_a": self.image_a, "image_b": self.image_b,
                "pair": list(self.pair), "source": self.source, "gt": [ms.to_json() for ms in self.gt]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "PairSample":
        return cls(obj["task"], str(obj["image_a"]), str(obj["image_b"]), [MaskSet.from_json(m) for m in obj["gt"]],
                   tuple(obj["pair"]), obj["source"])

    def prompt(self, short: bool = False) -> str:
        if short:
            return f"<image> (IMAGE1) <image> (IMAGE2) {self.task}"
        return f"The <image> (IMAGE1) and <image> (IMAGE2) provide an overview of the pictures. {PROMPTS[self.task]}"

    def answer(self, prefix: str | None = None) -> str:
        items = [(e.label, ms.image_index) for ms in self.gt for e in ms.entries]
        return format_answer(ANSWER_PREFIX[self.task] if prefix is None else prefix, items)

    def answer_masks(self) -> list[np.ndarray]:
        return [e.mask for ms in self.gt for e in ms.entries]


def _object_set(image: AnnotatedImage, category: str, index: int) -> MaskSet:
    ms = MaskSet(index, image.height, image.width)
    for inst in image.instances:
        if inst.category == category:
            ms.add(inst.mask, category)
    return ms


def _part_set(image: AnnotatedImage, category: str, names: set[str], index: int) -> MaskSet:
    ms = MaskSet(index, image.height, image.width)
    for inst in image.instances:
        if inst.category != category:
            continue
        for part in inst.parts:
            if part.name in names:
                ms.add(part.mask, part.name)
    return ms


def _source(a: AnnotatedImage, b: AnnotatedImage) -> str:
    return a.source if a.source == b.source else "|".join(sorted((a.source, b.source)))


def _pairings(table: CategoryPairTable, task: str) -> list[tuple[str, str]]:
    """Category pairings to draw image pairs from.

    Every category named in a curated row pairs with itself; part tasks also
    use the curated cross-category rows. Common-object samples stay within a
    category so both sides carry the same object label.
    """
    curated = table.curated_rows()
    cats = sorted({c for r in curated for c in (r.a, r.b)})
    out = [(c, c) for c in cats]
    if task != COMMON_OBJECT:
        out += [(r.a, r.b) for r in curated]
    return sorted(out)


def generate_pair_samples(images: Sequence[AnnotatedImage], table: CategoryPairTable, task: str, seed: int,
                          cap: int = 1000) -> list[PairSample]:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    by_cat: dict[str, list[AnnotatedImage]] = {}
    for im in sorted(images, key=lambda i: i.id):
        for c in sorted(im.categories()):
            by_cat.setdefault(c, []).append(im)
    samples: list[PairSample] = []
    for n, (ca, cb) in enumerate(_pairings(table, task)):
        left, right = by_cat.get(ca, []), by_cat.get(cb, [])
        candidates = []
        for ia in left:
            for ib in right:
                if ia.id == ib.id or (ca == cb and ia.id > ib.id):
                    continue
                s = _make(ia, ib, ca, cb, task)
                if s is not None:
                    candidates.append(s)
        if len(candidates) > cap:
            rng = np.random.default_rng([seed, n])
            keep = sorted(rng.permutation(len(candidates))[:cap].tolist())
            candidates = [candidates[i] for i in keep]
        samples.extend(candidates)
    if not samples:
        log.warning("no valid %s samples from %d images and %d curated rows", task, len(images),
                    len(table.curated_rows()))
    for s in samples:
        s.check()
    return samples


def _make(ia: AnnotatedImage, ib: AnnotatedImage, ca: str, cb: str, task: str) -> PairSample | None:
    if task == COMMON_OBJECT:
        if ca != cb:
            return None
        gt = [_object_set(ia, ca, 1), _object_set(ib, cb, 2)]
    else:
        va, vb = ia.visible_parts(ca), ib.visible_parts(cb)
        if task == COMMON_PART:
            names_a = names_b = va & vb
            if not names_a:
                return None
        else:
            names_a, names_b = va - vb, vb - va
            if not names_a and not names_b:
                return None
        gt = [_part_set(ia, ca, names_a, 1), _part_set(ib, cb, names_b, 2)]
    return PairSample(task, ia.id, ib.id, gt, (ca, cb), _source(ia, ib))
