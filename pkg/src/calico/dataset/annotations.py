"""Part-annotation ingestion.

Schema::

    {"images": [{"id": str, "width": int, "height": int, "source": str,
                 "instances": [{"category": str, "rle": [int, ...],
                                "parts": [{"name": str, "rle": [int, ...]}]}]}]}
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from calico.dataset.taxonomy import PartTaxonomy, normalize_name
from calico.errors import AnnotationParseError
from calico.grounding.masks import rle_decode, rle_encode

log = logging.getLogger(__name__)


@dataclass
class PartInstance:
    name: str
    mask: np.ndarray


@dataclass
class ObjectInstance:
    category: str
    mask: np.ndarray
    parts: list[PartInstance] = field(default_factory=list)


@dataclass
class AnnotatedImage:
    id: str
    width: int
    height: int
    source: str
    instances: list[ObjectInstance] = field(default_factory=list)

    def categories(self) -> set[str]:
        return {inst.category for inst in self.instances}

    def visible_parts(self, category: str) -> set[str]:
        return {p.name for inst in self.instances if inst.category == category for p in inst.parts}

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "width": self.width, "height": self.height, "source": self.source,
                "instances": [{"category": i.category, "rle": rle_encode(i.mask),
                               "parts": [{"name": p.name, "rle": rle_encode(p.mask)} for p in i.parts]}
                              for i in self.instances]}


@dataclass(frozen=True)
class LintWarning:
    image_id: str
    category: str
    part: str
    outside_pixels: int


@dataclass
class AnnotationSet:
    images: list[AnnotatedImage]
    taxonomy: PartTaxonomy
    lint: list[LintWarning]


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise AnnotationParseError(f"{where}: missing key {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise AnnotationParseError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
    return value


def parse_annotations(blob: bytes | str) -> AnnotationSet:
    text = blob.decode("utf-8") if isinstance(blob, bytes) else blob
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise AnnotationParseError(f"malformed JSON at byte {offset}: {exc.msg}", offset) from None
    images_raw = _require(doc, "images", list, "root")
    images: list[AnnotatedImage] = []
    taxonomy = PartTaxonomy()
    lint: list[LintWarning] = []
    seen_ids: set[str] = set()
    for n, im in enumerate(images_raw):
        where = f"images[{n}]"
        image_id = str(_require(im, "id", (str, int), where))
        if image_id in seen_ids:
            raise AnnotationParseError(f"{where}: duplicate image id {image_id!r}")
        seen_ids.add(image_id)
        w = _require(im, "width", int, where)
        h = _require(im, "height", int, where)
        if w <= 0 or h <= 0:
            raise AnnotationParseError(f"{where}: extents must be positive")
        source = str(_require(im, "source", str, where))
        image = AnnotatedImage(image_id, w, h, source)
        for m, inst in enumerate(_require(im, "instances", list, where)):
            iw = f"{where}.instances[{m}]"
            category = normalize_name(_require(inst, "category", str, iw))
            if not category:
                raise AnnotationParseError(f"{iw}: empty category name")
            obj_mask = rle_decode(_require(inst, "rle", list, iw), h, w)
            obj = ObjectInstance(category, obj_mask)
            taxonomy.add_category(category, source)
            for k, part in enumerate(_require(inst, "parts", list, iw)):
                pw = f"{iw}.parts[{k}]"
                name = normalize_name(_require(part, "name", str, pw))
                if not name:
                    raise AnnotationParseError(f"{pw}: empty part name")
                pmask = rle_decode(_require(part, "rle", list, pw), h, w)
                outside = int(np.logical_and(pmask, ~obj_mask).sum())
                if outside:
                    lint.append(LintWarning(image_id, category, name, outside))
                    log.warning("part %r of %r in image %s extends %d px outside its object",
                                name, category, image_id, outside)
                obj.parts.append(PartInstance(name, pmask))
                taxonomy.add(category, name, source)
            image.instances.append(obj)
        images.append(image)
    return AnnotationSet(images, taxonomy, lint)


def load_annotations(path: str | os.PathLike) -> AnnotationSet:
    return parse_annotations(Path(path).read_bytes())


def dump_annotations(images: list[AnnotatedImage]) -> str:
    return json.dumps({"images": [im.to_json() for im in images]}, sort_keys=True)
