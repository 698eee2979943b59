"""Per-image mask sets and their uncompressed run-length JSON form."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from calico.errors import CodecError, DimensionError


def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating 0-run/1-run lengths over the row-major flattening, 0-run first."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts, height: int, width: int) -> np.ndarray:
    counts = list(counts)
    if any(not isinstance(c, (int, np.integer)) or isinstance(c, bool) or c < 0 for c in counts):
        raise CodecError("run lengths must be nonnegative integers")
    total = sum(int(c) for c in counts)
    if total != height * width:
        raise CodecError(f"run lengths sum to {total}, expected {height}x{width}={height * width}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, np.asarray(counts, dtype=np.int64))
    return flat.reshape(height, width)


@dataclass
class MaskEntry:
    mask: np.ndarray
    label: str


@dataclass
class MaskSet:
    image_index: int
    height: int
    width: int
    entries: list[MaskEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        for e in self.entries:
            self._check(e)

    def _check(self, e: MaskEntry) -> None:
        e.mask = np.asarray(e.mask, dtype=bool)
        if e.mask.shape != (self.height, self.width):
            raise DimensionError(f"mask {e.mask.shape} does not match image extents {(self.height, self.width)}")
        if not e.label or not e.label.strip():
            raise ValueError("mask labels must be nonempty")

    def add(self, mask: np.ndarray, label: str) -> None:
        e = MaskEntry(mask, label)
        self._check(e)
        self.entries.append(e)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    @property
    def masks(self) -> list[np.ndarray]:
        return [e.mask for e in self.entries]

    def to_json(self) -> dict[str, Any]:
        return {"image_index": self.image_index, "height": self.height, "width": self.width,
                "entries": [{"label": e.label, "rle": rle_encode(e.mask)} for e in self.entries]}

    @classmethod
    def from_json(cls, obj: dict[str, Any], height: int | None = None, width: int | None = None) -> "MaskSet":
        try:
            h = int(obj.get("height", height))
            w = int(obj.get("width", width))
            entries = [MaskEntry(rle_decode(e["rle"], h, w), str(e["label"])) for e in obj["entries"]]
            return cls(int(obj["image_index"]), h, w, entries)
        except (KeyError, TypeError) as exc:
            raise CodecError(f"malformed mask set: {exc}") from exc
