"""Per-task dataset statistics: instance counts and label frequency rankings."""
from __future__ import annotations

from collections import Counter
from typing import Any, Sequence

from calico.dataset.samples import COMMON_OBJECT, TASKS, PairSample


def integer_median(values: Sequence[int]) -> int:
    """Median rounded down to an integer: for an even count, the floor of the
    two middle values' midpoint, so (2, 4) -> 3 and (2, 3) -> 2."""
    v = sorted(values)
    mid = len(v) // 2
    if len(v) % 2:
        return v[mid]
    return (v[mid - 1] + v[mid]) // 2


def _ranking(counter: Counter) -> list[list]:
    return [[label, n] for label, n in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))]


def compute_statistics(samples: Sequence[PairSample]) -> dict[str, Any]:
    if not samples:
        raise ValueError("statistics need at least one sample")
    out: dict[str, Any] = {}
    for task in TASKS:
        group = [s for s in samples if s.task == task]
        if not group:
            continue
        counts = [s.n_instances() for s in group]
        labels: Counter = Counter()
        categories: Counter = Counter()
        for s in group:
            for ms in s.gt:
                labels.update(ms.labels)
            categories.update(set(s.pair))
        row = {"samples": len(group), "total_instances": sum(counts),
               "avg_instances": sum(counts) / len(counts), "max_instances": max(counts),
               "median_instances": integer_median(counts), "category_ranking": _ranking(categories)}
        if task != COMMON_OBJECT:
            row["part_ranking"] = _ranking(labels)
        out[task] = row
    return out
