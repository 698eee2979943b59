"""Mask IoU and optimal one-to-one prediction/ground-truth matching."""
from __future__ import annotations

from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from calico.errors import DimensionError


def iou_counts(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """(intersection, union) pixel counts."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask extents differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter, union = iou_counts(a, b)
    return 1.0 if union == 0 else inter / union


def iou_fraction(a: np.ndarray, b: np.ndarray) -> Fraction:
    inter, union = iou_counts(a, b)
    return Fraction(1) if union == 0 else Fraction(inter, union)


class Match(NamedTuple):
    pred: int
    gt: int
    iou: float


def _iou_table(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> list[list[Fraction]]:
    return [[iou_fraction(p, g) for g in gts] for p in preds]


def _best_total(table: list[list[Fraction]], rows: list[int], cols: list[int]) -> Fraction:
    if not rows or not cols:
        return Fraction(0)
    sub = np.array([[float(table[r][c]) for c in cols] for r in rows])
    ri, ci = linear_sum_assignment(sub, maximize=True)
    return sum((table[rows[i]][cols[j]] for i, j in zip(ri, ci)), Fraction(0))


def match_predictions(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> list[Match]:
    """Assignment maximizing total IoU; pairs with IoU 0 are left unmatched.

    Among optimal assignments the lexicographically smallest one wins when
    each prediction (in index order) is keyed by its GT index, with
    "unmatched" ranked after every GT.
    """
    table = _iou_table(preds, gts)
    n_p, n_g = len(preds), len(gts)
    best = _best_total(table, list(range(n_p)), list(range(n_g)))
    fixed = Fraction(0)
    used: set[int] = set()
    out: list[Match] = []
    for p in range(n_p):
        rest = list(range(p + 1, n_p))
        choices = [g for g in range(n_g) if g not in used and table[p][g] > 0]
        for g in choices:
            free = [c for c in range(n_g) if c not in used and c != g]
            if fixed + table[p][g] + _best_total(table, rest, free) == best:
                out.append(Match(p, g, float(table[p][g])))
                used.add(g)
                fixed += table[p][g]
                break
    return out
