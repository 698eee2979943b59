"""Segmentation and label metrics over evaluation records.

Every metric is computed per task over that task's GT instances and then
averaged without weights across the tasks present.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from calico.errors import MetricError
from calico.evaluation.matching import match_predictions
from calico.evaluation.text import cached, cosine, label_iou, trigram_embedder
from calico.grounding.masks import MaskSet

IOU_THRESHOLD = 0.5
SIMILARITY_THRESHOLD = 0.5
METRICS = ("ap50", "miou", "recall", "ss", "s_iou")


@dataclass
class EvalRecord:
    sample_id: str
    task: str
    preds: list[MaskSet]  # one per image
    gts: list[MaskSet]
    # emission rank of each predicted entry, per image; defaults to image-major order
    ranks: list[list[int]] | None = None

    def __post_init__(self) -> None:
        if len(self.preds) != len(self.gts):
            raise MetricError(f"{self.sample_id}: {len(self.preds)} predicted vs {len(self.gts)} GT mask sets")
        if self.ranks is None:
            start, self.ranks = 0, []
            for ms in self.preds:
                self.ranks.append(list(range(start, start + len(ms))))
                start += len(ms)
        elif [len(r) for r in self.ranks] != [len(ms) for ms in self.preds]:
            raise MetricError(f"{self.sample_id}: rank lists do not match prediction counts")

    @property
    def n_gt(self) -> int:
        return sum(len(ms) for ms in self.gts)

    def to_json(self) -> dict[str, Any]:
        return {"sample_id": self.sample_id, "task": self.task, "ranks": self.ranks,
                "preds": [m.to_json() for m in self.preds], "gts": [m.to_json() for m in self.gts]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "EvalRecord":
        return cls(obj["sample_id"], obj["task"], [MaskSet.from_json(m) for m in obj["preds"]],
                   [MaskSet.from_json(m) for m in obj["gts"]], obj.get("ranks"))


@dataclass
class ScoredPair:
    image: int
    pred: int
    gt: int
    iou: float
    pred_label: str
    gt_label: str


@dataclass
class RecordScore:
    record: EvalRecord
    pairs: list[ScoredPair] = field(default_factory=list)

    def matched_pred(self, image: int, pred: int) -> ScoredPair | None:
        for p in self.pairs:
            if p.image == image and p.pred == pred:
                return p
        return None


def score_record(rec: EvalRecord) -> RecordScore:
    out = RecordScore(rec)
    for i, (pm, gm) in enumerate(zip(rec.preds, rec.gts)):
        for m in match_predictions(pm.masks, gm.masks):
            out.pairs.append(ScoredPair(i, m.pred, m.gt, m.iou, pm.entries[m.pred].label, gm.entries[m.gt].label))
    return out


def _by_task(records: Sequence[EvalRecord]) -> dict[str, list[RecordScore]]:
    if not records:
        raise MetricError("no evaluation records")
    groups: dict[str, list[RecordScore]] = {}
    for rec in records:
        groups.setdefault(rec.task, []).append(score_record(rec))
    return dict(sorted(groups.items()))


def _per_gt_mean(scores: Sequence[RecordScore], value: Callable[[ScoredPair], float]) -> float:
    n = sum(s.record.n_gt for s in scores)
    if n == 0:
        raise MetricError("no ground-truth instances")
    return sum(value(p) for s in scores for p in s.pairs) / n


def _task_average(records: Sequence[EvalRecord], per_task: Callable[[list[RecordScore]], float]) -> float:
    groups = _by_task(records)
    return float(np.mean([per_task(g) for g in groups.values()]))


def miou(records: Sequence[EvalRecord]) -> float:
    return _task_average(records, lambda g: _per_gt_mean(g, lambda p: p.iou))


def _pair_similarity(embed) -> Callable[[ScoredPair], float]:
    return lambda p: max(0.0, cosine(embed(p.pred_label), embed(p.gt_label)))


def semantic_similarity(records: Sequence[EvalRecord], embedder=trigram_embedder) -> float:
    embed = cached(embedder)
    return _task_average(records, lambda g: _per_gt_mean(g, _pair_similarity(embed)))


def semantic_iou(records: Sequence[EvalRecord]) -> float:
    return _task_average(records, lambda g: _per_gt_mean(g, lambda p: label_iou(p.gt_label, p.pred_label)))


def recall_grounded(records: Sequence[EvalRecord], embedder=trigram_embedder) -> float:
    embed = cached(embedder)

    def hit(p: ScoredPair) -> float:
        return float(p.iou >= IOU_THRESHOLD and cosine(embed(p.pred_label), embed(p.gt_label)) > SIMILARITY_THRESHOLD)

    return _task_average(records, lambda g: _per_gt_mean(g, hit))


def ranked_hits(scores: Sequence[RecordScore]) -> list[tuple[int, bool]]:
    """(rank, is_tp) for every prediction."""
    out = []
    for s in scores:
        for i, ranks in enumerate(s.record.ranks):
            for j, r in enumerate(ranks):
                p = s.matched_pred(i, j)
                out.append((r, p is not None and p.iou >= IOU_THRESHOLD))
    return out


def average_precision(hits: Iterable[tuple[int, bool]], n_gt: int) -> Fraction:
    """All-points interpolated AP. Predictions sharing a rank enter the curve together."""
    if n_gt <= 0:
        raise MetricError("average precision needs at least one ground-truth instance")
    groups: dict[int, list[bool]] = {}
    for r, tp in hits:
        groups.setdefault(r, []).append(tp)
    tp = fp = 0
    points: list[tuple[Fraction, Fraction]] = []
    for r in sorted(groups):
        tp += sum(groups[r])
        fp += len(groups[r]) - sum(groups[r])
        points.append((Fraction(tp, n_gt), Fraction(tp, tp + fp)))
    ap = Fraction(0)
    prev_recall = Fraction(0)
    best = Fraction(0)
    interp = []
    for rec, prec in reversed(points):
        best = max(best, prec)
        interp.append((rec, best))
    for rec, prec in reversed(interp):
        ap += (rec - prev_recall) * prec
        prev_recall = rec
    return ap


def ap50(records: Sequence[EvalRecord]) -> float:
    def per_task(g: list[RecordScore]) -> float:
        return float(average_precision(ranked_hits(g), sum(s.record.n_gt for s in g)))

    return _task_average(records, per_task)


def evaluate(records: Sequence[EvalRecord], embedder=trigram_embedder) -> dict[str, dict[str, float]]:
    """Report {task: {ap50, miou, recall, ss, s_iou}, "average": {...}}."""
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.task, []).append(r)
    if not groups:
        raise MetricError("no evaluation records")
    report: dict[str, dict[str, float]] = {}
    for task, recs in sorted(groups.items()):
        report[task] = {"ap50": ap50(recs), "miou": miou(recs), "recall": recall_grounded(recs, embedder),
                        "ss": semantic_similarity(recs, embedder), "s_iou": semantic_iou(recs)}
    report["average"] = {k: float(np.mean([report[t][k] for t in groups])) for k in METRICS}
    return report


def load_records(path: str | os.PathLike) -> list[EvalRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [EvalRecord.from_json(json.loads(x)) for x in lines if x.strip()]


def dump_records(records: Sequence[EvalRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)
