"""Co-segmentation metrics and label similarity."""
from calico.evaluation.matching import Match, iou_fraction, mask_iou, match_predictions
from calico.evaluation.metrics import (
    METRICS,
    EvalRecord,
    ap50,
    average_precision,
    evaluate,
    miou,
    recall_grounded,
    semantic_iou,
    semantic_similarity,
)
from calico.evaluation.text import TextEmbedder, cosine, label_iou, trigram_embedder

__all__ = [
    "METRICS", "EvalRecord", "Match", "TextEmbedder", "ap50", "average_precision", "cosine", "evaluate",
    "iou_fraction", "label_iou", "mask_iou", "match_predictions", "miou", "recall_grounded", "semantic_iou",
    "semantic_similarity", "trigram_embedder",
]
