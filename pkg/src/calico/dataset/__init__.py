"""Pair-dataset construction: ingestion, taxonomy pairing, curation, samples, stratification, statistics."""
from calico.dataset.annotations import AnnotatedImage, AnnotationSet, load_annotations, parse_annotations
from calico.dataset.samples import COMMON_OBJECT, COMMON_PART, TASKS, UNIQUE_PART, PairSample, generate_pair_samples
from calico.dataset.stats import compute_statistics, integer_median
from calico.dataset.stratify import largest_remainder, stratify
from calico.dataset.taxonomy import (
    CategoryPairTable,
    PairRow,
    PartTaxonomy,
    apply_curation,
    derive_shared_part_pairs,
    remap_categories,
)

__all__ = [
    "AnnotatedImage", "AnnotationSet", "COMMON_OBJECT", "COMMON_PART", "CategoryPairTable", "PairRow", "PairSample",
    "PartTaxonomy", "TASKS", "UNIQUE_PART", "apply_curation", "compute_statistics", "derive_shared_part_pairs",
    "generate_pair_samples", "largest_remainder", "load_annotations", "integer_median", "parse_annotations",
    "remap_categories", "stratify",
]
