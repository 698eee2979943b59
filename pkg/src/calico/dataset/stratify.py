"""Quota-based stratified selection over (source, task) strata."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from calico.dataset.samples import PairSample

log = logging.getLogger(__name__)

Stratum = tuple[str, str]  # (source, task)


def largest_remainder(total: int, proportions: Mapping[Stratum, float]) -> dict[Stratum, int]:
    """Integer quotas summing to ``total``; leftover units go to the largest
    fractional parts, ties broken by stratum key order."""
    keys = sorted(proportions)
    exact = {k: total * proportions[k] for k in keys}
    quotas = {k: math.floor(exact[k] + 1e-9) for k in keys}
    left = total - sum(quotas.values())
    by_frac = sorted(keys, key=lambda k: (-(exact[k] - quotas[k]), k))
    for k in by_frac[:left]:
        quotas[k] += 1
    return quotas


@dataclass
class StratifyResult:
    selected: list[PairSample]
    quotas: dict[Stratum, int]
    counts: dict[Stratum, int]
    shortfall: dict[Stratum, int] = field(default_factory=dict)


def stratify(samples: Sequence[PairSample], proportions: Mapping[Stratum, float], total: int,
             seed: int) -> StratifyResult:
    """Pick ``total`` samples split by ``proportions``; a stratum with too few
    samples is reported as a shortfall and not topped up from elsewhere."""
    s = sum(proportions.values())
    if abs(s - 1.0) > 1e-9:
        raise ValueError(f"stratum proportions sum to {s}, not 1")
    if any(p < 0 for p in proportions.values()):
        raise ValueError("stratum proportions must be nonnegative")
    quotas = largest_remainder(total, proportions)
    pools: dict[Stratum, list[PairSample]] = {}
    for smp in samples:
        pools.setdefault((smp.source, smp.task), []).append(smp)
    selected: list[PairSample] = []
    counts: dict[Stratum, int] = {}
    shortfall: dict[Stratum, int] = {}
    for n, key in enumerate(sorted(quotas)):
        pool = sorted(pools.get(key, []), key=lambda x: x.sample_id)
        want = quotas[key]
        if want and not pool:
            log.warning("stratum %s is empty but has a target of %d", key, want)
        take = min(want, len(pool))
        if take < want:
            shortfall[key] = want - take
        rng = np.random.default_rng([seed, n])
        idx = sorted(rng.permutation(len(pool))[:take].tolist())
        selected.extend(pool[i] for i in idx)
        counts[key] = take
    selected.sort(key=lambda x: (x.task, x.source, x.sample_id))
    return StratifyResult(selected, quotas, counts, shortfall)


def equal_proportions(sources: Sequence[str], tasks: Sequence[str]) -> dict[Stratum, float]:
    keys = [(s, t) for s in sorted(set(sources)) for t in tasks]
    return {k: 1.0 / len(keys) for k in keys}
