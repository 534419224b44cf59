"""Joint multi-asset model: factor correlations across calibrated members.

Each member model is calibrated separately; its standardized factor series
are then correlated pairwise per calendar bucket, with Fisher confidence
intervals. A Spot-Prompt member contributes two factors (spot and index),
a one-factor member contributes one, and correlation entries carry the
factor roles so spot-spot and spot-index correlations stay distinguishable.

Estimation is pairwise-complete: every pair is correlated on its own
common timestamps rather than a listwise grid, which wastes no data but
does not guarantee a positive semidefinite matrix; the smallest eigenvalue
per bucket is recorded so the simulator's repair step can be exercised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stats import Interval, corr_ci
from .timeseries import (
    DataError,
    FactorSeries,
    coarser_granularity,
    month_bucket_key,
)

_MIN_BUCKET_PAIRS = 8


@dataclass(frozen=True)
class Member:
    """A joint-model participant: label, model kind (MR/SP/BS), factor role."""

    label: str
    kind: str = "MR"
    role: str = "spot"


@dataclass(frozen=True)
class CorrEntry:
    rho: float
    interval: Interval | None
    n: int


@dataclass(frozen=True)
class JointModel:
    """Pairwise factor correlations per bucket, with members and diagnostics.

    corr maps (label_i, label_j, bucket) with label_i < label_j; matrices
    holds the per-bucket correlation matrix over factor_labels (NaN where
    a pair had no overlap) and min_eigenvalue its smallest eigenvalue when
    complete.
    """

    members: tuple[Member, ...]
    factor_labels: tuple[str, ...]
    corr: dict
    matrices: dict
    min_eigenvalue: dict
    granularity: str
    trim_pct: float
    alpha: float
    diagnostics: tuple[str, ...] = ()


def trim_outliers(factors: FactorSeries, pct: float) -> tuple[FactorSeries, tuple]:
    """Drop the floor(pct*n) smallest and largest residuals by value.

    Returns the trimmed series and the removed timestamps so paired series
    can drop the same instants before correlating. Ties break toward the
    earlier timestamp. pct must lie in [0, 0.05].
    """
    if not 0.0 <= pct <= 0.05:
        raise DataError(f"trim fraction must be in [0, 0.05], got {pct}")
    n = len(factors)
    k = int(math.floor(pct * n))
    if k == 0:
        return factors, ()
    low = np.argsort(factors.values, kind="stable")[:k]
    high = np.argsort(-factors.values, kind="stable")[:k]
    drop = set(int(i) for i in low) | set(int(i) for i in high)
    keep = [i for i in range(n) if i not in drop]
    if len(keep) < 1:
        raise DataError("trimming removed the whole series")
    removed = tuple(factors.timestamps[i] for i in sorted(drop))
    trimmed = FactorSeries(tuple(factors.timestamps[i] for i in keep),
                           factors.values[np.array(keep)], label=factors.label)
    return trimmed, removed


def build_joint(factors, granularity: str = "flat", alpha: float = 0.05,
                trim_pct: float = 0.0, members=None) -> JointModel:
    """Correlate factor series pairwise per bucket into a JointModel.

    Trimming is applied per series first; a correlated pair then drops
    every timestamp either side removed (pairwise deletion). Buckets with
    fewer than 8 common pairs are omitted with a diagnostic.
    """
    factors = list(factors)
    if len(factors) < 2:
        raise DataError("joint model needs at least 2 factor series")
    labels = [f.label for f in factors]
    if len(set(labels)) != len(labels):
        raise DataError("factor series labels must be unique")
    if members is None:
        members = tuple(Member(label=lb) for lb in labels)
    else:
        members = tuple(members)

    trimmed = []
    removed_sets = []
    for f in factors:
        t, removed = trim_outliers(f, trim_pct)
        trimmed.append(t)
        removed_sets.append(set(removed))

    diagnostics: list[str] = []
    corr: dict = {}
    buckets_seen = set()
    pair_any = False
    for i in range(len(trimmed)):
        for j in range(i + 1, len(trimmed)):
            fi, fj = trimmed[i], trimmed[j]
            banned = removed_sets[i] | removed_sets[j]
            common = [t for t in fi.timestamps if t in set(fj.timestamps) and t not in banned]
            if not common:
                diagnostics.append(f"{fi.label}/{fj.label}: no common timestamps")
                continue
            common_set = set(common)
            xi = np.array([v for t, v in zip(fi.timestamps, fi.values) if t in common_set])
            xj = np.array([v for t, v in zip(fj.timestamps, fj.values) if t in common_set])
            bucket_keys = [month_bucket_key(t.month, granularity) for t in common]
            key_lo, key_hi = sorted((fi.label, fj.label))
            flip = (key_lo, key_hi) != (fi.label, fj.label)
            del flip  # correlation is symmetric; order only affects the key
            for bucket in sorted(set(bucket_keys), key=str):
                mask = np.array([bk == bucket for bk in bucket_keys])
                n = int(mask.sum())
                if n < _MIN_BUCKET_PAIRS:
                    diagnostics.append(
                        f"{fi.label}/{fj.label} bucket {bucket}: only {n} pairs, omitted")
                    continue
                a = xi[mask]
                b = xj[mask]
                sa = float(a.std())
                sb = float(b.std())
                if sa == 0.0 or sb == 0.0:
                    diagnostics.append(
                        f"{fi.label}/{fj.label} bucket {bucket}: degenerate series, omitted")
                    continue
                r = float(np.corrcoef(a, b)[0, 1])
                interval = corr_ci(r, n, alpha) if abs(r) < 1.0 and n >= 4 else None
                corr[(key_lo, key_hi, bucket)] = CorrEntry(r, interval, n)
                buckets_seen.add(bucket)
                pair_any = True
    if not pair_any:
        raise DataError("no factor pair has sufficient overlap in any bucket")

    matrices: dict = {}
    min_eig: dict = {}
    nf = len(labels)
    for bucket in sorted(buckets_seen, key=str):
        mat = np.full((nf, nf), np.nan)
        np.fill_diagonal(mat, 1.0)
        for i in range(nf):
            for j in range(i + 1, nf):
                key_lo, key_hi = sorted((labels[i], labels[j]))
                entry = corr.get((key_lo, key_hi, bucket))
                if entry is not None:
                    mat[i, j] = mat[j, i] = entry.rho
        matrices[bucket] = mat
        if not np.isnan(mat).any():
            min_eig[bucket] = float(np.linalg.eigvalsh(mat)[0])

    return JointModel(members=members, factor_labels=tuple(labels), corr=corr,
                      matrices=matrices, min_eigenvalue=min_eig,
                      granularity=granularity, trim_pct=trim_pct, alpha=alpha,
                      diagnostics=tuple(diagnostics))


@dataclass(frozen=True)
class GranularityAdvice:
    """Buckets whose correlation intervals are wider than tolerated."""

    flagged: tuple
    suggestion: str | None
    note: str


def granularity_check(model: JointModel, max_width: float) -> GranularityAdvice:
    """Flag correlations with CI width beyond max_width and suggest coarsening.

    Advisory only; nothing is recalibrated here.
    """
    flagged = []
    for (li, lj, bucket), entry in sorted(model.corr.items(), key=lambda kv: str(kv[0])):
        if entry.interval is None:
            continue
        width = entry.interval.width
        if width > max_width:
            flagged.append((li, lj, bucket, width))
    coarser = coarser_granularity(model.granularity)
    if not flagged:
        return GranularityAdvice((), None, "all correlation intervals within tolerance")
    if coarser is None:
        return GranularityAdvice(tuple(flagged), None,
                                 "already flat; no coarser granularity exists")
    return GranularityAdvice(tuple(flagged), coarser,
                             f"recalibrate at {coarser} granularity")
