"""Evaluations built on metric tables: detection AUC, removal curves,
cross-run stability and plot-ready curve tables."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import pearsonr, rankdata

from .datagen import DatasetSpec, Split, _substream, sample_eval_set
from .dynamics import NEVER, MetricRecord, compute_metrics, finite_or
from .models import PredictionHistory, TrainConfig, retrain, two_split_run

log = logging.getLogger(__name__)

HIGHER = "higher"
LOWER = "lower"

# Which end of each metric flags a likely mislabeled example.
DIRECTIONS = {
    "ssft": LOWER,
    "fslt": HIGHER,
    "n_f": HIGHER,
    "acc_l": LOWER,
    "conf_l": LOWER,
    "acc_f": LOWER,
    "joint": LOWER,
}

STRATEGIES = ("random", "lowest_ssft", "highest_fslt", "lowest_acc_f", "highest_acc_l_rank", "joint")
DEFAULT_FRACTIONS = (0.0, 0.02, 0.05, 0.10, 0.20, 0.40)
POSITIVE = "mislabeled"


class DegenerateClassError(ValueError):
    """AUC needs at least one positive and one negative."""


class RemovalCountError(ValueError):
    pass


class MismatchedIdsError(ValueError):
    pass


# -- AUC ----------------------------------------------------------------------


@dataclass(frozen=True)
class AucReport:
    metric_name: str
    auc: float
    positives: int
    negatives: int
    ranking_direction: str


def auc(
    scores: Mapping[int, float | None],
    positives: Iterable[int],
    *,
    direction: str = HIGHER,
    metric_name: str = "score",
) -> AucReport:
    """Mann-Whitney AUC: P(positive ranked more suspicious than negative).

    ``None`` (NEVER) scores are treated as +inf before the direction is
    applied, so a never-forgotten example is least suspicious under SSFT and a
    never-learned one is most suspicious under FSLT. Ties count one half.
    """
    if direction not in (HIGHER, LOWER):
        raise ValueError(f"direction must be {HIGHER!r} or {LOWER!r}, got {direction!r}")
    pos_set = set(int(i) for i in positives)
    ids = list(scores)
    s = np.array([finite_or(scores[i], math.inf) for i in ids], dtype=float)
    is_pos = np.array([int(i) in pos_set for i in ids])
    n_pos = int(is_pos.sum())
    n_neg = len(ids) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(f"{metric_name}: need both classes, got {n_pos} positives and {n_neg} negatives")
    if direction == LOWER:
        s = -s
    # rankdata handles +-inf consistently; average ranks give the 0.5 tie credit
    r = rankdata(s, method="average")
    u = r[is_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return AucReport(metric_name, float(u / (n_pos * n_neg)), n_pos, n_neg, direction)


def metric_scores(records: Sequence[MetricRecord], metric: str) -> dict[int, float | None]:
    if metric == "joint":
        return {r.example_id: float(r.joint_rank) for r in records}
    if metric not in DIRECTIONS:
        raise KeyError(f"unknown metric {metric!r}")
    return {r.example_id: getattr(r, metric) for r in records}


def metric_auc(records: Sequence[MetricRecord], metric: str) -> AucReport:
    """Detection AUC of ``metric`` for mislabeled vs every other example."""
    return auc(
        metric_scores(records, metric),
        [r.example_id for r in records if r.provenance == POSITIVE],
        direction=DIRECTIONS[metric],
        metric_name=metric,
    )


def all_aucs(records: Sequence[MetricRecord], metrics: Iterable[str] = tuple(DIRECTIONS)) -> dict[str, AucReport]:
    return {m: metric_auc(records, m) for m in metrics}


# -- removal and retrain ---------------------------------------------------------


@dataclass
class RemovalCurve:
    strategy: str
    removal_counts: list[int]
    test_accuracy: list[float]
    seeds_averaged: int
    test_accuracy_std: list[float] = field(default_factory=list)
    per_seed: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def removal_order(records: Sequence[MetricRecord], strategy: str, seed: int = 0) -> list[int]:
    """Example ids in the order a strategy removes them (ties by id)."""
    ids = np.array([r.example_id for r in records])
    if strategy == "random":
        return [int(i) for i in ids[_substream(seed, 21).permutation(len(ids))]]
    if strategy == "lowest_ssft":
        key = [finite_or(r.ssft, math.inf) for r in records]
    elif strategy == "highest_fslt":
        key = [-finite_or(r.fslt, math.inf) for r in records]
    elif strategy == "lowest_acc_f":
        key = [r.acc_f for r in records]
    elif strategy == "highest_acc_l_rank":
        # most suspicious under acc_l first, i.e. the least often learned
        key = [r.acc_l for r in records]
    elif strategy == "joint":
        key = [r.joint_rank for r in records]
    else:
        raise ValueError(f"unknown removal strategy {strategy!r}; choose from {STRATEGIES}")
    order = np.lexsort((ids, np.asarray(key, dtype=float)))
    return [int(i) for i in ids[order]]


def removal_retrain(
    split_a: Split,
    records: Sequence[MetricRecord],
    cfg_a: TrainConfig,
    eval_set: Split,
    strategy: str,
    counts: Sequence[int],
    *,
    d: int,
    num_classes: int,
    seed: int = 0,
) -> list[float]:
    """Clean-set accuracy after dropping the first ``count`` examples of a strategy."""
    n = len(split_a)
    for c in counts:
        if c < 0 or c >= n:
            raise RemovalCountError(f"removal count {c} must be in [0, {n}) for |S_A| = {n}")
    order = removal_order(records, strategy, seed)
    pos = {int(e): i for i, e in enumerate(split_a.example_ids)}
    out = []
    for c in counts:
        drop = np.array([pos[e] for e in order[:c]], dtype=int)
        keep = np.setdiff1d(np.arange(n), drop)
        model = retrain(split_a.subset(keep), cfg_a, d, num_classes)
        correct, _ = model.evaluate(eval_set.features, eval_set.labels)
        out.append(float(correct.mean()))
    return out


def fractions_to_counts(fractions: Sequence[float], n: int) -> list[int]:
    return [int(round(f * n)) for f in fractions]


def _removal_seed(args: tuple) -> dict[str, list[float]]:
    spec, cfg_a, cfg_b, strategies, fractions, eval_size, seed = args
    spec_s = spec.with_seed(seed)
    ca, cb = replace(cfg_a, rng_seed=seed), replace(cfg_b, rng_seed=seed)
    run = two_split_run(spec_s, ca, cb)
    records = compute_metrics(run.history_a, run.history_b, dict(zip(run.split_a.example_ids.tolist(), run.split_a.provenance.tolist())))
    eval_set = sample_eval_set(spec_s, eval_size)
    counts = fractions_to_counts(fractions, len(run.split_a))
    return {
        s: removal_retrain(run.split_a, records, ca, eval_set, s, counts, d=spec.d, num_classes=spec.num_classes, seed=seed)
        for s in strategies
    }


def removal_experiment(
    spec: DatasetSpec,
    cfg_a: TrainConfig,
    cfg_b: TrainConfig,
    *,
    strategies: Sequence[str] = STRATEGIES,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    eval_size: int = 2000,
    jobs: int = 1,
) -> dict[str, RemovalCurve]:
    """Full two-split run per seed, then one removal curve per strategy.

    Seeds run in parallel when ``jobs > 1``; results do not depend on it.
    """
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown removal strategy {s!r}")
    tasks = [(spec, cfg_a, cfg_b, tuple(strategies), tuple(fractions), eval_size, int(s)) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_removal_seed, tasks))
    else:
        per_seed = [_removal_seed(t) for t in tasks]
    counts = fractions_to_counts(fractions, spec.n)
    curves = {}
    for s in strategies:
        acc = np.array([r[s] for r in per_seed])
        curves[s] = RemovalCurve(
            strategy=s,
            removal_counts=counts,
            test_accuracy=acc.mean(axis=0).tolist(),
            seeds_averaged=len(per_seed),
            test_accuracy_std=acc.std(axis=0).tolist(),
            per_seed=acc.tolist(),
        )
    return curves


def write_removal_csv(curves: Mapping[str, RemovalCurve], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "removal_count", "test_accuracy", "test_accuracy_std", "seeds_averaged"])
        for c in curves.values():
            for k, a, sd in zip(c.removal_counts, c.test_accuracy, c.test_accuracy_std):
                w.writerow([c.strategy, k, repr(a), repr(sd), c.seeds_averaged])


# -- stability ----------------------------------------------------------------------


STABILITY_METRICS = ("ssft", "fslt", "n_f", "acc_l", "conf_l", "acc_f")


@dataclass
class StabilityReport:
    overall: dict[str, float]
    bottom_decile: dict[str, float]
    n: int
    n_bottom: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _filled(records: Sequence[MetricRecord], metric: str) -> np.ndarray:
    out = []
    for r in records:
        v = getattr(r, metric)
        if v is NEVER:
            v = (r.horizon_b if metric == "ssft" else r.horizon_a) + 1
        out.append(float(v))
    return np.array(out)


def _rank_corr(a: np.ndarray, b: np.ndarray) -> float:
    ra, rb = rankdata(a), rankdata(b)
    if len(a) < 2 or np.ptp(ra) == 0 or np.ptp(rb) == 0:
        return math.nan
    return float(pearsonr(ra, rb)[0])


def stability(
    first: Sequence[MetricRecord],
    second: Sequence[MetricRecord],
    metrics: Sequence[str] = STABILITY_METRICS,
    decile: float = 0.1,
) -> StabilityReport:
    """Pearson correlation of metric ranks between two runs over the same examples.

    The bottom subset is the ``decile`` fraction with the lowest SSFT in the
    first table. Constant inputs give ``nan``.
    """
    a = sorted(first, key=lambda r: r.example_id)
    b = sorted(second, key=lambda r: r.example_id)
    if [r.example_id for r in a] != [r.example_id for r in b]:
        raise MismatchedIdsError("stability needs both tables to cover the same example ids")
    n = len(a)
    k = max(2, int(math.ceil(decile * n))) if n else 0
    ssft_a = _filled(a, "ssft")
    bottom = np.lexsort((np.arange(n), ssft_a))[:k]
    overall, low = {}, {}
    for m in metrics:
        va, vb = _filled(a, m), _filled(b, m)
        overall[m] = _rank_corr(va, vb)
        low[m] = _rank_corr(va[bottom], vb[bottom])
    return StabilityReport(overall, low, n, int(k))


# -- curve data -----------------------------------------------------------------------


def _suffix_all(rows: np.ndarray) -> np.ndarray:
    """``out[i, t]`` is True when ``rows[i, t:]`` is all True."""
    return np.logical_and.accumulate(rows[:, ::-1], axis=1)[:, ::-1]


def curve_data(
    history_a: PredictionHistory,
    history_b: PredictionHistory,
    provenance: Mapping[int, str],
) -> list[dict[str, Any]]:
    """Long table: ``phase, epoch, provenance, size, fraction_correct, fraction_settled``.

    ``fraction_settled`` is the share already learned for good (phase A,
    ``fslt <= epoch``) or forgotten for good (phase B, ``ssft <= epoch``).
    Epoch 0 is the state at the start of the phase.
    """
    rows = []
    for h in (history_a, history_b):
        prov = np.array([provenance.get(int(e), "clean") for e in h.example_ids])
        settled = _suffix_all(h.correct[:, 1:] if h.phase == "A" else ~h.correct[:, 1:])
        for p in sorted(set(prov)):
            m = prov == p
            size = int(m.sum())
            frac = h.correct[m].mean(axis=0)
            for t in range(h.epochs + 1):
                rows.append(
                    {
                        "phase": h.phase,
                        "epoch": t,
                        "provenance": p,
                        "size": size,
                        "fraction_correct": float(frac[t]),
                        "fraction_settled": float(settled[m, t - 1].mean()) if t > 0 else 0.0,
                    }
                )
    return rows


def scatter_data(records: Sequence[MetricRecord]) -> list[dict[str, Any]]:
    """FSLT against SSFT per example; NEVER written as the token."""
    return [
        {"example_id": r.example_id, "provenance": r.provenance, "fslt": r.fslt, "ssft": r.ssft}
        for r in records
    ]


def write_rows_csv(rows: Sequence[Mapping[str, Any]], path: str | Path, columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["NEVER" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
