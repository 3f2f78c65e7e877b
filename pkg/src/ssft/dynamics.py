"""Per-example learning and forgetting metrics read off prediction histories.

Epochs are 1-indexed. FSLT/SSFT look only at training epochs ``1..T``;
forgetting events also count the transition out of epoch 0. A metric whose
defining event never happens inside the horizon is ``NEVER`` (``None``).
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .models import PredictionHistory

NEVER = None
NEVER_TOKEN = "NEVER"

METRIC_COLUMNS = ("example_id", "provenance", "fslt", "ssft", "n_f", "acc_l", "conf_l", "acc_f", "joint_rank")


class EmptyHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRecord:
    example_id: int
    provenance: str
    fslt: int | None
    ssft: int | None
    n_f: int
    acc_l: int
    conf_l: float
    acc_f: int
    horizon_a: int
    horizon_b: int
    joint_rank: int = 0


def fslt(row: Sequence[bool] | np.ndarray) -> int | None:
    """Earliest epoch after which the example stays correct (row = epochs 1..T)."""
    row = np.asarray(row, dtype=bool)
    if row.size == 0:
        raise EmptyHistoryError("FSLT needs at least one training epoch")
    if not row[-1]:
        return NEVER
    wrong = np.flatnonzero(~row)
    return 1 if wrong.size == 0 else int(wrong[-1]) + 2


def ssft(row: Sequence[bool] | np.ndarray) -> int | None:
    """Earliest epoch after which the example stays wrong (row = epochs 1..T')."""
    row = np.asarray(row, dtype=bool)
    if row.size == 0:
        raise EmptyHistoryError("SSFT needs at least one training epoch")
    if row[-1]:
        return NEVER
    right = np.flatnonzero(row)
    return 1 if right.size == 0 else int(right[-1]) + 2


def forgetting_events(row: Sequence[bool] | np.ndarray) -> int:
    """Number of correct -> incorrect transitions between consecutive entries."""
    row = np.asarray(row, dtype=bool)
    return int(np.count_nonzero(row[:-1] & ~row[1:]))


def cumulative_metrics(
    correct_a: np.ndarray, confidence_a: np.ndarray, correct_b: np.ndarray
) -> tuple[int, float, int]:
    """``(acc_l, conf_l, acc_f)`` summed over training epochs (epoch 0 excluded)."""
    return (
        int(np.count_nonzero(correct_a)),
        float(np.sum(confidence_a)),
        int(np.count_nonzero(correct_b)),
    )


def compute_metrics(
    history_a: PredictionHistory,
    history_b: PredictionHistory,
    provenance: dict[int, str] | None = None,
) -> list[MetricRecord]:
    """One record per example tracked in both phases, ranked by ``joint_rank``."""
    if not np.array_equal(history_a.example_ids, history_b.example_ids):
        raise ValueError("phase A and phase B histories must track the same examples in the same order")
    provenance = provenance or {}
    T, Tb = history_a.epochs, history_b.epochs
    records = []
    for i, eid in enumerate(history_a.example_ids):
        ca = history_a.correct[i]
        cb = history_b.correct[i]
        acc_l, conf_l, acc_f = cumulative_metrics(ca[1:], history_a.confidence[i, 1:], cb[1:])
        records.append(
            MetricRecord(
                example_id=int(eid),
                provenance=provenance.get(int(eid), "clean"),
                fslt=fslt(ca[1:]) if T > 0 else NEVER,
                ssft=ssft(cb[1:]) if Tb > 0 else NEVER,
                n_f=forgetting_events(ca),
                acc_l=acc_l,
                conf_l=conf_l,
                acc_f=acc_f,
                horizon_a=T,
                horizon_b=Tb,
            )
        )
    return joint_rank(records)


def finite_or(value: int | None, fill: float) -> float:
    return fill if value is NEVER else float(value)


def suspicion_ranks(records: Sequence[MetricRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks (1 = most suspicious) by SSFT ascending and FSLT descending.

    NEVER sorts after every finite SSFT and before every finite FSLT.
    """
    ssft_key = np.array([finite_or(r.ssft, np.inf) for r in records])
    fslt_key = np.array([-finite_or(r.fslt, np.inf) for r in records])
    return rankdata(ssft_key, method="average"), rankdata(fslt_key, method="average")


def joint_rank(records: Sequence[MetricRecord]) -> list[MetricRecord]:
    """Set ``joint_rank`` from the sum of the SSFT and FSLT suspicion ranks.

    Ties on the sum fall back to the SSFT rank, then to example id.
    """
    if not records:
        return []
    r_ssft, r_fslt = suspicion_ranks(records)
    total = r_ssft + r_fslt
    ids = np.array([r.example_id for r in records])
    order = np.lexsort((ids, r_ssft, total))
    ranks = np.empty(len(records), dtype=int)
    ranks[order] = np.arange(1, len(records) + 1)
    return [replace(r, joint_rank=int(k)) for r, k in zip(records, ranks)]


# -- CSV ----------------------------------------------------------------------


def _fmt(v: int | None) -> str:
    return NEVER_TOKEN if v is NEVER else str(v)


def _parse(v: str) -> int | None:
    return NEVER if v == NEVER_TOKEN else int(v)


def write_metrics_csv(records: Iterable[MetricRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS + ("horizon_a", "horizon_b"))
        for r in records:
            w.writerow(
                [r.example_id, r.provenance, _fmt(r.fslt), _fmt(r.ssft), r.n_f, r.acc_l, repr(r.conf_l), r.acc_f, r.joint_rank, r.horizon_a, r.horizon_b]
            )


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricRecord(
            example_id=int(r["example_id"]),
            provenance=r["provenance"],
            fslt=_parse(r["fslt"]),
            ssft=_parse(r["ssft"]),
            n_f=int(r["n_f"]),
            acc_l=int(r["acc_l"]),
            conf_l=float(r["conf_l"]),
            acc_f=int(r["acc_f"]),
            horizon_a=int(r.get("horizon_a") or 0),
            horizon_b=int(r.get("horizon_b") or 0),
            joint_rank=int(r["joint_rank"]),
        )
        for r in rows
    ]


def write_history_csv(histories: Sequence[PredictionHistory], path: str | Path) -> None:
    """Long format: ``example_id,phase,epoch,correct,confidence``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "phase", "epoch", "correct", "confidence"])
        for h in histories:
            for i, eid in enumerate(h.example_ids):
                for t in range(h.epochs + 1):
                    w.writerow([int(eid), h.phase, t, int(h.correct[i, t]), repr(float(h.confidence[i, t]))])


def read_history_csv(path: str | Path) -> dict[str, PredictionHistory]:
    """Inverse of :func:`write_history_csv`, keyed by phase."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out: dict[str, PredictionHistory] = {}
    for phase in sorted({r["phase"] for r in rows}):
        sub = [r for r in rows if r["phase"] == phase]
        ids = list(dict.fromkeys(int(r["example_id"]) for r in sub))
        pos = {eid: i for i, eid in enumerate(ids)}
        epochs = max(int(r["epoch"]) for r in sub)
        correct = np.zeros((len(ids), epochs + 1), dtype=bool)
        conf = np.zeros((len(ids), epochs + 1))
        for r in sub:
            i, t = pos[int(r["example_id"])], int(r["epoch"])
            correct[i, t] = r["correct"] == "1"
            conf[i, t] = float(r["confidence"])
        out[phase] = PredictionHistory(phase, np.array(ids, dtype=int), correct, conf)
    return out
