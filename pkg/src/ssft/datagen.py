"""Synthetic group-mixture datasets split into two halves (S_A, S_B).

Every group owns ``k`` disjoint coordinates (consecutive blocks) and draws
``x = mean * u_g + N(0, sigma^2 I_d)``. Rare groups only ever show up in the
first split; complex groups carry a reduced per-coordinate mean.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

GROUP_KINDS = ("typical", "rare", "complex")
PROVENANCES = ("clean", "mislabeled", "rare", "complex")

# Fixed spawn-key tags so each random purpose gets its own substream.
_STREAM_SPLIT = {"A": 0, "B": 1, "eval": 2}
_STREAM_COUNTS, _STREAM_NOISE, _STREAM_MISLABEL, _STREAM_ORDER = 0, 1, 2, 3
_STREAM_ZIPF = 7


class SpecError(ValueError):
    """Raised when a dataset spec cannot be built or is inconsistent."""


class SupportOverflowError(SpecError):
    """Disjoint signal supports do not fit in ``d`` coordinates."""


class FrequencyError(SpecError):
    """Group frequencies are negative, all zero, or do not sum to one."""


@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    label: int
    signal_indices: tuple[int, ...]
    mean: float
    frequency: float
    kind: str = "typical"

    def mean_vector(self, d: int) -> np.ndarray:
        v = np.zeros(d)
        v[list(self.signal_indices)] = self.mean
        return v


@dataclass(frozen=True)
class DatasetSpec:
    """Generative parameters for one two-split dataset.

    ``mislabel_splits`` names the splits that receive label noise and
    ``mislabel_source`` picks the group kind the noisy examples come from.
    ``balanced`` replaces multinomial group counts with exact quotas.
    """

    d: int
    k: int
    sigma: float
    n: int
    num_classes: int
    groups: tuple[GroupSpec, ...]
    mislabel_fraction: float = 0.0
    rng_seed: int = 0
    rare_count: int = 1
    mislabel_splits: tuple[str, ...] = ("A", "B")
    mislabel_source: str = "typical"
    balanced: bool = False

    @property
    def rare_groups(self) -> list[GroupSpec]:
        return [g for g in self.groups if g.kind == "rare"]

    @property
    def common_groups(self) -> list[GroupSpec]:
        return [g for g in self.groups if g.kind != "rare"]

    def group(self, group_id: int) -> GroupSpec:
        return self.groups[group_id]

    def with_seed(self, seed: int) -> DatasetSpec:
        return replace(self, rng_seed=int(seed))

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["groups"] = [asdict(g) for g in self.groups]
        for g in out["groups"]:
            g["signal_indices"] = list(g["signal_indices"])
        out["mislabel_splits"] = list(self.mislabel_splits)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DatasetSpec:
        data = dict(data)
        groups = tuple(
            GroupSpec(
                group_id=int(g["group_id"]),
                label=int(g["label"]),
                signal_indices=tuple(int(i) for i in g["signal_indices"]),
                mean=float(g["mean"]),
                frequency=float(g["frequency"]),
                kind=str(g.get("kind", "typical")),
            )
            for g in data.pop("groups")
        )
        data["mislabel_splits"] = tuple(data.get("mislabel_splits", ("A", "B")))
        spec = cls(groups=groups, **data)
        validate_spec(spec)
        return spec


@dataclass
class Split:
    """One split of examples, stored column-wise.

    ``labels`` are the given (possibly noisy) labels; ``true_labels`` the
    labels of the generating group.
    """

    name: str
    example_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    group_ids: np.ndarray
    provenance: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.example_ids)

    def subset(self, mask_or_idx: np.ndarray) -> Split:
        idx = np.asarray(mask_or_idx)
        return Split(
            self.name,
            self.example_ids[idx],
            self.features[idx],
            self.labels[idx],
            self.true_labels[idx],
            self.group_ids[idx],
            self.provenance[idx],
            dict(self.meta),
        )

    def examples(self) -> list[Example]:
        return [
            Example(
                int(self.example_ids[i]),
                self.features[i],
                int(self.labels[i]),
                int(self.true_labels[i]),
                int(self.group_ids[i]),
                str(self.provenance[i]),
                self.name,
            )
            for i in range(len(self))
        ]


@dataclass(frozen=True)
class Example:
    example_id: int
    x: np.ndarray
    given_label: int
    true_label: int
    group_id: int
    provenance: str
    split: str


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def validate_spec(spec: DatasetSpec) -> None:
    if min(spec.d, spec.k, spec.n, spec.num_classes) <= 0:
        raise SpecError("d, k, n and num_classes must be positive")
    if spec.sigma < 0:
        raise SpecError("sigma must be non-negative")
    if not 0.0 <= spec.mislabel_fraction < 1.0:
        raise SpecError(f"mislabel_fraction must be in [0, 1), got {spec.mislabel_fraction}")
    if spec.k * len(spec.groups) > spec.d:
        raise SupportOverflowError(
            f"{len(spec.groups)} groups x k={spec.k} coordinates exceed d={spec.d}"
        )
    if spec.mislabel_source not in ("typical", "rare"):
        raise SpecError(f"unknown mislabel_source {spec.mislabel_source!r}")
    if not set(spec.mislabel_splits) <= {"A", "B"}:
        raise SpecError(f"mislabel_splits must be drawn from A/B, got {spec.mislabel_splits}")
    seen: set[int] = set()
    for pos, g in enumerate(spec.groups):
        if g.group_id != pos:
            raise SpecError("group ids must be 0..G-1 in order")
        if g.kind not in GROUP_KINDS:
            raise SpecError(f"unknown group kind {g.kind!r}")
        if not 0 <= g.label < spec.num_classes:
            raise SpecError(f"group {g.group_id} label {g.label} outside [0, {spec.num_classes})")
        if len(set(g.signal_indices)) != spec.k:
            raise SpecError(f"group {g.group_id} must own exactly k={spec.k} indices")
        if seen & set(g.signal_indices):
            raise SpecError(f"group {g.group_id} signal support overlaps another group")
        if min(g.signal_indices) < 0 or max(g.signal_indices) >= spec.d:
            raise SupportOverflowError(f"group {g.group_id} indices fall outside [0, d)")
        seen |= set(g.signal_indices)
        if not 0.0 <= g.frequency <= 1.0:
            raise FrequencyError(f"group {g.group_id} frequency {g.frequency} not in [0, 1]")
    if not math.isclose(sum(g.frequency for g in spec.groups), 1.0, abs_tol=1e-9):
        raise FrequencyError("group frequencies must sum to 1")
    if not spec.common_groups:
        raise SpecError("at least one non-rare group is required")
    if spec.rare_count * len(spec.rare_groups) >= spec.n:
        raise SpecError("rare examples would fill the whole first split")


def build_spec(
    *,
    d: int,
    k: int,
    sigma: float,
    n: int,
    num_classes: int,
    groups: Sequence[Mapping[str, Any]],
    typical_mean: float = 5.0,
    complex_lambda: float = 1.25,
    mislabel_fraction: float = 0.0,
    rng_seed: int = 0,
    rare_count: int = 1,
    mislabel_splits: Iterable[str] = ("A", "B"),
    mislabel_source: str = "typical",
    balanced: bool = False,
) -> DatasetSpec:
    """Assign supports and frequencies to a list of group descriptors.

    Each descriptor needs a ``label``; ``kind`` defaults to typical,
    ``weight`` (relative frequency among non-rare groups) to 1, and
    ``mean`` to ``typical_mean`` (divided by ``complex_lambda`` for complex
    groups). Group ``g`` receives coordinates ``[g*k, (g+1)*k)``.

    Rare groups get the nominal frequency ``rare_count / n``; the remaining
    mass is spread over the other groups in proportion to their weights.
    """
    if k * len(groups) > d:
        raise SupportOverflowError(f"{len(groups)} groups x k={k} coordinates exceed d={d}")
    if complex_lambda <= 1.0 and any(g.get("kind") == "complex" for g in groups):
        raise SpecError("complex groups need complex_lambda > 1")
    kinds = [str(g.get("kind", "typical")) for g in groups]
    n_rare = kinds.count("rare")
    rare_mass = n_rare * rare_count / n if n > 0 else 0.0
    if rare_mass >= 1.0:
        raise FrequencyError("rare groups would take the whole frequency mass")
    weights = []
    for g, kind in zip(groups, kinds):
        w = 0.0 if kind == "rare" else float(g.get("weight", 1.0))
        if w < 0 or not math.isfinite(w):
            raise FrequencyError(f"invalid group weight {w}")
        weights.append(w)
    total = sum(weights)
    if total <= 0:
        raise FrequencyError("non-rare group weights must have positive sum")

    specs = []
    for gid, (g, kind, w) in enumerate(zip(groups, kinds, weights)):
        if kind == "rare":
            freq = rare_count / n
        else:
            freq = (1.0 - rare_mass) * w / total
        default_mean = typical_mean / complex_lambda if kind == "complex" else typical_mean
        specs.append(
            GroupSpec(
                group_id=gid,
                label=int(g["label"]),
                signal_indices=tuple(range(gid * k, (gid + 1) * k)),
                mean=float(g.get("mean", default_mean)),
                frequency=freq,
                kind=kind,
            )
        )
    spec = DatasetSpec(
        d=d,
        k=k,
        sigma=float(sigma),
        n=n,
        num_classes=num_classes,
        groups=tuple(specs),
        mislabel_fraction=float(mislabel_fraction),
        rng_seed=int(rng_seed),
        rare_count=int(rare_count),
        mislabel_splits=tuple(mislabel_splits),
        mislabel_source=mislabel_source,
        balanced=balanced,
    )
    validate_spec(spec)
    return spec


def synthetic_spec(
    *,
    num_classes: int = 10,
    d: int = 500,
    k: int = 5,
    n: int = 100,
    sigma: float = 1.0,
    typical_mean: float = 5.0,
    complex_lambda: float = 1.25,
    typical_weight: float = 2.0,
    complex_weight: float = 1.0,
    rare_per_class: int = 1,
    mislabel_fraction: float = 0.1,
    rng_seed: int = 0,
    **kwargs: Any,
) -> DatasetSpec:
    """The 10-class mixture: per class one typical, one complex and rare groups."""
    groups: list[dict[str, Any]] = []
    for c in range(num_classes):
        groups.append({"label": c, "kind": "typical", "weight": typical_weight})
    if complex_weight > 0:
        for c in range(num_classes):
            groups.append({"label": c, "kind": "complex", "weight": complex_weight})
    for _ in range(rare_per_class):
        for c in range(num_classes):
            groups.append({"label": c, "kind": "rare"})
    return build_spec(
        d=d,
        k=k,
        sigma=sigma,
        n=n,
        num_classes=num_classes,
        groups=groups,
        typical_mean=typical_mean,
        complex_lambda=complex_lambda,
        mislabel_fraction=mislabel_fraction,
        rng_seed=rng_seed,
        **kwargs,
    )


def binary_theory_spec(
    *,
    d: int = 500,
    k: int = 25,
    n: int = 100,
    mu: float = 1.0,
    sigma: float = 1.0,
    complex_lambda: float = 1.25,
    with_rare: bool = True,
    complex_majority: bool = False,
    rng_seed: int = 0,
    balanced: bool = True,
) -> DatasetSpec:
    """Two opposite-label majority groups plus one rare group of label 1.

    Labels are class indices {0, 1}; binary models read them as -1/+1.
    With ``complex_majority`` both majority groups use ``mu / complex_lambda``.
    """
    kind = "complex" if complex_majority else "typical"
    groups: list[dict[str, Any]] = [{"label": 1, "kind": kind}, {"label": 0, "kind": kind}]
    if with_rare:
        groups.append({"label": 1, "kind": "rare"})
    return build_spec(
        d=d,
        k=k,
        sigma=sigma,
        n=n,
        num_classes=2,
        groups=groups,
        typical_mean=mu,
        complex_lambda=complex_lambda,
        mislabel_fraction=0.0,
        rng_seed=rng_seed,
        balanced=balanced,
    )


def build_zipf_spec(
    num_superclasses: int,
    subgroup_sizes: Sequence[int],
    *,
    scale: float = 1.0,
    d: int | None = None,
    k: int = 2,
    sigma: float = 1.0,
    typical_mean: float = 5.0,
    mislabel_fraction: float = 0.0,
    rng_seed: int = 0,
    **kwargs: Any,
) -> DatasetSpec:
    """Long-tailed spec: each superclass label is shared by subgroups of decaying size.

    Realized per-subgroup counts are ``floor(size * scale)`` and the split
    size ``n`` is their total, so ``balanced`` quotas reproduce them exactly.
    Which subgroup of a superclass gets which size is shuffled per seed.
    """
    sizes = [int(s) for s in subgroup_sizes]
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise SpecError("subgroup sizes must be strictly decreasing")
    counts = [math.floor(s * scale) for s in sizes]
    if min(counts) <= 0:
        raise SpecError("scaled subgroup sizes must stay positive")
    n_groups = num_superclasses * len(sizes)
    if d is None:
        d = max(n_groups * k, 1)
    if n_groups * k > d:
        raise SupportOverflowError(f"{n_groups} subgroups x k={k} coordinates exceed d={d}")
    rng = _substream(rng_seed, _STREAM_ZIPF)
    groups: list[dict[str, Any]] = []
    for c in range(num_superclasses):
        order = rng.permutation(len(sizes))
        for j in range(len(sizes)):
            groups.append({"label": c, "kind": "typical", "weight": counts[order[j]]})
    n = num_superclasses * sum(counts)
    kwargs.setdefault("balanced", True)
    return build_spec(
        d=d,
        k=k,
        sigma=sigma,
        n=n,
        num_classes=num_superclasses,
        groups=groups,
        typical_mean=typical_mean,
        mislabel_fraction=mislabel_fraction,
        rng_seed=rng_seed,
        **kwargs,
    )


def noisy_zipf_spec(*, rng_seed: int = 0, mislabel_fraction: float = 0.1, **kwargs: Any) -> DatasetSpec:
    """Ten superclasses of five subgroups sized 16, 8, 4, 2, 1 with label noise in both splits.

    The default setting for removal-and-retrain curves: the clean evaluation
    set weighs every subgroup equally, so dropping the tail hurts.
    """
    return build_zipf_spec(10, [16, 8, 4, 2, 1], mislabel_fraction=mislabel_fraction, rng_seed=rng_seed, **kwargs)


def _quota(freqs: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` over ``freqs``."""
    raw = freqs / freqs.sum() * total
    base = np.floor(raw + 1e-9).astype(int)
    rest = total - base.sum()
    if rest > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:rest]] += 1
    return base


def _draw_counts(spec: DatasetSpec, total: int, rng: np.random.Generator) -> dict[int, int]:
    common = spec.common_groups
    freqs = np.array([g.frequency for g in common], dtype=float)
    if spec.balanced:
        counts = _quota(freqs, total)
    else:
        counts = rng.multinomial(total, freqs / freqs.sum())
    return {g.group_id: int(c) for g, c in zip(common, counts)}


def _flip_labels(
    labels: np.ndarray, candidates: np.ndarray, fraction: float, num_classes: int, rng: np.random.Generator
) -> np.ndarray:
    n_flip = int(round(fraction * len(candidates)))
    chosen = np.sort(rng.choice(candidates, size=n_flip, replace=False)) if n_flip else np.array([], int)
    for i in chosen:
        offset = rng.integers(1, num_classes)
        labels[i] = (labels[i] + offset) % num_classes
    return chosen


def _sample_split(
    spec: DatasetSpec, name: str, counts: Mapping[int, int], id_offset: int, stream: int
) -> Split:
    seed = spec.rng_seed
    group_ids = np.concatenate(
        [np.full(c, gid, dtype=int) for gid, c in sorted(counts.items())] or [np.zeros(0, int)]
    )
    perm = _substream(seed, stream, _STREAM_ORDER).permutation(len(group_ids))
    group_ids = group_ids[perm]
    means = np.stack([g.mean_vector(spec.d) for g in spec.groups])
    true_labels = np.array([spec.groups[g].label for g in group_ids], dtype=int)
    # One noise substream per group, consumed in example order.
    features = means[group_ids].copy()
    for gid in np.unique(group_ids):
        rows = np.flatnonzero(group_ids == gid)
        noise_rng = _substream(seed, stream, _STREAM_NOISE, int(gid))
        features[rows] += spec.sigma * noise_rng.standard_normal((len(rows), spec.d))
    kinds = np.array([spec.groups[g].kind for g in group_ids], dtype=object)
    provenance = np.where(kinds == "typical", "clean", kinds).astype("<U10")
    labels = true_labels.copy()
    if name in spec.mislabel_splits and spec.mislabel_fraction > 0:
        candidates = np.flatnonzero(kinds == spec.mislabel_source)
        flipped = _flip_labels(
            labels,
            candidates,
            spec.mislabel_fraction,
            spec.num_classes,
            _substream(seed, stream, _STREAM_MISLABEL),
        )
        provenance[flipped] = "mislabeled"
    ids = np.arange(id_offset, id_offset + len(group_ids))
    return Split(name, ids, features, labels, true_labels, group_ids, provenance)


def sample_splits(spec: DatasetSpec) -> tuple[Split, Split]:
    """Draw S_A and S_B (n examples each); deterministic in ``spec.rng_seed``."""
    validate_spec(spec)
    rare_total = spec.rare_count * len(spec.rare_groups)
    counts_a = _draw_counts(spec, spec.n - rare_total, _substream(spec.rng_seed, 0, _STREAM_COUNTS))
    for g in spec.rare_groups:
        counts_a[g.group_id] = spec.rare_count
    counts_b = _draw_counts(spec, spec.n, _substream(spec.rng_seed, 1, _STREAM_COUNTS))
    split_a = _sample_split(spec, "A", counts_a, 0, _STREAM_SPLIT["A"])
    split_b = _sample_split(spec, "B", counts_b, spec.n, _STREAM_SPLIT["B"])
    return split_a, split_b


def sample_group(spec: DatasetSpec, group_id: int, size: int, seed: int) -> np.ndarray:
    """``size`` feature vectors from one group, on an independent stream."""
    g = spec.groups[group_id]
    rng = _substream(seed, 9, group_id)
    return g.mean_vector(spec.d) + spec.sigma * rng.standard_normal((size, spec.d))


def sample_eval_set(spec: DatasetSpec, size: int = 2000, seed: int | None = None) -> Split:
    """Noiseless held-out sample spread evenly over the non-rare groups."""
    clean = replace(spec, mislabel_fraction=0.0, balanced=True, rng_seed=spec.rng_seed if seed is None else seed)
    common = clean.common_groups
    counts = _quota(np.ones(len(common)), size)
    return _sample_split(
        clean,
        "eval",
        {g.group_id: int(c) for g, c in zip(common, counts)},
        10 * spec.n,
        _STREAM_SPLIT["eval"],
    )


# -- persistence ------------------------------------------------------------


def write_split_csv(split: Split, path: str | Path) -> None:
    path = Path(path)
    d = split.features.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "group_id", "true_label", "given_label", "provenance"] + [f"x_{j}" for j in range(d)])
        for i in range(len(split)):
            w.writerow(
                [
                    int(split.example_ids[i]),
                    int(split.group_ids[i]),
                    int(split.true_labels[i]),
                    int(split.labels[i]),
                    split.provenance[i],
                ]
                + [repr(float(v)) for v in split.features[i]]
            )


def read_split_csv(path: str | Path, name: str) -> Split:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    feats = np.array([[float(v) for v in r[5:]] for r in body]).reshape(len(body), len(rows[0]) - 5)
    return Split(
        name,
        np.array([int(r[0]) for r in body], dtype=int),
        feats,
        np.array([int(r[3]) for r in body], dtype=int),
        np.array([int(r[2]) for r in body], dtype=int),
        np.array([int(r[1]) for r in body], dtype=int),
        np.array([r[4] for r in body], dtype="<U10"),
    )


def write_spec_json(spec: DatasetSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def read_spec_json(path: str | Path) -> DatasetSpec:
    return DatasetSpec.from_dict(json.loads(Path(path).read_text()))
