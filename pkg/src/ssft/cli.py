"""Command-line orchestration: declarative JSON configs in, hashed artifact trees out.

Exit codes: 0 success, 1 configuration error, 2 training divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import inspect
import json
import logging
import os
import sys
import warnings
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import analysis, datagen, dynamics, theory
from .datagen import DatasetSpec, SpecError
from .models import DivergenceError, TrainConfig, two_split_run

log = logging.getLogger("ssft")

SCHEMA_VERSION = 1
OUTPUT_ENV = "SSFT_OUTPUT_ROOT"
DEFAULT_OUTPUT = "runs"

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3

ANALYSES = ("metrics", "auc", "curves", "removal", "stability", "theory")
PREREQUISITES = {"auc": "metrics", "curves": "metrics", "removal": "metrics", "stability": "metrics"}

BUILDERS: dict[str, Callable[..., DatasetSpec]] = {
    "synthetic": datagen.synthetic_spec,
    "binary_theory": datagen.binary_theory_spec,
    "zipf": datagen.build_zipf_spec,
    "noisy_zipf": datagen.noisy_zipf_spec,
}

# Offset applied to the training seed for the stability rerun.
STABILITY_SEED_OFFSET = 1_000_003


class ConfigError(ValueError):
    """Invalid config; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# -- config --------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    dataset: dict[str, Any]
    phase_a: TrainConfig
    phase_b: TrainConfig
    analyses: tuple[str, ...] = ("metrics", "auc", "curves")
    output_dir: str | None = None
    seeds: tuple[int, ...] = (0,)
    removal: dict[str, Any] = field(default_factory=dict)
    theory: dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "dataset": copy.deepcopy(self.dataset),
            "phase_a": self.phase_a.to_dict(),
            "phase_b": self.phase_b.to_dict(),
            "analyses": list(self.analyses),
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "removal": copy.deepcopy(self.removal),
            "theory": copy.deepcopy(self.theory),
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results (seeds and output_dir excluded)."""
        body = self.to_dict()
        body.pop("seeds")
        body.pop("output_dir")
        return hashlib.sha256(_canonical(body).encode()).hexdigest()


_TOP_LEVEL = {f.name for f in fields(RunConfig)}
_REMOVAL_KEYS = {"fractions", "strategies", "eval_size"}
_THEORY_SUITES = {"implicit_bias", "representer", "asymptotic", "window", "assumptions"}


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _train_config(raw: Any, path: str) -> TrainConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(path, "must be an object of training settings")
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"{path}.{key}", "unknown field")
        want = type(defaults[key])
        ok = isinstance(value, want) and not isinstance(value, bool)
        if want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if not ok:
            raise ConfigError(f"{path}.{key}", f"expected {want.__name__}, got {value!r}")
    data = {k: (float(v) if isinstance(defaults[k], float) else v) for k, v in raw.items()}
    try:
        return TrainConfig(**data)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _builder_params(builder: Callable[..., DatasetSpec]) -> set[str]:
    names = {p.name for p in inspect.signature(builder).parameters.values() if p.kind is not p.VAR_KEYWORD}
    return names | {p.name for p in inspect.signature(datagen.build_spec).parameters.values()} - {"groups"}


def build_dataset(dataset: Mapping[str, Any], seed: int) -> DatasetSpec:
    """DatasetSpec for one seed, from a builder name plus keyword fields or explicit fields."""
    data = dict(dataset)
    builder_name = data.pop("builder", None)
    try:
        if builder_name is None:
            data["rng_seed"] = seed
            return DatasetSpec.from_dict(data)
        builder = BUILDERS[builder_name]
        data["rng_seed"] = seed
        for key in ("mislabel_splits",):
            if key in data:
                data[key] = tuple(data[key])
        return builder(**data)
    except KeyError as exc:
        raise ConfigError("dataset", f"missing or unknown entry {exc}") from None
    except (SpecError, TypeError, ValueError) as exc:
        raise ConfigError("dataset", str(exc)) from None


def _validate_dataset(raw: Any) -> dict[str, Any]:
    if not isinstance(raw, Mapping):
        raise ConfigError("dataset", "must be an object")
    builder_name = raw.get("builder")
    if builder_name is not None:
        if builder_name not in BUILDERS:
            raise ConfigError("dataset.builder", f"unknown builder {builder_name!r}; choose from {sorted(BUILDERS)}")
        allowed = _builder_params(BUILDERS[builder_name]) | {"builder"}
        for key in raw:
            if key not in allowed:
                raise ConfigError(f"dataset.{key}", f"not accepted by builder {builder_name!r}")
    else:
        allowed = {f.name for f in fields(DatasetSpec)}
        for key in raw:
            if key not in allowed:
                raise ConfigError(f"dataset.{key}", "unknown DatasetSpec field")
        if "groups" not in raw:
            raise ConfigError("dataset.groups", "required when no builder is named")
    return copy.deepcopy(dict(raw))


def parse_config(raw: Any) -> RunConfig:
    """Validate a decoded JSON document into a :class:`RunConfig`."""
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in raw:
        if key not in _TOP_LEVEL:
            raise ConfigError(key, "unknown top-level field")
    version = raw.get("schema_version")
    if version is None:
        raise ConfigError("schema_version", "missing required field")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")
    for key in ("dataset", "phase_a", "phase_b"):
        if key not in raw:
            raise ConfigError(key, "missing required field")
    dataset = _validate_dataset(raw["dataset"])
    phase_a = _train_config(raw["phase_a"], "phase_a")
    phase_b = _train_config(raw["phase_b"], "phase_b")
    if phase_a.binary != phase_b.binary:
        raise ConfigError("phase_b.loss", "both phases must use the same loss family")

    analyses = raw.get("analyses", ["metrics", "auc", "curves"])
    if not isinstance(analyses, list):
        raise ConfigError("analyses", "must be a list")
    for i, a in enumerate(analyses):
        if a not in ANALYSES:
            raise ConfigError(f"analyses[{i}]", f"unknown analysis {a!r}; choose from {ANALYSES}")
        need = PREREQUISITES.get(a)
        if need and need not in analyses:
            raise ConfigError(f"analyses[{i}]", f"{a!r} requires {need!r}")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "must be a non-empty list of integers")
    for i, s in enumerate(seeds):
        if not isinstance(s, int) or isinstance(s, bool) or s < 0:
            raise ConfigError(f"seeds[{i}]", f"expected a non-negative integer, got {s!r}")

    output_dir = raw.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ConfigError("output_dir", "must be a string path")

    removal = raw.get("removal", {})
    if not isinstance(removal, Mapping):
        raise ConfigError("removal", "must be an object")
    for key in removal:
        if key not in _REMOVAL_KEYS:
            raise ConfigError(f"removal.{key}", "unknown field")
    for i, s in enumerate(removal.get("strategies", [])):
        if s not in analysis.STRATEGIES:
            raise ConfigError(f"removal.strategies[{i}]", f"unknown strategy {s!r}")
    for i, f in enumerate(removal.get("fractions", [])):
        if not isinstance(f, (int, float)) or not 0 <= f < 1:
            raise ConfigError(f"removal.fractions[{i}]", "must be a number in [0, 1)")

    theory_cfg = raw.get("theory", {})
    if not isinstance(theory_cfg, Mapping):
        raise ConfigError("theory", "must be an object")
    for key, value in theory_cfg.items():
        if key not in _THEORY_SUITES:
            raise ConfigError(f"theory.{key}", f"unknown suite; choose from {sorted(_THEORY_SUITES)}")
        if not isinstance(value, Mapping):
            raise ConfigError(f"theory.{key}", "must be an object")

    # build once so spec-level problems surface as config errors
    build_dataset(dataset, int(seeds[0]))
    return RunConfig(
        dataset=dataset,
        phase_a=phase_a,
        phase_b=phase_b,
        analyses=tuple(analyses),
        output_dir=output_dir,
        seeds=tuple(int(s) for s in seeds),
        removal=copy.deepcopy(dict(removal)),
        theory=copy.deepcopy(dict(theory_cfg)),
    )


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()  # OSError surfaces as an I/O failure
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)


def apply_quick(cfg: RunConfig) -> RunConfig:
    """Shrink epochs, removal grid and theory sizes for a smoke run."""
    removal = dict(cfg.removal)
    removal["fractions"] = [0.0, 0.1]
    removal["eval_size"] = min(int(removal.get("eval_size", 2000)), 200)
    return replace(
        cfg,
        phase_a=replace(cfg.phase_a, max_epochs=min(cfg.phase_a.max_epochs, 10)),
        phase_b=replace(cfg.phase_b, max_epochs=min(cfg.phase_b.max_epochs, 10)),
        removal=removal,
        theory=quick_theory(cfg.theory),
    )


# -- artifacts -------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactWriter:
    """Tracks every file written under one run directory for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.files:
            self.files.append(rel)
        return p

    def json(self, rel: str, obj: Any) -> None:
        self.path(rel).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def manifest(self, run_id: str) -> dict[str, Any]:
        entries = {rel: sha256_file(self.root / rel) for rel in sorted(self.files)}
        body = {"run_id": run_id, "schema_version": SCHEMA_VERSION, "files": entries}
        (self.root / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return body


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def verify_manifest(run_dir: str | Path) -> list[str]:
    """Paths that are missing or whose hash no longer matches."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    bad = []
    for rel, digest in manifest["files"].items():
        p = run_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def run_id_for(cfg: RunConfig, seed: int) -> str:
    return f"s{seed}-{cfg.config_hash()[:12]}"


def output_root(cfg: RunConfig, override: str | None = None) -> Path:
    return Path(override or cfg.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


# -- run ---------------------------------------------------------------------------


def execute_run(cfg: RunConfig, seed: int, root: Path) -> dict[str, Any]:
    """generate -> phase A -> phase B -> metrics -> analyses, for one seed."""
    run_id = run_id_for(cfg, seed)
    out = ArtifactWriter(root / run_id)
    log.info("run %s: seed %d -> %s", run_id, seed, out.root)
    snapshot = replace(cfg, seeds=(seed,))
    out.json("config.json", snapshot.to_dict())

    spec = build_dataset(cfg.dataset, seed)
    cfg_a = replace(cfg.phase_a, rng_seed=seed)
    cfg_b = replace(cfg.phase_b, rng_seed=seed)
    split_a, split_b = datagen.sample_splits(spec)
    datagen.write_spec_json(spec, out.path("data/spec.json"))
    datagen.write_split_csv(split_a, out.path("data/split_a.csv"))
    datagen.write_split_csv(split_b, out.path("data/split_b.csv"))

    run = two_split_run(spec, cfg_a, cfg_b, splits=(split_a, split_b))
    log.info("run %s: phase A %d epochs, phase B %d epochs", run_id, run.history_a.epochs, run.history_b.epochs)
    dynamics.write_history_csv([run.history_a, run.history_b], out.path("history/history.csv"))

    summary: dict[str, Any] = {
        "run_id": run_id,
        "seed": seed,
        "phase_a_epochs": run.history_a.epochs,
        "phase_a_converged": run.history_a.converged,
        "phase_b_epochs": run.history_b.epochs,
        "split_sizes": {"A": len(split_a), "B": len(split_b)},
    }
    provenance = dict(zip(split_a.example_ids.tolist(), split_a.provenance.tolist()))
    records: list[dynamics.MetricRecord] = []
    if "metrics" in cfg.analyses:
        records = dynamics.compute_metrics(run.history_a, run.history_b, provenance)
        dynamics.write_metrics_csv(records, out.path("metrics/metrics.csv"))
        summary["forgotten_fraction"] = _forgotten_by_provenance(records)
    if "auc" in cfg.analyses:
        summary["auc"] = _write_auc(records, out)
    if "curves" in cfg.analyses:
        analysis.write_rows_csv(analysis.curve_data(run.history_a, run.history_b, provenance), out.path("reports/curves.csv"))
        analysis.write_rows_csv(
            analysis.scatter_data(records), out.path("reports/scatter.csv"), ["example_id", "provenance", "fslt", "ssft"]
        )
    if "removal" in cfg.analyses:
        summary["removal"] = _run_removal(cfg, spec, split_a, records, cfg_a, seed, out)
    if "stability" in cfg.analyses:
        alt = two_split_run(
            spec,
            replace(cfg_a, rng_seed=seed + STABILITY_SEED_OFFSET),
            replace(cfg_b, rng_seed=seed + STABILITY_SEED_OFFSET),
            splits=(split_a, split_b),
        )
        report = analysis.stability(records, dynamics.compute_metrics(alt.history_a, alt.history_b, provenance))
        out.json("reports/stability.json", report.to_dict())
        summary["stability_ssft"] = report.overall.get("ssft")
    if "theory" in cfg.analyses:
        out.json("reports/theory.json", run_theory_suites(cfg.theory, seed)[0])
    out.json("reports/summary.json", summary)
    manifest = out.manifest(run_id)
    log.info("run %s: wrote %d files", run_id, len(manifest["files"]))
    return summary


def _forgotten_by_provenance(records: Sequence[dynamics.MetricRecord]) -> dict[str, float]:
    groups: dict[str, list[bool]] = {}
    for r in records:
        groups.setdefault(r.provenance, []).append(r.ssft is not dynamics.NEVER)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def _write_auc(records: Sequence[dynamics.MetricRecord], out: ArtifactWriter) -> dict[str, float] | None:
    try:
        reports = analysis.all_aucs(records)
    except analysis.DegenerateClassError as exc:
        log.warning("auc skipped: %s", exc)
        return None
    with out.path("reports/auc.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "auc", "positives", "negatives", "ranking_direction"])
        for r in reports.values():
            w.writerow([r.metric_name, repr(r.auc), r.positives, r.negatives, r.ranking_direction])
    return {m: r.auc for m, r in reports.items()}


def _run_removal(
    cfg: RunConfig,
    spec: DatasetSpec,
    split_a: datagen.Split,
    records: Sequence[dynamics.MetricRecord],
    cfg_a: TrainConfig,
    seed: int,
    out: ArtifactWriter,
) -> dict[str, list[float]]:
    fractions = cfg.removal.get("fractions", list(analysis.DEFAULT_FRACTIONS))
    strategies = cfg.removal.get("strategies", list(analysis.STRATEGIES))
    eval_set = datagen.sample_eval_set(spec, int(cfg.removal.get("eval_size", 2000)))
    counts = analysis.fractions_to_counts(fractions, len(split_a))
    curves = {}
    for s in strategies:
        acc = analysis.removal_retrain(
            split_a, records, cfg_a, eval_set, s, counts, d=spec.d, num_classes=spec.num_classes, seed=seed
        )
        curves[s] = analysis.RemovalCurve(s, counts, acc, 1, [0.0] * len(acc), [acc])
    analysis.write_removal_csv(curves, out.path("reports/removal.csv"))
    return {s: c.test_accuracy for s, c in curves.items()}


# -- theory ---------------------------------------------------------------------------

THEORY_DEFAULTS: dict[str, dict[str, Any]] = {
    "implicit_bias": {"instances": 20, "n": 20, "d": 50, "iterations": 100_000},
    "representer": {"runs": 10, "d": 500, "k": 25, "n": 100, "mu": 1.0, "sigma": 1.0, "epochs_a": 5_000, "epochs_b": 500},
    "asymptotic": {"trials": 200, "d": 500, "k": 25, "n": 100, "mu": 1.0, "sigma": 1.0, "complex_lambda": 1.25},
    "window": {"trials": 100, "d": 1000, "k": 25, "n": 100, "mu": 1.0, "sigma": 1.0, "epochs_a": 20_000, "epochs_b": 2_000},
    "assumptions": {"delta": 0.05, "C": 1.0},
}

QUICK_THEORY: dict[str, dict[str, Any]] = {
    "implicit_bias": {"instances": 3, "iterations": 5_000},
    "representer": {"runs": 2, "epochs_a": 500, "epochs_b": 50},
    "asymptotic": {"trials": 10},
    "window": {"trials": 5, "epochs_a": 2_000, "epochs_b": 200},
}


def quick_theory(theory_cfg: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(theory_cfg))
    for suite, shrink in QUICK_THEORY.items():
        out[suite] = {**out.get(suite, {}), **shrink}
    return out


def _merged(theory_cfg: Mapping[str, Any], suite: str) -> dict[str, Any]:
    return {**THEORY_DEFAULTS[suite], **theory_cfg.get(suite, {})}


def run_theory_suites(theory_cfg: Mapping[str, Any], seed: int = 0) -> tuple[dict[str, Any], dict[str, list[dict[str, Any]]]]:
    """All four Monte Carlo suites plus the assumption check.

    Returns the JSON-ready report and the per-trial outcomes of the two
    forgetting suites. Failed assumptions are flagged, not raised.
    """
    for suite, params in theory_cfg.items():
        unknown = set(params) - set(THEORY_DEFAULTS[suite])
        if unknown:
            raise ConfigError(f"theory.{suite}.{sorted(unknown)[0]}", "unknown parameter")
    extra = _merged(theory_cfg, "assumptions")
    report: dict[str, Any] = {}
    log.info("theory: implicit bias")
    report["implicit_bias"] = theory.implicit_bias_suite(seed=seed, **_merged(theory_cfg, "implicit_bias"))
    log.info("theory: representer")
    report["representer"] = theory.representer_suite(seed=seed, **_merged(theory_cfg, "representer"))
    log.info("theory: asymptotic forgetting")
    asym = theory.asymptotic_forgetting_trial(seed=seed, **_merged(theory_cfg, "asymptotic"), **extra)
    report["asymptotic"] = asym.to_dict()
    log.info("theory: intermediate window")
    window = theory.intermediate_window_trial(seed=seed, **_merged(theory_cfg, "window"), **extra)
    report["window"] = window.to_dict()
    flags = {
        suite: {k: report[suite]["assumptions"][k] for k in ("a1_ok", "a2_ok", "a3_ok")} for suite in ("asymptotic", "window")
    }
    report["assumptions_ok"] = flags
    for suite, f in flags.items():
        if not all(f.values()):
            log.warning("theory %s: assumptions not met %s (advisory)", suite, f)
    return report, {"asymptotic": asym.outcomes, "window": window.outcomes}


def cmd_theory(cfg: RunConfig, root: Path, seed: int) -> dict[str, Any]:
    run_id = f"theory-s{seed}-{cfg.config_hash()[:12]}"
    out = ArtifactWriter(root / run_id)
    out.json("config.json", replace(cfg, seeds=(seed,)).to_dict())
    report, raw = run_theory_suites(cfg.theory, seed)
    out.json("reports/theory.json", report)
    for name, rows in raw.items():
        if rows:
            analysis.write_rows_csv(rows, out.path(f"reports/{name}_trials.csv"))
    out.manifest(run_id)
    log.info("theory report written to %s", out.root)
    return report


# -- sweep ------------------------------------------------------------------------------


def _get_path(obj: Mapping[str, Any], dotted: str) -> Any:
    cur: Any = obj
    for part in dotted.split("."):
        if not isinstance(cur, Mapping) or part not in cur:
            raise KeyError(dotted)
        cur = cur[part]
    return cur


def sweep_configs(cfg: RunConfig, axis: str, values: Sequence[str]) -> list[tuple[Any, RunConfig]]:
    """One validated config per axis value; the axis must already exist in the config."""
    base = cfg.to_dict()
    try:
        current = _get_path(base, axis)
    except KeyError:
        raise ConfigError(axis, "sweep axis must name an existing config field") from None
    if isinstance(current, bool) or not isinstance(current, (int, float, str)):
        raise ConfigError(axis, "sweep axis must be a numeric (or enum) field")
    cells = []
    for text in values:
        try:
            value: Any = type(current)(float(text)) if isinstance(current, (int, float)) else text
            if isinstance(current, int) and float(text) != int(float(text)):
                raise ValueError
        except ValueError:
            raise ConfigError(axis, f"value {text!r} does not fit a {type(current).__name__} field") from None
        raw = copy.deepcopy(base)
        parts = axis.split(".")
        target = raw
        for p in parts[:-1]:
            target = target[p]
        target[parts[-1]] = value
        cells.append((value, parse_config(raw)))
    return cells


def _sweep_cell(args: tuple[RunConfig, int, str]) -> dict[str, Any]:
    cfg, seed, root = args
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            summary = execute_run(cfg, seed, Path(root))
        return {"status": "ok", "summary": summary}
    except DivergenceError as exc:
        return {"status": f"diverged: {exc}"}
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
        return {"status": f"error: {type(exc).__name__}: {exc}"}


def cmd_sweep(cfg: RunConfig, axis: str, values: Sequence[str], root: Path, jobs: int = 1) -> list[dict[str, Any]]:
    """Grid over ``values x seeds``; emits an AUC-vs-axis table. Independent of ``jobs``."""
    if "auc" not in cfg.analyses:
        cfg = replace(cfg, analyses=tuple(dict.fromkeys(("metrics", "auc") + cfg.analyses)))
    cells = sweep_configs(cfg, axis, values)
    tasks = [(c, seed, str(root)) for _, c in cells for seed in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]

    rows = []
    it = iter(results)
    for value, c in cells:
        for seed in cfg.seeds:
            res = next(it)
            auc = (res.get("summary") or {}).get("auc") or {}
            rows.append(
                {
                    "axis": axis,
                    "value": value,
                    "seed": seed,
                    "run_id": run_id_for(c, seed),
                    "status": "ok" if res["status"] == "ok" else res["status"],
                    "auc_ssft": auc.get("ssft"),
                    "auc_fslt": auc.get("fslt"),
                    "auc_joint": auc.get("joint"),
                }
            )
            if res["status"] != "ok":
                log.warning("sweep cell %s=%s seed %d failed: %s", axis, value, seed, res["status"])

    sweep_id = "sweep-" + hashlib.sha256(_canonical([cfg.config_hash(), axis, list(values), list(cfg.seeds)]).encode()).hexdigest()[:12]
    out = ArtifactWriter(root / sweep_id)
    analysis.write_rows_csv(rows, out.path("sweep.csv"), list(rows[0].keys()))
    table = []
    for value, _ in cells:
        vals = [r["auc_ssft"] for r in rows if r["value"] == value and r["auc_ssft"] is not None]
        joint = [r["auc_joint"] for r in rows if r["value"] == value and r["auc_joint"] is not None]
        table.append(
            {
                "value": value,
                "auc_ssft_mean": float(np.mean(vals)) if vals else None,
                "auc_joint_mean": float(np.mean(joint)) if joint else None,
                "ok_cells": len(vals),
            }
        )
    analysis.write_rows_csv(table, out.path("sweep_summary.csv"), ["value", "auc_ssft_mean", "auc_joint_mean", "ok_cells"])
    out.manifest(sweep_id)
    log.info("sweep table written to %s", out.root)
    return table


# -- metrics / report ---------------------------------------------------------------------


def cmd_metrics(history_dir: Path, out_path: Path | None = None) -> Path:
    """Recompute the metric table from ``history.csv`` (provenance from ``../data`` if present)."""
    hist_file = history_dir / "history.csv" if history_dir.is_dir() else history_dir
    hists = dynamics.read_history_csv(hist_file)
    if "A" not in hists or "B" not in hists:
        raise ConfigError("history", f"{hist_file} must contain phases A and B")
    provenance: dict[int, str] = {}
    split_file = hist_file.parent.parent / "data" / "split_a.csv"
    if split_file.is_file():
        split = datagen.read_split_csv(split_file, "A")
        provenance = dict(zip(split.example_ids.tolist(), split.provenance.tolist()))
    records = dynamics.compute_metrics(hists["A"], hists["B"], provenance)
    out_path = out_path or hist_file.parent.parent / "metrics" / "metrics.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dynamics.write_metrics_csv(records, out_path)
    log.info("metrics for %d examples written to %s", len(records), out_path)
    return out_path


def cmd_report(run_dir: Path) -> str:
    """Human-readable digest of one artifact after checking its manifest."""
    bad = verify_manifest(run_dir)
    if bad:
        raise OSError(f"manifest mismatch in {run_dir}: {', '.join(bad)}")
    lines = [f"artifact {run_dir.name}: manifest ok"]
    summary_file = run_dir / "reports" / "summary.json"
    if summary_file.is_file():
        s = json.loads(summary_file.read_text())
        lines.append(f"  phase A epochs {s['phase_a_epochs']} (converged {s['phase_a_converged']}), phase B epochs {s['phase_b_epochs']}")
        for k, v in (s.get("forgotten_fraction") or {}).items():
            lines.append(f"  forgotten by end of phase B  {k:<11} {v:.3f}")
        for k, v in (s.get("auc") or {}).items():
            lines.append(f"  AUC {k:<7} {v:.4f}")
        for k, v in (s.get("removal") or {}).items():
            lines.append(f"  removal {k:<20} " + " ".join(f"{a:.3f}" for a in v))
    theory_file = run_dir / "reports" / "theory.json"
    if theory_file.is_file():
        t = json.loads(theory_file.read_text())
        lines.append(f"  implicit bias min cosine {t['implicit_bias']['min_cosine']:.4f}")
        lines.append(f"  representer max error {t['representer']['max_error']:.3g}")
        for key in ("mislabeled_retained", "rare_misclassified", "complex_misclassified"):
            f = t["asymptotic"][key]
            lines.append(f"  asymptotic {key:<22} {f['frequency']:.3f} [{f['wilson_low']:.3f}, {f['wilson_high']:.3f}]")
        f = t["window"]["window_exists"]
        lines.append(f"  window exists {f['frequency']:.3f} [{f['wilson_low']:.3f}, {f['wilson_high']:.3f}]")
    return "\n".join(lines)


# -- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssft", description="Learning/forgetting-time experiments on synthetic mixtures.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", type=Path)
        p.add_argument("--seed", type=int, help="run this seed only (overrides the config's seeds)")
        p.add_argument("--output", help=f"output root (default: config output_dir, ${OUTPUT_ENV}, or ./{DEFAULT_OUTPUT})")
        p.add_argument("--quick", action="store_true", help="tiny epochs and trial counts for smoke runs")

    p_run = sub.add_parser("run", help="generate, train both phases, compute metrics and analyses")
    common(p_run)
    p_run.add_argument("--jobs", type=int, default=1)

    p_sweep = sub.add_parser("sweep", help="grid over one config field")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, help="dotted field path, e.g. phase_b.learning_rate")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--jobs", type=int, default=1)

    p_theory = sub.add_parser("theory", help="Monte Carlo suites for the linear-model analysis")
    common(p_theory)
    p_theory.add_argument("--trials", type=int, help="override every suite's trial count")

    p_metrics = sub.add_parser("metrics", help="recompute metrics from a history directory")
    p_metrics.add_argument("history_dir", type=Path)
    p_metrics.add_argument("--out", type=Path)

    p_report = sub.add_parser("report", help="verify and summarise an artifact directory")
    p_report.add_argument("artifact_dir", type=Path)
    return parser


def _with_trials(cfg: RunConfig, trials: int) -> RunConfig:
    th = copy.deepcopy(cfg.theory)
    for suite, key in (("implicit_bias", "instances"), ("representer", "runs"), ("asymptotic", "trials"), ("window", "trials")):
        th.setdefault(suite, {})[key] = trials
    return replace(cfg, theory=th)


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "metrics":
        cmd_metrics(args.history_dir, args.out)
        return EXIT_OK
    if args.command == "report":
        print(cmd_report(args.artifact_dir))
        return EXIT_OK

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.quick:
        cfg = apply_quick(cfg)
    root = output_root(cfg, args.output)

    if args.command == "run":
        tasks = [(cfg, s, str(root)) for s in cfg.seeds]
        if args.jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(_run_task, tasks))
        else:
            for t in tasks:
                _run_task(t)
    elif args.command == "sweep":
        cmd_sweep(cfg, args.axis, [v.strip() for v in args.values.split(",") if v.strip()], root, args.jobs)
    elif args.command == "theory":
        if args.trials is not None:
            cfg = _with_trials(cfg, args.trials)
        for s in cfg.seeds:
            cmd_theory(cfg, root, s)
    return EXIT_OK


def _run_task(args: tuple[RunConfig, int, str]) -> dict[str, Any]:
    cfg, seed, root = args
    return execute_run(cfg, seed, Path(root))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
