"""Small-instance checks of the linear-model forgetting analysis.

Binary problems only: labels are class indices {0, 1} read as -1/+1, the
model is homogeneous (no bias) and trained with the exponential loss.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
from scipy.optimize import linprog

from .datagen import DatasetSpec, Split, binary_theory_spec, sample_group, sample_splits
from .models import DivergenceError, LinearModel, NonConvergenceWarning, PredictionHistory, TrainConfig, signed, train_phase

log = logging.getLogger(__name__)

MAX_SVM_POINTS = 200
MARGIN_ATOL = 1e-6  # margin within this of 1 counts as an active constraint


class NonSeparableError(ValueError):
    """No homogeneous hyperplane separates the data."""


class ReconstructionError(AssertionError):
    """``w_B(t) - w_B(0)`` disagrees with the accumulated representer sum."""


# -- assumptions ----------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    delta: float
    C: float
    n: int
    d: int
    k: int
    mu: float
    sigma: float
    a1_ok: bool
    a1_slack: float
    a2_ok: bool
    a2_slack: float
    a3_ok: bool
    a3_dim_slack: float
    a3_snr_slack: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def check_assumptions(
    *, n: int, d: int, k: int, mu: float, sigma: float, delta: float, C: float
) -> AssumptionReport:
    """Evaluate the three data assumptions; slack >= 0 means satisfied.

    a1: delta <= 1/C. a2: n >= C log(1/delta).
    a3: d >= C max(n^2 log(n/delta), n k mu^2/sigma^2) and
    k mu^2/sigma^2 >= C log(n/delta).
    """
    if min(n, d, k, delta, C) <= 0:
        raise ValueError("n, d, k, delta and C must be positive")
    snr = k * mu**2 / sigma**2 if sigma > 0 else math.inf
    a1 = 1.0 / C - delta
    a2 = n - C * math.log(1.0 / delta)
    dim = d - C * max(n**2 * math.log(n / delta), n * snr)
    snr_slack = snr - C * math.log(n / delta)
    return AssumptionReport(
        delta=delta,
        C=C,
        n=n,
        d=d,
        k=k,
        mu=mu,
        sigma=sigma,
        a1_ok=a1 >= 0,
        a1_slack=a1,
        a2_ok=a2 >= 0,
        a2_slack=a2,
        a3_ok=dim >= 0 and snr_slack >= 0,
        a3_dim_slack=dim,
        a3_snr_slack=snr_slack,
    )


def spec_assumptions(spec: DatasetSpec, delta: float, C: float) -> AssumptionReport:
    mus = [g.mean for g in spec.common_groups]
    return check_assumptions(n=spec.n, d=spec.d, k=spec.k, mu=min(mus), sigma=spec.sigma, delta=delta, C=C)


# -- hard-margin SVM ----------------------------------------------------------------


@dataclass
class SvmSolution:
    w: np.ndarray
    support_ids: set[int]
    dual_coefficients: dict[int, float]
    kkt_residual: float
    sweeps: int

    def margins(self, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return signed(labels) * (X @ self.w)


def is_separable(X: np.ndarray, labels: np.ndarray) -> bool:
    """LP feasibility of ``y_i w . x_i >= 1`` for all i."""
    A = -(signed(labels)[:, None] * X)
    res = linprog(
        np.zeros(X.shape[1]),
        A_ub=A,
        b_ub=-np.ones(len(labels)),
        bounds=[(None, None)] * X.shape[1],
        method="highs",
    )
    return res.status == 0


def _kkt_residual(alpha: np.ndarray, margins: np.ndarray, active_tol: float) -> float:
    gap = 1.0 - margins
    active = alpha > active_tol
    r = np.where(active, np.abs(gap), np.maximum(gap, 0.0))
    return float(r.max()) if r.size else 0.0


def hard_margin_svm(
    X: np.ndarray,
    labels: np.ndarray,
    *,
    ids: np.ndarray | None = None,
    tol: float = 1e-8,
    max_sweeps: int = 200_000,
    max_points: int = MAX_SVM_POINTS,
    check_separable: bool = True,
) -> SvmSolution:
    """Minimum-norm ``w`` with ``y_i w . x_i >= 1``, by dual coordinate ascent.

    Maximises ``sum(a) - a^T Q a / 2`` over ``a >= 0`` with
    ``Q_ij = y_i y_j x_i . x_j``, one exact coordinate step at a time, until
    the KKT residual drops below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    if n > max_points:
        raise ValueError(f"{n} points exceeds the small-instance bound of {max_points}")
    if check_separable and not is_separable(X, labels):
        raise NonSeparableError("data are not linearly separable through the origin")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    Z = signed(labels)[:, None] * X
    Q = Z @ Z.T
    diag = np.diag(Q).copy()
    if np.any(diag <= 0):
        raise NonSeparableError("a zero feature vector cannot reach margin 1")
    alpha = np.zeros(n)
    Qa = np.zeros(n)  # equals the margins Z @ w
    resid = math.inf
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        for i in range(n):
            new = max(0.0, alpha[i] + (1.0 - Qa[i]) / diag[i])
            step = new - alpha[i]
            if step != 0.0:
                alpha[i] = new
                Qa += step * Q[:, i]
        # recompute from scratch so drift cannot fake convergence
        Qa = Q @ alpha
        resid = _kkt_residual(alpha, Qa, tol)
        if resid < tol:
            break
        if not np.all(np.isfinite(alpha)) or alpha.sum() > 1e12:
            raise NonSeparableError("dual variables diverged")
    else:
        raise NonSeparableError(f"KKT residual {resid:.3g} after {max_sweeps} sweeps")
    w = Z.T @ alpha
    # active constraints; a point can sit on the margin with a zero dual
    support = {int(ids[i]) for i in np.flatnonzero((alpha > tol) | (np.abs(Qa - 1.0) <= MARGIN_ATOL))}
    duals = {int(ids[i]): float(alpha[i]) for i in range(n)}
    return SvmSolution(w, support, duals, resid, sweep)


def projected_gradient_svm(
    X: np.ndarray, labels: np.ndarray, *, tol: float = 1e-10, max_iter: int = 500_000
) -> np.ndarray:
    """Independent solver for the same dual: accelerated projected gradient.

    Returns the primal ``w``. Used to cross-check :func:`hard_margin_svm`.
    """
    Z = signed(labels)[:, None] * np.asarray(X, dtype=float)
    Q = Z @ Z.T
    L = float(np.linalg.eigvalsh(Q)[-1])
    a = np.zeros(len(labels))
    v = a.copy()
    t = 1.0
    for _ in range(max_iter):
        grad = 1.0 - Q @ v
        a_next = np.maximum(0.0, v + grad / L)
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        v = a_next + (t - 1.0) / t_next * (a_next - a)
        # restart momentum when the objective stops improving
        if np.dot(grad, a_next - a) < 0:
            v = a_next.copy()
            t_next = 1.0
        a, t = a_next, t_next
        m = Q @ a
        if _kkt_residual(a, m, tol) < tol:
            break
    return Z.T @ a


# -- implicit bias ------------------------------------------------------------------


@dataclass
class ImplicitBiasResult:
    cosine: float
    svm: SvmSolution
    checkpoints: list[int]
    cosines: list[float]
    residual_norms: list[float]
    w: np.ndarray


def default_learning_rate(X: np.ndarray) -> float:
    """``1 / ||X||_2^2``: the exponential loss at w = 0 has Hessian ``X^T X``."""
    return 1.0 / float(np.linalg.norm(X, 2) ** 2)


def implicit_bias_check(
    X: np.ndarray,
    labels: np.ndarray,
    *,
    eta: float | None = None,
    iterations: int = 100_000,
    w0: np.ndarray | None = None,
    svm: SvmSolution | None = None,
    n_checkpoints: int = 20,
) -> ImplicitBiasResult:
    """Full-batch exponential-loss GD; cosine of ``w(t)`` with the SVM direction.

    Also records ``||w(t) - w_svm log t||`` at log-spaced checkpoints.
    """
    svm = svm if svm is not None else hard_margin_svm(X, labels)
    eta = default_learning_rate(X) if eta is None else eta
    model = LinearModel(np.zeros(X.shape[1]) if w0 is None else np.array(w0, dtype=float))
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    marks = sorted({int(v) for v in np.geomspace(1, max(iterations, 1), n_checkpoints)} | {iterations})
    cps, coss, res = [], [], []
    prev = math.inf
    rising = 0
    y = signed(labels)
    Z = y[:, None] * X
    w = model.weights
    mark_i = 0
    for t in range(1, iterations + 1):
        with np.errstate(over="ignore"):
            coef = np.exp(-(Z @ w))
        loss = float(coef.sum())
        if not math.isfinite(loss):
            raise DivergenceError(f"loss overflowed at iteration {t}")
        rising = rising + 1 if loss > prev else 0
        if rising >= 5:
            raise DivergenceError(f"loss increased for 5 consecutive iterations (eta={eta})")
        prev = loss
        w = w + eta * (coef @ Z)
        if mark_i < len(marks) and t == marks[mark_i]:
            cps.append(t)
            coss.append(_cos(w, svm.w))
            res.append(float(np.linalg.norm(w - svm.w * math.log(t))))
            mark_i += 1
    cos = _cos(w, svm.w)
    return ImplicitBiasResult(cos, svm, cps, coss, res, w)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# -- representer decomposition ---------------------------------------------------


@dataclass
class RepresenterTrace:
    example_ids: np.ndarray
    beta: np.ndarray  # [epochs + 1, n_B], beta(t) per logged epoch
    delta: np.ndarray  # [epochs + 1], nan at t = 0
    max_error: float
    min_beta: float

    @property
    def max_delta(self) -> float:
        vals = self.delta[np.isfinite(self.delta)]
        return float(vals.max()) if vals.size else math.nan


def representer_trace(
    model_b0: LinearModel,
    split_b: Split,
    tracked: Split,
    cfg: TrainConfig,
    *,
    focus_group: int | None = None,
    rtol: float = 1e-6,
) -> tuple[LinearModel, PredictionHistory, RepresenterTrace]:
    """Fine-tune with full-batch exponential-loss GD while accumulating beta.

    Every step adds ``eta * exp(-y_j w . x_j)`` to ``beta_j`` and the identity
    ``w(t) - w(0) = sum_j beta_j y_j x_j`` is checked at each epoch.
    ``focus_group`` selects the S_B subgroup whose beta share is Delta_t.
    """
    if cfg.loss != "exponential" or cfg.optimizer != "gd" or cfg.momentum or cfg.weight_decay:
        raise ValueError("the representer trace needs plain full-batch GD on the exponential loss")
    n = len(split_b)
    Zb = signed(split_b.labels)[:, None] * split_b.features
    w0 = model_b0.weights.copy()
    beta = np.zeros(n)
    betas = [beta.copy()]
    errors = [0.0]
    in_focus = split_b.group_ids == focus_group if focus_group is not None else np.zeros(n, bool)

    def hook(epoch: int, rows: np.ndarray, coef: np.ndarray, model: LinearModel) -> None:
        beta[rows] += cfg.learning_rate * coef
        err = float(np.max(np.abs(model.weights - w0 - beta @ Zb)))
        bound = rtol * (1.0 + float(np.linalg.norm(model.weights)))
        if err > bound:
            raise ReconstructionError(f"epoch {epoch}: representer error {err:.3g} exceeds {bound:.3g}")
        betas.append(beta.copy())
        errors.append(err)

    model, hist = train_phase(model_b0, split_b, tracked, cfg, phase="B", step_hook=hook)
    B = np.array(betas)
    total = B.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = np.where(total > 0, B[:, in_focus].sum(axis=1) / total, np.nan)
    trace = RepresenterTrace(split_b.example_ids.copy(), B, delta, max(errors), float(B.min()))
    return model, hist, trace


def representer_run(
    seed: int,
    *,
    d: int = 500,
    k: int = 25,
    n: int = 100,
    mu: float = 1.0,
    sigma: float = 1.0,
    epochs_a: int = 5_000,
    epochs_b: int = 500,
    rtol: float = 1e-6,
) -> RepresenterTrace:
    """Seeded binary two-split run with beta logged through phase B.

    Delta_t tracks the S_B share of the mislabeled probe's true group.
    """
    spec = window_spec(d=d, k=k, n=n, mu=mu, sigma=sigma, seed=seed)
    split_a, split_b = sample_splits(spec)
    cfg_a, cfg_b = theory_train_configs(split_a.features, split_b.features, epochs_a, epochs_b, seed)
    model0 = LinearModel.init(d, 2, True, seed, cfg_a.init_std)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        model_a, _ = train_phase(model0, split_a, split_a, cfg_a, phase="A")
    mis = np.flatnonzero(split_a.provenance == "mislabeled")
    focus = int(split_a.group_ids[mis[0]]) if mis.size else None
    _, _, trace = representer_trace(model_a, split_b, split_a, cfg_b, focus_group=focus, rtol=rtol)
    return trace


# -- Monte Carlo trials -----------------------------------------------------------


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass
class Frequency:
    name: str
    successes: int
    trials: int

    @property
    def value(self) -> float:
        return self.successes / self.trials if self.trials else math.nan

    def to_dict(self) -> dict[str, Any]:
        lo, hi = wilson_interval(self.successes, self.trials)
        return {"name": self.name, "successes": self.successes, "trials": self.trials, "frequency": self.value, "wilson_low": lo, "wilson_high": hi}


@dataclass
class AsymptoticReport:
    mislabeled_retained: Frequency
    rare_misclassified: Frequency
    complex_misclassified: Frequency
    discarded: int
    assumptions: AssumptionReport
    outcomes: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mislabeled_retained": self.mislabeled_retained.to_dict(),
            "rare_misclassified": self.rare_misclassified.to_dict(),
            "complex_misclassified": self.complex_misclassified.to_dict(),
            "discarded_non_separable": self.discarded,
            "assumptions": self.assumptions.to_dict(),
        }


def asymptotic_forgetting_trial(
    *,
    trials: int = 200,
    d: int = 500,
    k: int = 25,
    n: int = 100,
    mu: float = 1.0,
    sigma: float = 1.0,
    complex_lambda: float = 1.25,
    seed: int = 0,
    delta: float = 0.05,
    C: float = 1.0,
) -> AsymptoticReport:
    """Probe the infinite-time limit: the SVM of a fresh S_B applied to S_A probes.

    Per trial: one mislabeled probe (majority group, flipped label), one
    rare probe (a group absent from S_B) and one correctly labelled probe
    from a complex majority group, scored by the SVM of a complex S_B.
    """
    retained = rare_wrong = complex_wrong = 0
    kept = discarded = 0
    outcomes = []
    for trial in range(trials):
        tseed = seed * 1_000_003 + trial
        spec = binary_theory_spec(d=d, k=k, n=n, mu=mu, sigma=sigma, rng_seed=tseed)
        cspec = binary_theory_spec(
            d=d, k=k, n=n, mu=mu, sigma=sigma, complex_lambda=complex_lambda, complex_majority=True, with_rare=False, rng_seed=tseed
        )
        _, split_b = sample_splits(spec)
        _, csplit_b = sample_splits(cspec)
        try:
            svm = hard_margin_svm(split_b.features, split_b.labels)
            csvm = hard_margin_svm(csplit_b.features, csplit_b.labels)
        except NonSeparableError:
            discarded += 1
            continue
        kept += 1
        majority = spec.groups[0]
        x_m = sample_group(spec, 0, 1, tseed)[0]
        given_m = 1 - majority.label
        x_r = sample_group(spec, 2, 1, tseed)[0]
        x_c = sample_group(cspec, 0, 1, tseed + 7)[0]
        m_kept = bool(signed(np.array([given_m]))[0] * (x_m @ svm.w) > 0)
        r_wrong = not bool(signed(np.array([spec.groups[2].label]))[0] * (x_r @ svm.w) > 0)
        c_wrong = not bool(signed(np.array([cspec.groups[0].label]))[0] * (x_c @ csvm.w) > 0)
        retained += m_kept
        rare_wrong += r_wrong
        complex_wrong += c_wrong
        outcomes.append({"trial": trial, "mislabeled_retained": int(m_kept), "rare_misclassified": int(r_wrong), "complex_misclassified": int(c_wrong)})
    return AsymptoticReport(
        Frequency("mislabeled_retained", retained, kept),
        Frequency("rare_misclassified", rare_wrong, kept),
        Frequency("complex_misclassified", complex_wrong, kept),
        discarded,
        check_assumptions(n=n, d=d, k=k, mu=mu, sigma=sigma, delta=delta, C=C),
        outcomes,
    )


@dataclass
class WindowReport:
    window_exists: Frequency
    mislabeled_first: Frequency
    discarded: int
    assumptions: AssumptionReport
    outcomes: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        starts = [o["window_start"] for o in self.outcomes if o["window_start"] is not None]
        lengths = [o["window_length"] for o in self.outcomes if o["window_start"] is not None]
        return {
            "window_exists": self.window_exists.to_dict(),
            "mislabeled_flips_first": self.mislabeled_first.to_dict(),
            "discarded_non_separable": self.discarded,
            "window_start_median": float(np.median(starts)) if starts else None,
            "window_length_median": float(np.median(lengths)) if lengths else None,
            "assumptions": self.assumptions.to_dict(),
        }


def first_flip(row: np.ndarray) -> int | None:
    """First epoch >= 1 at which a correct-at-handoff example is wrong."""
    bad = np.flatnonzero(~row[1:])
    return int(bad[0]) + 1 if bad.size else None


def window_spec(*, d: int, k: int, n: int, mu: float, sigma: float, seed: int) -> DatasetSpec:
    """Binary spec whose S_A holds exactly one rare and one mislabeled example."""
    base = binary_theory_spec(d=d, k=k, n=n, mu=mu, sigma=sigma, rng_seed=seed)
    return replace(base, mislabel_fraction=1.0 / (n - base.rare_count), mislabel_splits=("A",))


def theory_train_configs(X_a: np.ndarray, X_b: np.ndarray, epochs_a: int, epochs_b: int, seed: int) -> tuple[TrainConfig, TrainConfig]:
    eta = 0.5 * min(default_learning_rate(X_a), default_learning_rate(X_b))
    cfg_a = TrainConfig(loss="exponential", optimizer="gd", learning_rate=eta, max_epochs=epochs_a, convergence_rule="margin", rng_seed=seed)
    cfg_b = TrainConfig(loss="exponential", optimizer="gd", learning_rate=eta, max_epochs=epochs_b, convergence_rule="none", rng_seed=seed)
    return cfg_a, cfg_b


def intermediate_window_trial(
    *,
    trials: int = 100,
    d: int = 1000,
    k: int = 25,
    n: int = 100,
    mu: float = 1.0,
    sigma: float = 1.0,
    epochs_a: int = 20_000,
    epochs_b: int = 2_000,
    seed: int = 0,
    delta: float = 0.05,
    C: float = 1.0,
) -> WindowReport:
    """Look for a phase-B epoch where the mislabeled probe is flipped but the rare one is not."""
    exists = first = both = kept = discarded = 0
    outcomes = []
    for trial in range(trials):
        tseed = seed * 1_000_003 + trial
        spec = window_spec(d=d, k=k, n=n, mu=mu, sigma=sigma, seed=tseed)
        split_a, split_b = sample_splits(spec)
        if not is_separable(split_a.features, split_a.labels):
            discarded += 1
            continue
        kept += 1
        cfg_a, cfg_b = theory_train_configs(split_a.features, split_b.features, epochs_a, epochs_b, tseed)
        probes = split_a.subset(np.flatnonzero(np.isin(split_a.provenance, ["mislabeled", "rare"])))
        model0 = LinearModel.init(d, 2, True, tseed, cfg_a.init_std)
        model_a, hist_a = train_phase(model0, split_a, probes, cfg_a, phase="A")
        _, hist_b = train_phase(model_a, split_b, probes, cfg_b, phase="B")
        im = int(np.flatnonzero(probes.provenance == "mislabeled")[0])
        ir = int(np.flatnonzero(probes.provenance == "rare")[0])
        cm, cr = hist_b.correct[im], hist_b.correct[ir]
        win = np.flatnonzero(~cm[1:] & cr[1:]) + 1
        start = int(win[0]) if win.size else None
        length = _run_length(~cm & cr, start) if start is not None else 0
        fm, fr = first_flip(cm), first_flip(cr)
        if fm is not None and fr is not None:
            both += 1
            first += fm < fr
        exists += start is not None
        outcomes.append(
            {
                "trial": trial,
                "phase_a_epochs": hist_a.epochs,
                "phase_a_converged": hist_a.converged,
                "window_start": start,
                "window_length": length,
                "mislabeled_flip": fm,
                "rare_flip": fr,
            }
        )
    return WindowReport(
        Frequency("window_exists", exists, kept),
        Frequency("mislabeled_flips_first", first, both),
        discarded,
        check_assumptions(n=n, d=d, k=k, mu=mu, sigma=sigma, delta=delta, C=C),
        outcomes,
    )


def _run_length(mask: np.ndarray, start: int) -> int:
    tail = mask[start:]
    stop = np.flatnonzero(~tail)
    return int(stop[0]) if stop.size else int(tail.size)


def random_separable_instance(n: int, d: int, seed: int, *, k: int = 5, mu: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced two-group binary sample (separable whenever n < d)."""
    spec = binary_theory_spec(d=d, k=k, n=n, mu=mu, with_rare=False, rng_seed=seed)
    split, _ = sample_splits(spec)
    return split.features, split.labels


# -- suites --------------------------------------------------------------------


def implicit_bias_suite(
    *, instances: int = 20, n: int = 20, d: int = 50, iterations: int = 100_000, seed: int = 0
) -> dict[str, Any]:
    """GD direction vs the SVM on random separable instances, plus a solver cross-check."""
    cosines, gaps = [], []
    for i in range(instances):
        X, y = random_separable_instance(n, d, seed * 1_000_003 + i)
        svm = hard_margin_svm(X, y)
        gaps.append(float(np.linalg.norm(svm.w - projected_gradient_svm(X, y))))
        cosines.append(implicit_bias_check(X, y, iterations=iterations, svm=svm).cosine)
    return {
        "instances": instances,
        "iterations": iterations,
        "cosines": cosines,
        "min_cosine": min(cosines) if cosines else None,
        "max_solver_gap": max(gaps) if gaps else None,
    }


def representer_suite(*, runs: int = 10, seed: int = 0, **kwargs: Any) -> dict[str, Any]:
    """``representer_run`` over seeds; raises ReconstructionError on any mismatch."""
    traces = [representer_run(seed * 1_000_003 + r, **kwargs) for r in range(runs)]
    return {
        "runs": runs,
        "min_beta": min(t.min_beta for t in traces) if traces else None,
        "max_error": max(t.max_error for t in traces) if traces else None,
        "max_delta": [t.max_delta for t in traces],
    }
