import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssft.datagen import Split, synthetic_spec
from ssft.dynamics import NEVER, compute_metrics
from ssft.models import (
    DivergenceError,
    LinearModel,
    NonConvergenceWarning,
    OptimizerState,
    TrainConfig,
    adam_step,
    loss_and_grad,
    retrain,
    sgd_step,
    train_phase,
    two_split_run,
)

from .oracles import numeric_grad


def make_split(X, labels, name="A"):
    X = np.asarray(X, float)
    labels = np.asarray(labels, int)
    n = len(labels)
    return Split(name, np.arange(n), X, labels, labels.copy(), np.zeros(n, int), np.array(["clean"] * n, dtype="<U10"))


def gd(**kw):
    base = dict(loss="exponential", optimizer="gd", learning_rate=0.1, max_epochs=1000, convergence_rule="margin")
    return TrainConfig(**{**base, **kw})


def test_antipodal_pair_reaches_unit_margin():
    data = make_split([[1, 0], [-1, 0]], [1, 0])
    model, hist = train_phase(LinearModel(np.zeros(2)), data, data, gd())
    assert hist.converged
    assert model.margins(data.features, data.labels).min() >= 1.0


def test_exponential_loss_non_increasing_on_separable_data():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((15, 40))
    labels = (rng.random(15) > 0.5).astype(int)
    data = make_split(X, labels)
    eta = 0.5 / np.linalg.norm(X, 2) ** 2
    _, hist = train_phase(LinearModel(np.zeros(40)), data, data, gd(learning_rate=eta, max_epochs=300, convergence_rule="none"))
    assert np.all(np.diff(hist.losses) <= 1e-12)


def test_large_learning_rate_diverges():
    rng = np.random.default_rng(1)
    data = make_split(rng.standard_normal((10, 5)) * 10, [0, 1] * 5)
    with pytest.raises(DivergenceError):
        train_phase(LinearModel(np.zeros(5)), data, data, gd(learning_rate=50.0, convergence_rule="none"))


def test_non_convergence_is_a_warning():
    data = make_split([[1.0, 0.0], [1.0, 0.0]], [1, 0])  # not separable
    with pytest.warns(NonConvergenceWarning):
        _, hist = train_phase(LinearModel(np.zeros(2)), data, data, gd(max_epochs=5))
    assert hist.epochs == 5 and not hist.converged


@pytest.mark.parametrize("loss, C", [("exponential", 2), ("softmax", 4)])
def test_gradient_matches_finite_differences(loss, C):
    rng = np.random.default_rng(2)
    X = rng.standard_normal((6, 5))
    labels = rng.integers(0, C, 6)
    w = 0.3 * rng.standard_normal((5,) if loss == "exponential" else (C, 5))
    _, grad, _ = loss_and_grad(LinearModel(w), X, labels, loss)
    num = numeric_grad(lambda v: loss_and_grad(LinearModel(v), X, labels, loss)[0], w)
    np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-7)


def test_zero_gradient_leaves_parameters():
    cfg = TrainConfig(optimizer="adam")
    m = LinearModel(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(sgd_step(m, np.zeros((2, 3)), cfg).weights, m.weights)
    assert np.array_equal(adam_step(m, np.zeros((2, 3)), cfg, OptimizerState()).weights, m.weights)


def test_sgd_on_one_example_equals_gd_on_singleton():
    x = np.array([[0.5, -1.0, 2.0]])
    data = make_split(x, [1])
    sgd_cfg = TrainConfig(loss="exponential", optimizer="sgd", learning_rate=0.05, batch_size=1, max_epochs=1, convergence_rule="none")
    gd_cfg = TrainConfig(loss="exponential", optimizer="gd", learning_rate=0.05, max_epochs=1, convergence_rule="none")
    w0 = LinearModel(np.array([0.1, 0.2, -0.3]))
    a, _ = train_phase(w0, data, data, sgd_cfg)
    b, _ = train_phase(w0, data, data, gd_cfg)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_adam_constant_gradient_step_tends_to_lr():
    cfg = TrainConfig(optimizer="adam", learning_rate=0.01)
    g = np.array([3.0, -0.2, 1e-3])
    state = OptimizerState()
    m = LinearModel(np.zeros(3))
    for _ in range(2000):
        prev = m.weights
        m = adam_step(m, g, cfg, state)
    step = prev - m.weights
    np.testing.assert_allclose(np.abs(step), cfg.learning_rate * np.abs(g) / (np.abs(g) + cfg.eps), rtol=1e-6)
    assert np.all(np.sign(step) == np.sign(g))


def test_momentum_and_weight_decay_update():
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.5)
    state = OptimizerState()
    m = LinearModel(np.array([1.0, -2.0]))
    g = np.array([1.0, 1.0])
    m1 = sgd_step(m, g, cfg, state)
    v1 = g + 0.5 * m.weights
    np.testing.assert_allclose(m1.weights, m.weights - 0.1 * v1)
    m2 = sgd_step(m1, g, cfg, state)
    np.testing.assert_allclose(m2.weights, m1.weights - 0.1 * (0.9 * v1 + g + 0.5 * m1.weights))


def _small_run(seed=0, **kw_b):
    spec = synthetic_spec(num_classes=4, d=120, k=5, n=40, rng_seed=seed, balanced=True)
    ca = TrainConfig(learning_rate=0.01, batch_size=10, max_epochs=100, rng_seed=seed)
    cb = TrainConfig(**{"learning_rate": 0.01, "batch_size": 10, "max_epochs": 30, "rng_seed": seed, "convergence_rule": "none", **kw_b})
    return two_split_run(spec, ca, cb, track_b=True)


def test_history_shapes_and_handoff_identity():
    run = _small_run()
    ha, hb = run.history_a, run.history_b
    assert ha.correct.shape == (len(run.split_a), ha.epochs + 1)
    assert hb.correct.shape == (len(run.split_a), hb.epochs + 1)
    assert np.array_equal(hb.correct[:, 0], ha.correct[:, -1])
    assert np.all((ha.confidence >= 0) & (ha.confidence <= 1))
    assert run.history_b_on_b.correct.shape[0] == len(run.split_b)
    # column t equals the stored model's predictions at the final epoch
    correct, _ = run.model_b.evaluate(run.split_a.features, run.split_a.labels)
    assert np.array_equal(hb.correct[:, -1], correct)


def test_softmax_sgd_fits_the_first_split():
    run = _small_run()
    assert run.history_a.converged
    assert run.history_a.correct[:, -1].all()


def test_clean_spec_is_mostly_never_forgotten():
    spec = synthetic_spec(mislabel_fraction=0.0, rare_per_class=0, complex_weight=0.0, rng_seed=0, balanced=True)
    ca = TrainConfig(learning_rate=0.01, max_epochs=100)
    cb = TrainConfig(learning_rate=0.01, max_epochs=100, convergence_rule="none")
    run = two_split_run(spec, ca, cb)
    recs = compute_metrics(run.history_a, run.history_b)
    assert np.mean([r.ssft is NEVER for r in recs]) >= 0.95


def test_empty_phase_b():
    run = _small_run(max_epochs=0)
    recs = compute_metrics(run.history_a, run.history_b)
    assert all(r.ssft is NEVER for r in recs)


def test_runs_are_reproducible():
    r1, r2 = _small_run(seed=3), _small_run(seed=3)
    assert r1.model_b.weights.tobytes() == r2.model_b.weights.tobytes()
    assert r1.history_b.confidence.tobytes() == r2.history_b.confidence.tobytes()


def test_adam_phase_runs():
    run = _small_run(optimizer="adam", learning_rate=1e-3)
    assert run.history_b.epochs == 30


def test_config_validation_and_round_trip():
    cfg = TrainConfig(optimizer="adam", learning_rate=0.003)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    for bad in ({"loss": "hinge"}, {"optimizer": "rmsprop"}, {"learning_rate": 0.0}, {"convergence_rule": "x"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_weights_json_round_trip(tmp_path):
    m = LinearModel(np.random.default_rng(0).standard_normal((3, 4)))
    m.save(tmp_path / "w.json")
    assert np.array_equal(LinearModel.load(tmp_path / "w.json").weights, m.weights)


def test_retrain_ignores_tracking():
    spec = synthetic_spec(num_classes=3, d=60, k=4, n=30, balanced=True)
    from ssft.datagen import sample_splits

    a, _ = sample_splits(spec)
    cfg = TrainConfig(max_epochs=50)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        m1 = retrain(a, cfg, spec.d, spec.num_classes)
    m2 = retrain(a, cfg, spec.d, spec.num_classes)
    assert np.array_equal(m1.weights, m2.weights)


@given(st.integers(0, 1000))
def test_binary_confidence_is_logistic_margin(seed):
    rng = np.random.default_rng(seed)
    m = LinearModel(rng.standard_normal(4))
    X = rng.standard_normal((5, 4))
    y = rng.integers(0, 2, 5)
    correct, conf = m.evaluate(X, y)
    z = (2 * y - 1) * (X @ m.weights)
    np.testing.assert_allclose(conf, 1 / (1 + np.exp(-z)))
    assert np.array_equal(correct, z > 0)
