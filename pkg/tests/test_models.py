import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosmosfl.errors import EmptyDatasetError, ParameterError, ValidationError
from cosmosfl.models import (
    MLP,
    RegConfig,
    SoftmaxRegression,
    apply_temperature,
    build_model,
    dump_params,
    load_params,
    margin,
    predict_pseudolabels,
    regularizer_rb,
    rescale_probs,
    sample_neighbors,
    softmax,
)

from gradcheck import backends, gradient_errors


@pytest.mark.parametrize("backend", [0, 1])
def test_gradients_match_finite_differences(backend):
    rng = np.random.default_rng(42)
    model = backends(4, 3)[backend]
    worst = gradient_errors(model, rng)
    assert max(worst.values()) <= 1e-4, worst


def test_constant_model_pseudolabels():
    model = SoftmaxRegression(2, 2)
    model.weights[:] = 0.0
    out = predict_pseudolabels(model, np.ones((3, 2)), 1.0)
    assert np.array_equal(out, np.full((3, 2), 0.5))


def test_temperature_zero_is_one_hot():
    row = np.log(np.array([[0.7, 0.2, 0.1]]))
    assert apply_temperature(row, 0).tolist() == [[1.0, 0.0, 0.0]]
    assert rescale_probs(np.array([[0.7, 0.2, 0.1]]), 0).tolist() == [[1.0, 0.0, 0.0]]


def test_temperature_zero_ties_go_to_lowest_index():
    assert apply_temperature(np.array([[1.0, 3.0, 3.0]]), 0).tolist() == [[0.0, 1.0, 0.0]]


def test_temperature_two_closed_form():
    out = apply_temperature(np.array([[2.0, 0.0]]), 2.0)[0]
    e = math.exp(1.0)
    assert out[0] == pytest.approx(e / (e + 1), abs=1e-12)
    assert out[1] == pytest.approx(1 / (e + 1), abs=1e-12)
    assert out[0] == pytest.approx(0.7311, abs=1e-4)


def test_temperature_limits():
    logits = np.array([[0.3, 1.2, -0.4], [2.0, 2.1, 0.0]])
    assert np.array_equal(apply_temperature(logits, 1.0), softmax(logits))
    cold = apply_temperature(logits, 1e-4)
    assert np.allclose(cold, apply_temperature(logits, 0), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    temp=st.sampled_from([0.0, 0.01, 0.5, 1.0, 3.0, 100.0]),
    scale=st.floats(0.0, 50.0),
    backend=st.sampled_from([0, 1]),
)
def test_simplex_closure(seed, temp, scale, backend):
    rng = np.random.default_rng(seed)
    model = backends(5, 4, seed)[backend]
    x = rng.standard_normal((9, 5)) * scale
    out = model.predict_proba(x, temp)
    assert (out >= 0).all()
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_margin_definition():
    assert margin([0.7, 0.2, 0.1]) == pytest.approx(0.5)
    assert margin([0.25] * 4) == 0.0
    assert margin([0.0, 1.0, 0.0]) == 1.0
    with pytest.raises(ParameterError):
        margin([1.0])


def test_regularizer_zero_cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 3))
    const = SoftmaxRegression(3, 2)
    const.weights[:] = 0.0
    const.bias[:] = [0.3, -0.1]
    assert regularizer_rb(const, x, RegConfig(radius=1.0, num_neighbors=3)) == 0.0
    model = SoftmaxRegression(3, 2, rng)
    assert regularizer_rb(model, x, RegConfig(radius=1.0, num_neighbors=0)) == 0.0
    assert regularizer_rb(model, x, RegConfig(radius=0.0, num_neighbors=3)) == 0.0
    assert regularizer_rb(model, x, RegConfig(radius=1.0, num_neighbors=3)) > 0.0


def test_neighbors_stay_in_ball():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 6))
    nb = sample_neighbors(x, RegConfig(radius=0.25, num_neighbors=4), rng)
    dist = np.linalg.norm(nb - x[:, None, :], axis=2)
    assert nb.shape == (50, 4, 6)
    assert (dist <= 0.25 + 1e-12).all() and (dist > 0).all()


def test_regularizer_deterministic_given_seed():
    model = MLP(3, 3, 5, np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((6, 3))
    cfg = RegConfig(radius=0.5, num_neighbors=2, seed=9)
    assert regularizer_rb(model, x, cfg) == regularizer_rb(model, x, cfg)


def test_fit_soft_exact_fixed_point():
    # zero weights give exactly uniform outputs, so every gradient is exactly 0
    x = np.random.default_rng(0).standard_normal((40, 3))
    model = SoftmaxRegression(3, 3)
    model.weights[:] = 0.0
    targets = model.predict_proba(x)
    before = model.state_bytes()
    trace = model.fit_soft(x, targets, lam=0.0, epochs=10, lr=1e-3)
    assert trace[0] == 0.0
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert model.state_bytes() == before


def test_fit_soft_self_targets_stay_near_zero():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((40, 3))
    model = SoftmaxRegression(3, 3, rng)
    targets = model.predict_proba(x)
    trace = model.fit_soft(x, targets, lam=0.0, epochs=10, lr=1e-3)
    assert trace[0] == pytest.approx(0.0, abs=1e-10)
    # roundoff-sized gradients get rescaled by Adam, so only an O(lr^2) bound holds
    assert max(trace) < 1e-5


@pytest.mark.parametrize("backend", [0, 1])
def test_zero_epochs_leave_parameters(backend):
    model = backends()[backend]
    before = model.state_bytes()
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert model.fit_soft(x, softmax(np.zeros((5, 3))), epochs=0) == []
    assert model.fit_hard(x, np.array([0, 1, 2, 0, 1]), epochs=0) == []
    assert model.state_bytes() == before


def test_fit_soft_convex_endpoint_decrease():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((50, 4))
    targets = rng.dirichlet(np.ones(3), 50)
    model = SoftmaxRegression(4, 3, rng)
    initial = model.soft_objective(x, targets, np.ones(50), 0.0, None, with_grad=False)[0]
    trace = model.fit_soft(x, targets, lam=0.0, epochs=200, lr=1e-3)
    assert trace[-1] <= initial
    assert trace[-1] <= trace[0]


def test_fit_soft_validates_inputs():
    model = SoftmaxRegression(2, 2)
    x = np.zeros((3, 2))
    with pytest.raises(ValidationError):
        model.fit_soft(x, np.full((2, 2), 0.5))
    with pytest.raises(ParameterError):
        model.fit_soft(x, np.full((3, 2), 0.5), lam=-1.0)


def test_fit_hard_separable_toy():
    x = np.array([[-2.0, -1.0], [-1.5, -2.0], [-1.0, -1.2], [1.0, 1.5], [2.0, 1.0], [1.2, 2.2]])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = SoftmaxRegression(2, 2, np.random.default_rng(0))
    model.fit_hard(x, y, epochs=500, lr=0.1)
    assert (model.predict_proba(x).argmax(axis=1) == y).all()


def test_fit_hard_mlp_xor():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    model = MLP(2, 2, 8, np.random.default_rng(0))
    model.fit_hard(x, y, epochs=2000, lr=0.01)
    assert (model.predict_proba(x).argmax(axis=1) == y).all()


def test_fit_hard_empty():
    with pytest.raises(EmptyDatasetError):
        SoftmaxRegression(2, 2).fit_hard(np.zeros((0, 2)), np.zeros(0, dtype=int), 1)


def test_regularizer_training_reduces_rb():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((120, 4)) * 2
    targets = rng.dirichlet(np.full(3, 0.3), 120)
    cfg = RegConfig(radius=1.0, num_neighbors=2, seed=0)
    plain = MLP(4, 3, 16, np.random.default_rng(1))
    smooth = MLP(4, 3, 16, np.random.default_rng(1))
    plain.fit_soft(x, targets, lam=0.0, reg=cfg, epochs=60, lr=3e-3, rng=np.random.default_rng(2))
    smooth.fit_soft(x, targets, lam=5.0, reg=cfg, epochs=60, lr=3e-3, rng=np.random.default_rng(2))
    probe = RegConfig(radius=1.0, num_neighbors=2, seed=123)
    assert regularizer_rb(smooth, x, probe) <= regularizer_rb(plain, x, probe)


def test_classification_safety_warning(caplog, monkeypatch):
    model = SoftmaxRegression(1, 2)
    errors = iter([0.1, 0.3])
    monkeypatch.setattr(model, "_train_error", lambda x, y: next(errors))
    with caplog.at_level("WARNING"):
        model.fit_hard(np.array([[-1.0], [1.0]]), np.array([0, 1]), epochs=1)
    assert "increased training error" in caplog.text


def test_no_safety_warning_when_error_drops(caplog):
    x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    model = SoftmaxRegression(1, 2, np.random.default_rng(0))
    with caplog.at_level("WARNING"):
        model.fit_hard(x, y, epochs=300, lr=0.05)
    assert "increased training error" not in caplog.text


@pytest.mark.parametrize("kind", ["softmax", "mlp:7"])
def test_param_dump_roundtrip(kind):
    model = build_model(kind, 3, 4, np.random.default_rng(0))
    blob = dump_params(model)
    other = build_model(kind, 3, 4, np.random.default_rng(1))
    load_params(other, blob)
    for a, b in zip(model.params(), other.params()):
        assert np.array_equal(a.astype(np.float32), b.astype(np.float32))
    count = int.from_bytes(blob[:4], "little")
    assert count == len(model.params())
    assert len(blob) - 4 * model.parameter_count() == 4 + sum(4 + 4 * p.ndim for p in model.params())


def test_build_model_unknown():
    with pytest.raises(ParameterError):
        build_model("cnn", 2, 2, np.random.default_rng(0))
