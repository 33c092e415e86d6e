import numpy as np
import pytest

from eqfpn.constraints import WholeSpace
from eqfpn.data import EquilibriumDataset
from eqfpn.model import (AdamState, FormatError, InvalidCacheError, OperatorModel, adam_step, jfb_gradient,
                         load_model, model_backward, model_forward, one_step_loss, save_model, train)
from eqfpn.numerics import RngStream, ShapeError
from eqfpn.solvers import ProjectedGradient, SolverConfig

from oracles import fd_gradient, rel_err


def test_zero_weight_forward():
    m = OperatorModel.matrix_game(3, 6)
    for k in m.params:
        m.params[k][:] = 0.0
    x = RngStream(1).generator.normal(size=(4, 6))
    np.testing.assert_array_equal(m(x, np.ones((4, 3))), x)
    t = OperatorModel.traffic(5, 7)
    for k in t.params:
        t.params[k][:] = 0.0
    np.testing.assert_array_equal(t(np.zeros((2, 7)), np.ones((2, 5))), 0.0)


def _reference_forward(m, x, d):
    p = m.params
    if m.arch == "matrix":
        return x + (x + np.maximum(d @ p["W1"].T, 0)) @ p["W2"].T
    a = np.concatenate([x, d], axis=-1) if m.input_mode == "action_context" else d
    n = m.dims["n_hidden"] + 2
    for i in range(n):
        a = a @ p[f"W{i}"].T + p[f"b{i}"]
        if i < n - 1:
            a = np.maximum(a, 0)
    return a


@pytest.mark.parametrize("make", [
    lambda: OperatorModel.matrix_game(3, 10, RngStream(2)),
    lambda: OperatorModel.traffic(5, 8, hidden_dim=12, rng=RngStream(3)),
    lambda: OperatorModel.traffic(5, 8, hidden_dim=12, n_hidden=2, rng=RngStream(4), input_mode="action_context"),
])
def test_forward_matches_reference(make):
    m = make()
    g = RngStream(5).generator
    x, d = g.normal(size=(6, m.action_dim)), g.uniform(size=(6, m.context_dim))
    np.testing.assert_allclose(m(x, d), _reference_forward(m, x, d), atol=1e-13)


def test_backward_zero_upstream_and_linear_rule():
    m = OperatorModel.traffic(4, 3, hidden_dim=5, rng=RngStream(6))
    x, d = np.zeros((2, 3)), RngStream(7).generator.uniform(size=(2, 4))
    _, cache = model_forward(m, x, d)
    grads, gx = model_backward(m, cache, np.zeros((2, 3)))
    assert all(np.all(g == 0) for g in grads.values()) and np.all(gx == 0)
    u = RngStream(8).generator.normal(size=(2, 3))
    grads, _ = model_backward(m, cache, u)
    last = cache.inputs[-1]
    np.testing.assert_allclose(grads["W2"], u.T @ last, atol=1e-14)


def test_backward_matches_finite_differences():
    m = OperatorModel.traffic(3, 4, hidden_dim=6, rng=RngStream(9), input_mode="action_context")
    g = RngStream(10).generator
    x, d, u = g.normal(size=(3, 4)), g.uniform(size=(3, 3)), g.normal(size=(3, 4))
    _, cache = model_forward(m, x, d)
    grads, gx = model_backward(m, cache, u)
    fd = fd_gradient(m, lambda: float(np.sum(u * m(x, d))))
    for k in grads:
        assert rel_err(grads[k], fd[k]) < 1e-5
    h = 1e-6
    fdx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fdx[idx] = (np.sum(u * m(x + e, d)) - np.sum(u * m(x - e, d))) / (2 * h)
    assert rel_err(gx, fdx) < 1e-5


def test_backward_rejects_foreign_cache():
    a = OperatorModel.traffic(3, 4, hidden_dim=6)
    b = OperatorModel.traffic(3, 4, hidden_dim=6, n_hidden=2)
    _, cache = model_forward(a, np.zeros((1, 4)), np.zeros((1, 3)))
    with pytest.raises(InvalidCacheError):
        model_backward(b, cache, np.ones((1, 4)))


def test_jfb_zero_gradient_at_target():
    m = OperatorModel.matrix_game(2, 4, RngStream(11))
    op = ProjectedGradient(m, WholeSpace(4), 0.5)
    z, d = RngStream(12).generator.normal(size=(3, 4)), RngStream(13).generator.uniform(size=(3, 2))
    target = op.step(z, d)[0]
    loss, grads, _ = jfb_gradient(m, z, d, target, op)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_jfb_unconstrained_equals_one_step_gradient():
    m = OperatorModel.traffic(2, 3, hidden_dim=5, rng=RngStream(14), input_mode="action_context")
    op = ProjectedGradient(m, WholeSpace(3), 1.0)
    g = RngStream(15).generator
    z, d, target = g.normal(size=(4, 3)), g.uniform(size=(4, 2)), g.normal(size=(4, 3))
    loss, grads, out = jfb_gradient(m, z, d, target, op)
    np.testing.assert_allclose(out, z - m(z, d), atol=1e-14)
    assert np.isclose(loss, np.mean((z - m(z, d) - target) ** 2))
    fd = fd_gradient(m, lambda: one_step_loss(m, z, d, target, op))
    for k in grads:
        assert rel_err(grads[k], fd[k]) < 1e-4


def test_adam_zero_gradient_and_first_steps():
    m = OperatorModel.matrix_game(2, 2, RngStream(16))
    before = {k: v.copy() for k, v in m.params.items()}
    st = AdamState(lr=0.1)
    adam_step(st, m, {k: np.zeros_like(v) for k, v in m.params.items()})
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])
    st = AdamState(lr=0.1)
    g = {k: np.full_like(v, 2.0) for k, v in m.params.items()}
    adam_step(st, m, g)
    # step 1 with bias correction moves by lr * g / (|g| + eps)
    step1 = 0.1 * 2.0 / (2.0 + 1e-8)
    for k in before:
        np.testing.assert_allclose(m.params[k], before[k] - step1, atol=1e-15)
    adam_step(st, m, g)
    # constant gradient: bias-corrected moments equal g and g^2, so the second step has the same size
    for k in before:
        np.testing.assert_allclose(m.params[k], before[k] - 2 * step1, atol=1e-12)
    with pytest.raises(ShapeError):
        adam_step(st, m, {"W1": np.zeros(1)})


def test_adam_second_moment_shrinks_step_after_large_gradient():
    m = OperatorModel.matrix_game(1, 1)
    w0 = m.params["W1"].copy()
    st = AdamState(lr=1.0)
    adam_step(st, m, {"W1": np.array([[10.0]]), "W2": np.zeros((1, 1))})
    w1 = m.params["W1"].copy()
    adam_step(st, m, {"W1": np.array([[1.0]]), "W2": np.zeros((1, 1))})
    m1, v1 = 0.1 * 10, 0.001 * 100
    m2, v2 = 0.9 * m1 + 0.1, 0.999 * v1 + 0.001
    want = (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(w1 - m.params["W1"], want, rtol=1e-12)
    assert abs(w1 - m.params["W1"])[0, 0] < abs(w0 - w1)[0, 0]


def _tiny_dataset():
    g = RngStream(17).generator
    d = g.uniform(size=(24, 2))
    x = np.stack([d[:, 0], d[:, 1], d.sum(axis=1)], axis=1)
    return EquilibriumDataset(d, x, 4, {}, {}, np.zeros(24))


def test_train_zero_epochs_is_noop_and_runs_are_deterministic():
    ds = _tiny_dataset()
    m = OperatorModel.traffic(2, 3, hidden_dim=8, rng=RngStream(18))
    before = {k: v.copy() for k, v in m.params.items()}
    cfg = SolverConfig(alpha=0.5, max_depth=10)
    _, hist = train(m, ds, WholeSpace(3), cfg, AdamState(), 0)
    assert len(hist) == 0
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])
    runs = []
    for _ in range(2):
        mm = OperatorModel.traffic(2, 3, hidden_dim=8, rng=RngStream(18))
        _, h = train(mm, ds, WholeSpace(3), cfg, AdamState(lr=1e-2), 3, batch=8, seed=4)
        runs.append((mm, h))
    assert len(runs[0][1]) == 3
    for k in before:
        np.testing.assert_array_equal(runs[0][0].params[k], runs[1][0].params[k])
    assert runs[0][1].column("train_loss") == runs[1][1].column("train_loss")


def test_train_reduces_loss():
    ds = _tiny_dataset()
    m = OperatorModel.traffic(2, 3, hidden_dim=16, rng=RngStream(19))
    _, h = train(m, ds, WholeSpace(3), SolverConfig(alpha=1.0, max_depth=5), AdamState(lr=1e-2), 30, batch=10)
    loss = h.column("train_loss")
    assert loss[-1] < 0.2 * loss[0]


def test_save_load_round_trip(tmp_path):
    m = OperatorModel.traffic(3, 4, hidden_dim=6, n_hidden=2, rng=RngStream(20), input_mode="action_context")
    path = tmp_path / "m.npz"
    save_model(m, path)
    back = load_model(path)
    assert back.arch == m.arch and back.dims == m.dims and back.input_mode == m.input_mode
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])


def test_load_truncated_file(tmp_path):
    m = OperatorModel.matrix_game(2, 4)
    path = tmp_path / "m.npz"
    save_model(m, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(FormatError):
        load_model(path)


def test_load_version_mismatch(tmp_path):
    import json
    m = OperatorModel.matrix_game(2, 4)
    meta = {"format_version": 99, "arch": "matrix", "dims": m.dims, "input_mode": "context",
            "param_names": list(m.params)}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays.update({f"param/{k}": v for k, v in m.params.items()})
    path = tmp_path / "m.npz"
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    with pytest.raises(FormatError, match="99.*1"):
        load_model(path)
