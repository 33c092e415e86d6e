"""Learned game operators F_Θ(x; d), Jacobian-free backpropagation and training.

Two architectures are provided:

``matrix``
    ``F(x; d) = x + W2 (x + relu(W1 d))`` with no biases, used for matrix games.
``traffic``
    A ReLU multilayer perceptron ``d -> 100 -> ... -> action_dim``. With
    ``input_mode="action_context"`` the input is the concatenation ``[x, d]``.

Gradients are computed by hand. Training follows the fixed-point recipe:
solve for the fixed point without tracking gradients, then backpropagate
through one application of the splitting operator (JFB).
"""

from __future__ import annotations

import json
import logging
import time
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, ShapeError
from .solvers import (DivergenceError, IntersectionSplitting, MinkowskiSplitting, ProjectedGradient, SolverConfig,
                      Splitting, ThreeOperator, make_splitting, solve_fixed_point)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Model file is corrupt or incompatible."""


class InvalidCacheError(ValueError):
    """A forward cache does not match the model it is used with."""


# -- architectures ---------------------------------------------------------------

@dataclass
class ForwardCache:
    x: np.ndarray
    d: np.ndarray
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)


class OperatorModel:
    """Weights and architecture of a learned operator.

    ``params`` is an ordered dict of named float64 arrays. ``dims`` holds
    ``context_dim``, ``action_dim``, ``hidden_dim`` and ``n_hidden``.
    """

    def __init__(self, arch: str, dims: dict, params: dict, input_mode: str = "context"):
        if arch not in ("matrix", "traffic"):
            raise ValueError(f"unknown architecture {arch!r}")
        if input_mode not in ("context", "action_context"):
            raise ValueError(f"unknown input mode {input_mode!r}")
        self.arch = arch
        self.dims = {k: int(v) for k, v in dims.items()}
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.input_mode = input_mode
        self._check_shapes()

    # construction ---------------------------------------------------------------

    @classmethod
    def matrix_game(cls, context_dim: int, action_dim: int, rng: RngStream | None = None):
        dims = {"context_dim": context_dim, "action_dim": action_dim, "hidden_dim": action_dim, "n_hidden": 0}
        shapes = {"W1": (action_dim, context_dim), "W2": (action_dim, action_dim)}
        return cls("matrix", dims, _init(shapes, rng))

    @classmethod
    def traffic(cls, context_dim: int, action_dim: int, hidden_dim: int = 100, n_hidden: int | None = None,
                rng: RngStream | None = None, input_mode: str = "context"):
        if n_hidden is None:
            n_hidden = 1 if action_dim <= 300 else 2
        dims = {"context_dim": context_dim, "action_dim": action_dim, "hidden_dim": hidden_dim,
                "n_hidden": n_hidden}
        n_in = context_dim + (action_dim if input_mode == "action_context" else 0)
        shapes = {}
        widths = [n_in] + [hidden_dim] * (n_hidden + 1) + [action_dim]
        for i in range(len(widths) - 1):
            shapes[f"W{i}"] = (widths[i + 1], widths[i])
            shapes[f"b{i}"] = (widths[i + 1],)
        return cls("traffic", dims, _init(shapes, rng), input_mode)

    def expected_shapes(self) -> dict:
        dm = self.dims
        if self.arch == "matrix":
            return {"W1": (dm["action_dim"], dm["context_dim"]), "W2": (dm["action_dim"], dm["action_dim"])}
        n_in = dm["context_dim"] + (dm["action_dim"] if self.input_mode == "action_context" else 0)
        widths = [n_in] + [dm["hidden_dim"]] * (dm["n_hidden"] + 1) + [dm["action_dim"]]
        shapes = {}
        for i in range(len(widths) - 1):
            shapes[f"W{i}"] = (widths[i + 1], widths[i])
            shapes[f"b{i}"] = (widths[i + 1],)
        return shapes

    def _check_shapes(self):
        want = self.expected_shapes()
        if list(want) != list(self.params):
            raise ShapeError(f"parameter names {list(self.params)} do not match {list(want)}")
        for k, shape in want.items():
            if self.params[k].shape != shape:
                raise ShapeError(f"{k} has shape {self.params[k].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"{k} has non-finite entries")

    @property
    def context_dim(self) -> int:
        return self.dims["context_dim"]

    @property
    def action_dim(self) -> int:
        return self.dims["action_dim"]

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "OperatorModel":
        return OperatorModel(self.arch, dict(self.dims), {k: v.copy() for k, v in self.params.items()},
                             self.input_mode)

    # evaluation -------------------------------------------------------------------

    def __call__(self, x, d):
        return model_forward(self, x, d)[0]


def _init(shapes: dict, rng: RngStream | None) -> dict:
    rng = rng if rng is not None else RngStream(0, "model/init")
    out = {}
    for name, shape in shapes.items():
        fan_in = shape[1] if len(shape) == 2 else shapes["W" + name[1:]][1]
        bound = 1.0 / np.sqrt(fan_in)
        out[name] = rng.generator.uniform(-bound, bound, size=shape)
    return out


def model_forward(m: OperatorModel, x, d):
    """Evaluate F_Θ(x; d) on a batch; returns ``(value, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if x.shape[-1] != m.action_dim or d.shape[-1] != m.context_dim:
        raise ShapeError(f"model expects x dim {m.action_dim} and d dim {m.context_dim}, "
                         f"got {x.shape[-1]} and {d.shape[-1]}")
    p = m.params
    cache = ForwardCache(x, d)
    if m.arch == "matrix":
        h = d @ p["W1"].T
        s = x + np.maximum(h, 0.0)
        cache.pre.append(np.broadcast_to(h, s.shape))
        cache.inputs.append(s)
        return x + s @ p["W2"].T, cache
    if m.input_mode == "action_context":
        a = np.concatenate([x, np.broadcast_to(d, x.shape[:-1] + d.shape[-1:])], axis=-1)
    else:
        a = d
    n_layers = m.dims["n_hidden"] + 2
    for i in range(n_layers):
        cache.inputs.append(a)
        h = a @ p[f"W{i}"].T + p[f"b{i}"]
        cache.pre.append(h)
        a = np.maximum(h, 0.0) if i < n_layers - 1 else h
    if a.shape[:-1] != x.shape[:-1]:
        a = np.broadcast_to(a, x.shape).copy()
    return a, cache


def model_backward(m: OperatorModel, cache: ForwardCache, upstream):
    """Reverse-mode gradients of ``sum <upstream, F_Θ(x; d)>``.

    Returns ``(grads, grad_x)``; ``grads`` maps parameter names to arrays and
    sums over the batch.
    """
    u = np.asarray(upstream, dtype=np.float64)
    p = m.params
    if u.shape[-1] != m.action_dim or cache.x.shape[-1] != m.action_dim:
        raise InvalidCacheError("upstream/cache dimensions do not match the model")
    u2 = u.reshape(-1, m.action_dim)
    if m.arch == "matrix":
        if len(cache.pre) != 1 or cache.pre[0].shape[-1] != p["W1"].shape[0]:
            raise InvalidCacheError("cache was not produced by this matrix-game model")
        s = cache.inputs[0].reshape(-1, m.action_dim)
        h = cache.pre[0].reshape(-1, m.action_dim)
        d2 = np.broadcast_to(cache.d, cache.inputs[0].shape[:-1] + cache.d.shape[-1:]).reshape(-1, m.context_dim)
        g_s = u2 @ p["W2"]
        g_h = g_s * (h > 0)
        grads = {"W1": g_h.T @ d2, "W2": u2.T @ s}
        grad_x = (u2 + g_s).reshape(u.shape)
        return grads, grad_x
    n_layers = m.dims["n_hidden"] + 2
    if len(cache.pre) != n_layers:
        raise InvalidCacheError("cache depth does not match the model")
    grads = {}
    g = u2
    for i in reversed(range(n_layers)):
        a_in = cache.inputs[i]
        a_in = a_in.reshape(-1, a_in.shape[-1])
        if a_in.shape[0] != g.shape[0]:
            # context-only input broadcast over a leading axis of x
            reps = g.shape[0] // a_in.shape[0]
            a_in = np.repeat(a_in, reps, axis=0)
        if i < n_layers - 1:
            h = cache.pre[i].reshape(-1, cache.pre[i].shape[-1])
            if h.shape[0] != g.shape[0]:
                h = np.repeat(h, g.shape[0] // h.shape[0], axis=0)
            g = g * (h > 0)
        grads[f"W{i}"] = g.T @ a_in
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0 or m.input_mode == "action_context":
            g = g @ p[f"W{i}"]
    grads = {k: grads[k] for k in p}
    if m.input_mode == "action_context":
        grad_x = g[:, :m.action_dim].reshape(u.shape)
    else:
        grad_x = np.zeros_like(u)
    return grads, grad_x


# -- Jacobian-free backprop --------------------------------------------------------

def jfb_gradient(m: OperatorModel, z_star, d, target, op: Splitting):
    """Loss and parameter gradient through a single application of ``op``.

    ``op`` must be bound to ``m`` (``op.F`` evaluates the model). The output
    is ``op.output(T(z_star))``; the loss is the mean squared error against
    ``target`` (averaged over all entries of the batch). The fixed-point state
    ``z_star`` is treated as a constant, i.e. the inverse Jacobian of the
    fixed-point equation is replaced by the identity.

    Returns ``(loss, grads, out)``.
    """
    z = np.asarray(z_star, dtype=np.float64)
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    target = np.asarray(target, dtype=np.float64)
    alpha = op.alpha

    if isinstance(op, ProjectedGradient):
        Fz, cache = model_forward(m, z, d)
        pre = z - alpha * Fz
        out = op.C.project(pre)
        g_out = _mse_grad(out, target)
        u = -alpha * op.C.jvp(pre, g_out)
    elif isinstance(op, ThreeOperator):
        x = op.C1.project(z)
        Fx, cache = model_forward(m, x, d)
        pre = 2.0 * x - z - alpha * Fx
        znext = z - x + op.C2.project(pre)
        out = op.C1.project(znext)
        g_out = _mse_grad(out, target)
        g_z = op.C1.jvp(znext, g_out)
        u = -alpha * op.C2.jvp(pre, g_z)
    elif isinstance(op, MinkowskiSplitting):
        spec = op.spec
        x = spec.project_affine_blocks(z)
        v = x.sum(axis=-2)
        Fv, cache = model_forward(m, v, d)
        pre = 2.0 * x - z - alpha * Fv[..., None, :]
        znext = z - x + np.maximum(pre, 0.0)
        out = spec.project_affine_blocks(znext).sum(axis=-2)
        g_out = _mse_grad(out, target)
        g_z = spec.affine_jvp_blocks(np.broadcast_to(g_out[..., None, :], znext.shape))
        u = -alpha * np.where(pre >= 0.0, g_z, 0.0).sum(axis=-2)
    elif isinstance(op, IntersectionSplitting):
        spec = op.spec
        K = spec.K
        x = spec.project_blocks(z)
        Fx, cache = model_forward(m, x, d[..., None, :])
        v = (2.0 * x - z - alpha * Fx).mean(axis=-2, keepdims=True)
        znext = z - x + v
        out = spec.sets[0].project(znext[..., 0, :])
        g_out = _mse_grad(out, target)
        g_z1 = spec.sets[0].jvp(znext[..., 0, :], g_out)
        u = np.broadcast_to((-alpha / K) * g_z1[..., None, :], x.shape)
    else:
        raise TypeError(f"unsupported splitting {type(op).__name__}")

    loss = float(np.mean((out - target) ** 2))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss in JFB step")
    grads, _ = model_backward(m, cache, u)
    return loss, grads, out


def _mse_grad(out, target):
    return 2.0 * (out - target) / out.size


def one_step_loss(m: OperatorModel, z_star, d, target, op: Splitting) -> float:
    """Loss of ``op.output(T(z_star))``; the quantity JFB differentiates."""
    znext, _ = op.step(np.asarray(z_star, dtype=np.float64), np.atleast_2d(d))
    out = op.output(znext)
    return float(np.mean((out - np.asarray(target)) ** 2))


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, model: OperatorModel, grads: dict):
    """In-place Adam update with bias correction; returns ``(state, model)``."""
    if set(grads) != set(model.params):
        raise ShapeError("gradient names do not match model parameters")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, w in model.params.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {w.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        w -= state.lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    return state, model


# -- training ---------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_rel_mse: float
    test_trafix: float
    seconds: float
    test_mse: float
    lr: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]


def bind_operator(m: OperatorModel, constraint, alpha: float = 1.0) -> Splitting:
    """Splitting operator for ``constraint`` that evaluates the model as F."""
    return make_splitting(m, constraint, alpha)


def predict(m: OperatorModel, d, constraint, solver: SolverConfig, batch: int = 500) -> np.ndarray:
    """Network inferences N_Θ(d) for a stack of contexts."""
    d = np.atleast_2d(d)
    op = bind_operator(m, constraint, solver.alpha)
    outs = [solve_fixed_point(op, d[i:i + batch], solver).solution for i in range(0, len(d), batch)]
    return np.concatenate(outs) if outs else np.zeros((0, m.action_dim))


def evaluate(m: OperatorModel, d, x_star, constraint, solver: SolverConfig, trafix_eps=5e-3, trafix_tau=1e-3):
    """Mean relative MSE, mean TRAFIX score and plain MSE over a test set."""
    from .metrics import TrafixParams, rel_mse, trafix
    pred = predict(m, d, constraint, solver)
    p = TrafixParams(trafix_eps, trafix_tau)
    rel = float(np.mean([rel_mse(a, b) for a, b in zip(pred, x_star)]))
    tfx = float(np.mean([trafix(a, b, p) for a, b in zip(pred, x_star)]))
    mse = float(np.mean((pred - x_star) ** 2))
    return rel, tfx, mse, pred


def train(m: OperatorModel, dataset, constraint, solver: SolverConfig, opt: AdamState, epochs: int,
          batch: int = 500, seed: int = 0, schedule: str = "constant", target_loss: float | None = None,
          callback=None):
    """Fit ``m`` so that its fixed points match the dataset equilibria.

    Per batch: fixed-point solve without gradients, JFB gradient of the MSE,
    one Adam step. After each epoch the test split is evaluated. With
    ``schedule="plateau"`` the learning rate is halved whenever the test MSE
    fails to improve by 1% for 5 epochs. Training stops early once the test
    MSE drops below ``target_loss``.
    """
    d_tr, x_tr = dataset.train_arrays()
    d_te, x_te = dataset.test_arrays()
    if len(d_tr) == 0:
        raise ValueError("training split is empty")
    if d_tr.shape[1] != m.context_dim or x_tr.shape[1] != m.action_dim:
        raise ShapeError(f"dataset dims ({d_tr.shape[1]}, {x_tr.shape[1]}) do not match model "
                         f"({m.context_dim}, {m.action_dim})")
    history = TrainHistory()
    rng = RngStream(seed, "train/shuffle")
    op = bind_operator(m, constraint, solver.alpha)
    best, stale = np.inf, 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.generator.permutation(len(d_tr))
        losses, weights = [], []
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            trace = solve_fixed_point(op, d_tr[idx], solver)
            loss, grads, _ = jfb_gradient(m, trace.state, d_tr[idx], x_tr[idx], op)
            adam_step(opt, m, grads)
            losses.append(loss)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        if len(d_te):
            rel, tfx, mse, _ = evaluate(m, d_te, x_te, constraint, solver)
        else:
            rel = tfx = mse = float("nan")
        rec = EpochRecord(epoch, train_loss, rel, tfx, time.perf_counter() - t0, mse, opt.lr)
        history.records.append(rec)
        log.info("epoch %d loss %.3e test rel_mse %.3e trafix %.2f mse %.3e (%.1fs)",
                 epoch, train_loss, rel, tfx, mse, rec.seconds)
        if callback is not None:
            callback(rec)
        if target_loss is not None and mse < target_loss:
            break
        if schedule == "plateau":
            if mse < 0.99 * best:
                best, stale = mse, 0
            else:
                stale += 1
                if stale >= 5:
                    opt.lr *= 0.5
                    stale = 0
    return m, history


# -- persistence ------------------------------------------------------------------

def save_model(m: OperatorModel, path) -> None:
    """Write an ``.npz`` container: a JSON ``__meta__`` entry plus one array per weight."""
    meta = {"format_version": FORMAT_VERSION, "arch": m.arch, "dims": m.dims, "input_mode": m.input_mode,
            "param_names": list(m.params)}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    arrays.update({f"param/{k}": np.ascontiguousarray(v) for k, v in m.params.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> OperatorModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            version = meta.get("format_version")
            if version != FORMAT_VERSION:
                raise FormatError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
            params = {k: data[f"param/{k}"].copy() for k in meta["param_names"]}
    except FormatError:
        raise
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from exc
    try:
        return OperatorModel(meta["arch"], meta["dims"], params, meta.get("input_mode", "context"))
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"model file {path} is inconsistent: {exc}") from exc
