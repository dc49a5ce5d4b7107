"""Finite-difference verification of tape gradients.

Central differences with h = 1e-5 in float64. Relative error uses
``|a - n| / max(1, |a|, |n|)`` so near-zero gradients are judged on an
absolute scale instead of blowing up. Random inputs are drawn from [-2, 2]
and nudged off activation kinks before checking.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

H_DEFAULT = 1e-5
OP_TOL = 1e-4
FULL_TOL = 1e-3


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _forward_value(fn, arrays):
    out = fn([T.Tensor(a) for a in arrays])
    return float(out.data.reshape(()))


def check_function(fn, arrays, h=H_DEFAULT):
    """Worst relative error between tape and central-difference gradients.

    ``fn`` maps a list of Tensors to a scalar Tensor and must be
    deterministic; ``arrays`` are the float64 input values.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy()) for a in arrays]
    with T.tape() as tp:
        for t in tensors:
            tp.watch(t)
        loss = fn(tensors)
        tp.backward(loss)
    grads = [t.grad_array() for t in tensors]

    worst = 0.0
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        gflat = grads[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = _forward_value(fn, arrays)
            flat[j] = orig - h
            fm = _forward_value(fn, arrays)
            flat[j] = orig
            worst = max(worst, relative_error(gflat[j], (fp - fm) / (2.0 * h)))
    return worst


def _away_from_kinks(rng, shape, margin=5e-3):
    x = rng.uniform(-2.0, 2.0, size=shape)
    x = np.where(np.abs(x) < margin, x + 2 * margin, x)
    return x


def _weighted(out, rng):
    w = T.const(rng.standard_normal(out.data.shape))
    return T.sum_(T.mul(out, w))


def _check_unary(op, rng, avoid_kinks=False):
    x = _away_from_kinks(rng, (3, 4)) if avoid_kinks else rng.uniform(-2.0, 2.0, (3, 4))
    w = rng.standard_normal((3, 4))
    return check_function(lambda ts: T.sum_(T.mul(op(ts[0]), T.const(w))), [x])


def _op_checks(seed=12345):
    rng = np.random.default_rng(seed)
    checks = {}

    def register(name, fn):
        checks[name] = fn

    register("matmul", lambda: check_function(
        lambda ts: _weighted(T.matmul(ts[0], ts[1]), np.random.default_rng(1)),
        [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))]))
    register("add", lambda: check_function(
        lambda ts: _weighted(T.add(ts[0], ts[1]), np.random.default_rng(2)),
        [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (1, 4))]))
    register("sub", lambda: check_function(
        lambda ts: _weighted(T.sub(ts[0], ts[1]), np.random.default_rng(3)),
        [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))]))
    register("mul", lambda: check_function(
        lambda ts: _weighted(T.mul(ts[0], ts[1]), np.random.default_rng(4)),
        [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 1))]))
    register("div", lambda: check_function(
        lambda ts: _weighted(T.div(ts[0], ts[1]), np.random.default_rng(5)),
        [rng.uniform(-2, 2, (3, 4)), rng.uniform(1.0, 2.0, (3, 4))]))
    register("concat", lambda: check_function(
        lambda ts: _weighted(T.concat([ts[0], ts[1]], axis=1), np.random.default_rng(6)),
        [rng.uniform(-2, 2, (3, 2)), rng.uniform(-2, 2, (3, 3))]))
    register("narrow", lambda: check_function(
        lambda ts: _weighted(T.narrow(ts[0], 1, 1, 2), np.random.default_rng(7)),
        [rng.uniform(-2, 2, (3, 4))]))
    register("gather_rows", lambda: check_function(
        lambda ts: _weighted(T.gather_rows(ts[0], [0, 2, 2, 1]), np.random.default_rng(8)),
        [rng.uniform(-2, 2, (3, 4))]))
    register("segment_sum", lambda: check_function(
        lambda ts: _weighted(T.segment_sum(ts[0], [0, 1, 0, 2], 3), np.random.default_rng(9)),
        [rng.uniform(-2, 2, (4, 3))]))
    register("sum", lambda: check_function(
        lambda ts: _weighted(T.sum_(ts[0], axis=1, keepdims=True), np.random.default_rng(10)),
        [rng.uniform(-2, 2, (3, 4))]))
    register("mean", lambda: check_function(
        lambda ts: _weighted(T.mean(ts[0], axis=0, keepdims=True), np.random.default_rng(11)),
        [rng.uniform(-2, 2, (3, 4))]))
    register("transpose", lambda: check_function(
        lambda ts: _weighted(T.transpose(ts[0]), np.random.default_rng(12)),
        [rng.uniform(-2, 2, (3, 4))]))
    register("reshape", lambda: check_function(
        lambda ts: _weighted(T.reshape(ts[0], (4, 3)), np.random.default_rng(13)),
        [rng.uniform(-2, 2, (3, 4))]))
    register("softmax", lambda: _check_unary(lambda x: T.softmax(x, axis=1), rng))
    register("logsumexp", lambda: check_function(
        lambda ts: _weighted(T.logsumexp(ts[0], axis=1, keepdims=True), np.random.default_rng(14)),
        [rng.uniform(-2, 2, (3, 4))]))
    register("exp", lambda: _check_unary(T.exp, rng))
    register("sigmoid", lambda: _check_unary(T.sigmoid, rng))
    register("tanh", lambda: _check_unary(T.tanh, rng))
    register("relu", lambda: _check_unary(T.relu, rng, avoid_kinks=True))
    register("leaky_relu", lambda: _check_unary(lambda x: T.leaky_relu(x, 0.2), rng, avoid_kinks=True))
    register("gelu", lambda: _check_unary(T.gelu, rng))
    register("softplus", lambda: _check_unary(T.softplus, rng))
    register("dropout", lambda: check_function(
        lambda ts: _weighted(
            T.dropout(ts[0], 0.4, training=True, rng=np.random.default_rng(99)),
            np.random.default_rng(15)),
        [rng.uniform(-2, 2, (4, 5))]))
    register("l1_norm", lambda: check_function(
        lambda ts: T.l1_norm(ts[0]), [_away_from_kinks(rng, (3, 4))]))
    register("frobenius_sq", lambda: check_function(
        lambda ts: T.frobenius_sq(ts[0]), [rng.uniform(-2, 2, (3, 4))]))
    register("layernorm", lambda: check_function(
        lambda ts: _weighted(T.layernorm(ts[0], ts[1], ts[2]), np.random.default_rng(16)),
        [rng.uniform(-2, 2, (3, 6)), rng.uniform(0.5, 1.5, 6), rng.uniform(-0.5, 0.5, 6)]))
    register("mha_core", lambda: check_function(
        lambda ts: _weighted(T.mha_core(ts[0], ts[1], ts[2], 2)[0], np.random.default_rng(17)),
        [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (5, 4)), rng.uniform(-2, 2, (5, 4))]))
    register("affine", lambda: check_function(
        lambda ts: _weighted(T.affine(ts[0], ts[1], ts[2]), np.random.default_rng(18)),
        [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2)), rng.uniform(-2, 2, 2)]))
    register("repeat_cols", lambda: check_function(
        lambda ts: _weighted(T.repeat_cols(ts[0], 3), np.random.default_rng(19)),
        [rng.uniform(-2, 2, (4, 2))]))
    # Deliberately broken gradient so the harness can prove it catches errors.
    register("selftest-bad", lambda: check_function(
        lambda ts: T.sum_(_bad_square(ts[0])), [rng.uniform(0.5, 2.0, (3, 3))]))
    return checks


def _bad_square(x):
    return T._make(x.data * x.data, (x,), lambda g: (g * x.data,), "bad_square")


def op_names():
    return [n for n in _op_checks() if n != "selftest-bad"]


def run_op_check(name, seed=12345):
    """Worst relative error for one named per-operation suite."""
    checks = _op_checks(seed)
    if name not in checks:
        from .errors import ConfigError

        raise ConfigError(f"unknown gradcheck op {name!r}; known: {', '.join(sorted(checks))}")
    return checks[name]()


def run_all_op_checks(seed=12345):
    """Map of op name to worst relative error (self-test op excluded)."""
    checks = _op_checks(seed)
    return {name: checks[name]() for name in checks if name != "selftest-bad"}


def check_model(model, sample, loss_fn, h=H_DEFAULT):
    """Full-model check: every element of every trainable parameter.

    ``loss_fn(model, sample)`` must run a deterministic forward pass and
    return a scalar Tensor. Returns (worst_error, per-parameter dict).
    """
    params = [p for _, p in model.named_parameters() if p.trainable]
    with T.tape() as tp:
        tp.watch_trainable(params)
        loss = loss_fn(model, sample)
        tp.backward(loss)
    analytic = {p.name: p.tensor.grad_array().copy() for p in params}
    T.zero_grads(params)

    worst = 0.0
    report = {}
    for p in params:
        flat = p.tensor.data.reshape(-1)
        gflat = analytic[p.name].reshape(-1)
        p_worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(loss_fn(model, sample).data.reshape(()))
            flat[j] = orig - h
            fm = float(loss_fn(model, sample).data.reshape(()))
            flat[j] = orig
            p_worst = max(p_worst, relative_error(gflat[j], (fp - fm) / (2.0 * h)))
        report[p.name] = p_worst
        worst = max(worst, p_worst)
    return worst, report
