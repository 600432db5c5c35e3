"""Finite-difference verification of backward rules.

``grad_check`` compares reverse-mode gradients against central differences
``(f(x+eps) - f(x-eps)) / 2 eps`` element by element and returns the worst
relative error.  The registry below holds one self-contained case per
primitive; composites (model blocks, losses) register themselves via
:func:`register` so ``run_suite`` and the ``gradcheck`` CLI cover everything.

Run cases in float64: central differences at eps=1e-5 leave only ~1e-10 of
truncation error there, so the 1e-4 gate actually measures the backward rule.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


def _rel_err(fd: np.ndarray, an: np.ndarray) -> float:
    if fd.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1.0)
    return float(np.max(np.abs(fd - an) / denom))


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = DEFAULT_EPS,
               check_inputs: Optional[Sequence[int]] = None,
               analytic_scale: float = 1.0) -> float:
    """Worst relative error between backward() and central differences.

    ``check_inputs`` restricts the comparison to a subset of inputs (needed
    when ``f`` contains stop_gradient paths that finite differences see but
    the analytic gradient intentionally does not).  ``analytic_scale``
    rescales the analytic gradient before comparing; the gradient-reversal
    case uses -1 to assert the sign flip.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    backward(tape, out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    which = range(len(inputs)) if check_inputs is None else check_inputs
    worst = 0.0
    for i in which:
        t = inputs[i]
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(*inputs).item()
            flat[j] = orig - eps
            fm = f(*inputs).item()
            flat[j] = orig
            fd[j] = (fp - fm) / (2.0 * eps)
        worst = max(worst, _rel_err(fd, analytic_scale * analytic[i].reshape(-1)))
    return worst


# ---------------------------------------------------------------------------
# case registry

_REGISTRY: dict[str, Callable[[np.random.Generator], dict]] = {}


def register(name: str, builder: Callable[[np.random.Generator], dict]) -> None:
    if name in _REGISTRY:
        raise ValueError(f"duplicate gradcheck case {name!r}")
    _REGISTRY[name] = builder


def registered_cases() -> list[str]:
    return sorted(_REGISTRY)


def run_case(name: str, seeds: Sequence[int] = range(10), eps: float = DEFAULT_EPS) -> float:
    builder = _REGISTRY[name]
    worst = 0.0
    for seed in seeds:
        case = builder(np.random.default_rng(seed))
        worst = max(worst, grad_check(case["f"], case["inputs"], eps=eps,
                                      check_inputs=case.get("check_inputs"),
                                      analytic_scale=case.get("analytic_scale", 1.0)))
    return worst


def run_suite(names: Optional[Sequence[str]] = None,
              seeds: Sequence[int] = range(10),
              eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Run every registered case over ``seeds``; returns name -> worst error."""
    return {name: run_case(name, seeds, eps) for name in (names or registered_cases())}


def _t(rng: np.random.Generator, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng: np.random.Generator, *shape, margin=0.2) -> Tensor:
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _scalarize(t: Tensor) -> Tensor:
    # Weighted sum keeps every element load-bearing in the finite differences.
    w = Tensor(np.linspace(0.5, 1.5, t.size).reshape(t.shape))
    return ops.sum_(ops.mul(t, w))


def _register_primitives() -> None:
    register("add_broadcast", lambda rng: {
        "f": lambda a, b: _scalarize(ops.add(a, b)),
        "inputs": [_t(rng, 3, 4), _t(rng, 1, 4)]})
    register("sub", lambda rng: {
        "f": lambda a, b: _scalarize(ops.sub(a, b)),
        "inputs": [_t(rng, 2, 3), _t(rng, 2, 3)]})
    register("mul_broadcast", lambda rng: {
        "f": lambda a, b: _scalarize(ops.mul(a, b)),
        "inputs": [_t(rng, 3, 4), _t(rng, 3, 1)]})
    register("div", lambda rng: {
        "f": lambda a, b: _scalarize(ops.div(a, b)),
        "inputs": [_t(rng, 2, 3), _away_from_zero(rng, 2, 3)]})
    register("neg", lambda rng: {
        "f": lambda a: _scalarize(ops.neg(a)), "inputs": [_t(rng, 5)]})
    register("scale", lambda rng: {
        "f": lambda a: _scalarize(ops.scale(a, 0.37)), "inputs": [_t(rng, 4)]})
    register("sqrt", lambda rng: {
        "f": lambda a: _scalarize(ops.sqrt(a)),
        "inputs": [_t(rng, 4, lo=0.2, hi=2.0)]})
    register("exp", lambda rng: {
        "f": lambda a: _scalarize(ops.exp(a)), "inputs": [_t(rng, 4)]})
    register("log", lambda rng: {
        "f": lambda a: _scalarize(ops.log(a)),
        "inputs": [_t(rng, 4, lo=0.2, hi=2.0)]})
    register("tanh", lambda rng: {
        "f": lambda a: _scalarize(ops.tanh(a)), "inputs": [_t(rng, 4)]})
    register("relu", lambda rng: {
        "f": lambda a: _scalarize(ops.relu(a)),
        "inputs": [_away_from_zero(rng, 3, 3)]})
    register("gelu", lambda rng: {
        "f": lambda a: _scalarize(ops.gelu(a)), "inputs": [_t(rng, 4, lo=-2.0, hi=2.0)]})

    register("reshape", lambda rng: {
        "f": lambda a: _scalarize(ops.reshape(a, (4, 2))), "inputs": [_t(rng, 2, 4)]})
    register("transpose", lambda rng: {
        "f": lambda a: _scalarize(ops.transpose(a, (1, 0))), "inputs": [_t(rng, 2, 3)]})
    register("concat", lambda rng: {
        "f": lambda a, b: _scalarize(ops.concat([a, b], axis=1)),
        "inputs": [_t(rng, 2, 3), _t(rng, 2, 2)]})
    register("narrow", lambda rng: {
        "f": lambda a: _scalarize(ops.narrow(a, 1, 1, 3)), "inputs": [_t(rng, 2, 5)]})
    register("index_select_dup", lambda rng: {
        "f": lambda a: _scalarize(ops.index_select(a, 0, [0, 2, 2, 1])),
        "inputs": [_t(rng, 3, 2)]})
    register("pad1d", lambda rng: {
        "f": lambda a: _scalarize(ops.pad1d(a, 1, 2, 1)), "inputs": [_t(rng, 2, 3)]})
    register("repeat_time", lambda rng: {
        "f": lambda a: _scalarize(ops.repeat_time(a, 3, 1)), "inputs": [_t(rng, 2, 3)]})

    register("sum_axis", lambda rng: {
        "f": lambda a: _scalarize(ops.sum_(a, axis=0)), "inputs": [_t(rng, 3, 4)]})
    register("mean_axis_keepdims", lambda rng: {
        "f": lambda a: _scalarize(ops.mean(a, axis=1, keepdims=True)),
        "inputs": [_t(rng, 3, 4)]})
    register("matmul_2d", lambda rng: {
        "f": lambda a, b: _scalarize(ops.matmul(a, b)),
        "inputs": [_t(rng, 3, 4), _t(rng, 4, 2)]})
    register("matmul_3d", lambda rng: {
        "f": lambda a, b: _scalarize(ops.matmul(a, b)),
        "inputs": [_t(rng, 2, 3, 4), _t(rng, 2, 4, 2)]})

    register("conv1d_basic", lambda rng: {
        "f": lambda x, w, b: _scalarize(ops.conv1d(x, w, b)),
        "inputs": [_t(rng, 3, 9), _t(rng, 2, 3, 3), _t(rng, 2)]})
    register("conv1d_stride_dilation", lambda rng: {
        "f": lambda x, w: _scalarize(ops.conv1d(x, w, stride=2, dilation=2)),
        "inputs": [_t(rng, 2, 12), _t(rng, 3, 2, 3)]})
    register("conv1d_grouped", lambda rng: {
        "f": lambda x, w: _scalarize(ops.conv1d(x, w, groups=2)),
        "inputs": [_t(rng, 4, 8), _t(rng, 4, 2, 3)]})
    register("conv1d_depthwise_k11", lambda rng: {
        "f": lambda x, w, b: _scalarize(ops.conv1d(x, w, b, stride=11, groups=3)),
        "inputs": [_t(rng, 3, 22), _t(rng, 3, 1, 11), _t(rng, 3)]})
    register("avg_pool1d", lambda rng: {
        "f": lambda x: _scalarize(ops.avg_pool1d(x, kernel=4, stride=2)),
        "inputs": [_t(rng, 2, 10)]})

    register("softmax", lambda rng: {
        "f": lambda a: _scalarize(ops.softmax(a, axis=-1)), "inputs": [_t(rng, 3, 5)]})
    register("layer_norm", lambda rng: {
        "f": lambda x, g, b: _scalarize(ops.norm_axis(x, g, b, axis=-1)),
        "inputs": [_t(rng, 3, 6), _t(rng, 6), _t(rng, 6)]})
    register("instance_norm", lambda rng: {
        "f": lambda x, g, b: _scalarize(ops.norm_axis(x, g, b, axis=1)),
        "inputs": [_t(rng, 3, 7), _t(rng, 3, 1), _t(rng, 3, 1)]})

    def _bn_case(training):
        def build(rng):
            run_m = np.zeros(3)
            run_v = np.ones(3)
            return {
                "f": lambda x, g, b: _scalarize(ops.batch_norm1d(
                    x, g, b, run_m, run_v, training=training)),
                "inputs": [_t(rng, 3, 6), _t(rng, 3, lo=0.5, hi=1.5), _t(rng, 3)]}
        return build

    register("batch_norm_train", _bn_case(True))
    register("batch_norm_eval", _bn_case(False))

    register("cosine_similarity", lambda rng: {
        "f": lambda u, v: ops.cosine_similarity(u, v),
        "inputs": [_away_from_zero(rng, 6), _away_from_zero(rng, 6)]})
    register("softmax_cross_entropy", lambda rng: {
        "f": lambda z: ops.softmax_cross_entropy(z, 2),
        "inputs": [_t(rng, 7, lo=-2.0, hi=2.0)]})
    register("cross_entropy_columns", lambda rng: {
        "f": lambda z: ops.cross_entropy_columns(z, [1, 0, 3, 3]),
        "inputs": [_t(rng, 5, 4, lo=-2.0, hi=2.0)]})

    # Gradient accumulation across fan-out: same tensor used twice.
    register("fanout_reuse", lambda rng: {
        "f": lambda a: ops.sum_(ops.add(ops.mul(a, a), ops.scale(a, 0.5))),
        "inputs": [_t(rng, 4)]})

    # grad_reverse: finite differences must match the NEGATED analytic gradient.
    register("grad_reverse_sign_flip", lambda rng: {
        "f": lambda a: _scalarize(ops.grad_reverse(a, 1.0)),
        "inputs": [_t(rng, 5)],
        "analytic_scale": -1.0})

    # stop_gradient: the blocked operand is excluded from the comparison; the
    # live operand must still match.
    register("stop_gradient_partner", lambda rng: {
        "f": lambda a, b: ops.sum_(ops.mul(a, ops.stop_gradient(b))),
        "inputs": [_t(rng, 4), _t(rng, 4)],
        "check_inputs": [0]})


_register_primitives()
