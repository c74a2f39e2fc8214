"""Central finite-difference checks for every layer backward and whole models.

The probe is f64 central differences with step h = 1e-5 per coordinate,
reported as max relative error per gradient tensor where

    rel = |fd - analytic| / max(|fd|, |analytic|, 1e-4)

A coordinate that fails at h = 1e-5 is re-probed at smaller steps before
being declared wrong: ReLU and max-pool are piecewise linear, and a probe
interval that straddles a kink measures the average slope of two pieces
rather than the derivative. Shrinking h shrinks the straddling window; a
genuinely wrong gradient keeps failing at every step size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import models, ops, tensor
from .errors import ArgumentError
from .tensor import Rng, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
REFINE_STEPS = (1e-6, 1e-7)
_REL_FLOOR = 1e-4


@dataclass(frozen=True)
class TensorCheck:
    name: str
    max_rel_err: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    case: str
    tolerance: float
    step: float
    checks: tuple[TensorCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max(c.max_rel_err for c in self.checks)

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.case:<14} max_rel_err={self.max_rel_err:.3e}  [{status}]"


def _rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), _REL_FLOOR)


def check_gradients(loss_fn: Callable[[], float], inputs: Mapping[str, Tensor],
                    analytic: Mapping[str, Tensor], *, step: float = DEFAULT_STEP,
                    tolerance: float = DEFAULT_TOLERANCE, case: str = "") -> GradCheckReport:
    """Probe every coordinate of every named tensor; tensors are mutated and restored in place."""
    if not inputs:
        raise ArgumentError("gradient check needs at least one tensor to probe")
    if set(inputs) != set(analytic):
        raise ArgumentError(f"analytic gradient keys {sorted(analytic)} != probed keys {sorted(inputs)}")
    checks = []
    for name, t in inputs.items():
        if t.size == 0:
            raise ArgumentError(f"degenerate zero-size tensor {name!r} rejected before probing")
        if t.dtype != np.float64:
            raise ArgumentError(f"gradient checking requires f64 tensors, got {t.dtype} for {name!r}")
        an = analytic[name].array.reshape(-1)
        flat = t.array.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            rel = None
            for h in (step,) + REFINE_STEPS:
                original = flat[i]
                flat[i] = original + h
                lp = loss_fn()
                flat[i] = original - h
                lm = loss_fn()
                flat[i] = original
                fd = (lp - lm) / (2.0 * h)
                rel = _rel_err(fd, float(an[i]))
                if rel <= tolerance:
                    break
            worst = max(worst, rel)
        checks.append(TensorCheck(name=name, max_rel_err=worst, passed=worst <= tolerance))
    return GradCheckReport(case=case, tolerance=tolerance, step=step, checks=tuple(checks))


# -- built-in layer cases -------------------------------------------------------


def _random(rng: Rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return tensor.rng_uniform(rng, shape, lo, hi, dtype=np.float64)


def _away_from_zero(t: Tensor, margin: float = 5e-3) -> Tensor:
    # FD probes of relu are only meaningful at |x| > margin >> h
    a = t.array.copy()
    small = np.abs(a) < margin
    a[small] += np.where(a[small] >= 0, margin, -margin)
    return Tensor(a)


def _weighted_sum_case(rng: Rng, forward_backward):
    """Reduce a layer's output to a scalar with fixed random weights R: loss = sum(out * R)."""
    out0, _ = forward_backward(None)
    r = _random(rng, out0.shape)

    def loss() -> float:
        out, _ = forward_backward(None)
        return float((out.array * r.array).sum())

    _, grads = forward_backward(r)
    return loss, grads


def _case_dense(rng: Rng):
    x = _random(rng, (3, 4))
    w = _random(rng, (4, 5))
    b = _random(rng, (5,))

    def run(cotangent):
        out, cache = ops.dense_forward(x, w, b)
        if cotangent is None:
            return out, None
        gx, gw, gb = ops.dense_backward(cache, cotangent)
        return out, {"x": gx, "weight": gw, "bias": gb}

    loss, grads = _weighted_sum_case(rng, run)
    return loss, {"x": x, "weight": w, "bias": b}, grads


def _case_conv(rng: Rng):
    x = _random(rng, (2, 2, 5, 5))
    kernel = _random(rng, (3, 2, 3, 3))
    bias = _random(rng, (3,))
    p = ops.ConvParams(kernel=kernel, bias=bias, stride=1, padding=1)

    def run(cotangent):
        out, cache = ops.conv2d_forward(x, p)
        if cotangent is None:
            return out, None
        gx, gk, gb = ops.conv2d_backward(cache, cotangent)
        return out, {"x": gx, "kernel": gk, "bias": gb}

    loss, grads = _weighted_sum_case(rng, run)
    return loss, {"x": x, "kernel": kernel, "bias": bias}, grads


def _case_conv_strided(rng: Rng):
    x = _random(rng, (2, 3, 6, 6))
    kernel = _random(rng, (4, 3, 2, 2))
    bias = _random(rng, (4,))
    p = ops.ConvParams(kernel=kernel, bias=bias, stride=2, padding=0)

    def run(cotangent):
        out, cache = ops.conv2d_forward(x, p)
        if cotangent is None:
            return out, None
        gx, gk, gb = ops.conv2d_backward(cache, cotangent)
        return out, {"x": gx, "kernel": gk, "bias": gb}

    loss, grads = _weighted_sum_case(rng, run)
    return loss, {"x": x, "kernel": kernel, "bias": bias}, grads


def _case_relu(rng: Rng):
    x = _away_from_zero(_random(rng, (4, 6)))

    def run(cotangent):
        out, cache = ops.relu_forward(x)
        if cotangent is None:
            return out, None
        return out, {"x": ops.relu_backward(cache, cotangent)}

    loss, grads = _weighted_sum_case(rng, run)
    return loss, {"x": x}, grads


def _case_maxpool(rng: Rng):
    x = _random(rng, (1, 2, 6, 6))
    spec = ops.PoolSpec((2, 2), 2)

    def run(cotangent):
        out, cache = ops.maxpool2d_forward(x, spec)
        if cotangent is None:
            return out, None
        return out, {"x": ops.maxpool2d_backward(cache, cotangent)}

    loss, grads = _weighted_sum_case(rng, run)
    return loss, {"x": x}, grads


def _case_softmax_xent(rng: Rng):
    z = _random(rng, (4, 5), -2.0, 2.0)
    labels = np.zeros((4, 5))
    for row in range(4):
        labels[row, rng.randint(0, 5)] = 1.0
    y = Tensor(labels)

    def loss() -> float:
        return ops.cross_entropy_loss(ops.softmax(z), y)

    grads = {"logits": ops.softmax_xent_backward(z, y)}
    return loss, {"logits": z}, grads


def _case_dropout_off(rng: Rng):
    # dropout contributes exactly the identity on the inference path
    x = _random(rng, (3, 8))
    w = _random(rng, (8, 4))
    b = _random(rng, (4,))

    def run(cotangent):
        h1, dcache = ops.dropout_forward(x, 0.5, None, training=False)
        out, cache = ops.dense_forward(h1, w, b)
        if cotangent is None:
            return out, None
        gx, gw, gb = ops.dense_backward(cache, cotangent)
        return out, {"x": ops.dropout_backward(dcache, gx), "weight": gw, "bias": gb}

    loss, grads = _weighted_sum_case(rng, run)
    return loss, {"x": x, "weight": w, "bias": b}, grads


def _model_case(model: models.Model, rng: Rng, batch: int):
    models.init_params(model, rng)
    c, h, w = model.config.input_shape
    x = _random(rng, (batch, c, h, w))
    labels = np.zeros((batch, model.config.num_classes))
    for row in range(batch):
        labels[row, rng.randint(0, model.config.num_classes)] = 1.0
    y = Tensor(labels)

    def loss() -> float:
        return models.forward_loss(model, x, y)

    _, grads = models.loss_and_gradients(model, x, y)
    probes = {"input": x}
    analytic = {"input": _input_gradient(model, x, y)}
    for name, t in model.params.items():
        probes[name] = t
        analytic[name] = grads[name]
    return loss, probes, analytic


def _input_gradient(model: models.Model, x: Tensor, y: Tensor) -> Tensor:
    logits, records = models.forward(model, x)
    g = ops.softmax_xent_backward(logits, y)
    for rec in reversed(records):
        spec = rec.spec
        if spec.kind == "conv":
            g, _, _ = ops.conv2d_backward(rec.cache, g)
        elif spec.kind == "relu":
            g = ops.relu_backward(rec.cache, g)
        elif spec.kind == "maxpool":
            g = ops.maxpool2d_backward(rec.cache, g)
        elif spec.kind == "flatten":
            g = Tensor(g.array.reshape(rec.cache))
        elif spec.kind == "dense":
            g, _, _ = ops.dense_backward(rec.cache, g)
        else:
            g = ops.dropout_backward(rec.cache, g)
    return g


def _case_mlp(rng: Rng):
    with tensor.precision("f64"):
        model = models.build_mlp(2, 16, (8,))
        return _model_case(model, rng, batch=3)


def _case_vgg_mini8(rng: Rng):
    with tensor.precision("f64"):
        model = models.build_vgg_mini(2, 1, 8)
        return _model_case(model, rng, batch=2)


CASES: dict[str, Callable] = {
    "dense": _case_dense,
    "conv": _case_conv,
    "conv_strided": _case_conv_strided,
    "relu": _case_relu,
    "maxpool": _case_maxpool,
    "softmax_xent": _case_softmax_xent,
    "dropout_off": _case_dropout_off,
    "mlp": _case_mlp,
    "vgg_mini8": _case_vgg_mini8,
}


def gradcheck_case(name: str, rng: Rng, tolerance: float = DEFAULT_TOLERANCE) -> GradCheckReport:
    if name not in CASES:
        raise ArgumentError(f"unknown gradcheck case {name!r}; expected one of {sorted(CASES)}")
    with tensor.precision("f64"):
        loss, probes, analytic = CASES[name](rng)
        return check_gradients(loss, probes, analytic, tolerance=tolerance, case=name)


def gradcheck_suite(rng: Rng, tolerance: float = DEFAULT_TOLERANCE,
                    cases: tuple[str, ...] | None = None) -> list[GradCheckReport]:
    return [gradcheck_case(name, rng.child(i), tolerance)
            for i, name in enumerate(cases or tuple(CASES))]
