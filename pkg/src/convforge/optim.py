"""Per-parameter first-order optimizers and the step-decay learning-rate schedule.

The five algorithms are the standard published forms:

  sgd       v <- mu*v + g;                  p <- p - lr*v          (classical momentum)
  adadelta  Eg <- rho*Eg + (1-rho)*g^2;     d = sqrt((Ed+eps)/(Eg+eps)) * g
            Ed <- rho*Ed + (1-rho)*d^2;     p <- p - lr*d
  rmsprop   Eg <- rho*Eg + (1-rho)*g^2;     p <- p - lr*g/(sqrt(Eg)+eps)
  adam      m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
            p <- p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
  adamw     adam step, plus decoupled decay p <- p - lr*wd*p (taken at the pre-step p)

Updates are in place; the step counter increments exactly once per call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor
from .errors import ArgumentError, StepError
from .models import ParamStore
from .tensor import Tensor

ALGORITHMS = ("sgd", "adadelta", "rmsprop", "adam", "adamw")

_SLOTS = {
    "sgd": ("momentum",),
    "adadelta": ("sq_grad", "sq_update"),
    "rmsprop": ("sq_grad",),
    "adam": ("m", "v"),
    "adamw": ("m", "v"),
}


@dataclass(frozen=True)
class Hyperparams:
    base_lr: float = 0.001
    momentum: float = 0.9          # sgd
    beta1: float = 0.9             # adam / adamw
    beta2: float = 0.999
    eps: float = 1e-8              # adam / adamw / rmsprop
    rho_rmsprop: float = 0.9
    rho_adadelta: float = 0.95
    eps_adadelta: float = 1e-6
    weight_decay: float = 0.01     # adamw only

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ArgumentError(f"betas must lie in (0, 1): {self.beta1}, {self.beta2}")
        if not (0.0 < self.rho_rmsprop < 1.0 and 0.0 < self.rho_adadelta < 1.0):
            raise ArgumentError(f"rho must lie in (0, 1): {self.rho_rmsprop}, {self.rho_adadelta}")
        if self.eps <= 0 or self.eps_adadelta <= 0:
            raise ArgumentError("eps must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class OptimizerState:
    algorithm: str
    hyper: Hyperparams
    t: int = 0
    slots: dict[str, dict[str, Tensor]] = field(default_factory=dict)


def new_state(algorithm: str, params: ParamStore, hyper: Hyperparams | None = None) -> OptimizerState:
    if algorithm not in ALGORITHMS:
        raise ArgumentError(f"unknown optimizer {algorithm!r}; expected one of {ALGORITHMS}")
    hyper = hyper or Hyperparams()
    slots = {
        slot: {name: tensor.zeros(t.shape, dtype=t.dtype) for name, t in params.items()}
        for slot in _SLOTS[algorithm]
    }
    return OptimizerState(algorithm=algorithm, hyper=hyper, slots=slots)


def step(state: OptimizerState, params: ParamStore, grads: ParamStore, lr: float) -> None:
    if set(params.names()) != set(grads.names()):
        raise ArgumentError("gradient key set does not match parameter key set")
    for name, g in grads.items():
        if not np.all(np.isfinite(g.array)):
            raise StepError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    hp = state.hyper
    for name, p in params.items():
        g = grads[name].array
        w = p.array
        if state.algorithm == "sgd":
            buf = state.slots["momentum"][name].array
            buf *= hp.momentum
            buf += g
            w -= lr * buf
        elif state.algorithm == "adadelta":
            eg = state.slots["sq_grad"][name].array
            ed = state.slots["sq_update"][name].array
            eg *= hp.rho_adadelta
            eg += (1.0 - hp.rho_adadelta) * (g * g)
            d = np.sqrt((ed + hp.eps_adadelta) / (eg + hp.eps_adadelta)) * g
            ed *= hp.rho_adadelta
            ed += (1.0 - hp.rho_adadelta) * (d * d)
            w -= lr * d
        elif state.algorithm == "rmsprop":
            eg = state.slots["sq_grad"][name].array
            eg *= hp.rho_rmsprop
            eg += (1.0 - hp.rho_rmsprop) * (g * g)
            w -= lr * g / (np.sqrt(eg) + hp.eps)
        else:  # adam / adamw share the exact same adaptive step
            m = state.slots["m"][name].array
            v = state.slots["v"][name].array
            m *= hp.beta1
            m += (1.0 - hp.beta1) * g
            v *= hp.beta2
            v += (1.0 - hp.beta2) * (g * g)
            m_hat = m / (1.0 - hp.beta1 ** state.t)
            v_hat = v / (1.0 - hp.beta2 ** state.t)
            if state.algorithm == "adamw" and hp.weight_decay != 0.0:
                decay = (lr * hp.weight_decay) * w
                w -= lr * (m_hat / (np.sqrt(v_hat) + hp.eps))
                w -= decay
            else:
                w -= lr * (m_hat / (np.sqrt(v_hat) + hp.eps))


# -- learning-rate schedule -----------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Multiplicative step decay: lr(e) = base_lr * decay^floor(e / period)."""

    base_lr: float = 0.001
    decay: float = 0.9
    period: int = 20

    def __post_init__(self):
        if self.base_lr <= 0 or not (0.0 < self.decay <= 1.0) or self.period < 1:
            raise ArgumentError(f"invalid schedule {self}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ArgumentError(f"epoch must be >= 0, got {epoch}")
    return schedule.base_lr * schedule.decay ** (epoch // schedule.period)


# -- checkpoint hooks -------------------------------------------------------------

_STATE_PREFIX = "opt"


def state_tensors(state: OptimizerState) -> list[tuple[str, Tensor]]:
    """Slot tensors under stable 'opt:<slot>:<param>' names, in deterministic order."""
    out = []
    for slot in _SLOTS[state.algorithm]:
        for name, t in state.slots[slot].items():
            out.append((f"{_STATE_PREFIX}:{slot}:{name}", t))
    return out


def state_header(state: OptimizerState) -> dict:
    from dataclasses import asdict

    return {"algorithm": state.algorithm, "t": state.t, "hyper": asdict(state.hyper)}


def state_from_parts(header: dict, tensors: dict[str, Tensor], params: ParamStore) -> OptimizerState:
    algorithm = header["algorithm"]
    state = new_state(algorithm, params, Hyperparams(**header["hyper"]))
    state.t = int(header["t"])
    for slot in _SLOTS[algorithm]:
        for name in params.names():
            key = f"{_STATE_PREFIX}:{slot}:{name}"
            if key not in tensors:
                raise ArgumentError(f"optimizer state tensor {key!r} missing")
            if tensors[key].shape != params[name].shape:
                raise ArgumentError(
                    f"slot {key!r} shape {tensors[key].shape} != parameter shape {params[name].shape}"
                )
            state.slots[slot][name] = tensors[key]
    return state


def with_lr(hyper: Hyperparams, base_lr: float, weight_decay: float | None = None) -> Hyperparams:
    if weight_decay is None:
        return replace(hyper, base_lr=base_lr)
    return replace(hyper, base_lr=base_lr, weight_decay=weight_decay)
