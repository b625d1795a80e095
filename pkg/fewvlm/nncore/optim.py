from dataclasses import dataclass, field

import numpy as np

from fewvlm.nncore.tensor import Tensor
from fewvlm.utils.errors import ConfigError, ShapeMismatch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def warmup_lr(lr: float, step: int, total_steps: int, warmup: float = 0.05) -> float:
    """
    Linear warmup over the first `warmup` fraction of the steps, constant after.

    `step` counts updates starting at 1, so step == warmup * total_steps is the
    first step at full `lr`.
    """
    warmup_steps = warmup * total_steps
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, step / warmup_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    schedule_step: int,
    total_steps: int,
    warmup: float = 0.05,
) -> AdamState:
    """
    One Adam update with linear warmup, applied in place to `params`.

    Parameters
    ----------
    params : dict[str, np.ndarray]
        Parameter arrays, updated in place.
    grads : dict[str, np.ndarray | None]
        Gradients keyed like `params`. Missing or None gradients count as zero.
    state : AdamState
        First and second moment estimates, updated in place.
    lr : float
        Peak learning rate.
    schedule_step : int
        1-based index of this update in the schedule.
    total_steps : int
        Total number of updates of the run, defines the warmup length.
    warmup : float
        Fraction of `total_steps` used for the linear warmup.

    Returns
    -------
    AdamState
        The same state object, for chaining.
    """
    if lr <= 0:
        raise ConfigError(f"lr must be > 0, got {lr=}")
    state.t += 1
    eff_lr = warmup_lr(lr, schedule_step, total_steps, warmup)
    bc1 = 1.0 - BETA1**state.t
    bc2 = 1.0 - BETA2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeMismatch(f"gradient of {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= (eff_lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)).astype(p.dtype)
    return state


class Adam:
    """Adam over a set of named parameter tensors with a warmup schedule"""

    def __init__(self, params: dict[str, Tensor], lr: float, total_steps: int, warmup: float = 0.05):
        self.params = params
        self.lr = lr
        self.total_steps = max(1, total_steps)
        self.warmup = warmup
        self.state = AdamState()

    @property
    def current_lr(self) -> float:
        return warmup_lr(self.lr, self.state.t + 1, self.total_steps, self.warmup)

    def step(self) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            self.lr,
            self.state.t + 1,
            self.total_steps,
            self.warmup,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
