"""Soft-constrained Lagrangian objective and stochastic parameter optimizers.

Two inequality-style constraints (a divergence budget and an entropy
budget) are enforced through damped multiplier dynamics: parameters
descend on the augmented objective while the multipliers ascend on the
constraint violations, clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "LagrangianState",
    "LossBreakdown",
    "lagrangian_value",
    "update_multipliers",
    "loss_weights",
    "AdamOptimizer",
    "SgdOptimizer",
    "LOG_COLUMNS",
    "log_row",
]

LOG_COLUMNS = ("step", "nll", "kl", "entropy", "beta", "lambda_h", "lagrangian")


@dataclass
class LagrangianState:
    """Multipliers, slack targets and dynamics constants.

    ``beta`` weights the divergence constraint, ``lambda_h`` the entropy
    constraint; both are kept nonnegative after every update.  ``xi_kl``
    and ``xi_h`` are the slack targets (nats) the constrained values are
    driven toward.
    """

    beta: float = 0.0
    lambda_h: float = 0.0
    xi_kl: float = 0.0
    xi_h: float = 0.0
    damping: float = 1.0
    multiplier_lr: float = 1e-2

    def __post_init__(self):
        if self.beta < 0 or self.lambda_h < 0:
            raise ValueError("multipliers must be nonnegative")
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if self.multiplier_lr <= 0:
            raise ValueError("multiplier_lr must be positive")


@dataclass
class LossBreakdown:
    """One training step's objective terms, all in nats."""

    nll: float
    kl: float
    entropy: float
    lagrangian: float


def lagrangian_value(
    nll: float, kl: float, entropy: float, state: LagrangianState
) -> LossBreakdown:
    """Evaluate the minimised augmented objective.

    ``nll + beta (kl - xi_kl) + lambda_h (entropy - xi_h)`` plus the
    damping term ``damping/2 [(kl - xi_kl)^2 + (entropy - xi_h)^2]``.
    """
    for name, value in (("nll", nll), ("kl", kl), ("entropy", entropy)):
        if not np.isfinite(value):
            raise ValueError(f"{name} is non-finite: {value}")
    g_kl = kl - state.xi_kl
    g_h = entropy - state.xi_h
    total = (
        nll
        + state.beta * g_kl
        + state.lambda_h * g_h
        + 0.5 * state.damping * (g_kl**2 + g_h**2)
    )
    return LossBreakdown(nll=nll, kl=kl, entropy=entropy, lagrangian=total)


def update_multipliers(
    state: LagrangianState, kl: float, entropy: float
) -> LagrangianState:
    """Ascend the multipliers on the constraint violations.

    ``beta <- max(0, beta + lr (kl - xi_kl))`` and likewise for
    ``lambda_h`` with the entropy violation.  Satisfied constraints are
    fixed points; the clamp keeps both multipliers nonnegative.
    """
    lr = state.multiplier_lr
    return replace(
        state,
        beta=max(0.0, state.beta + lr * (kl - state.xi_kl)),
        lambda_h=max(0.0, state.lambda_h + lr * (entropy - state.xi_h)),
    )


def loss_weights(
    state: LagrangianState, kl: float, entropy: float
) -> tuple[float, float, float]:
    """Per-term gradient weights of the augmented objective.

    Weight 1 on nll, ``max(0, beta + damping (kl - xi_kl))`` on kl and
    ``max(0, lambda_h + damping (entropy - xi_h))`` on entropy.  The
    clamp is the usual augmented-Lagrangian treatment of one-sided
    constraints: while a budget is violated the weight equals the
    derivative of :func:`lagrangian_value`, and once it is comfortably
    satisfied the constraint exerts no pull (the damping term must not
    drag a value *up* toward its budget).
    """
    return (
        1.0,
        max(0.0, state.beta + state.damping * (kl - state.xi_kl)),
        max(0.0, state.lambda_h + state.damping * (entropy - state.xi_h)),
    )


class AdamOptimizer:
    """Adaptive-moment stochastic gradient descent over named parameter arrays.

    Updates are deterministic given the gradient sequence.  Parameters
    whose names are missing from a step's gradient dict are left
    untouched, including their moments, which is how head freezing is
    implemented upstream.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Apply one in-place update to every parameter named in ``grads``."""
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} of shape {p.shape}"
                )
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            t = self.t.get(name, 0) + 1
            self.t[name] = t
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": dict(self.t),
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "AdamOptimizer":
        opt = cls(
            lr=state["lr"], beta1=state["beta1"], beta2=state["beta2"], eps=state["eps"]
        )
        opt.t = dict(state["t"])
        opt.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        opt.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
        return opt


class SgdOptimizer:
    """Plain gradient descent with the same interface as :class:`AdamOptimizer`."""

    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} of shape {p.shape}"
                )
            p -= self.lr * g

    def state_dict(self) -> dict:
        return {"lr": self.lr}

    @classmethod
    def from_state_dict(cls, state: dict) -> "SgdOptimizer":
        return cls(lr=state["lr"])


def log_row(step: int, breakdown: LossBreakdown, state: LagrangianState) -> str:
    """Format one monitoring CSV row (columns as in ``LOG_COLUMNS``)."""
    return (
        f"{step},{breakdown.nll:.10g},{breakdown.kl:.10g},"
        f"{breakdown.entropy:.10g},{state.beta:.10g},{state.lambda_h:.10g},"
        f"{breakdown.lagrangian:.10g}"
    )
