"""Self-supervised task losses and the uncertainty-weighted joint loss.

All kernels are vectorized over numpy arrays; each has a matching derivative
used by the autodiff op in :mod:`cfnet.rate_graph`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SCHEMES = ("S1", "S2", "B1", "B2", "B3")
B2_EPS = 1e-12


@dataclass(frozen=True)
class LossHyper:
    x1: float = -1.0
    x2: float = 0.0
    x3: float = 0.11
    nfl_variant: str = "continuous"

    def __post_init__(self):
        if self.x1 >= 0:
            raise ValueError("x1 must be negative")
        if self.x3 <= 0:
            raise ValueError("x3 must be positive")
        if self.nfl_variant not in ("continuous", "as_printed"):
            raise ValueError(f"unknown NFL variant {self.nfl_variant!r}")


@dataclass
class TaskLossVector:
    L0: np.ndarray  # (...)
    L1: np.ndarray  # (..., I)
    L2: np.ndarray  # (..., B)


def nfl(x, x1=-1.0, variant="continuous"):
    """Negative-fraction-linear loss.

    ``continuous`` uses the C1 linear piece x/x1^2 - 2/x1; ``as_printed`` keeps
    the -1/x1 offset, which jumps at the knot.
    """
    x = np.asarray(x, dtype=float)
    offset = 2.0 / x1 if variant == "continuous" else 1.0 / x1
    lin = x / x1**2 - offset
    # the guard only avoids a divide warning on the unused branch
    frac = -1.0 / np.where(x < x1, x, x1)
    return np.where(x >= x1, lin, frac)


def nfl_grad(x, x1=-1.0, variant="continuous"):
    x = np.asarray(x, dtype=float)
    safe = np.where(x < x1, x, x1)
    return np.where(x >= x1, 1.0 / x1**2, 1.0 / safe**2)


def el(x, x2=0.0):
    """Exponential-linear loss."""
    x = np.asarray(x, dtype=float)
    return np.where(x >= x2, np.exp(x2) * (x + 1.0 - x2), np.exp(np.minimum(x, x2)))


def el_grad(x, x2=0.0):
    x = np.asarray(x, dtype=float)
    return np.where(x >= x2, np.exp(x2), np.exp(np.minimum(x, x2)))


def huber(x, x3=0.11):
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    return np.where(ax >= x3, ax - x3 / 2.0, x**2 / (2.0 * x3))


def huber_grad(x, x3=0.11):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) >= x3, np.sign(x), x / x3)


def _guard(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < B2_EPS
    if np.any(small):
        warnings.warn("Loss Baseline 2 hit a zero task value; denominator clamped", RuntimeWarning,
                      stacklevel=3)
    return np.where(small, np.where(x < 0, -B2_EPS, B2_EPS), x)


def _negfrac(x):
    return -1.0 / _guard(x)


def _negfrac_grad(x):
    return 1.0 / _guard(x) ** 2


def _kernels(scheme: str, hyper: LossHyper):
    """(objective/rate kernel, its derivative, power kernel, its derivative)."""
    hub = (lambda x: huber(x, hyper.x3), lambda x: huber_grad(x, hyper.x3))
    if scheme == "S1":
        return (lambda x: nfl(x, hyper.x1, hyper.nfl_variant),
                lambda x: nfl_grad(x, hyper.x1, hyper.nfl_variant), *hub)
    if scheme == "S2":
        return (lambda x: el(x, hyper.x2), lambda x: el_grad(x, hyper.x2), *hub)
    if scheme == "B1":
        ident = (lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(np.asarray(x, dtype=float)))
        return (*ident, *ident)
    if scheme == "B2":
        return (_negfrac, _negfrac_grad, *hub)
    if scheme == "B3":
        return (np.exp, np.exp, *hub)
    raise ValueError(f"unknown loss scheme {scheme!r}; expected one of {SCHEMES}")


def scheme_losses(f, g, l, scheme: str, hyper: LossHyper = LossHyper()) -> TaskLossVector:
    k_rate, _, k_pow, _ = _kernels(scheme, hyper)
    return TaskLossVector(k_rate(f), k_rate(g), k_pow(l))


def scheme_loss_grads(f, g, l, scheme: str, hyper: LossHyper = LossHyper()) -> TaskLossVector:
    _, d_rate, _, d_pow = _kernels(scheme, hyper)
    return TaskLossVector(d_rate(f), d_rate(g), d_pow(l))


def stack_losses(tl: TaskLossVector) -> np.ndarray:
    """Order (L0, L1_1..I, L2_1..B) along the last axis, matching beta."""
    l0 = np.asarray(tl.L0, dtype=float)[..., None]
    return np.concatenate([l0, np.asarray(tl.L1, float), np.asarray(tl.L2, float)], axis=-1)


def joint_loss(tl: TaskLossVector | np.ndarray, beta, K: int | None = None):
    """sum_k L_k / (K beta_k^2) + ln prod_k beta_k; vectorized over leading axes."""
    losses = stack_losses(tl) if isinstance(tl, TaskLossVector) else np.asarray(tl, float)
    beta = np.asarray(beta, dtype=float)
    K = losses.shape[-1] if K is None else K
    if losses.shape[-1] != K or beta.shape[-1] != K:
        raise ValueError(f"expected {K} task losses and weights")
    if np.any(beta <= 0):
        raise ValueError("loss weights must be positive")
    out = np.sum(losses / (K * beta**2), axis=-1) + np.sum(np.log(beta), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def minibatch_joint_loss(samples, K: int | None = None) -> float:
    samples = list(samples)
    if not samples:
        raise ValueError("empty mini-batch")
    return float(np.mean([joint_loss(tl, beta, K) for tl, beta in samples]))
