"""Downlink rate, covariances and the auxiliary task functions f, g, l.

Shapes (0-based indices throughout):
    H : (B, N, I, Mt, Mr) complex channel
    w : (B, N, I, Mt)     complex beamformers
    v : (B, N, I)         subcarrier-allocation gates (binary for evaluation)
The batched helpers accept any number of leading sample axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg

LN2 = math.log(2.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass
class SystemConfig:
    B: int = 3
    N: int = 4
    I: int = 10
    M_t: int = 4
    M_r: int = 2
    sigma2: float = dbm_to_watts(-26.0)
    p_max: float = dbm_to_watts(40.0)
    r_min: float = 0.02
    alpha: np.ndarray | None = None

    def __post_init__(self):
        for name in ("B", "N", "I", "M_t", "M_r"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sigma2 <= 0 or self.p_max <= 0 or self.r_min < 0:
            raise ValueError("need sigma2 > 0, p_max > 0, r_min >= 0")
        self.alpha = np.ones(self.I) if self.alpha is None else np.asarray(self.alpha, dtype=float)
        if self.alpha.shape != (self.I,) or np.any(self.alpha <= 0):
            raise ValueError("alpha must hold I positive weights")

    @property
    def K(self) -> int:
        return self.I + self.B + 1

    @property
    def channel_shape(self) -> tuple[int, ...]:
        return (self.B, self.N, self.I, self.M_t, self.M_r)

    def replace(self, **kw) -> "SystemConfig":
        d = dict(B=self.B, N=self.N, I=self.I, M_t=self.M_t, M_r=self.M_r, sigma2=self.sigma2,
                 p_max=self.p_max, r_min=self.r_min, alpha=None if "I" in kw else self.alpha)
        d.update(kw)
        return SystemConfig(**d)

    def to_dict(self) -> dict:
        return dict(B=self.B, N=self.N, I=self.I, M_t=self.M_t, M_r=self.M_r, sigma2=self.sigma2,
                    p_max=self.p_max, r_min=self.r_min, alpha=self.alpha.tolist())


@dataclass
class AllocationDecision:
    w: np.ndarray
    v: np.ndarray
    v_relaxed: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.complex128)
        self.v = np.asarray(self.v, dtype=float)
        if not np.all((self.v == 0) | (self.v == 1)):
            raise ValueError("v must be binary")
        if self.v_relaxed is None:
            self.v_relaxed = self.v.copy()
        if not np.all(np.isfinite(self.w)):
            raise ValueError("w must be finite")


@dataclass
class TaskValues:
    f: float
    g: np.ndarray
    l: np.ndarray


def _stacked(H, y: AllocationDecision, n: int, i: int):
    """H_{n,i} (B*Mt, Mr) and the gated effective precoders of every user on subcarrier n."""
    b, _, _, mt, mr = H.shape
    h_ni = H[:, n, i].reshape(b * mt, mr)
    gated = []
    for j in range(H.shape[2]):
        vt = linalg.block_diag_expand(y.v[:, n, j], mt)
        gated.append(vt @ y.w[:, n, j].reshape(b * mt))
    return h_ni, gated


def signal_cov(H, y: AllocationDecision, n: int, i: int) -> np.ndarray:
    h_ni, gated = _stacked(H, y, n, i)
    a = linalg.hermitian(h_ni) @ gated[i][:, None]
    return a @ linalg.hermitian(a)


def interference_cov(H, y: AllocationDecision, n: int, i: int, sigma2: float) -> np.ndarray:
    h_ni, gated = _stacked(H, y, n, i)
    mr = h_ni.shape[1]
    acc = sigma2 * np.eye(mr, dtype=complex)
    for j, u in enumerate(gated):
        if j == i:
            continue
        a = linalg.hermitian(h_ni) @ u[:, None]
        acc = acc + a @ linalg.hermitian(a)
    return acc


def user_rate(H, y: AllocationDecision, i: int, sigma2: float) -> float:
    """sum_n log2 |I + S A^-1|, whitened as |I + L^-1 S L^-H| with A = L L^H."""
    total = 0.0
    for n in range(H.shape[1]):
        s = signal_cov(H, y, n, i)
        a = interference_cov(H, y, n, i, sigma2)
        chol = linalg.hpd_factor(a)
        x = np.linalg.solve(chol, s)
        m = np.linalg.solve(chol, linalg.hermitian(x))
        m = 0.5 * (m + linalg.hermitian(m)) + np.eye(len(m))
        total += linalg.logdet_hpd(m) / LN2
    return max(total, 0.0)


def transmit_power(y: AllocationDecision, b: int) -> float:
    return float(np.sum(np.abs(y.v[b][..., None] * y.w[b]) ** 2))


def task_values(H, y: AllocationDecision, cfg: SystemConfig) -> TaskValues:
    r = np.array([user_rate(H, y, i, cfg.sigma2) for i in range(H.shape[2])])
    p = np.array([transmit_power(y, b) for b in range(H.shape[0])])
    return TaskValues(f=float(-np.sum(cfg.alpha * r)), g=cfg.r_min - r, l=p - cfg.p_max)


# --- batched path -----------------------------------------------------------

def received_gains(H, u):
    """a[..., n, i, j, :] = H_{n,i}^H u_{n,j}; u is the gated precoder (..., B, N, I, Mt)."""
    return np.einsum("...bnitr,...bnjt->...nijr", np.conj(H), u, optimize=True)


def covariances(a, sigma2):
    """Total T = sum_j a a^H + sigma2 I and interference-plus-noise A (j != i), per (n, i)."""
    outer = a[..., :, None] * np.conj(a[..., None, :])  # (..., N, I, J, Mr, Mr)
    n_users = a.shape[-2]
    eye = sigma2 * np.eye(a.shape[-1])
    mask = 1.0 - np.eye(n_users)
    interf = np.einsum("...nijrs,ij->...nirs", outer, mask) + eye
    total = interf + np.einsum("...niirs->...nirs", outer)
    return total, interf


def whitened_gain(a, interf):
    """x = A^-1 a_i and q = a_i^H A^-1 a_i per (n, i); the rate is log2(1 + q)."""
    a_ii = np.einsum("...niir->...nir", a)
    x = np.einsum("...nirs,...nis->...nir", linalg.inverse_hpd(interf), a_ii)
    q = np.maximum(np.real(np.einsum("...nir,...nir->...ni", np.conj(a_ii), x)), 0.0)
    return x, q


def rates_batch(H, w, v, sigma2) -> np.ndarray:
    """Per-user rates (..., I). The signal covariance is rank one, so
    ln|A + S| - ln|A| = ln(1 + a^H A^-1 a), evaluated without cancellation."""
    u = np.asarray(v)[..., None] * w
    a = received_gains(H, u)
    _, interf = covariances(a, sigma2)
    _, q = whitened_gain(a, interf)
    per = np.log1p(q) / LN2
    return np.maximum(np.sum(per, axis=-2), 0.0)


def powers_batch(w, v) -> np.ndarray:
    """Per-SBS transmit power (..., B)."""
    u = np.asarray(v)[..., None] * w
    return np.sum(np.abs(u) ** 2, axis=(-3, -2, -1))


def task_values_batch(H, w, v, cfg: SystemConfig):
    r = rates_batch(H, w, v, cfg.sigma2)
    p = powers_batch(w, v)
    return -(r @ cfg.alpha), cfg.r_min - r, p - cfg.p_max
