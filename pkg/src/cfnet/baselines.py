"""Random / greedy subcarrier allocation with zero-forcing beamforming, and
the closed-form FLOP counts of both schemes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .system import AllocationDecision, SystemConfig

# G G^H with condition number above this is treated as singular
COND_LIMIT = 1e12


@dataclass
class FlopsBreakdown:
    terms: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.terms.values()))


def flops_rsa_zfbf(sys: SystemConfig) -> FlopsBreakdown:
    B, N, I, Mt, Mr = sys.B, sys.N, sys.I, sys.M_t, sys.M_r
    return FlopsBreakdown({
        "channel_products": 6 * B * N * 2 * I * Mt * Mr,
        "pseudo_inverse": 6 * B * N * (2 * Mt + I * Mr) * (I * Mr) ** 2,
    })


def flops_gsa_zfbf(sys: SystemConfig) -> FlopsBreakdown:
    B, N, I, Mt, Mr = sys.B, sys.N, sys.I, sys.M_t, sys.M_r
    return FlopsBreakdown({
        "channel_quality": 6 * B * N * I * 2 * Mt * Mr,
        "zf_products": 6 * B * N * I * (2 * I + 1) * Mt * Mr**2,
        "zf_inverse": 6 * B * N * I * (I**2 + 1) * Mr**3,
    })


def _matched_filter(h: np.ndarray) -> np.ndarray:
    """Dominant left singular vector of an (Mt, Mr) channel."""
    u, _, _ = np.linalg.svd(h, full_matrices=False)
    return u[:, 0]


def zf_precoders(channels: list[np.ndarray], power: float, stats: dict | None = None) -> list[np.ndarray]:
    """Zero-forcing beamformers for users sharing one subcarrier of one SBS.

    ``channels`` holds each user's (Mt, Mr) channel. Stacking the Hermitian
    channels into G, the right pseudo-inverse G^H (G G^H)^-1 nulls every other
    user's receive antennas; each user's beam sums its own Mr columns. Power is
    split equally, ``power`` in total.
    """
    k = len(channels)
    mt, mr = channels[0].shape
    G = np.concatenate([np.conj(h.T) for h in channels], axis=0)  # (k*Mr, Mt)
    gram = G @ np.conj(G.T)
    if k * mr > mt or np.linalg.cond(gram) > COND_LIMIT:
        if stats is not None:
            stats["fallbacks"] = stats.get("fallbacks", 0) + 1
        beams = [_matched_filter(h) for h in channels]
    else:
        W = np.conj(G.T) @ np.linalg.inv(gram)
        beams = [W[:, u * mr:(u + 1) * mr].sum(axis=1) for u in range(k)]
    per_user = power / k
    return [np.sqrt(per_user) * bm / np.linalg.norm(bm) for bm in beams]


def _zfbf(H: np.ndarray, sys: SystemConfig, v: np.ndarray, stats: dict | None) -> AllocationDecision:
    B, N, I, Mt, _ = H.shape
    w = np.zeros((B, N, I, Mt), dtype=complex)
    p_sub = sys.p_max / N
    for b in range(B):
        for n in range(N):
            users = np.flatnonzero(v[b, n])
            if users.size == 0:
                continue
            beams = zf_precoders([H[b, n, i] for i in users], p_sub, stats)
            for i, bm in zip(users, beams):
                w[b, n, i] = bm
    return AllocationDecision(w, v)


def rsa_zfbf(H: np.ndarray, sys: SystemConfig, rng: np.random.Generator,
             stats: dict | None = None) -> AllocationDecision:
    """One uniformly random user per (SBS, subcarrier), then ZF with equal power."""
    B, N, I = H.shape[:3]
    choice = rng.integers(0, I, size=(B, N))
    v = np.zeros((B, N, I))
    np.put_along_axis(v, choice[..., None], 1.0, axis=-1)
    return _zfbf(H, sys, v, stats)


def channel_quality(H: np.ndarray) -> np.ndarray:
    """det(H_{n,i}^b^H H_{n,i}^b) for every (b, n, i)."""
    gram = np.einsum("...tr,...ts->...rs", np.conj(H), H)
    return np.real(np.linalg.det(gram))


def gsa_zfbf(H: np.ndarray, sys: SystemConfig, stats: dict | None = None) -> AllocationDecision:
    """Greedy: strongest user (by channel-quality determinant) per (SBS, subcarrier)."""
    q = channel_quality(H)
    choice = np.argmax(q, axis=-1)
    v = np.zeros(q.shape)
    np.put_along_axis(v, choice[..., None], 1.0, axis=-1)
    return _zfbf(H, sys, v, stats)


def baseline_decisions(Hs: np.ndarray, sys: SystemConfig, kind: str, seed: int = 0, stats: dict | None = None):
    """Stacked (w, v) for every sample in ``Hs`` (K, B, N, I, Mt, Mr)."""
    rng = np.random.default_rng(seed)
    ws, vs = [], []
    for H in Hs:
        if kind == "rsa_zfbf":
            y = rsa_zfbf(H, sys, rng, stats)
        elif kind == "gsa_zfbf":
            y = gsa_zfbf(H, sys, stats)
        else:
            raise ValueError(f"unknown baseline {kind!r}")
        ws.append(y.w)
        vs.append(y.v)
    return np.stack(ws), np.stack(vs)
