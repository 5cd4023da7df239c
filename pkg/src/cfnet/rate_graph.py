"""Differentiable task values (f, g, l) with a hand-written adjoint.

Per (n, i) the rate is ln|T| - ln|A| over ln 2, with T = sum_j a_j a_j^H + s2 I,
A = T - a_i a_i^H and a_j = H_{n,i}^H (v_{n,j} w_{n,j}). The signal term is
rank one, so ln|T| - ln|A| = ln(1 + q) with q = a_i^H x, x = A^-1 a_i. This
avoids subtracting two log-dets of size M_r ln s2, which would cost about ten
digits at realistic noise powers.

For a real function of a complex vector the gradient G satisfies
dL = Re(G^H dz): dq/da_i = 2x, and dq/da_j = -2 x (x^H a_j) for j != i.
Everything downstream is linear in the gated precoders.
"""
from __future__ import annotations

import numpy as np

from . import linalg, system
from .autodiff import NumericError, Var


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in rate graph node {name!r}")


def rate_graph(H, w_ri: Var, v: Var, cfg: system.SystemConfig) -> Var:
    """Task values stacked as (..., 1 + I + B) = [f, g_1..g_I, l_1..l_B].

    ``w_ri`` carries beamformers as (..., B, N, I, Mt, 2) real/imag pairs;
    ``v`` the gates (..., B, N, I), binary or relaxed.
    """
    wv = w_ri.value[..., 0] + 1j * w_ri.value[..., 1]
    vv = v.value
    u = vv[..., None] * wv
    a = system.received_gains(H, u)
    _check("received_gains", a)
    total, interf = system.covariances(a, cfg.sigma2)
    x, q = system.whitened_gain(a, interf)
    per = np.log1p(q) / system.LN2
    _check("log_det", per)
    rates = np.maximum(per.sum(axis=-2), 0.0)
    power = np.sum(np.abs(u) ** 2, axis=(-3, -2, -1))
    f = -(rates @ cfg.alpha)
    out = np.concatenate([f[..., None], cfg.r_min - rates, power - cfg.p_max], axis=-1)

    n_users = cfg.I

    def vjp(G):
        df = G[..., 0]
        dg = G[..., 1:1 + n_users]
        dl = G[..., 1 + n_users:]
        c = -cfg.alpha * df[..., None] - dg  # upstream on each user's rate
        xa = np.einsum("...nir,...nijr->...nij", np.conj(x), a)  # x^H a_j
        xa = xa * (1.0 - np.eye(n_users)) - np.eye(n_users)
        scale = (2.0 / system.LN2) * c[..., None, :] / (1.0 + q)
        g_a = -(scale[..., None] * xa)[..., None] * x[..., :, None, :]
        g_u = np.einsum("...bnitr,...nijr->...bnjt", H, g_a, optimize=True)
        g_u = g_u + 2.0 * u * dl[..., :, None, None, None]
        g_w = vv[..., None] * g_u
        g_v = np.real(np.sum(np.conj(g_u) * wv, axis=-1))
        _check("adjoint", g_w)
        return np.stack([g_w.real, g_w.imag], axis=-1), g_v

    return w_ri.tape.record(out, (w_ri, v), vjp, name="rate_graph")
