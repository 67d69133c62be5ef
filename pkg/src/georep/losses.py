"""Per-transition loss terms and their analytic gradients.

All functions are batched over rows and return ``(values, grads)`` where
``values`` holds one loss per row and ``grads`` are the derivatives of
``values.sum()`` with respect to each array argument, in argument order.
Distances are squared Euclidean throughout.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .geom import batch_kl, batch_nll

LOG_EPS = 1e-12


def loss_int(z, a, z_next):
    """Equivariance error ``|z' - (z + a)|^2``; grads w.r.t. ``(z, z_next)``."""
    r = z_next - z - a
    return np.sum(r * r, axis=1), (-2.0 * r, 2.0 * r)


def loss_minus(mean, mean_next):
    """Deterministic invariance term ``|mean - mean'|^2``."""
    r = mean - mean_next
    return np.sum(r * r, axis=1), (2.0 * r, -2.0 * r)


def loss_minus_kl(mean, fac, mean_next, fac_next, kl_mode: str = "forward"):
    """KL invariance term between consecutive latent Gaussians.

    ``forward`` is ``KL(z_ext || z_ext')``, ``reverse`` swaps the arguments
    and ``symmetric`` adds both.
    """
    if kl_mode == "forward":
        return batch_kl(mean, fac, mean_next, fac_next)
    if kl_mode == "reverse":
        kl, (g2m, g2f, g1m, g1f) = batch_kl(mean_next, fac_next, mean, fac)
        return kl, (g1m, g1f, g2m, g2f)
    if kl_mode == "symmetric":
        kf, gf = batch_kl(mean, fac, mean_next, fac_next)
        kr, (g2m, g2f, g1m, g1f) = batch_kl(mean_next, fac_next, mean, fac)
        return kf + kr, (gf[0] + g1m, gf[1] + g1f, gf[2] + g2m, gf[3] + g2f)
    raise ValueError(f"unknown kl_mode {kl_mode!r}")


def loss_plus(mean, z, a):
    """Squared distance from ``mean`` to the segment from ``z`` to ``z + a``.

    Degenerate rows (``a == 0``) fall back to the distance to ``z``. The
    closest-point parameter is treated as constant, which is exact for the
    gradient (envelope theorem at the minimizer, constant on the clamp).
    """
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    t = _kernels.closest_params(mean, z, a)
    t = np.where(np.isnan(t), 0.0, t)
    r = mean - (z + t[:, None] * a)
    return np.sum(r * r, axis=1), (2.0 * r, -2.0 * r)


def loss_plus_nll(mean, fac, z, a, t):
    """Monte Carlo segment likelihood: mean over ``t[:, k]`` of ``-log N(z + t a)``.

    ``t`` has shape ``(B, K)`` with entries in [0, 1]; grads are w.r.t.
    ``(mean, fac, z)``.
    """
    k = t.shape[1]
    pts = z[:, None, :] + t[:, :, None] * a[:, None, :]
    nll, (g_mean, g_fac, g_x) = batch_nll(mean[:, None, :], fac[:, None, :, :], pts)
    return nll.mean(axis=1), (g_mean.sum(axis=1) / k, g_fac.sum(axis=1) / k, g_x.sum(axis=1) / k)


def loss_infonce(w, w_next, z_next):
    """Contrastive term for each anchor pair ``(o, o')`` of the batch.

    ``|w - w'|^2 + log sum_j exp(-|w' - w'_j|^2 - |z' - z'_j|^2)``, with the
    sum running over the whole batch including the anchor itself. Grads are
    w.r.t. ``(w, w_next, z_next)``.
    """
    b = w.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs a batch of at least two pairs")
    align = w - w_next
    s = _sq_pdist(w_next) + _sq_pdist(z_next)
    logits = -s
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    tot = ex.sum(axis=1, keepdims=True)
    lse = (mx + np.log(tot))[:, 0]
    values = np.sum(align * align, axis=1) + lse
    p = ex / tot
    sym = p + p.T
    g_w_next = -2.0 * _weighted_diff(sym, w_next)
    g_z_next = -2.0 * _weighted_diff(sym, z_next)
    return values, (2.0 * align, g_w_next - 2.0 * align, g_z_next)


def _sq_pdist(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _weighted_diff(weights, x):
    # sum_j weights[k, j] * (x_k - x_j)
    return weights.sum(axis=1)[:, None] * x - weights @ x


def log_distances(w, w_next):
    """``log(|w - w'|^2 + 1e-12)`` per row, the quantity split into classes."""
    d = np.sum((w - w_next) ** 2, axis=1)
    return np.log(d + LOG_EPS)
