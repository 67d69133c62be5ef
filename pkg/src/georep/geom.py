"""Euclidean geometry of open segments and Gaussian algebra on small latents.

Points are plain float arrays of length ``n`` (2 or 3). An open segment is
``start + t * delta`` for ``0 < t < 1``; the distance functions use the closed
hull since the infimum over an open set equals the one over its closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

LOG_2PI = math.log(2.0 * math.pi)


class DegenerateSegmentError(ValueError):
    """Raised when an operation needs a segment with nonzero displacement."""


@dataclass(frozen=True)
class OpenSegment:
    start: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        start = np.asarray(self.start, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        if start.shape != delta.shape or start.ndim != 1:
            raise ValueError(f"segment start {start.shape} and delta {delta.shape} must be equal 1-D shapes")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "delta", delta)

    @property
    def degenerate(self) -> bool:
        # squared length, so displacements that underflow count as zero
        return float(self.delta @ self.delta) == 0.0

    def point(self, t: float) -> np.ndarray:
        return self.start + t * self.delta


@dataclass(frozen=True)
class Body:
    """Rigid body shape of the object: ``point``, ``disc`` or ``box``.

    ``radius`` applies to discs (balls in 3-D); ``half_extents`` to boxes,
    whose orientation is carried by the world state rather than the shape.
    """

    kind: str = "disc"
    radius: float = 0.06
    half_extents: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("point", "disc", "box"):
            raise ValueError(f"unknown body kind {self.kind!r}")
        if self.kind == "disc" and not self.radius > 0:
            raise ValueError("disc radius must be positive")
        if self.kind == "box":
            if not self.half_extents or min(self.half_extents) <= 0:
                raise ValueError("box half_extents must be positive")
            object.__setattr__(self, "half_extents", tuple(float(h) for h in self.half_extents))

    def extent(self) -> float:
        """Radius of the smallest ball around the center containing the body."""
        if self.kind == "disc":
            return float(self.radius)
        if self.kind == "box":
            return float(np.linalg.norm(self.half_extents))
        return 0.0


def closest_param(p, seg: OpenSegment) -> float:
    """Parameter in [0, 1] of the point of the closed segment nearest to ``p``."""
    if seg.degenerate:
        raise DegenerateSegmentError("segment has zero displacement")
    p = np.asarray(p, dtype=np.float64)
    return float(_kernels.closest_params(p[None], seg.start[None], seg.delta[None])[0])


def dist_point_segment(p, seg: OpenSegment) -> float:
    """Squared Euclidean distance from ``p`` to the segment (to ``start`` if degenerate)."""
    p = np.asarray(p, dtype=np.float64)
    return float(_kernels.point_segment_sqdist(p[None], seg.start[None], seg.delta[None])[0])


def batch_point_segment_sqdist(p, start, delta) -> np.ndarray:
    """Row-wise :func:`dist_point_segment` on ``(m, n)`` arrays."""
    return _kernels.point_segment_sqdist(_c64(p), _c64(start), _c64(delta))


def batch_closest_params(p, start, delta) -> np.ndarray:
    """Row-wise :func:`closest_param`; NaN marks degenerate rows."""
    return _kernels.closest_params(_c64(p), _c64(start), _c64(delta))


def contact(body: Body, center, seg: OpenSegment, eps: float = 0.0, rotation=None) -> bool:
    """Whether the open segment touches ``body`` placed at ``center``.

    Point bodies are thickened to a closed ball of radius ``eps``; discs grow
    by ``eps``; boxes grow their half-extents by ``eps``. Touching only at the
    endpoints ``t = 0`` or ``t = 1`` does not count.
    """
    center = np.asarray(center, dtype=np.float64)
    rot = None if rotation is None else np.asarray(rotation, dtype=np.float64)[None]
    return bool(batch_contact(body, center[None], seg.start[None], seg.delta[None], eps, rot)[0])


def batch_contact(body: Body, center, start, delta, eps: float = 0.0, rotation=None) -> np.ndarray:
    center = _c64(center)
    start = _c64(start)
    delta = _c64(delta)
    m, n = center.shape
    if body.kind == "box":
        if rotation is None:
            rotation = np.broadcast_to(np.eye(n), (m, n, n))
        half = np.asarray(body.half_extents, dtype=np.float64) + eps
        if half.shape != (n,):
            raise ValueError(f"box has {half.shape[0]} half-extents in dimension {n}")
        return _kernels.box_contact(center, _c64(rotation), half, start, delta)
    r = eps + (body.radius if body.kind == "disc" else 0.0)
    return _kernels.ball_contact(center, np.full(m, float(r)), start, delta)


def first_contact_param(body: Body, center, seg: OpenSegment, eps: float = 0.0, rotation=None):
    """Smallest ``t`` in [0, 1) where the segment is inside the body, or None."""
    if seg.degenerate:
        return None
    center = np.asarray(center, dtype=np.float64)
    s, d = seg.start, seg.delta
    if body.kind == "box":
        n = s.shape[0]
        rot = np.eye(n) if rotation is None else np.asarray(rotation, dtype=np.float64)
        half = np.asarray(body.half_extents) + eps
        ls = rot.T @ (s - center)
        ld = rot.T @ d
        lo, hi = 0.0, 1.0
        for k in range(n):
            if ld[k] == 0.0:
                if abs(ls[k]) > half[k]:
                    return None
                continue
            ta, tb = (-half[k] - ls[k]) / ld[k], (half[k] - ls[k]) / ld[k]
            lo, hi = max(lo, min(ta, tb)), min(hi, max(ta, tb))
        if lo <= hi and lo < 1.0 and hi > 0.0:
            return lo
        return None
    r = eps + (body.radius if body.kind == "disc" else 0.0)
    f = s - center
    a = d @ d
    tc = -(f @ d) / a
    q = f + tc * d
    perp2 = q @ q
    if perp2 > r * r + _kernels.python_backend.CONTACT_RTOL * (f @ f + a):
        return None
    h = math.sqrt(max(r * r - perp2, 0.0) / a)
    t0, t1 = tc - h, tc + h
    if t0 < 1.0 and t1 > 0.0:
        return max(t0, 0.0)
    return None


def rotation_2d(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def random_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform element of SO(n)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# --- Gaussian algebra -------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def tril_indices(n: int):
    """Row/column indices of the strictly lower triangle, row-major."""
    return np.tril_indices(n, -1)


@dataclass(frozen=True)
class LatentGaussian:
    """Gaussian with covariance ``cov_factor @ cov_factor.T``.

    ``cov_factor`` is lower triangular with a positive diagonal.
    """

    mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        fac = np.tril(np.asarray(self.cov_factor, dtype=np.float64))
        if fac.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"factor shape {fac.shape} does not match mean {mean.shape}")
        if np.any(np.diag(fac) <= 0):
            raise ValueError("covariance factor needs a strictly positive diagonal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", fac)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    @classmethod
    def from_cov(cls, mean, cov) -> "LatentGaussian":
        return cls(mean, np.linalg.cholesky(np.asarray(cov, dtype=np.float64)))

    @classmethod
    def from_raw(cls, raw, n: int, min_diag: float = 1e-6) -> "LatentGaussian":
        """Map ``n + n(n+1)/2`` unconstrained values to a Gaussian."""
        mean, fac = raw_to_gaussian(np.asarray(raw, dtype=np.float64)[None], n, min_diag)
        return cls(mean[0], fac[0])


def raw_size(n: int) -> int:
    return n + n * (n + 1) // 2


def raw_to_gaussian(raw, n: int, min_diag: float = 1e-6):
    """Batched map from raw network outputs to ``(mean, factor)``.

    Layout per row: ``mean (n) | softplus-diag (n) | strict lower (n(n-1)/2)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mean = raw[:, :n]
    fac = np.zeros((raw.shape[0], n, n))
    idx = np.arange(n)
    fac[:, idx, idx] = softplus(raw[:, n : 2 * n]) + min_diag
    rows, cols = tril_indices(n)
    fac[:, rows, cols] = raw[:, 2 * n :]
    return mean, fac


def gaussian_grad_to_raw(raw, n: int, g_mean, g_fac):
    """Pull ``(d/dmean, d/dfactor)`` back to the raw layout of :func:`raw_to_gaussian`."""
    out = np.zeros_like(np.asarray(raw, dtype=np.float64))
    out[:, :n] = g_mean
    idx = np.arange(n)
    out[:, n : 2 * n] = g_fac[:, idx, idx] * softplus_grad(raw[:, n : 2 * n])
    rows, cols = tril_indices(n)
    out[:, 2 * n :] = g_fac[:, rows, cols]
    return out


def tril_inverse(fac) -> np.ndarray:
    """Inverse of a batch of lower-triangular matrices by forward substitution.

    Written out so that ``inv(L) @ L`` is exactly the identity for the same
    ``L``, which keeps ``KL(g, g) == 0`` exact.
    """
    fac = np.asarray(fac, dtype=np.float64)
    n = fac.shape[-1]
    inv = np.zeros_like(fac)
    for j in range(n):
        inv[..., j, j] = 1.0 / fac[..., j, j]
        for i in range(j + 1, n):
            acc = np.zeros(fac.shape[:-2])
            for k in range(j, i):
                acc = acc + fac[..., i, k] * inv[..., k, j]
            inv[..., i, j] = -acc / fac[..., i, i]
    return inv


def tril_solve(fac, rhs) -> np.ndarray:
    """Solve ``L x = rhs`` for a batch of lower-triangular ``L`` and matrices ``rhs``."""
    fac = np.asarray(fac, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    n = fac.shape[-1]
    x = np.zeros(np.broadcast_shapes(fac.shape[:-2], rhs.shape[:-2]) + rhs.shape[-2:])
    for i in range(n):
        acc = rhs[..., i, :]
        for k in range(i):
            acc = acc - fac[..., i, k, None] * x[..., k, :]
        x[..., i, :] = acc / fac[..., i, i, None]
    return x


def batch_kl(mean1, fac1, mean2, fac2):
    """Closed-form ``KL(N1 || N2)`` per row plus gradients w.r.t. all four inputs.

    Returns ``(kl, (g_mean1, g_fac1, g_mean2, g_fac2))``; factor gradients
    are restricted to the lower triangle.
    """
    n = mean1.shape[-1]
    m = tril_solve(fac2, fac1)  # L2^{-1} L1
    delta = mean2 - mean1
    y = tril_solve(fac2, delta[..., :, None])[..., 0]
    diag1 = np.diagonal(fac1, axis1=-2, axis2=-1)
    diag2 = np.diagonal(fac2, axis1=-2, axis2=-1)
    logdet = 2.0 * (np.log(diag2).sum(-1) - np.log(diag1).sum(-1))
    kl = 0.5 * (np.sum(m * m, axis=(-2, -1)) + np.sum(y * y, -1) - n + logdet)

    inv2 = tril_inverse(fac2)
    inv2_t = np.swapaxes(inv2, -1, -2)
    g_mean2 = np.einsum("...ij,...j->...i", inv2_t, y)
    g_mean1 = -g_mean2
    eye = np.eye(n)
    g_fac1 = np.tril(inv2_t @ m - eye / diag1[..., None, :] * eye)
    mmt = m @ np.swapaxes(m, -1, -2) + y[..., :, None] * y[..., None, :]
    g_fac2 = np.tril(-(inv2_t @ mmt) + eye / diag2[..., None, :] * eye)
    return kl, (g_mean1, g_fac1, g_mean2, g_fac2)


def batch_nll(mean, fac, x):
    """Negative log density of ``x`` per row plus gradients ``(g_mean, g_fac, g_x)``."""
    n = mean.shape[-1]
    v = tril_solve(fac, (x - mean)[..., :, None])[..., 0]
    diag = np.diagonal(fac, axis1=-2, axis2=-1)
    nll = 0.5 * np.sum(v * v, -1) + np.log(diag).sum(-1) + 0.5 * n * LOG_2PI
    inv_t = np.swapaxes(tril_inverse(fac), -1, -2)
    g_x = np.einsum("...ij,...j->...i", inv_t, v)
    eye = np.eye(n)
    g_fac = np.tril(-(inv_t @ (v[..., :, None] * v[..., None, :])) + eye / diag[..., None, :] * eye)
    return nll, (-g_x, g_fac, g_x)


def kl_gaussian(g1: LatentGaussian, g2: LatentGaussian) -> float:
    """``KL(g1 || g2)`` in closed form."""
    kl, _ = batch_kl(g1.mean, g1.cov_factor, g2.mean, g2.cov_factor)
    return max(float(kl), 0.0)


def kl_symmetric(g1: LatentGaussian, g2: LatentGaussian) -> float:
    return kl_gaussian(g1, g2) + kl_gaussian(g2, g1)


def nll_gaussian(g: LatentGaussian, x) -> float:
    """``-log p(x)`` under ``g``."""
    nll, _ = batch_nll(g.mean, g.cov_factor, np.asarray(x, dtype=np.float64))
    return float(nll)


@dataclass(frozen=True)
class PrincipalAxes:
    rotation: np.ndarray
    scales: np.ndarray
    isotropic: bool


def principal_axes(g: LatentGaussian, iso_ratio: float = 1.0 + 1e-6) -> PrincipalAxes:
    """Orthonormal frame diagonalizing the covariance, scales descending.

    The rotation has determinant +1; each axis is signed so that its first
    nonzero component is positive, except that the last axis absorbs a sign
    flip when needed to stay in SO(n). ``isotropic`` flags covariances whose
    largest/smallest scale ratio is below ``iso_ratio``, where the
    orientation is undefined.
    """
    cov = g.cov
    evals, evecs = _jacobi_eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    evecs = evecs[:, order]
    for j in range(evecs.shape[1]):
        col = evecs[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-15)
        if nz.size and col[nz[0]] < 0:
            evecs[:, j] = -col
    if np.linalg.det(evecs) < 0:
        evecs[:, -1] = -evecs[:, -1]
    scales = np.sqrt(np.maximum(evals, 0.0))
    return PrincipalAxes(evecs, scales, bool(scales[0] < iso_ratio * scales[-1]))


def _jacobi_eigh(a, tol: float = 1e-15, max_sweeps: int = 50):
    """Cyclic Jacobi eigen-decomposition of a small symmetric matrix."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def _c64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)
