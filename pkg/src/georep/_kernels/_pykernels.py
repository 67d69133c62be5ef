"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Inputs are float64 C-contiguous arrays; callers in ``georep.geom`` take care
of the conversion.
"""

import numpy as np

CONTACT_RTOL = 1e-12


def closest_params(p, start, delta):
    """Clamped projection parameter of each ``p[i]`` onto its segment.

    Rows with a zero ``delta`` yield NaN.
    """
    dd = np.einsum("ij,ij->i", delta, delta)
    num = np.einsum("ij,ij->i", p - start, delta)
    out = np.full(dd.shape, np.nan)
    ok = dd > 0.0
    out[ok] = np.clip(num[ok] / dd[ok], 0.0, 1.0)
    return out


def point_segment_sqdist(p, start, delta):
    """Squared distance from ``p[i]`` to the closed segment ``start[i] + [0,1]*delta[i]``."""
    t = closest_params(p, start, delta)
    t = np.where(np.isnan(t), 0.0, t)
    diff = start + t[:, None] * delta - p
    return np.einsum("ij,ij->i", diff, diff)


def ball_contact(center, radius, start, delta):
    """True where the open segment meets the closed ball of ``radius[i]`` around ``center[i]``.

    Uses the perpendicular offset from the center to the carrier line, with a
    relative slack of ``CONTACT_RTOL`` on squared lengths for rounding.
    """
    f = start - center
    a = np.einsum("ij,ij->i", delta, delta)
    out = np.zeros(a.shape, dtype=bool)
    ok = a > 0.0
    if not np.any(ok):
        return out
    f, d, a, r2 = f[ok], delta[ok], a[ok], (radius * radius)[ok]
    tc = -np.einsum("ij,ij->i", f, d) / a
    q = f + tc[:, None] * d
    perp2 = np.einsum("ij,ij->i", q, q)
    slack = CONTACT_RTOL * (np.einsum("ij,ij->i", f, f) + a)
    hit = perp2 <= r2 + slack
    h = np.sqrt(np.maximum(r2 - perp2, 0.0) / a)
    out[ok] = hit & (tc - h < 1.0) & (tc + h > 0.0)
    return out


def box_contact(center, rotation, half_extents, start, delta):
    """True where the open segment meets the closed oriented box.

    ``rotation[i]`` has the box axes as columns; ``half_extents`` is shared.
    """
    # express the segment in the box frame: x_local = R^T (x - c)
    s = np.einsum("ikj,ik->ij", rotation, start - center)
    d = np.einsum("ikj,ik->ij", rotation, delta)
    m = s.shape[0]
    lo = np.zeros(m)
    hi = np.ones(m)
    inside = np.ones(m, dtype=bool)
    nonzero = np.einsum("ij,ij->i", delta, delta) > 0.0
    for k in range(s.shape[1]):
        h = half_extents[k]
        dk = d[:, k]
        sk = s[:, k]
        flat = dk == 0.0
        inside &= ~(flat & (np.abs(sk) > h))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-h - sk) / dk
            tb = (h - sk) / dk
        t_near = np.where(flat, -np.inf, np.minimum(ta, tb))
        t_far = np.where(flat, np.inf, np.maximum(ta, tb))
        lo = np.maximum(lo, t_near)
        hi = np.minimum(hi, t_far)
    # interval already clipped to [0, 1]; an open-segment witness needs
    # lo < 1 and hi > 0
    return inside & nonzero & (lo <= hi) & (lo < 1.0) & (hi > 0.0)


def otsu_threshold(values):
    """Exact 1-D two-means split of ``values``.

    Returns ``(threshold, degenerate)``; the threshold is the midpoint of the
    gap that maximizes between-class variance.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.shape[0]
    if n < 2 or v[0] == v[-1]:
        return float(v[-1]) if n else 0.0, True
    x = v - v.mean()
    csum = np.cumsum(x)
    k = np.arange(1, n)
    left = csum[:-1]
    total = csum[-1]
    mu0 = left / k
    mu1 = (total - left) / (n - k)
    between = k * (n - k) * (mu0 - mu1) ** 2
    between[v[:-1] == v[1:]] = -1.0
    best = int(np.argmax(between))
    return 0.5 * (v[best] + v[best + 1]), False


def splat_disc(img, cx, cy, radius, value, soft):
    """Max-blend an anti-aliased disc into ``img``.

    Coordinates are in pixels with rows along y; ``soft`` is the width of the
    linear edge ramp.
    """
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.hypot(xs + 0.5 - cx, ys + 0.5 - cy) - radius
    cover = np.clip(0.5 - dist / soft, 0.0, 1.0) * value
    np.maximum(img, cover, out=img)


def splat_box(img, cx, cy, hx, hy, cos_t, sin_t, value, soft):
    """Max-blend an anti-aliased oriented rectangle into ``img``."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5 - cx
    py = ys + 0.5 - cy
    lx = cos_t * px + sin_t * py
    ly = -sin_t * px + cos_t * py
    qx = np.abs(lx) - hx
    qy = np.abs(ly) - hy
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    dist = outside + np.minimum(np.maximum(qx, qy), 0.0)
    cover = np.clip(0.5 - dist / soft, 0.0, 1.0) * value
    np.maximum(img, cover, out=img)
