# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``; same signatures."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, fmin, fmax, NAN, INFINITY

cnp.import_array()

cdef double CONTACT_RTOL = 1e-12


cdef inline double _dot(const double[:, ::1] a, const double[:, ::1] b, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0
    for k in range(a.shape[1]):
        acc += a[i, k] * b[i, k]
    return acc


def closest_params(const double[:, ::1] p, const double[:, ::1] start, const double[:, ::1] delta):
    cdef Py_ssize_t m = p.shape[0], n = p.shape[1], i, k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(m)
    cdef double[::1] ov = out
    cdef double dd, num, t
    with nogil:
        for i in range(m):
            dd = 0.0
            num = 0.0
            for k in range(n):
                dd += delta[i, k] * delta[i, k]
                num += (p[i, k] - start[i, k]) * delta[i, k]
            if dd > 0.0:
                t = num / dd
                ov[i] = fmin(fmax(t, 0.0), 1.0)
            else:
                ov[i] = NAN
    return out


def point_segment_sqdist(const double[:, ::1] p, const double[:, ::1] start, const double[:, ::1] delta):
    cdef Py_ssize_t m = p.shape[0], n = p.shape[1], i, k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(m)
    cdef double[::1] ov = out
    cdef double dd, num, t, diff, acc
    with nogil:
        for i in range(m):
            dd = 0.0
            num = 0.0
            for k in range(n):
                dd += delta[i, k] * delta[i, k]
                num += (p[i, k] - start[i, k]) * delta[i, k]
            t = 0.0
            if dd > 0.0:
                t = fmin(fmax(num / dd, 0.0), 1.0)
            acc = 0.0
            for k in range(n):
                diff = start[i, k] + t * delta[i, k] - p[i, k]
                acc += diff * diff
            ov[i] = acc
    return out


def ball_contact(const double[:, ::1] center, const double[::1] radius,
                 const double[:, ::1] start, const double[:, ::1] delta):
    cdef Py_ssize_t m = center.shape[0], n = center.shape[1], i, k
    cdef cnp.ndarray[cnp.npy_bool, ndim=1, cast=True] out = np.zeros(m, dtype=bool)
    cdef double a, b, ff, f, tc, q, perp2, r2, h
    for i in range(m):
        a = 0.0
        b = 0.0
        ff = 0.0
        for k in range(n):
            f = start[i, k] - center[i, k]
            a += delta[i, k] * delta[i, k]
            b += f * delta[i, k]
            ff += f * f
        if a == 0.0:
            continue
        tc = -b / a
        perp2 = 0.0
        for k in range(n):
            q = start[i, k] - center[i, k] + tc * delta[i, k]
            perp2 += q * q
        r2 = radius[i] * radius[i]
        if perp2 > r2 + CONTACT_RTOL * (ff + a):
            continue
        h = sqrt(fmax(r2 - perp2, 0.0) / a)
        out[i] = tc - h < 1.0 and tc + h > 0.0
    return out


def box_contact(const double[:, ::1] center, const double[:, :, ::1] rotation,
                const double[::1] half_extents, const double[:, ::1] start,
                const double[:, ::1] delta):
    cdef Py_ssize_t m = center.shape[0], n = center.shape[1], i, j, k
    cdef cnp.ndarray[cnp.npy_bool, ndim=1, cast=True] out = np.zeros(m, dtype=bool)
    cdef double lo, hi, sk, dk, h, ta, tb, dd
    cdef bint ok
    for i in range(m):
        lo = 0.0
        hi = 1.0
        ok = True
        dd = 0.0
        for k in range(n):
            dd += delta[i, k] * delta[i, k]
        if dd == 0.0:
            continue
        for j in range(n):
            # local coordinate j = column j of R dotted with the world vector
            sk = 0.0
            dk = 0.0
            for k in range(n):
                sk += rotation[i, k, j] * (start[i, k] - center[i, k])
                dk += rotation[i, k, j] * delta[i, k]
            h = half_extents[j]
            if dk == 0.0:
                if fabs(sk) > h:
                    ok = False
                    break
                continue
            ta = (-h - sk) / dk
            tb = (h - sk) / dk
            lo = fmax(lo, fmin(ta, tb))
            hi = fmin(hi, fmax(ta, tb))
        out[i] = ok and lo <= hi and lo < 1.0 and hi > 0.0
    return out


def otsu_threshold(values):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.sort(np.asarray(values, dtype=np.float64))
    cdef Py_ssize_t n = v.shape[0], k, best = -1
    if n < 2 or v[0] == v[n - 1]:
        return (float(v[n - 1]) if n else 0.0), True
    cdef double mean = 0.0, total = 0.0, left = 0.0, mu0, mu1, between, best_val = -1.0
    for k in range(n):
        mean += v[k]
    mean /= n
    for k in range(n):
        total += v[k] - mean
    for k in range(1, n):
        left += v[k - 1] - mean
        if v[k - 1] == v[k]:
            continue
        mu0 = left / k
        mu1 = (total - left) / (n - k)
        between = k * (n - k) * (mu0 - mu1) * (mu0 - mu1)
        if between > best_val:
            best_val = between
            best = k - 1
    return 0.5 * (v[best] + v[best + 1]), False


def splat_disc(double[:, ::1] img, double cx, double cy, double radius, double value, double soft):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], r, c
    cdef Py_ssize_t r0, r1, c0, c1
    cdef double reach = radius + 0.5 * soft + 1.0, dist, cover, dx, dy
    r0 = max(0, <Py_ssize_t>(cy - reach))
    r1 = min(h, <Py_ssize_t>(cy + reach) + 1)
    c0 = max(0, <Py_ssize_t>(cx - reach))
    c1 = min(w, <Py_ssize_t>(cx + reach) + 1)
    with nogil:
        for r in range(r0, r1):
            for c in range(c0, c1):
                dx = c + 0.5 - cx
                dy = r + 0.5 - cy
                dist = sqrt(dx * dx + dy * dy) - radius
                cover = fmin(fmax(0.5 - dist / soft, 0.0), 1.0) * value
                if cover > img[r, c]:
                    img[r, c] = cover


def splat_box(double[:, ::1] img, double cx, double cy, double hx, double hy,
              double cos_t, double sin_t, double value, double soft):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], r, c
    cdef Py_ssize_t r0, r1, c0, c1
    cdef double reach = sqrt(hx * hx + hy * hy) + 0.5 * soft + 1.0
    cdef double px, py, lx, ly, qx, qy, ox, oy, dist, cover
    r0 = max(0, <Py_ssize_t>(cy - reach))
    r1 = min(h, <Py_ssize_t>(cy + reach) + 1)
    c0 = max(0, <Py_ssize_t>(cx - reach))
    c1 = min(w, <Py_ssize_t>(cx + reach) + 1)
    with nogil:
        for r in range(r0, r1):
            for c in range(c0, c1):
                px = c + 0.5 - cx
                py = r + 0.5 - cy
                lx = cos_t * px + sin_t * py
                ly = -sin_t * px + cos_t * py
                qx = fabs(lx) - hx
                qy = fabs(ly) - hy
                ox = fmax(qx, 0.0)
                oy = fmax(qy, 0.0)
                dist = sqrt(ox * ox + oy * oy) + fmin(fmax(qx, qy), 0.0)
                cover = fmin(fmax(0.5 - dist / soft, 0.0), 1.0) * value
                if cover > img[r, c]:
                    img[r, c] = cover
