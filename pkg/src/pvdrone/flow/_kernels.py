"""Compiled inner loops for the flow estimator."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def box_mean(a, r):
    """Mean over a (2r+1)^2 window with edge replication, separable."""
    H, W = a.shape
    n = 2 * r + 1
    tmp = np.empty((H, W), dtype=np.float32)
    out = np.empty((H, W), dtype=np.float32)
    for y in range(H):
        s = np.float32(0.0)
        for k in range(-r, r + 1):
            x = min(max(k, 0), W - 1)
            s += a[y, x]
        tmp[y, 0] = s
        for x in range(1, W):
            s += a[y, min(x + r, W - 1)] - a[y, max(x - r - 1, 0)]
            tmp[y, x] = s
    for x in range(W):
        s = np.float32(0.0)
        for k in range(-r, r + 1):
            y = min(max(k, 0), H - 1)
            s += tmp[y, x]
        out[0, x] = s / (n * n)
        for y in range(1, H):
            s += tmp[min(y + r, H - 1), x] - tmp[max(y - r - 1, 0), x]
            out[y, x] = s / (n * n)
    return out


@njit(cache=True, fastmath=True)
def correlate(f1, f2p, mu1, inv1, mu2p, inv2p, okp, d, r):
    """Normalised correlation for every displacement in [-d, d]^2.

    The second-image grids arrive padded by ``d`` on each side (``okp`` is
    False in the padding) so the inner loops carry no bounds checks.
    """
    C, H, W = f1.shape
    n = 2 * d + 1
    cost = np.zeros((n * n, H, W), dtype=np.float32)
    valid = np.zeros((n * n, H, W), dtype=np.bool_)
    prod = np.empty((H, W), dtype=np.float32)
    k = 0
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            oy = d + dy
            ox = d + dx
            for y in range(H):
                for x in range(W):
                    prod[y, x] = f1[0, y, x] * f2p[0, y + oy, x + ox]
                for c in range(1, C):
                    for x in range(W):
                        prod[y, x] += f1[c, y, x] * f2p[c, y + oy, x + ox]
            bm = box_mean(prod, r)
            for y in range(H):
                for x in range(W):
                    if not okp[y + oy, x + ox]:
                        continue
                    m = mu1[0, y, x] * mu2p[0, y + oy, x + ox]
                    for c in range(1, C):
                        m += mu1[c, y, x] * mu2p[c, y + oy, x + ox]
                    v = (bm[y, x] - m) * inv1[y, x] * inv2p[y + oy, x + ox]
                    cost[k, y, x] = min(max(v, -1.0), 1.0)
                    valid[k, y, x] = True
            k += 1
    return cost, valid


@njit(cache=True)
def argmax_residual(cost, valid, textured, d, flat_tol, min_peak, clamp, subpixel):
    D, H, W = cost.shape
    n = 2 * d + 1
    du = np.zeros((H, W))
    dv = np.zeros((H, W))
    conf = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            if not textured[y, x]:
                continue
            best = -1
            cb = -np.inf
            cmin = np.inf
            total = 0.0
            count = 0
            for k in range(D):
                if valid[k, y, x]:
                    c = cost[k, y, x]
                    total += c
                    count += 1
                    if c > cb:
                        cb = c
                        best = k
                    if c < cmin:
                        cmin = c
            if best < 0 or cb - cmin < flat_tol or cb < min_peak:
                continue
            by = best // n
            bx = best - by * n
            ox = float(bx - d)
            oy = float(by - d)
            if subpixel:
                if 0 < bx < n - 1 and valid[best - 1, y, x] and valid[best + 1, y, x]:
                    lo = cost[best - 1, y, x]
                    hi = cost[best + 1, y, x]
                    den = lo - 2.0 * cb + hi
                    if den < 0:
                        ox += min(max((lo - hi) / (2.0 * den), -clamp), clamp)
                if 0 < by < n - 1 and valid[best - n, y, x] and valid[best + n, y, x]:
                    lo = cost[best - n, y, x]
                    hi = cost[best + n, y, x]
                    den = lo - 2.0 * cb + hi
                    if den < 0:
                        oy += min(max((lo - hi) / (2.0 * den), -clamp), clamp)
            du[y, x] = ox
            dv[y, x] = oy
            conf[y, x] = cb - total / count
    return du, dv, conf


@njit(cache=True)
def _median5(a, b, c, d, e):
    # drop the minimum of two sorted pairs, then take the second smallest
    # of the remaining four as two sorted pairs
    if a > b:
        a, b = b, a
    if d > e:
        d, e = e, d
    if a > d:
        a, d = d, a
        b, e = e, b
    if b > c:
        b, c = c, b
    if b < d:
        return min(c, d)
    return min(b, e)


@njit(cache=True)
def separable_median5(a):
    """Median of row-wise 5-medians over a 5x5 window, edge replicated."""
    H, W = a.shape
    rows = np.empty((H, W))
    for y in range(H):
        for x in range(W):
            rows[y, x] = _median5(a[y, max(x - 2, 0)], a[y, max(x - 1, 0)], a[y, x],
                                  a[y, min(x + 1, W - 1)], a[y, min(x + 2, W - 1)])
    out = np.empty((H, W))
    for y in range(H):
        y0, y1, y3, y4 = max(y - 2, 0), max(y - 1, 0), min(y + 1, H - 1), min(y + 2, H - 1)
        for x in range(W):
            out[y, x] = _median5(rows[y0, x], rows[y1, x], rows[y, x], rows[y3, x], rows[y4, x])
    return out


@njit(cache=True)
def _median_1d(a, r, axis):
    H, W = a.shape
    out = np.empty((H, W))
    buf = np.empty(2 * r + 1)
    for y in range(H):
        for x in range(W):
            for j in range(-r, r + 1):
                if axis == 1:
                    buf[j + r] = a[y, min(max(x + j, 0), W - 1)]
                else:
                    buf[j + r] = a[min(max(y + j, 0), H - 1), x]
            buf.sort()
            out[y, x] = buf[r]
    return out


@njit(cache=True)
def separable_median(a, r):
    """Median of row-wise medians over a (2r+1)^2 window, edge replicated."""
    if r == 2:
        return separable_median5(a)
    return _median_1d(_median_1d(a, r, 1), r, 0)
