"""Numba-jitted implementations of the hot array kernels.

Each kernel is shape- and dtype-generic (f32 for training, f64 for the
gradient checks). Parallel loops partition disjoint output slices, so
results are deterministic regardless of thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def _conv3x3(xp, w, out):
    n, cin, hp, wp = xp.shape
    cout = w.shape[0]
    h = hp - 2
    wd = wp - 2
    for pidx in prange(n * cout):
        i = pidx // cout
        oc = pidx % cout
        for ic in range(cin):
            for ky in range(3):
                w0 = w[oc, ic, ky, 0]
                w1 = w[oc, ic, ky, 1]
                w2 = w[oc, ic, ky, 2]
                for y in range(h):
                    row = xp[i, ic, y + ky]
                    orow = out[i, oc, y]
                    for x in range(wd):
                        orow[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]


def conv3x3(xp, w):
    n, cin, hp, wp = xp.shape
    out = np.zeros((n, w.shape[0], hp - 2, wp - 2), dtype=xp.dtype)
    _conv3x3(xp, w, out)
    return out


@njit(parallel=True, cache=True)
def _conv3x3_wgrad(xp, gout, gw):
    n, cin, hp, wp = xp.shape
    cout = gout.shape[1]
    h = hp - 2
    wd = wp - 2
    # accumulators take the array dtype so the inner loop stays vectorised
    zero = xp[0, 0, 0, 0] * 0
    for pidx in prange(cout * cin):
        oc = pidx // cin
        ic = pidx % cin
        for ky in range(3):
            a0 = zero
            a1 = zero
            a2 = zero
            for i in range(n):
                for y in range(h):
                    row = xp[i, ic, y + ky]
                    grow = gout[i, oc, y]
                    for x in range(wd):
                        g = grow[x]
                        a0 += g * row[x]
                        a1 += g * row[x + 1]
                        a2 += g * row[x + 2]
            gw[oc, ic, ky, 0] = a0
            gw[oc, ic, ky, 1] = a1
            gw[oc, ic, ky, 2] = a2


def conv3x3_wgrad(xp, gout):
    gw = np.zeros((gout.shape[1], xp.shape[1], 3, 3), dtype=xp.dtype)
    _conv3x3_wgrad(xp, gout, gw)
    return gw


@njit(parallel=True, cache=True)
def _maxpool2(x, out, idx):
    n, c, h, w = x.shape
    h2 = h // 2
    w2 = w // 2
    for pidx in prange(n * c):
        i = pidx // c
        ch = pidx % c
        for y in range(h2):
            for xo in range(w2):
                best = x[i, ch, 2 * y, 2 * xo]
                bi = 0
                k = 1
                for dy in range(2):
                    for dx in range(2):
                        if dy == 0 and dx == 0:
                            continue
                        v = x[i, ch, 2 * y + dy, 2 * xo + dx]
                        # strict > keeps the first (row-major) maximum on ties
                        if v > best:
                            best = v
                            bi = k
                        k += 1
                out[i, ch, y, xo] = best
                idx[i, ch, y, xo] = bi


def maxpool2(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.uint8)
    _maxpool2(x, out, idx)
    return out, idx


@njit(parallel=True, cache=True)
def _maxpool2_grad(gout, idx, gx):
    n, c, h2, w2 = gout.shape
    for pidx in prange(n * c):
        i = pidx // c
        ch = pidx % c
        for y in range(h2):
            for xo in range(w2):
                k = idx[i, ch, y, xo]
                gx[i, ch, 2 * y + k // 2, 2 * xo + k % 2] = gout[i, ch, y, xo]


def maxpool2_grad(gout, idx):
    n, c, h2, w2 = gout.shape
    gx = np.zeros((n, c, h2 * 2, w2 * 2), dtype=gout.dtype)
    _maxpool2_grad(gout, idx, gx)
    return gx


@njit(cache=True)
def _up2_coords(size):
    i0 = np.empty(2 * size, dtype=np.int64)
    i1 = np.empty(2 * size, dtype=np.int64)
    f = np.empty(2 * size, dtype=np.float64)
    for o in range(2 * size):
        src = (o + 0.5) / 2.0 - 0.5
        if src < 0.0:
            src = 0.0
        if src > size - 1.0:
            src = size - 1.0
        lo = int(np.floor(src))
        i0[o] = lo
        i1[o] = min(lo + 1, size - 1)
        f[o] = src - lo
    return i0, i1, f


@njit(parallel=True, cache=True)
def _upsample2(x, out, y0, y1, fy, x0, x1, fx):
    n, c, h, w = x.shape
    for pidx in prange(n * c):
        i = pidx // c
        ch = pidx % c
        for oy in range(2 * h):
            a = y0[oy]
            b = y1[oy]
            gy = fy[oy]
            for ox in range(2 * w):
                l = x0[ox]
                r = x1[ox]
                gx = fx[ox]
                out[i, ch, oy, ox] = (
                    x[i, ch, a, l] * (1 - gy) * (1 - gx)
                    + x[i, ch, a, r] * (1 - gy) * gx
                    + x[i, ch, b, l] * gy * (1 - gx)
                    + x[i, ch, b, r] * gy * gx
                )


def upsample2(x):
    n, c, h, w = x.shape
    y0, y1, fy = _up2_coords(h)
    x0, x1, fx = _up2_coords(w)
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    _upsample2(x, out, y0, y1, fy.astype(x.dtype), x0, x1, fx.astype(x.dtype))
    return out


@njit(parallel=True, cache=True)
def _upsample2_grad(gout, gx, y0, y1, fy, x0, x1, fx):
    n, c, h2, w2 = gout.shape
    for pidx in prange(n * c):
        i = pidx // c
        ch = pidx % c
        for oy in range(h2):
            a = y0[oy]
            b = y1[oy]
            gy = fy[oy]
            for ox in range(w2):
                l = x0[ox]
                r = x1[ox]
                gw = fx[ox]
                g = gout[i, ch, oy, ox]
                gx[i, ch, a, l] += g * (1 - gy) * (1 - gw)
                gx[i, ch, a, r] += g * (1 - gy) * gw
                gx[i, ch, b, l] += g * gy * (1 - gw)
                gx[i, ch, b, r] += g * gy * gw


def upsample2_grad(gout):
    n, c, h2, w2 = gout.shape
    h, w = h2 // 2, w2 // 2
    y0, y1, fy = _up2_coords(h)
    x0, x1, fx = _up2_coords(w)
    gx = np.zeros((n, c, h, w), dtype=gout.dtype)
    _upsample2_grad(gout, gx, y0, y1, fy.astype(gout.dtype), x0, x1, fx.astype(gout.dtype))
    return gx


@njit(parallel=True, cache=True)
def _chan_scale_shift(x, s, t, out):
    n, c, h, w = x.shape
    for pidx in prange(n * c):
        i = pidx // c
        ch = pidx % c
        sv = s[ch]
        tv = t[ch]
        plane = x[i, ch]
        o = out[i, ch]
        for y in range(h):
            for xx in range(w):
                o[y, xx] = sv * plane[y, xx] + tv


def chan_scale_shift(x, s, t):
    """out[n,c,h,w] = s[c] * x[n,c,h,w] + t[c]"""
    out = np.empty_like(x)
    _chan_scale_shift(x, s, t, out)
    return out


@njit(parallel=True, cache=True)
def _chan_combine(a, b, sa, sb, t, out):
    n, c, h, w = a.shape
    for pidx in prange(n * c):
        i = pidx // c
        ch = pidx % c
        va = sa[ch]
        vb = sb[ch]
        vt = t[ch]
        pa = a[i, ch]
        pb = b[i, ch]
        o = out[i, ch]
        for y in range(h):
            for xx in range(w):
                o[y, xx] = va * pa[y, xx] + vb * pb[y, xx] + vt


def chan_combine(a, b, sa, sb, t):
    """out = sa[c]*a + sb[c]*b + t[c]"""
    out = np.empty_like(a)
    _chan_combine(a, b, sa, sb, t, out)
    return out


@njit(parallel=True, cache=True)
def _relu_fwd(x, out):
    flat = x.reshape(-1)
    o = out.reshape(-1)
    for i in prange(flat.size):
        v = flat[i]
        o[i] = v if v > 0 else 0


def relu_fwd(x):
    out = np.empty_like(x)
    _relu_fwd(x, out)
    return out


@njit(parallel=True, cache=True)
def _relu_bwd(g, y, out):
    gf = g.reshape(-1)
    yf = y.reshape(-1)
    o = out.reshape(-1)
    for i in prange(gf.size):
        o[i] = gf[i] if yf[i] > 0 else 0


def relu_bwd(g, y):
    out = np.empty_like(g)
    _relu_bwd(g, y, out)
    return out


@njit(parallel=True, cache=True)
def _sigmoid_fwd(x, out):
    flat = x.reshape(-1)
    o = out.reshape(-1)
    for i in prange(flat.size):
        v = flat[i]
        if v >= 0:
            o[i] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            o[i] = e / (1.0 + e)


def sigmoid_fwd(x):
    out = np.empty_like(x)
    _sigmoid_fwd(x, out)
    return out


@njit(parallel=True, cache=True)
def _sigmoid_bwd(g, y, out):
    gf = g.reshape(-1)
    yf = y.reshape(-1)
    o = out.reshape(-1)
    for i in prange(gf.size):
        o[i] = gf[i] * yf[i] * (1.0 - yf[i])


def sigmoid_bwd(g, y):
    out = np.empty_like(g)
    _sigmoid_bwd(g, y, out)
    return out


@njit(cache=True)
def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


@njit(cache=True)
def _label_components(mask, labels):
    h, w = mask.shape
    parent = np.arange(h * w + 1, dtype=np.int32)
    prov = np.zeros((h, w), dtype=np.int32)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if mask[y, x] == 0:
                continue
            best = 0
            # already-scanned 8-neighbours: W, NW, N, NE
            for dy, dx in ((0, -1), (-1, -1), (-1, 0), (-1, 1)):
                ny = y + dy
                nx = x + dx
                if 0 <= ny < h and 0 <= nx < w and prov[ny, nx] != 0:
                    r = _find(parent, prov[ny, nx])
                    if best == 0:
                        best = r
                    elif r != best:
                        if r < best:
                            parent[best] = r
                            best = r
                        else:
                            parent[r] = best
            if best == 0:
                best = nxt
                nxt += 1
            prov[y, x] = best
    # relabel so ids follow each component's first pixel in raster order
    remap = np.zeros(nxt, dtype=np.int32)
    count = 0
    for y in range(h):
        for x in range(w):
            if prov[y, x] != 0:
                r = _find(parent, prov[y, x])
                if remap[r] == 0:
                    count += 1
                    remap[r] = count
                labels[y, x] = remap[r]
    return count


def label_components(mask):
    labels = np.zeros(mask.shape, dtype=np.int32)
    count = _label_components(np.ascontiguousarray(mask, dtype=np.uint8), labels)
    return labels, int(count)
