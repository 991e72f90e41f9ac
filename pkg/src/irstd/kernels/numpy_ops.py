"""Pure-numpy implementations of the hot array kernels.

Same contracts as ``numba_ops``: 3x3 convolutions take a pre-padded input
``xp`` of shape (n, cin, h+2, w+2) and produce (n, cout, h, w).
"""

import numpy as np


def _im2col(xp, h, w):
    n, cin = xp.shape[:2]
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, cin, 3, 3, h, w), (s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return np.ascontiguousarray(win).reshape(n, cin * 9, h * w)


def conv3x3(xp, w):
    n, cin, hp, wp = xp.shape
    cout = w.shape[0]
    h, wd = hp - 2, wp - 2
    col = _im2col(xp, h, wd)
    out = w.reshape(cout, cin * 9) @ col
    return out.reshape(n, cout, h, wd)


def conv3x3_wgrad(xp, gout):
    n, cin, hp, wp = xp.shape
    cout = gout.shape[1]
    h, wd = hp - 2, wp - 2
    col = _im2col(xp, h, wd)
    g = gout.reshape(n, cout, h * wd)
    gw = (g @ col.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(cout, cin, 3, 3)


def maxpool2(x):
    n, c, h, w = x.shape
    blocks = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    # argmax returns the first maximum, i.e. row-major order within the block
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.uint8)


def maxpool2_grad(gout, idx):
    n, c, h2, w2 = gout.shape
    g = np.zeros((n, c, h2, w2, 4), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.int64), gout[..., None], axis=-1)
    return (
        g.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2 * 2, w2 * 2)
    )


def _up2_axis(size):
    # source indices / fractional weights for 2x bilinear upsampling,
    # align_corners=False convention
    out = np.arange(2 * size, dtype=np.float64)
    src = np.clip((out + 0.5) / 2.0 - 0.5, 0.0, size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, src - i0


def upsample2(x):
    n, c, h, w = x.shape
    y0, y1, fy = _up2_axis(h)
    x0, x1, fx = _up2_axis(w)
    fy = fy.astype(x.dtype)[:, None]
    fx = fx.astype(x.dtype)[None, :]
    tl = x[:, :, y0][:, :, :, x0]
    tr = x[:, :, y0][:, :, :, x1]
    bl = x[:, :, y1][:, :, :, x0]
    br = x[:, :, y1][:, :, :, x1]
    return (
        tl * (1 - fy) * (1 - fx)
        + tr * (1 - fy) * fx
        + bl * fy * (1 - fx)
        + br * fy * fx
    )


def upsample2_grad(gout):
    n, c, h2, w2 = gout.shape
    h, w = h2 // 2, w2 // 2
    y0, y1, fy = _up2_axis(h)
    x0, x1, fx = _up2_axis(w)
    fy = fy.astype(gout.dtype)[:, None]
    fx = fx.astype(gout.dtype)[None, :]
    gx = np.zeros((n, c, h, w), dtype=gout.dtype)
    for yi, wy in ((y0, 1 - fy), (y1, fy)):
        for xi, wx in ((x0, 1 - fx), (x1, fx)):
            np.add.at(gx, (slice(None), slice(None), yi[:, None], xi[None, :]), gout * wy * wx)
    return gx


def chan_scale_shift(x, s, t):
    """out[n,c,h,w] = s[c] * x[n,c,h,w] + t[c]"""
    return x * s[None, :, None, None] + t[None, :, None, None]


def chan_combine(a, b, sa, sb, t):
    """out = sa[c]*a + sb[c]*b + t[c]"""
    return (
        a * sa[None, :, None, None]
        + b * sb[None, :, None, None]
        + t[None, :, None, None]
    )


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(g, y):
    return g * (y > 0)


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_bwd(g, y):
    return g * y * (1.0 - y)


def label_components(mask):
    """Label 8-connected foreground components of a binary image.

    Labels are assigned in raster order of each component's first pixel.
    Returns (labels int32 array, component count).
    """
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    stack = []
    for sy in range(h):
        for sx in range(w):
            if mask[sy, sx] and labels[sy, sx] == 0:
                count += 1
                labels[sy, sx] = count
                stack.append((sy, sx))
                while stack:
                    y, x = stack.pop()
                    for ny in range(max(y - 1, 0), min(y + 2, h)):
                        for nx in range(max(x - 1, 0), min(x + 2, w)):
                            if mask[ny, nx] and labels[ny, nx] == 0:
                                labels[ny, nx] = count
                                stack.append((ny, nx))
    return labels, count
