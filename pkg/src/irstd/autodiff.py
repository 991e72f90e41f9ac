"""Reverse-mode automatic differentiation over 4-D NCHW tensors.

A :class:`Tape` records every differentiable operation in forward order.
``Tape.backward`` walks the record in reverse, accumulating adjoints into
``Parameter.grad`` (persistently, until ``zero_grad``) and into the ``grad``
slot of watched leaf tensors. A parameter used at several tape sites simply
receives the sum of the per-site adjoints, which is what makes kernel reuse
across recurrent iterations work.

Ops run without recording when no tape is attached (pure inference).
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes violate an op contract."""


class Tensor:
    """Dense (n, c, h, w) value, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "tape", "node_id", "grad")

    def __init__(self, data, tape=None, requires_grad=False):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n,c,h,w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"all tensor dims must be >= 1, got {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.node_id = None
        self.grad = None
        if tape is not None and requires_grad:
            tape.watch(self)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter:
    """Named learnable array with a persistent gradient accumulator."""

    __slots__ = ("name", "value", "grad", "share_count")

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.share_count = 0

    def zero_grad(self):
        self.grad[...] = 0
        self.share_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class _Node:
    __slots__ = ("kind", "output_id", "fn")

    def __init__(self, kind, output_id, fn):
        self.kind = kind
        self.output_id = output_id
        self.fn = fn


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self._leaves = {}
        self._next_id = 0

    def _new_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, tensor):
        """Register a leaf tensor so backward() can deposit its gradient."""
        if tensor.node_id is None:
            tensor.node_id = self._new_id()
            self._leaves[tensor.node_id] = tensor
        return tensor

    def record(self, kind, out, fn):
        """Attach a backward closure for op output ``out``.

        ``fn(grad_out)`` must return an iterable of (target, grad) pairs,
        where each target is a Parameter or an input Tensor and each grad is
        a freshly allocated array.
        """
        out.node_id = self._new_id()
        self.nodes.append(_Node(kind, out.node_id, fn))
        return out

    def backward(self, loss):
        """Accumulate d(loss)/d(param) for everything reachable from loss."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None:
            return
        grads = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(node.output_id, None)
            if gout is None:
                continue
            for target, g in node.fn(gout):
                if g is None:
                    continue
                if isinstance(target, Parameter):
                    target.grad += g.reshape(target.grad.shape)
                elif target.node_id is not None:
                    # allocate on the second contribution instead of mutating,
                    # so backward closures may hand out shared references
                    if target.node_id in grads:
                        grads[target.node_id] = grads[target.node_id] + g
                    else:
                        grads[target.node_id] = g
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is not None:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _use(param):
    param.share_count += 1
    return param.value


def _mark(tape, x):
    # an input becomes differentiated the first time an op consumes it
    if tape is not None and x.requires_grad and x.node_id is None:
        tape.watch(x)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, bias=None, stride=1, pad=None):
    """2-D convolution, kernels 1x1 or 3x3, stride 1, zero padding."""
    if stride != 1:
        raise ShapeError(f"only stride 1 is supported, got {stride}")
    kout, kin, kh, kw = w.value.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    n, c, h, wd = x.shape
    if kin != c:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.value.shape}"
        )
    if pad is None:
        pad = kh // 2
    if pad != kh // 2:
        raise ShapeError(f"pad {pad} does not preserve spatial size for {kh}x{kw}")
    tape = _tape_of(x)

    if kh == 1:
        w2 = _use(w).reshape(kout, kin)
        out_data = (w2 @ x.data.reshape(n, c, h * wd)).reshape(n, kout, h, wd)
        saved = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out_data = kernels.conv3x3(xp, _use(w))
        saved = xp
    if bias is not None:
        out_data = out_data + _use(bias)[None, :, None, None]

    out = Tensor(out_data, tape=tape)
    if tape is None:
        return out
    out.requires_grad = True
    _mark(tape, x)
    xdata = x.data

    def backward(gout):
        pairs = []
        if kh == 1:
            g2 = gout.reshape(n, kout, h * wd)
            gw = (g2 @ xdata.reshape(n, kin, h * wd).transpose(0, 2, 1)).sum(axis=0)
            pairs.append((w, gw.reshape(w.value.shape)))
            if x.requires_grad:
                gx = (w.value.reshape(kout, kin).T @ g2).reshape(n, c, h, wd)
                pairs.append((x, gx))
        else:
            pairs.append((w, kernels.conv3x3_wgrad(saved, gout)))
            if x.requires_grad:
                wt = np.ascontiguousarray(
                    w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                )
                gp = np.pad(gout, ((0, 0), (0, 0), (1, 1), (1, 1)))
                pairs.append((x, kernels.conv3x3(gp, wt)))
        if bias is not None:
            pairs.append((bias, gout.sum(axis=(0, 2, 3))))
        return pairs

    return tape.record("conv2d", out, backward)


# ---------------------------------------------------------------------------
# batch normalisation


def batchnorm2d(x, gamma, beta, run_mean, run_var, train, momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation.

    ``run_mean``/``run_var`` are plain arrays updated in place in train mode
    (exponential moving average, unbiased variance) and used as fixed
    statistics in eval mode.
    """
    n, c, h, wd = x.shape
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(
            f"batchnorm2d expects gamma/beta of shape ({c},), got "
            f"{gamma.value.shape} and {beta.value.shape}"
        )
    tape = _tape_of(x)
    g = _use(gamma)[None, :, None, None]
    b = _use(beta)[None, :, None, None]

    if train:
        m = n * h * wd
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        run_mean *= 1.0 - momentum
        run_mean += momentum * mean
        run_var *= 1.0 - momentum
        run_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(run_var + eps)
        xhat = (x.data - run_mean[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(xhat * g + b, tape=tape)
    if tape is None:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        pairs = [
            (beta, gout.sum(axis=(0, 2, 3))),
            (gamma, (gout * xhat).sum(axis=(0, 2, 3))),
        ]
        if x.requires_grad:
            dxhat = gout * gamma.value[None, :, None, None]
            if train:
                m = n * h * wd
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (dxhat - s1 / m - xhat * s2 / m) * inv[None, :, None, None]
            else:
                gx = dxhat * inv[None, :, None, None]
            pairs.append((x, gx))
        return pairs

    return tape.record("batchnorm2d", out, backward)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2(x):
    n, c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape}")
    out_data, idx = kernels.maxpool2(x.data)
    tape = _tape_of(x)
    out = Tensor(out_data, tape=tape)
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        return [(x, kernels.maxpool2_grad(gout, idx))]

    return tape.record("maxpool2", out, backward)


def bilinear_up2(x):
    out_data = kernels.upsample2(x.data)
    tape = _tape_of(x)
    out = Tensor(out_data, tape=tape)
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        return [(x, kernels.upsample2_grad(gout))]

    return tape.record("bilinear_up2", out, backward)


def global_pool(x, kind):
    n, c, h, wd = x.shape
    tape = _tape_of(x)
    if kind == "avg":
        out = Tensor(x.data.mean(axis=(2, 3), keepdims=True), tape=tape)
    elif kind == "max":
        flat = x.data.reshape(n, c, h * wd)
        idx = flat.argmax(axis=2)  # first maximum in row-major order
        out = Tensor(
            np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1),
            tape=tape,
        )
    else:
        raise ValueError(f"global_pool kind must be 'max' or 'avg', got {kind!r}")
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        if kind == "avg":
            gx = np.broadcast_to(gout / (h * wd), x.shape).copy()
        else:
            gx = np.zeros((n, c, h * wd), dtype=gout.dtype)
            np.put_along_axis(gx, idx[:, :, None], gout.reshape(n, c, 1), axis=2)
            gx = gx.reshape(x.shape)
        return [(x, gx)]

    return tape.record(f"global_{kind}", out, backward)


# ---------------------------------------------------------------------------
# pointwise / shape ops


def relu(x):
    tape = _tape_of(x)
    out = Tensor(np.maximum(x.data, 0), tape=tape)
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)
    ydata = out.data

    def backward(gout):
        return [(x, gout * (ydata > 0))]

    return tape.record("relu", out, backward)


def sigmoid(x):
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    tape = _tape_of(x)
    out = Tensor(out_data, tape=tape)
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)
    ydata = out.data

    def backward(gout):
        return [(x, gout * ydata * (1.0 - ydata))]

    return tape.record("sigmoid", out, backward)


def _binary_shapes(a, b, opname):
    if a.shape == b.shape:
        return None
    n, c, h, wd = a.shape
    if b.shape == (n, c, 1, 1):
        return "b"
    if a.shape == (b.shape[0], b.shape[1], 1, 1):
        return "a"
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, which, bcast):
    if bcast == which:
        return g.sum(axis=(2, 3), keepdims=True)
    return g


def add(a, b):
    bcast = _binary_shapes(a, b, "add")
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape=tape)
    if tape is None or not (a.requires_grad or b.requires_grad):
        return out
    out.requires_grad = True
    _mark(tape, a)
    _mark(tape, b)

    def backward(gout):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _reduce_to(gout, "a", bcast).copy()))
        if b.requires_grad:
            pairs.append((b, _reduce_to(gout, "b", bcast).copy()))
        return pairs

    return tape.record("add", out, backward)


def mul(a, b):
    bcast = _binary_shapes(a, b, "mul")
    tape = _tape_of(a, b)
    out = Tensor(a.data * b.data, tape=tape)
    if tape is None or not (a.requires_grad or b.requires_grad):
        return out
    out.requires_grad = True
    _mark(tape, a)
    _mark(tape, b)
    adata, bdata = a.data, b.data

    def backward(gout):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _reduce_to(gout * bdata, "a", bcast)))
        if b.requires_grad:
            pairs.append((b, _reduce_to(gout * adata, "b", bcast)))
        return pairs

    return tape.record("mul", out, backward)


def scale(x, s):
    """Multiply by a python scalar (used for loss averaging)."""
    tape = _tape_of(x)
    out = Tensor(x.data * s, tape=tape)
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        return [(x, gout * s)]

    return tape.record("scale", out, backward)


def concat_c(tensors):
    if not tensors:
        raise ShapeError("concat_c needs at least one tensor")
    n, _, h, wd = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != n or t.shape[2] != h or t.shape[3] != wd:
            raise ShapeError(
                f"concat_c: incompatible shapes {tensors[0].shape} and {t.shape}"
            )
    tape = _tape_of(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), tape=tape)
    if tape is None or not any(t.requires_grad for t in tensors):
        return out
    out.requires_grad = True
    for t in tensors:
        _mark(tape, t)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(gout):
        chunks = np.split(gout, splits, axis=1)
        return [
            (t, chunk.copy()) for t, chunk in zip(tensors, chunks) if t.requires_grad
        ]

    return tape.record("concat_c", out, backward)


def linear(x, w, bias=None):
    """Affine map on a pooled (n, cin, 1, 1) tensor -> (n, cout, 1, 1)."""
    n, c, h, wd = x.shape
    if (h, wd) != (1, 1):
        raise ShapeError(f"linear expects (n,c,1,1) input, got {x.shape}")
    cout, cin = w.value.shape
    if cin != c:
        raise ShapeError(
            f"linear shape mismatch: input {x.shape} vs weight {w.value.shape}"
        )
    tape = _tape_of(x)
    flat = x.data.reshape(n, c)
    out_data = flat @ _use(w).T
    if bias is not None:
        out_data = out_data + _use(bias)[None, :]
    out = Tensor(out_data.reshape(n, cout, 1, 1), tape=tape)
    if tape is None:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        g2 = gout.reshape(n, cout)
        pairs = [(w, g2.T @ flat)]
        if bias is not None:
            pairs.append((bias, g2.sum(axis=0)))
        if x.requires_grad:
            pairs.append((x, (g2 @ w.value).reshape(x.shape)))
        return pairs

    return tape.record("linear", out, backward)


def sum_all(x):
    """Reduce to a (1,1,1,1) scalar by summation."""
    tape = _tape_of(x)
    out = Tensor(x.data.sum().reshape(1, 1, 1, 1), tape=tape)
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        return [(x, np.full(x.shape, gout.reshape(-1)[0], dtype=gout.dtype))]

    return tape.record("sum_all", out, backward)


def custom_scalar(kind, x, value, grad_x):
    """Record a scalar-valued op with a precomputed input gradient.

    Used by the loss functions, whose values and adjoints are computed
    analytically from the prediction array.
    """
    tape = _tape_of(x)
    dtype = x.data.dtype
    out = Tensor(np.asarray(value, dtype=dtype).reshape(1, 1, 1, 1), tape=tape)
    if tape is None or not x.requires_grad:
        return out
    out.requires_grad = True
    _mark(tape, x)

    def backward(gout):
        return [(x, gout.reshape(-1)[0] * grad_x)]

    return tape.record(kind, out, backward)
