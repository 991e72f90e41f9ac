"""Segmentation losses with analytic gradients.

All losses treat the single sigmoid output channel as a two-class problem
with class probabilities (p, 1-p) against labels (g, 1-g), computed jointly
over every pixel of the batch. Each loss has a closed-form value/gradient
core working on plain arrays, plus a tape-aware wrapper used in training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_CLAMP = 1e-12
SMOOTH_EPS = 1e-6

LOSS_KINDS = ("dice", "poly", "topk", "softiou", "ce", "dice_topk", "poly_topk", "dptk")


@dataclass
class LossConfig:
    kind: str = "dptk"
    alpha: float = 3.1
    k_percent: float = 10.0

    def validate(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.k_percent <= 100:
            raise ValueError(f"k_percent must be in (0, 100], got {self.k_percent}")
        return self


def _pair_arrays(p, g):
    pa = p.data if isinstance(p, Tensor) else np.asarray(p)
    ga = g.data if isinstance(g, Tensor) else np.asarray(g)
    if pa.shape != ga.shape:
        raise ShapeError(f"prediction {pa.shape} and label {ga.shape} shapes differ")
    return pa, ga.astype(pa.dtype)


def _wrap(kind, p, value, grad):
    if isinstance(p, Tensor):
        return ad.custom_scalar(kind, p, value, grad)
    return Tensor(np.asarray(value, dtype=np.asarray(p).dtype).reshape(1, 1, 1, 1))


def _ce_terms(pa, ga):
    # per-pixel cross entropy summed over the two classes, and its gradient
    pc = np.maximum(pa, LOG_CLAMP)
    qc = np.maximum(1.0 - pa, LOG_CLAMP)
    ce = -(ga * np.log(pc) + (1.0 - ga) * np.log(qc))
    grad = -(np.where(pa > LOG_CLAMP, ga / pc, 0.0)
             - np.where(1.0 - pa > LOG_CLAMP, (1.0 - ga) / qc, 0.0))
    return ce, grad


def dice_core(pa, ga):
    v = pa.size
    overlap = float((pa * ga + (1.0 - pa) * (1.0 - ga)).sum())
    denom = 2.0 * v + SMOOTH_EPS
    value = 1.0 - 2.0 * overlap / denom
    grad = (-2.0 / denom) * (2.0 * ga - 1.0)
    return value, grad


def poly_core(pa, ga, alpha):
    v = pa.size
    ce, ce_grad = _ce_terms(pa, ga)
    match = float((pa * ga + (1.0 - pa) * (1.0 - ga)).sum()) / v
    value = float(ce.sum()) / v + alpha * (1.0 - match)
    grad = ce_grad / v - (alpha / v) * (2.0 * ga - 1.0)
    return value, grad


def topk_core(pa, ga, k_percent):
    v = pa.size
    ce, ce_grad = _ce_terms(pa, ga)
    m = math.ceil(k_percent / 100.0 * v)
    flat = ce.reshape(-1)
    # stable sort on the negated values: ties resolve to the lower pixel index
    order = np.argsort(-flat, kind="stable")[:m]
    value = float(flat[order].sum()) / v
    grad = np.zeros_like(pa).reshape(-1)
    grad[order] = ce_grad.reshape(-1)[order] / v
    return value, grad.reshape(pa.shape)


def ce_core(pa, ga):
    v = pa.size
    ce, ce_grad = _ce_terms(pa, ga)
    return float(ce.sum()) / v, ce_grad / v


def softiou_core(pa, ga):
    inter = float((pa * ga).sum())
    union = float(pa.sum() + ga.sum()) - inter + SMOOTH_EPS
    value = 1.0 - inter / union
    grad = -(ga * union - inter * (1.0 - ga)) / (union * union)
    return value, grad


def dptk_core(pa, ga, alpha, k_percent):
    vd, gd = dice_core(pa, ga)
    vp, gp = poly_core(pa, ga, alpha)
    vt, gt = topk_core(pa, ga, k_percent)
    return vd + vp + vt, gd + gp + gt


# ---------------------------------------------------------------------------
# tape-aware wrappers


def dice_loss(p, g):
    pa, ga = _pair_arrays(p, g)
    value, grad = dice_core(pa, ga)
    return _wrap("dice_loss", p, value, grad)


def poly_loss(p, g, alpha=3.1):
    pa, ga = _pair_arrays(p, g)
    value, grad = poly_core(pa, ga, alpha)
    return _wrap("poly_loss", p, value, grad)


def topk_loss(p, g, k_percent=10.0):
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    pa, ga = _pair_arrays(p, g)
    value, grad = topk_core(pa, ga, k_percent)
    return _wrap("topk_loss", p, value, grad)


def ce_loss(p, g):
    pa, ga = _pair_arrays(p, g)
    value, grad = ce_core(pa, ga)
    return _wrap("ce_loss", p, value, grad)


def softiou_loss(p, g):
    pa, ga = _pair_arrays(p, g)
    value, grad = softiou_core(pa, ga)
    return _wrap("softiou_loss", p, value, grad)


def dptk_loss(p, g, alpha=3.1, k_percent=10.0):
    pa, ga = _pair_arrays(p, g)
    value, grad = dptk_core(pa, ga, alpha, k_percent)
    return _wrap("dptk_loss", p, value, grad)


def make_loss(cfg: LossConfig):
    """Bind a LossConfig to a callable loss(p, g) -> scalar Tensor."""
    cfg.validate()
    kind, alpha, k = cfg.kind, cfg.alpha, cfg.k_percent
    if kind == "dice":
        return dice_loss
    if kind == "poly":
        return lambda p, g: poly_loss(p, g, alpha)
    if kind == "topk":
        return lambda p, g: topk_loss(p, g, k)
    if kind == "softiou":
        return softiou_loss
    if kind == "ce":
        return ce_loss
    if kind == "dice_topk":
        return lambda p, g: ad.add(dice_loss(p, g), topk_loss(p, g, k))
    if kind == "poly_topk":
        return lambda p, g: ad.add(poly_loss(p, g, alpha), topk_loss(p, g, k))
    return lambda p, g: dptk_loss(p, g, alpha, k)


# ---------------------------------------------------------------------------
# curve emission


def loss_curve_rows(alpha, k_percent, grid):
    """Loss value and d(loss)/dp per kind for one positive pixel (g = 1).

    Returns rows (p, kind, value, grad) for every p in the grid.
    """
    cores = {
        "ce": lambda pa, ga: ce_core(pa, ga),
        "dice": lambda pa, ga: dice_core(pa, ga),
        "poly": lambda pa, ga: poly_core(pa, ga, alpha),
        "topk": lambda pa, ga: topk_core(pa, ga, k_percent),
        "softiou": lambda pa, ga: softiou_core(pa, ga),
        "dice_topk": lambda pa, ga: _sum2(dice_core(pa, ga), topk_core(pa, ga, k_percent)),
        "poly_topk": lambda pa, ga: _sum2(poly_core(pa, ga, alpha), topk_core(pa, ga, k_percent)),
        "dptk": lambda pa, ga: dptk_core(pa, ga, alpha, k_percent),
    }
    g = np.ones((1, 1, 1, 1))
    rows = []
    for p in grid:
        if not 0.0 < p < 1.0:
            raise ValueError(f"curve grid values must lie in (0, 1), got {p}")
        pa = np.full((1, 1, 1, 1), p, dtype=np.float64)
        for kind, core in cores.items():
            value, grad = core(pa, g)
            rows.append((float(p), kind, float(value), float(grad.reshape(-1)[0])))
    return rows


def _sum2(a, b):
    return a[0] + b[0], a[1] + b[1]


def emit_loss_curves(alpha, k_percent, grid, path):
    """Write the loss/gradient curve table as CSV with header p,kind,value,grad."""
    rows = loss_curve_rows(alpha, k_percent, grid)
    with open(path, "w", encoding="utf-8") as f:
        f.write("p,kind,value,grad\n")
        for p, kind, value, grad in rows:
            f.write(f"{p:.10g},{kind},{value:.10g},{grad:.10g}\n")
    return rows
