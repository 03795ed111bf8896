"""Rate-perception training objective: L1 + weighted perceptual proxy + lambda(QP) * bpp."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WINDOW = 7
C1 = 1e-4
C2 = 9e-4
N_SCALES = 3
MIN_SIZE = 16


@dataclass(frozen=True)
class LossWeights:
    w_p: float = 1.0
    w1: float = -0.115
    w2: float = 1.145

    def __post_init__(self):
        if not self.w_p >= 0:
            raise ValueError(f"w_p must be >= 0, got {self.w_p}")


@dataclass
class LossReport:
    l1: float
    perceptual: float
    bpp: float
    lam: float
    total: float

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _check_pair(a, b, name):
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1_loss(a, b) -> Tensor:
    a, b = _check_pair(a, b, "l1_loss")
    return ad.mean(ad.tabs(a - b))


# -- perceptual proxy -------------------------------------------------------

def _box_sum_np(x, r):
    """Zero-padded (2r+1)x(2r+1) box sum over the last two axes, same output size."""
    for axis in (-2, -1):
        pad = [(0, 0)] * x.ndim
        pad[axis] = (r + 1, r)
        c = np.cumsum(np.pad(x, pad), axis=axis)
        n = x.shape[axis]
        hi = np.take(c, np.arange(2 * r + 1, 2 * r + 1 + n), axis=axis)
        lo = np.take(c, np.arange(0, n), axis=axis)
        x = hi - lo
    return x


def _box_sum(x: Tensor, r) -> Tensor:
    # A symmetric zero-padded box filter is self-adjoint.
    return ad._make(_box_sum_np(x.data, r), (x,), lambda g: (_box_sum_np(g, r),), "box_sum")


def _window_mean(x: Tensor, inv_count) -> Tensor:
    return _box_sum(x, WINDOW // 2) * inv_count


def _pool2(x: Tensor) -> Tensor:
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if (h2 * 2, w2 * 2) != (h, w):
        x = ad.getitem(x, (Ellipsis, slice(0, h2 * 2), slice(0, w2 * 2)))
    x = ad.reshape(x, (*lead, h2, 2, w2, 2))
    return ad.mean(x, axis=(-3, -1))


def _dissimilarity(a: Tensor, b: Tensor) -> Tensor:
    h, w = a.shape[-2:]
    count = _box_sum_np(np.ones((h, w)), WINDOW // 2)
    inv = np.broadcast_to(1.0 / count, a.shape).astype(a.dtype)
    mu_a = _window_mean(a, inv)
    mu_b = _window_mean(b, inv)
    var_a = _window_mean(a * a, inv) - mu_a * mu_a
    var_b = _window_mean(b * b, inv) - mu_b * mu_b
    cov = _window_mean(a * b, inv) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + C1) * (cov * 2.0 + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return 1.0 - ad.mean(num / den)


def perceptual_proxy(a, b) -> Tensor:
    """Three-scale structural dissimilarity with 7x7 windows, averaged over scales.

    Each scale computes one minus the mean local similarity map. Windows are
    zero padded at the border and normalized by the number of in-image
    pixels, so a constant image has exactly its constant as local mean.
    """
    a, b = _check_pair(a, b, "perceptual_proxy")
    if a.ndim < 2 or min(a.shape[-2:]) < MIN_SIZE:
        raise ValueError(f"perceptual_proxy needs spatial size >= {MIN_SIZE}, got {a.shape}")
    total = None
    for s in range(N_SCALES):
        if s:
            a, b = _pool2(a), _pool2(b)
        d = _dissimilarity(a, b)
        total = d if total is None else total + d
    return total * (1.0 / N_SCALES)


# -- schedule and total -------------------------------------------------------

def lambda_qp(qp, w: LossWeights = LossWeights()) -> float:
    if not 0 <= qp <= 51:
        raise ValueError(f"qp must be in [0, 51], got {qp}")
    return math.exp(w.w1 * qp + w.w2)


def total_loss(original, reconstructed, bpp, qp, w: LossWeights = LossWeights()):
    """Scalar objective and a float breakdown of its parts."""
    l1 = l1_loss(original, reconstructed)
    perc = perceptual_proxy(original, reconstructed)
    lam = lambda_qp(qp, w)
    bpp = ad.reshape(ad.as_tensor(bpp), (1,))
    total = l1 + perc * w.w_p + bpp * lam
    report = LossReport(
        l1=float(l1.data[0]),
        perceptual=float(perc.data[0]),
        bpp=float(bpp.data[0]),
        lam=lam,
        total=float(total.data[0]),
    )
    return total, report
