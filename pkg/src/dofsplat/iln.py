"""In-Focus Localization Network: a 4-layer 3x3 convolutional network that
predicts a per-pixel in-focus mask from the rendered defocused image, depth
map and CoC map, with positional encodings of pixel coordinates and view index
injected before the third layer. Forward and backward are implemented here
directly (no autograd); the backward pass also returns gradients w.r.t. the
rendered inputs so the detail loss reaches the rasterizer through the mask.

Layers: 5 -> 48 -> 16, concat 48 PE channels -> 16 -> 1, kernel 3x3, stride 1,
zero padding 1, leaky-ReLU (slope 0.01) between layers, sigmoid output.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import StateError, ValidationError

LEAKY_SLOPE = 0.01


@dataclass
class PEConfig:
    """Positional-encoding plan; the injected block must have 48 channels."""

    coord_freqs: int = 10    # per coordinate: sin+cos at 2^0 pi .. 2^(L-1) pi
    view_freqs: int = 4

    @property
    def channels(self) -> int:
        return 2 * 2 * self.coord_freqs + 2 * self.view_freqs

    def __post_init__(self):
        if self.channels != 48:
            raise ValidationError(f"positional encoding must total 48 channels, got {self.channels}")


def positional_encode(view_index: int, n_views: int, height: int, width: int,
                      config: PEConfig | None = None) -> np.ndarray:
    """(H, W, 48) sin/cos encoding of pixel coordinates in [-1, 1] (40 chans)
    and of the normalized view index broadcast to all pixels (8 chans)."""
    config = config or PEConfig()
    xs = 2.0 * (np.arange(width, dtype=np.float64) + 0.5) / width - 1.0
    ys = 2.0 * (np.arange(height, dtype=np.float64) + 0.5) / height - 1.0
    X = np.broadcast_to(xs[None, :], (height, width))
    Y = np.broadcast_to(ys[:, None], (height, width))
    chans = []
    for v in (X, Y):
        for k in range(config.coord_freqs):
            arg = (2.0 ** k) * np.pi * v
            chans.append(np.sin(arg))
            chans.append(np.cos(arg))
    nu = 0.0 if n_views <= 1 else 2.0 * (view_index / (n_views - 1)) - 1.0
    for k in range(config.view_freqs):
        arg = (2.0 ** k) * np.pi * nu
        chans.append(np.full((height, width), np.sin(arg)))
        chans.append(np.full((height, width), np.cos(arg)))
    return np.stack(chans, axis=-1)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-1 convolution with zero padding 1. x: (H, W, Cin),
    w: (3, 3, Cin, Cout), b: (Cout,)."""
    H, W, Cin = x.shape
    xp = np.zeros((H + 2, W + 2, Cin), dtype=np.float64)
    xp[1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(H * W, 9 * Cin)
    out = cols @ w.reshape(9 * Cin, -1)
    return out.reshape(H, W, -1) + b


def conv3x3_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    """Gradients of conv3x3: returns (gx, gw, gb)."""
    H, W, Cin = x.shape
    Cout = w.shape[3]
    xp = np.zeros((H + 2, W + 2, Cin), dtype=np.float64)
    xp[1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    cols = win.transpose(0, 1, 3, 4, 2).reshape(H * W, 9 * Cin)
    gy2 = gy.reshape(H * W, Cout)
    gw = (cols.T @ gy2).reshape(3, 3, Cin, Cout)
    gb = gy2.sum(axis=0)
    gcols = gy2 @ w.reshape(9 * Cin, Cout).T                 # (H*W, 9*Cin)
    gcols = gcols.reshape(H, W, 3, 3, Cin)
    gxp = np.zeros_like(xp)
    for di in range(3):                                      # scatter the 9 taps back
        for dj in range(3):
            gxp[di:di + H, dj:dj + W] += gcols[:, :, di, dj, :]
    return gxp[1:-1, 1:-1], gw, gb


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, LEAKY_SLOPE)


@dataclass
class ILNParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray

    ARRAY_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 5, hidden1: int = 48,
             hidden2: int = 16, pe_channels: int = 48) -> "ILNParams":
        """He-style initialization; the final layer starts small so the mask
        begins near 0.5 everywhere."""
        def he(cin, cout, gain=1.0):
            std = gain * np.sqrt(2.0 / (9 * cin))
            return rng.normal(0.0, std, (3, 3, cin, cout))

        return cls(
            w1=he(in_channels, hidden1), b1=np.zeros(hidden1),
            w2=he(hidden1, hidden2), b2=np.zeros(hidden2),
            w3=he(hidden2 + pe_channels, hidden2), b3=np.zeros(hidden2),
            w4=he(hidden2, 1, gain=0.1), b4=np.zeros(1),
        )

    def copy(self) -> "ILNParams":
        return ILNParams(*[getattr(self, f).copy() for f in self.ARRAY_FIELDS])

    def all_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f)).all() for f in self.ARRAY_FIELDS)


@dataclass
class ILNGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray


def iln_forward(params: ILNParams, image: np.ndarray, depth: np.ndarray,
                coc: np.ndarray, pe: np.ndarray):
    """Predict the in-focus mask, values strictly in (0, 1).

    Returns (mask, cache); the cache feeds iln_backward.
    """
    H, W = depth.shape
    if image.shape[:2] != (H, W) or coc.shape != (H, W) or pe.shape[:2] != (H, W):
        raise ValidationError("ILN inputs must share the same spatial shape")
    x0 = np.concatenate([image, depth[:, :, None], coc[:, :, None]], axis=2)
    z1 = conv3x3(x0, params.w1, params.b1)
    a1 = leaky_relu(z1)
    z2 = conv3x3(a1, params.w2, params.b2)
    a2 = leaky_relu(z2)
    x3 = np.concatenate([a2, pe], axis=2)
    z3 = conv3x3(x3, params.w3, params.b3)
    a3 = leaky_relu(z3)
    z4 = conv3x3(a3, params.w4, params.b4)[:, :, 0]
    mask = 1.0 / (1.0 + np.exp(-z4))
    cache = (x0, z1, a1, z2, a2, x3, z3, a3, mask)
    return mask, cache


def iln_backward(params: ILNParams, cache, g_mask: np.ndarray):
    """Backpropagate d(loss)/d(mask) through the network.

    Returns (ILNGrads, g_image, g_depth, g_coc).
    """
    if cache is None:
        raise StateError("iln_backward requires the cache from a matching iln_forward call")
    x0, z1, a1, z2, a2, x3, z3, a3, mask = cache
    n_hidden2 = a2.shape[2]
    gz4 = (g_mask * mask * (1.0 - mask))[:, :, None]
    ga3, gw4, gb4 = conv3x3_backward(a3, params.w4, gz4)
    gz3 = ga3 * leaky_relu_grad(z3)
    gx3, gw3, gb3 = conv3x3_backward(x3, params.w3, gz3)
    ga2 = gx3[:, :, :n_hidden2]                     # PE channels carry no gradient
    gz2 = ga2 * leaky_relu_grad(z2)
    ga1, gw2, gb2 = conv3x3_backward(a1, params.w2, gz2)
    gz1 = ga1 * leaky_relu_grad(z1)
    gx0, gw1, gb1 = conv3x3_backward(x0, params.w1, gz1)
    grads = ILNGrads(w1=gw1, b1=gb1, w2=gw2, b2=gb2, w3=gw3, b3=gb3, w4=gw4, b4=gb4)
    return grads, gx0[:, :, 0:3], gx0[:, :, 3], gx0[:, :, 4]


def mask_correlation_loss(mask: np.ndarray, coc: np.ndarray, eps: float = 1e-12):
    """1 - Pearson(1 - mask, coc map): pulls the mask high where the CoC is
    small, invariant to positive affine transforms of either argument.

    Returns (loss, d_loss/d_mask). Constant inputs carry no correlation signal;
    the contribution is skipped (0 loss, 0 grad) with a warning.
    """
    a = (1.0 - mask).ravel()
    b = coc.ravel()
    ac = a - a.mean()
    bc = b - b.mean()
    saa = float(ac @ ac)
    sbb = float(bc @ bc)
    if saa <= eps or sbb <= eps:
        warnings.warn("mask correlation loss skipped: zero variance input")
        return 0.0, np.zeros_like(mask)
    sab = float(ac @ bc)
    denom = np.sqrt(saa * sbb)
    rho = sab / denom
    # d rho / d a, then d a / d mask = -1
    d_rho_da = (bc - (sab / saa) * ac) / denom
    d_mask = d_rho_da.reshape(mask.shape)   # loss = 1 - rho, two sign flips cancel
    return 1.0 - rho, d_mask


def mask_entropy_reg(mask: np.ndarray, symmetric: bool = False, eps: float = 1e-8):
    """Mean of -m log(m): pushes the mask toward binary values (maximum at
    m = 1/e). The symmetric variant adds -(1-m) log(1-m).

    Returns (loss, d_loss/d_mask).
    """
    m = mask
    n = m.size
    loss = float(np.mean(-m * np.log(m + eps)))
    grad = -(np.log(m + eps) + m / (m + eps)) / n
    if symmetric:
        loss += float(np.mean(-(1 - m) * np.log(1 - m + eps)))
        grad += (np.log(1 - m + eps) + (1 - m) / (1 - m + eps)) / n
    return loss, grad
