"""Image-space losses: L1 (or MSE) + DSSIM reconstruction, mask-blended
composite and detail loss, and the two-stage objective assembly. Every loss
returns its analytic gradient alongside the value.

SSIM uses an 11x11 Gaussian window (sigma 1.5), standard stability constants
at dynamic range 1.0, and same-size output with reflected padding; the
gradient uses the exact adjoint of the padded window filter so border pixels
check out against finite differences too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_mk: float = 0.001
    lambda_reg: float = 0.0001

    def __post_init__(self):
        if min(self.lambda_dssim, self.lambda_mk, self.lambda_reg) < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass
class LossParts:
    l_rec: float = 0.0
    l_detail: float = 0.0
    l_mk: float = 0.0
    l_reg: float = 0.0


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


_WINDOW = _gaussian_window()
_HALF = SSIM_WINDOW // 2


def _filter_axis(img: np.ndarray, axis: int) -> np.ndarray:
    """Correlate with the window along one axis, symmetric ('reflect') padding."""
    pad = [(0, 0)] * img.ndim
    pad[axis] = (_HALF, _HALF)
    xp = np.pad(img, pad, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(xp, SSIM_WINDOW, axis=axis)
    return np.tensordot(win, _WINDOW, axes=([-1], [0]))


_PAD_INDEX_CACHE: dict[int, np.ndarray] = {}


def _pad_index(length: int) -> np.ndarray:
    """Source index of every slot of a symmetric pad (handles pads wider than
    the axis, where numpy keeps reflecting)."""
    idx = _PAD_INDEX_CACHE.get(length)
    if idx is None:
        idx = np.pad(np.arange(length), (_HALF, _HALF), mode="symmetric")
        _PAD_INDEX_CACHE[length] = idx
    return idx


def _filter_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Exact adjoint of _filter_axis: full correlation followed by folding the
    symmetric padding back onto its source samples."""
    g = np.moveaxis(g, axis, -1)
    L = g.shape[-1]
    flat = g.reshape(-1, L)
    # gpad[j] = sum_i w[j - i] g[i] for j in [0, L + 2*HALF)
    gpad = np.zeros((flat.shape[0], L + 2 * _HALF), dtype=np.float64)
    for k in range(SSIM_WINDOW):
        gpad[:, k:k + L] += _WINDOW[k] * flat
    out = np.zeros_like(flat)
    np.add.at(out.T, _pad_index(L), gpad.T)
    out = out.reshape(g.shape)
    return np.moveaxis(out, -1, axis)


def _filter2d(img: np.ndarray) -> np.ndarray:
    return _filter_axis(_filter_axis(img, 0), 1)


def _filter2d_adjoint(g: np.ndarray) -> np.ndarray:
    return _filter_axis_adjoint(_filter_axis_adjoint(g, 1), 0)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean structural similarity of two images in [0, 1]."""
    _check_shapes(img_a, img_b)
    mx, my = _filter2d(img_a), _filter2d(img_b)
    rxx = _filter2d(img_a * img_a)
    ryy = _filter2d(img_b * img_b)
    rxy = _filter2d(img_a * img_b)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (rxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (rxx - mx * mx) + (ryy - my * my) + SSIM_C2
    return float(np.mean(a1 * a2 / (b1 * b2)))


def dssim_with_grad(img_a: np.ndarray, img_b: np.ndarray):
    """DSSIM = 1 - SSIM and its gradient w.r.t. img_a."""
    _check_shapes(img_a, img_b)
    mx, my = _filter2d(img_a), _filter2d(img_b)
    rxx = _filter2d(img_a * img_a)
    rxy = _filter2d(img_a * img_b)
    ryy = _filter2d(img_b * img_b)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (rxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (rxx - mx * mx) + (ryy - my * my) + SSIM_C2
    denom = b1 * b2
    smap = a1 * a2 / denom
    n = smap.size

    # partials of the per-pixel SSIM w.r.t. the windowed statistics
    dS_da1 = a2 / denom
    dS_da2 = a1 / denom
    dS_db1 = -smap / b1
    dS_db2 = -smap / b2
    g_mx = (dS_da1 * 2 * my + dS_da2 * (-2 * my) + dS_db1 * 2 * mx + dS_db2 * (-2 * mx)) / n
    g_rxx = dS_db2 / n
    g_rxy = dS_da2 * 2 / n
    grad_ssim = (_filter2d_adjoint(g_mx)
                 + 2 * img_a * _filter2d_adjoint(g_rxx)
                 + img_b * _filter2d_adjoint(g_rxy))
    return 1.0 - float(np.mean(smap)), -grad_ssim


def l_rec(rendered: np.ndarray, reference: np.ndarray, *, lambda_dssim: float = 0.2,
          use_mse: bool = False):
    """Reconstruction loss |rendered - reference| + lambda * DSSIM (the pixel
    term switches to MSE with use_mse). Returns (loss, grad w.r.t. rendered)."""
    _check_shapes(rendered, reference)
    diff = rendered - reference
    n = diff.size
    if use_mse:
        pix = float(np.mean(diff * diff))
        g_pix = 2.0 * diff / n
    else:
        pix = float(np.mean(np.abs(diff)))
        g_pix = np.sign(diff) / n
    d, g_d = dssim_with_grad(rendered, reference)
    return pix + lambda_dssim * d, g_pix + lambda_dssim * g_d


def composite_image(mask: np.ndarray, aif: np.ndarray, defocused: np.ndarray) -> np.ndarray:
    """Blend: mask * all-in-focus + (1 - mask) * defocused, mask in [0, 1]."""
    _check_shapes(aif, defocused)
    m = mask[:, :, None] if mask.ndim == 2 and aif.ndim == 3 else mask
    return m * aif + (1.0 - m) * defocused


def l_detail(mask: np.ndarray, aif: np.ndarray, defocused: np.ndarray,
             reference: np.ndarray, *, lambda_dssim: float = 0.2, use_mse: bool = False):
    """Detail loss: reconstruction loss of the mask-blended composite against
    the reference, with gradients distributed to the all-in-focus image, the
    defocused image and the mask.

    Returns (loss, g_aif, g_defocused, g_mask).
    """
    comp = composite_image(mask, aif, defocused)
    loss, g_comp = l_rec(comp, reference, lambda_dssim=lambda_dssim, use_mse=use_mse)
    m = mask[:, :, None]
    g_aif = g_comp * m
    g_def = g_comp * (1.0 - m)
    g_mask = np.sum(g_comp * (aif - defocused), axis=2)
    return loss, g_aif, g_def, g_mask


def total_objective(stage: str, parts: LossParts, weights: LossWeights) -> float:
    """Stage objective: warm-up trains on the reconstruction term alone; the
    refinement stage swaps it for the detail + mask terms."""
    if stage == "warmup":
        return parts.l_rec
    if stage == "refine":
        return parts.l_detail + weights.lambda_mk * parts.l_mk + weights.lambda_reg * parts.l_reg
    raise ValidationError(f"unknown stage {stage!r}")


def psnr(img_a: np.ndarray, img_b: np.ndarray, data_range: float = 1.0) -> float:
    _check_shapes(img_a, img_b)
    mse = float(np.mean((img_a - img_b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range * data_range / mse)
