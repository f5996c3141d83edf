"""Tile-based forward compositing of blur-convolved 2D Gaussians into
color/depth/CoC/alpha images, and the analytic backward pass.

Forward, per pixel x with contributors sorted front to back:

    color(x) = sum_i T_i a_i c_i + T_end * bg      a_i = o_i * G_i(x)
    depth(x) = sum_i T_i a_i z_i                   T_i = prod_{j<i} (1 - a_j)
    coc(x)   = sum_i T_i a_i R_i

where G_i is evaluated from the convolved covariance cov'' = cov' + a I with
a = R_i^2 / (2 ln 4) the blur variance from the thin-lens CoC radius R_i.

Compositing rules: alpha is clamped at 0.99, contributors with alpha < 1/255
are skipped, and a pixel terminates when its transmittance would drop below
1e-4. A contributor's footprint is the axis-aligned box of half-width
3 sigma_max of cov'' around its projected mean; pixels outside it are skipped.

The backward pass reuses the projected intermediates retained by the forward
call and recomputes the per-tile blending state, so no per-pixel contributor
lists are stored. By default gradient flow from the CoC quantities to the
Gaussian depth z is disabled (it can be re-enabled via settings) so that the
actively-updated lens parameters do not push the geometry around.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dof
from .core import (CameraPose, GradientSet, LensParams, RenderOutput, Scene,
                   SH_C0, SH_C1, StateError, eval_sh_colors, normalize_quats,
                   quat_to_rot)
from .projection import (DEFAULT_NEAR, LOWPASS, footprint_radius, perspective_jacobian,
                         project_arrays, visible_on_screen)

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_FLOOR = 1e-4


@dataclass
class RasterSettings:
    tile_size: int = 16
    near: float = DEFAULT_NEAR
    lowpass: float = LOWPASS
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    coc_z_grad: bool = False
    workers: int = 0          # 0 -> DOFSPLAT_THREADS env var, else 1


@dataclass
class UpstreamGrads:
    """d(loss)/d(RenderOutput); absent maps count as zero."""

    d_color: Optional[np.ndarray] = None   # (H, W, 3)
    d_depth: Optional[np.ndarray] = None   # (H, W)
    d_coc: Optional[np.ndarray] = None     # (H, W)
    d_alpha: Optional[np.ndarray] = None   # (H, W)


@dataclass
class TileIndex:
    """Per-tile contributor lists (indices into the projected arrays), each
    sorted by ascending depth with ties broken by input index."""

    tile_size: int
    n_x: int
    n_y: int
    lists: list[np.ndarray] = field(repr=False, default_factory=list)


@dataclass
class ForwardCache:
    """Everything the backward pass needs, at per-Gaussian (not per-pixel) cost."""

    scene: Scene
    cam: CameraPose
    lens: LensParams
    settings: RasterSettings
    means: np.ndarray        # (N, 2)
    cov2d: np.ndarray        # (N, 2, 2) projected + low-pass
    conv_inv: np.ndarray     # (N, 3) rows (inv00, inv01, inv11) of (cov2d + a I)^-1
    depths: np.ndarray       # (N,)
    p_cam: np.ndarray        # (N, 3)
    coc_r: np.ndarray        # (N,)
    coc_a: np.ndarray        # (N,)
    radius: np.ndarray       # (N,)
    visible: np.ndarray      # (N,) bool
    colors: np.ndarray       # (N, 3)
    opacities: np.ndarray    # (N,)
    view_dirs: Optional[np.ndarray]   # (N, 3) unit, only for SH degree 1
    tiles: TileIndex


def _n_workers(settings: RasterSettings) -> int:
    if settings.workers > 0:
        return settings.workers
    try:
        return max(1, int(os.environ.get("DOFSPLAT_THREADS", "1")))
    except ValueError:
        return 1


def _map_tiles(fn, n_tiles: int, workers: int) -> list:
    if workers <= 1 or n_tiles <= 1:
        return [fn(t) for t in range(n_tiles)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_tiles)))


def build_tile_index(means: np.ndarray, radius: np.ndarray, order: np.ndarray,
                     width: int, height: int, tile_size: int) -> TileIndex:
    """Bin Gaussians (given in composite order) into every tile their footprint
    box overlaps."""
    n_x = (width + tile_size - 1) // tile_size
    n_y = (height + tile_size - 1) // tile_size
    buckets: list[list[int]] = [[] for _ in range(n_x * n_y)]
    if len(order):
        x0 = np.clip(np.floor((means[order, 0] - radius[order]) / tile_size), 0, n_x - 1).astype(int)
        x1 = np.clip(np.floor((means[order, 0] + radius[order]) / tile_size), 0, n_x - 1).astype(int)
        y0 = np.clip(np.floor((means[order, 1] - radius[order]) / tile_size), 0, n_y - 1).astype(int)
        y1 = np.clip(np.floor((means[order, 1] + radius[order]) / tile_size), 0, n_y - 1).astype(int)
        for k, g in enumerate(order):
            for ty in range(y0[k], y1[k] + 1):
                base = ty * n_x
                for tx in range(x0[k], x1[k] + 1):
                    buckets[base + tx].append(g)
    lists = [np.asarray(b, dtype=np.intp) for b in buckets]
    return TileIndex(tile_size=tile_size, n_x=n_x, n_y=n_y, lists=lists)


def _tile_pixels(t: int, tiles: TileIndex, width: int, height: int):
    """Pixel-center coordinate vectors and the (row, col) window of tile t."""
    ts = tiles.tile_size
    ty, tx = divmod(t, tiles.n_x)
    r0, r1 = ty * ts, min((ty + 1) * ts, height)
    c0, c1 = tx * ts, min((tx + 1) * ts, width)
    px = (np.arange(c0, c1, dtype=np.float64) + 0.5)
    py = (np.arange(r0, r1, dtype=np.float64) + 0.5)
    X = np.broadcast_to(px[None, :], (r1 - r0, c1 - c0)).reshape(-1)
    Y = np.broadcast_to(py[:, None], (r1 - r0, c1 - c0)).reshape(-1)
    return X, Y, (r0, r1, c0, c1)


def _blend_state(cache: ForwardCache, idx: np.ndarray, X: np.ndarray, Y: np.ndarray):
    """Vectorized front-to-back blending state for one tile.

    Returns (d0, d1, G, A_raw, A, T, w, include) with shape (K, P): pixel
    offsets, Gaussian values, raw/clamped alphas, transmittance before each
    contributor, composite weights, and the mask of contributors that actually
    composited.
    """
    d0 = X[None, :] - cache.means[idx, 0][:, None]
    d1 = Y[None, :] - cache.means[idx, 1][:, None]
    i00 = cache.conv_inv[idx, 0][:, None]
    i01 = cache.conv_inv[idx, 1][:, None]
    i11 = cache.conv_inv[idx, 2][:, None]
    sig = 0.5 * (i00 * d0 * d0 + 2.0 * i01 * d0 * d1 + i11 * d1 * d1)
    G = np.exp(-sig)
    A_raw = cache.opacities[idx][:, None] * G
    A = np.minimum(A_raw, ALPHA_CLAMP)
    r = cache.radius[idx][:, None]
    eligible = (np.abs(d0) <= r) & (np.abs(d1) <= r) & (A >= ALPHA_SKIP)
    A_eff = np.where(eligible, A, 0.0)
    one_minus = 1.0 - A_eff
    T = np.ones_like(A_eff)
    if len(idx) > 1:
        np.cumprod(one_minus[:-1], axis=0, out=T[1:])
    # a pixel terminates at the first contributor that would push T below the
    # floor; that contributor and everything behind it are dropped
    bad = eligible & (T * one_minus < T_FLOOR)
    include = eligible & (np.cumsum(bad, axis=0) == 0)
    w = np.where(include, T * A_eff, 0.0)
    return d0, d1, G, A_raw, A_eff, T, w, include


def _prepare(scene: Scene, cam: CameraPose, lens: LensParams,
             settings: RasterSettings) -> ForwardCache:
    pa = project_arrays(scene, cam, near=settings.near, lowpass=settings.lowpass)
    z = pa.depths
    safe_z = np.where(pa.in_front, z, 1.0)
    if lens.Q > 0.0:
        coc_r = 0.5 * lens.Q * np.abs(1.0 / safe_z - 1.0 / lens.f)
    else:
        coc_r = np.zeros_like(z)
    coc_a = dof.KERNEL_NORM * coc_r * coc_r

    conv = dof.convolve_cov(pa.covs, coc_a)
    radius = footprint_radius(conv)
    visible = pa.in_front & visible_on_screen(pa.means, radius, cam.width, cam.height)

    det = conv[:, 0, 0] * conv[:, 1, 1] - conv[:, 0, 1] * conv[:, 1, 0]
    conv_inv = np.stack([conv[:, 1, 1] / det, -conv[:, 0, 1] / det, conv[:, 0, 0] / det], axis=1)

    view_dirs = None
    if scene.sh_degree == 1:
        rel = scene.centers - cam.position[None, :]
        norm = np.linalg.norm(rel, axis=1, keepdims=True)
        view_dirs = rel / np.maximum(norm, 1e-12)
    colors = eval_sh_colors(scene.sh, view_dirs)

    order = np.flatnonzero(visible)
    order = order[np.argsort(z[order], kind="stable")]
    tiles = build_tile_index(pa.means, radius, order, cam.width, cam.height,
                             settings.tile_size)
    return ForwardCache(scene=scene, cam=cam, lens=lens, settings=settings,
                        means=pa.means, cov2d=pa.covs, conv_inv=conv_inv,
                        depths=z, p_cam=pa.p_cam, coc_r=coc_r, coc_a=coc_a,
                        radius=radius, visible=visible, colors=colors,
                        opacities=scene.opacities, view_dirs=view_dirs, tiles=tiles)


def render(scene: Scene, cam: CameraPose, lens: LensParams,
           settings: Optional[RasterSettings] = None) -> RenderOutput:
    """Forward render; the returned output retains the intermediates needed by
    render_backward."""
    settings = settings or RasterSettings()
    H, W = cam.height, cam.width
    bg = np.asarray(settings.background, dtype=np.float64)

    color = np.zeros((H, W, 3), dtype=np.float64)
    depth = np.zeros((H, W), dtype=np.float64)
    coc = np.zeros((H, W), dtype=np.float64)
    alpha = np.zeros((H, W), dtype=np.float64)

    if len(scene) == 0:
        color[:] = bg
        return RenderOutput(color, depth, coc, alpha, cache=None)

    cache = _prepare(scene, cam, lens, settings)
    tiles = cache.tiles

    def run_tile(t: int):
        idx = tiles.lists[t]
        X, Y, win = _tile_pixels(t, tiles, W, H)
        if len(idx) == 0:
            return win, None
        _, _, _, _, _, _, w, _ = _blend_state(cache, idx, X, Y)
        tile_color = w.T @ cache.colors[idx]           # (P, 3)
        tile_depth = w.T @ cache.depths[idx]
        tile_coc = w.T @ cache.coc_r[idx]
        tile_alpha = w.sum(axis=0)
        return win, (tile_color, tile_depth, tile_coc, tile_alpha)

    results = _map_tiles(run_tile, len(tiles.lists), _n_workers(settings))
    for win, data in results:
        r0, r1, c0, c1 = win
        if data is None:
            continue
        tc, td, tr, ta = data
        shape = (r1 - r0, c1 - c0)
        color[r0:r1, c0:c1] = tc.reshape(shape + (3,))
        depth[r0:r1, c0:c1] = td.reshape(shape)
        coc[r0:r1, c0:c1] = tr.reshape(shape)
        alpha[r0:r1, c0:c1] = ta.reshape(shape)

    color += (1.0 - alpha)[:, :, None] * bg
    return RenderOutput(color, depth, coc, alpha, cache=cache)


def render_all_in_focus(scene: Scene, cam: CameraPose,
                        settings: Optional[RasterSettings] = None,
                        f: float = 1.0) -> RenderOutput:
    """Pinhole render: identical to render() with aperture parameter Q = 0."""
    return render(scene, cam, LensParams(f=f, Q=0.0), settings)


def _quat_rotation_grads(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: shape (N, 4, 3, 3), wxyz component order."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dRw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dRx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dRy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dRz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    out = 2.0 * np.stack([dRw, dRx, dRy, dRz], axis=1)
    return out.reshape(len(q), 4, 3, 3)


def render_backward(output: RenderOutput, upstream: UpstreamGrads) -> GradientSet:
    """Analytic backward pass producing gradients for every Gaussian attribute
    (physical space) and for the view's lens parameters (f, Q).

    The chain runs upstream map grads -> composite weights -> alpha ->
    (mean, convolved covariance) -> projected covariance and blur variance ->
    scene parameters and (f, Q). Requires the intermediates retained by a
    matching render() call.
    """
    cache: ForwardCache = output.cache
    if cache is None:
        raise StateError("render_backward needs the forward intermediates; "
                         "call render() first and pass its output")
    scene, cam, lens, settings = cache.scene, cache.cam, cache.lens, cache.settings
    H, W = cam.height, cam.width
    N = len(scene)
    grads = GradientSet.zeros_like(scene)
    if N == 0:
        return grads

    bg = np.asarray(settings.background, dtype=np.float64)
    gC = upstream.d_color if upstream.d_color is not None else np.zeros((H, W, 3))
    gD = upstream.d_depth if upstream.d_depth is not None else np.zeros((H, W))
    gM = upstream.d_coc if upstream.d_coc is not None else np.zeros((H, W))
    gA = upstream.d_alpha if upstream.d_alpha is not None else np.zeros((H, W))

    # per-Gaussian accumulators over all tiles
    acc_color = np.zeros((N, 3))
    acc_alpha_o = np.zeros(N)       # d(alpha)/d(opacity) channel: sum of dalpha * G
    acc_mean = np.zeros((N, 2))
    acc_lam = np.zeros((N, 3))      # dL/d(inverse covariance), rows (00, 01, 11)
    acc_zmap = np.zeros(N)          # depth-map path
    acc_rmap = np.zeros(N)          # coc-map path

    tiles = cache.tiles

    def run_tile(t: int):
        idx = tiles.lists[t]
        if len(idx) == 0:
            return None
        X, Y, (r0, r1, c0, c1) = _tile_pixels(t, tiles, W, H)
        d0, d1, G, A_raw, A_eff, T, w, include = _blend_state(cache, idx, X, Y)

        tgC = gC[r0:r1, c0:c1].reshape(-1, 3)
        tgD = gD[r0:r1, c0:c1].reshape(-1)
        tgM = gM[r0:r1, c0:c1].reshape(-1)
        tgA = gA[r0:r1, c0:c1].reshape(-1)

        # dL/dw for each contributor/pixel
        ghat = (cache.colors[idx] @ tgC.T) + cache.depths[idx][:, None] * tgD[None, :] \
            + cache.coc_r[idx][:, None] * tgM[None, :] + tgA[None, :]

        wg = w * ghat
        # suffix sum over contributors behind i, plus the background term
        suffix = np.cumsum(wg[::-1], axis=0)[::-1] - wg
        t_end = 1.0 - w.sum(axis=0)                       # transmittance after all contributors
        bg_dot = tgC @ bg                                 # (P,)
        dalpha = T * ghat - (suffix + t_end[None, :] * bg_dot[None, :]) / (1.0 - A_eff)
        dalpha = np.where(include & (A_raw < ALPHA_CLAMP), dalpha, 0.0)

        g_sigma = -dalpha * cache.opacities[idx][:, None] * G

        i00 = cache.conv_inv[idx, 0][:, None]
        i01 = cache.conv_inv[idx, 1][:, None]
        i11 = cache.conv_inv[idx, 2][:, None]
        w0 = i00 * d0 + i01 * d1
        w1 = i01 * d0 + i11 * d1

        part = {
            "idx": idx,
            "color": w @ tgC,
            "alpha_o": (dalpha * G).sum(axis=1),
            "mean": np.stack([-(g_sigma * w0).sum(axis=1), -(g_sigma * w1).sum(axis=1)], axis=1),
            # dL/dLambda as a full-matrix gradient (off-diagonals counted separately)
            "lam": np.stack([0.5 * (g_sigma * d0 * d0).sum(axis=1),
                             0.5 * (g_sigma * d0 * d1).sum(axis=1),
                             0.5 * (g_sigma * d1 * d1).sum(axis=1)], axis=1),
            "zmap": w @ tgD,
            "rmap": w @ tgM,
        }
        return part

    results = _map_tiles(run_tile, len(tiles.lists), _n_workers(settings))
    for part in results:              # fixed tile order keeps reductions deterministic
        if part is None:
            continue
        idx = part["idx"]
        acc_color[idx] += part["color"]
        acc_alpha_o[idx] += part["alpha_o"]
        acc_mean[idx] += part["mean"]
        acc_lam[idx] += part["lam"]
        acc_zmap[idx] += part["zmap"]
        acc_rmap[idx] += part["rmap"]

    vis = cache.visible
    # Lambda = conv^-1  =>  dL/dconv = -Lambda (dL/dLambda) Lambda
    l00, l01, l11 = cache.conv_inv[:, 0], cache.conv_inv[:, 1], cache.conv_inv[:, 2]
    g00, g01u, g11 = acc_lam[:, 0], acc_lam[:, 1], acc_lam[:, 2]
    GL = np.empty((N, 2, 2))
    GL[:, 0, 0], GL[:, 0, 1], GL[:, 1, 0], GL[:, 1, 1] = g00, g01u, g01u, g11
    LAM = np.empty((N, 2, 2))
    LAM[:, 0, 0], LAM[:, 0, 1], LAM[:, 1, 0], LAM[:, 1, 1] = l00, l01, l01, l11
    d_conv = -LAM @ GL @ LAM
    d_conv[~vis] = 0.0

    # conv = cov2d + a I: blur variance takes the trace, cov2d passes through
    d_a = d_conv[:, 0, 0] + d_conv[:, 1, 1]
    d_cov2d = d_conv

    z = cache.depths
    safe_z = np.where(cache.p_cam[:, 2] > settings.near, z, 1.0)
    Q, f = lens.Q, lens.f
    if Q > 0.0:
        grads.d_f = float(np.sum(d_a * dof.da_df(cache.coc_r, Q, f, safe_z) * vis)
                          + np.sum(acc_rmap * dof.dcoc_df(Q, f, safe_z) * vis))
        grads.d_Q = float(np.sum(d_a * dof.da_dQ(cache.coc_r, f, safe_z) * vis)
                          + np.sum(acc_rmap * dof.dcoc_dQ(f, safe_z) * vis))
    else:
        # R = 0 identically: a and the CoC map do not depend on f, and
        # dR/dQ = (1/2)|1/z - 1/f| still drives Q
        grads.d_f = 0.0
        grads.d_Q = float(np.sum(acc_rmap * dof.dcoc_dQ(f, safe_z) * vis))

    dz = acc_zmap.copy()
    if settings.coc_z_grad and Q > 0.0:
        dz += d_a * dof.da_dz(cache.coc_r, Q, f, safe_z) \
            + acc_rmap * dof.dcoc_dz(Q, f, safe_z)
    dz[~vis] = 0.0

    # cov2d = B sigma3 B^T (+ const), B = J Rw
    Rw = cam.rotation
    R3 = quat_to_rot(normalize_quats(scene.quats))
    s = scene.scales
    V = R3 * s[:, None, :]
    sigma3 = V @ V.transpose(0, 2, 1)
    J = perspective_jacobian(np.where(vis[:, None], cache.p_cam, [0.0, 0.0, 1.0]),
                             cam.fx, cam.fy)
    B = J @ Rw[None, :, :]

    d_B = 2.0 * d_cov2d @ B @ sigma3
    d_sigma3 = B.transpose(0, 2, 1) @ d_cov2d @ B
    d_J = d_B @ Rw.T[None, :, :]

    x_c, y_c = cache.p_cam[:, 0], cache.p_cam[:, 1]
    z2 = safe_z * safe_z
    z3 = z2 * safe_z
    d_pcam = np.einsum("nij,ni->nj", J, acc_mean)     # projection of the mean
    d_pcam[:, 0] += d_J[:, 0, 2] * (-cam.fx / z2)
    d_pcam[:, 1] += d_J[:, 1, 2] * (-cam.fy / z2)
    d_pcam[:, 2] += (d_J[:, 0, 0] * (-cam.fx / z2) + d_J[:, 0, 2] * (2 * cam.fx * x_c / z3)
                     + d_J[:, 1, 1] * (-cam.fy / z2) + d_J[:, 1, 2] * (2 * cam.fy * y_c / z3))
    d_pcam[:, 2] += dz
    d_pcam[~vis] = 0.0

    grads.d_centers = d_pcam @ Rw

    d_V = 2.0 * d_sigma3 @ V
    grads.d_scales = np.einsum("nik,nik->nk", R3, d_V)
    d_R3 = d_V * s[:, None, :]

    # through R(q_normalized) and the normalization of the stored quaternion
    qn = normalize_quats(scene.quats)
    dRdq = _quat_rotation_grads(qn)                   # (N, 4, 3, 3)
    d_qn = np.einsum("ncij,nij->nc", dRdq, d_R3)
    qnorm = np.linalg.norm(scene.quats, axis=1, keepdims=True)
    grads.d_quats = (d_qn - qn * np.sum(d_qn * qn, axis=1, keepdims=True)) / qnorm

    grads.d_opacities = acc_alpha_o
    grads.d_sh[:, :, 0] = acc_color * SH_C0
    if scene.sh_degree == 1:
        dirs = cache.view_dirs
        x, y, zz = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        grads.d_sh[:, :, 1] = acc_color * (-SH_C1 * y)
        grads.d_sh[:, :, 2] = acc_color * (SH_C1 * zz)
        grads.d_sh[:, :, 3] = acc_color * (-SH_C1 * x)
        # color also moves with the view direction, which depends on the center
        d_dir = np.zeros((N, 3))
        d_dir[:, 1] -= np.sum(acc_color * scene.sh[:, :, 1], axis=1) * SH_C1
        d_dir[:, 2] += np.sum(acc_color * scene.sh[:, :, 2], axis=1) * SH_C1
        d_dir[:, 0] -= np.sum(acc_color * scene.sh[:, :, 3], axis=1) * SH_C1
        rel = scene.centers - cam.position[None, :]
        rnorm = np.maximum(np.linalg.norm(rel, axis=1, keepdims=True), 1e-12)
        proj = d_dir - dirs * np.sum(d_dir * dirs, axis=1, keepdims=True)
        grads.d_centers += proj / rnorm

    return grads
