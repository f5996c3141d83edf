"""Two-stage optimization: a warm-up on the reconstruction loss, then a
refinement stage that renders an extra all-in-focus image per step, predicts
an in-focus mask from the CoC cues, and supervises the mask-blended composite.
Owns the optimizer state, learning-rate schedule, point injection and pruning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import camera_init
from .core import (GradientSet, LensParams, Scene, StateError, TrainView,
                   ValidationError, normalize_quats, sigmoid)
from .iln import (ILNGrads, ILNParams, iln_backward, iln_forward,
                  mask_correlation_loss, mask_entropy_reg, positional_encode)
from .losses import LossParts, LossWeights, l_detail, l_rec, psnr, total_objective
from .rasterizer import RasterSettings, UpstreamGrads, render, render_all_in_focus, render_backward

MIN_FOCAL = 1e-3


@dataclass
class Schedule:
    """Iteration plan; all counts scale together by one factor so desk-scale
    runs keep the full-scale stage proportions."""

    total: int = 40000
    warmup_end: int = 5000
    inject_iteration: int = 2000
    inject_count: int = 60000
    scale: float = 1.0

    def scaled(self) -> "Schedule":
        s = Schedule(
            total=max(1, round(self.total * self.scale)),
            warmup_end=max(1, round(self.warmup_end * self.scale)),
            inject_iteration=max(1, round(self.inject_iteration * self.scale)),
            inject_count=round(self.inject_count * self.scale),
            scale=1.0,
        )
        if not (s.inject_iteration < s.warmup_end < s.total):
            raise ValidationError(
                f"schedule must keep injection < warmup end < total, got "
                f"{s.inject_iteration} / {s.warmup_end} / {s.total}")
        return s


@dataclass
class LearningRates:
    center: float = 5e-4
    center_final: float = 5e-6
    scale: float = 1e-2
    rotation: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    focal: float = 5e-2
    aperture: float = 1e-2
    iln: float = 5e-4


@dataclass
class TrainConfig:
    lrs: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    raster: RasterSettings = field(default_factory=RasterSettings)
    seed: int = 0
    use_mse: bool = False
    reg_symmetric: bool = False
    detail_enhance: bool = True        # False reverts the refine stage to l_rec
    prune_threshold: float = 0.005
    optimize_scene: bool = True
    optimize_lens: bool = True
    tau: float = camera_init.DEFAULT_TAU


class Adam:
    """Adaptive-moment optimizer over named parameter arrays. Moments are
    created lazily and can be row-extended when points are injected."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def extend_rows(self, name: str, n_new: int) -> None:
        """Zero moments for rows appended to a parameter (point injection)."""
        if name in self.m and n_new > 0:
            pad = np.zeros((n_new,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])

    def keep_rows(self, name: str, keep: np.ndarray) -> None:
        """Compact moments consistently with a pruned parameter."""
        if name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam_m_{name}"] = self.m[name]
            out[f"adam_v_{name}"] = self.v[name]
            out[f"adam_t_{name}"] = np.asarray(self.t[name])
        return out

    @classmethod
    def from_state_arrays(cls, arrays: dict[str, np.ndarray]) -> "Adam":
        opt = cls()
        for key, val in arrays.items():
            if key.startswith("adam_m_"):
                opt.m[key[len("adam_m_"):]] = np.array(val)
            elif key.startswith("adam_v_"):
                opt.v[key[len("adam_v_"):]] = np.array(val)
            elif key.startswith("adam_t_"):
                opt.t[key[len("adam_t_"):]] = int(val)
        return opt


def inject_points(scene: Scene, count: int, rng: np.random.Generator,
                  bounds: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Scene:
    """Append `count` points uniform in the scene's bounding box (expanded 5%).
    Each new point copies opacity/color/scale from its nearest existing
    neighbor; rotation starts at identity."""
    if len(scene) == 0:
        raise StateError("cannot inject points into an empty scene")
    if count <= 0:
        return scene
    if bounds is None:
        lo = scene.centers.min(axis=0)
        hi = scene.centers.max(axis=0)
        span = hi - lo
        lo = lo - 0.05 * span
        hi = hi + 0.05 * span
    else:
        lo, hi = bounds
    new_centers = rng.uniform(lo, hi, size=(count, 3))
    _, nn = cKDTree(scene.centers).query(new_centers, k=1)
    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    return Scene(
        centers=np.concatenate([scene.centers, new_centers]),
        quats=np.concatenate([scene.quats, quats]),
        log_scales=np.concatenate([scene.log_scales, scene.log_scales[nn]]),
        opacity_logits=np.concatenate([scene.opacity_logits, scene.opacity_logits[nn]]),
        sh=np.concatenate([scene.sh, scene.sh[nn]]),
    )


def prune(scene: Scene, opacity_threshold: float = 0.005) -> tuple[Scene, np.ndarray]:
    """Drop Gaussians below the opacity threshold. Returns (scene, keep mask)
    so optimizer rows can be compacted consistently."""
    keep = scene.opacities >= opacity_threshold
    if keep.all():
        return scene, keep
    return Scene(scene.centers[keep], scene.quats[keep], scene.log_scales[keep],
                 scene.opacity_logits[keep], scene.sh[keep]), keep


SCENE_PARAM_NAMES = ("centers", "quats", "log_scales", "opacity_logits", "sh")


@dataclass
class TrainResult:
    scene: Scene
    views: list[TrainView]
    iln: Optional[ILNParams]
    metrics: list[dict]
    optimizer: Adam
    iterations: int


def _center_lr(lrs: LearningRates, it: int, total: int) -> float:
    frac = it / max(total, 1)
    return lrs.center * (1.0 - frac) + lrs.center_final * frac


def _scene_grads_to_optimizer_space(scene: Scene, g: GradientSet) -> dict[str, np.ndarray]:
    """Chain physical-space gradients into the stored parameterization."""
    o = sigmoid(scene.opacity_logits)
    return {
        "centers": g.d_centers,
        "quats": g.d_quats,
        "log_scales": g.d_scales * np.exp(scene.log_scales),
        "opacity_logits": g.d_opacities * o * (1.0 - o),
        "sh": g.d_sh,
    }


def train(scene: Scene, views: list[TrainView], schedule: Schedule,
          config: Optional[TrainConfig] = None,
          iln_params: Optional[ILNParams] = None) -> TrainResult:
    """Run the two-stage loop. Lenses must be initialized beforehand (see
    camera_init.init_lenses); the scene and per-view lens parameters are
    updated in place on copies and returned."""
    config = config or TrainConfig()
    sched = schedule.scaled()
    rng = np.random.default_rng(config.seed)
    weights = config.weights
    lrs = config.lrs

    scene = scene.copy()
    views = [TrainView(v.index, v.camera, LensParams(v.lens.f, v.lens.Q), v.image)
             for v in views]
    for v in views:
        if v.image is None:
            raise ValidationError(f"view {v.index} has no reference image")
    if iln_params is None:
        iln_params = ILNParams.init(np.random.default_rng(config.seed + 1))

    opt = Adam()
    metrics: list[dict] = []
    lens_f = np.array([v.lens.f for v in views])
    lens_q = np.array([v.lens.Q for v in views])
    pes = {}

    perm = rng.permutation(len(views))
    cursor = 0

    for it in range(sched.total):
        if cursor >= len(perm):
            perm = rng.permutation(len(views))
            cursor = 0
        m = int(perm[cursor])
        cursor += 1
        view = views[m]
        stage = "warmup" if it < sched.warmup_end else "refine"

        if it == sched.inject_iteration:
            scene, keep = prune(scene, config.prune_threshold)
            for name in SCENE_PARAM_NAMES:
                opt.keep_rows(name, keep)
            before = len(scene)
            scene = inject_points(scene, sched.inject_count, rng)
            for name in SCENE_PARAM_NAMES:
                opt.extend_rows(name, len(scene) - before)
        elif it == sched.warmup_end:
            scene, keep = prune(scene, config.prune_threshold)
            for name in SCENE_PARAM_NAMES:
                opt.keep_rows(name, keep)

        lens = LensParams(f=lens_f[m], Q=lens_q[m])
        out = render(scene, view.camera, lens, config.raster)
        rec_loss, g_rec = l_rec(out.color, view.image, lambda_dssim=weights.lambda_dssim,
                                use_mse=config.use_mse)
        parts = LossParts(l_rec=rec_loss)
        iln_grads: Optional[ILNGrads] = None

        if stage == "warmup" or not config.detail_enhance:
            grads = render_backward(out, UpstreamGrads(d_color=g_rec))
            parts_total = rec_loss
        else:
            aif = render_all_in_focus(scene, view.camera, config.raster, f=lens.f)
            key = (view.camera.height, view.camera.width, m)
            if key not in pes:
                pes[key] = positional_encode(m, len(views), view.camera.height,
                                             view.camera.width)
            mask, iln_cache = iln_forward(iln_params, out.color, out.depth, out.coc,
                                          pes[key])
            det_loss, g_aif, g_def, g_mask = l_detail(
                mask, aif.color, out.color, view.image,
                lambda_dssim=weights.lambda_dssim, use_mse=config.use_mse)
            # the CoC map supervises the mask, not vice versa: detached target
            mk_loss, g_mask_mk = mask_correlation_loss(mask, out.coc)
            reg_loss, g_mask_reg = mask_entropy_reg(mask, symmetric=config.reg_symmetric)
            g_mask_total = g_mask + weights.lambda_mk * g_mask_mk \
                + weights.lambda_reg * g_mask_reg
            iln_grads, g_img_iln, g_depth_iln, g_coc_iln = iln_backward(
                iln_params, iln_cache, g_mask_total)

            grads = render_backward(out, UpstreamGrads(
                d_color=g_def + g_img_iln, d_depth=g_depth_iln, d_coc=g_coc_iln))
            g_aif_set = render_backward(aif, UpstreamGrads(d_color=g_aif))
            grads.add_scene_grads(g_aif_set)
            parts = LossParts(l_rec=rec_loss, l_detail=det_loss, l_mk=mk_loss,
                              l_reg=reg_loss)
            parts_total = total_objective("refine", parts, weights)

        if not np.isfinite(parts_total) or not grads.all_finite():
            raise StateError(f"non-finite loss or gradient at iteration {it}, view {m}; "
                             f"parts={parts}")

        if config.optimize_scene:
            opt_grads = _scene_grads_to_optimizer_space(scene, grads)
            opt.step("centers", scene.centers, opt_grads["centers"],
                     _center_lr(lrs, it, sched.total))
            opt.step("quats", scene.quats, opt_grads["quats"], lrs.rotation)
            opt.step("log_scales", scene.log_scales, opt_grads["log_scales"], lrs.scale)
            opt.step("opacity_logits", scene.opacity_logits, opt_grads["opacity_logits"],
                     lrs.opacity)
            opt.step("sh", scene.sh, opt_grads["sh"], lrs.color)
            scene.quats = normalize_quats(scene.quats)
        if config.optimize_lens:
            fm = np.array([lens_f[m]])
            qm = np.array([lens_q[m]])
            opt.step(f"f_{m}", fm, np.array([grads.d_f]), lrs.focal)
            opt.step(f"Q_{m}", qm, np.array([grads.d_Q]), lrs.aperture)
            lens_f[m] = max(float(fm[0]), MIN_FOCAL)
            lens_q[m] = max(float(qm[0]), 0.0)
        if iln_grads is not None:
            for fname in ILNParams.ARRAY_FIELDS:
                opt.step(f"iln_{fname}", getattr(iln_params, fname),
                         getattr(iln_grads, fname), lrs.iln)

        metrics.append({
            "iter": it, "stage": stage, "view": m,
            "l_rec": parts.l_rec, "l_detail": parts.l_detail,
            "l_mk": parts.l_mk, "l_reg": parts.l_reg,
            "total": parts_total,
            "psnr": psnr(out.color, view.image),
        })

    for m, v in enumerate(views):
        v.lens = LensParams(f=float(lens_f[m]), Q=float(lens_q[m]))
    return TrainResult(scene=scene, views=views, iln=iln_params, metrics=metrics,
                       optimizer=opt, iterations=sched.total)
