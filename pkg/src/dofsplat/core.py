"""Domain types shared across the pipeline: scene primitives, cameras, lenses,
render products and gradient containers, plus their validity checks.

Scenes are stored struct-of-arrays in optimizer space (log scales, logit
opacities) so positivity/bound invariants are structural; physical values are
exposed at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.48860251190291992


class ValidationError(ValueError):
    """Raised when a domain type invariant is violated at a module boundary."""


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its mathematical domain."""


class StateError(RuntimeError):
    """Raised when an operation is called without its required prior state."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quats(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions; input shape (..., 4), wxyz order."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4), wxyz."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """3x3 world covariance R(q) diag(s^2) R(q)^T from a unit quaternion and
    positive per-axis scales.

    Sign-flipping q leaves the result unchanged. Eigenvalues equal {s^2}.
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-3:
        raise ValidationError(f"quaternion norm {np.linalg.norm(q):.6f} deviates from 1 by more than 1e-3")
    if np.any(s <= 0):
        raise ValidationError("scales must be strictly positive")
    R = quat_to_rot(normalize_quats(q))
    return (R * (s * s)) @ R.T


@dataclass(frozen=True)
class Gaussian3D:
    """One scene primitive in physical space."""

    center: np.ndarray          # (3,) world units
    rotation: np.ndarray        # (4,) unit quaternion wxyz
    scale: np.ndarray           # (3,) positive world units
    opacity: float              # in [0, 1]
    color: np.ndarray           # (3, C) SH coefficients per RGB channel, C = 1 or 4

    def covariance(self) -> np.ndarray:
        return covariance_from(self.rotation, self.scale)


@dataclass
class Scene:
    """Struct-of-arrays parameter store for all Gaussians, in optimizer space.

    Scales are kept as logs and opacities as logits so that the physical
    invariants (s > 0, o in [0, 1]) hold by construction. Quaternions are
    renormalized by the trainer after every step and normalized on use.
    """

    centers: np.ndarray         # (N, 3)
    quats: np.ndarray           # (N, 4) wxyz
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, 3, C) with C = 1 (degree 0) or 4 (degree 1)

    def __post_init__(self):
        n = len(self.centers)
        for name in ("centers", "quats", "log_scales", "opacity_logits", "sh"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if len(arr) != n:
                raise ValidationError(f"scene field {name} has {len(arr)} rows, expected {n}")
        if self.sh.ndim != 3 or self.sh.shape[1] != 3 or self.sh.shape[2] not in (1, 4):
            raise ValidationError(f"sh must have shape (N, 3, 1|4), got {self.sh.shape}")

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def sh_degree(self) -> int:
        return 0 if self.sh.shape[2] == 1 else 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "Scene":
        return Scene(self.centers.copy(), self.quats.copy(), self.log_scales.copy(),
                     self.opacity_logits.copy(), self.sh.copy())

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D]) -> "Scene":
        if not gaussians:
            return cls.empty()
        return cls(
            centers=np.array([g.center for g in gaussians], dtype=np.float64),
            quats=np.array([g.rotation for g in gaussians], dtype=np.float64),
            log_scales=np.log(np.array([g.scale for g in gaussians], dtype=np.float64)),
            opacity_logits=logit(np.array([g.opacity for g in gaussians], dtype=np.float64)),
            sh=np.array([g.color for g in gaussians], dtype=np.float64),
        )

    def gaussian(self, k: int) -> Gaussian3D:
        return Gaussian3D(
            center=self.centers[k].copy(),
            rotation=self.quats[k].copy(),
            scale=np.exp(self.log_scales[k]),
            opacity=float(sigmoid(self.opacity_logits[k])),
            color=self.sh[k].copy(),
        )

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "Scene":
        c = 1 if sh_degree == 0 else 4
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0,)), np.zeros((0, 3, c)))


def validate_scene(scene: Scene) -> list[str]:
    """List invariant violations per Gaussian; empty iff the scene is valid."""
    report: list[str] = []
    for name in ("centers", "quats", "log_scales", "opacity_logits", "sh"):
        arr = getattr(scene, name)
        bad = np.flatnonzero(~np.isfinite(arr).reshape(len(scene), -1).all(axis=1))
        for k in bad:
            report.append(f"gaussian {k}: non-finite value in {name}")
    norms = np.linalg.norm(scene.quats, axis=1)
    finite_q = np.isfinite(norms)
    for k in np.flatnonzero(finite_q & (np.abs(norms - 1.0) > 1e-3)):
        report.append(f"gaussian {k}: quaternion norm {norms[k]:.6f} off unit by more than 1e-3")
    # log/logit storage keeps s > 0 and o in [0,1] structurally; re-check the
    # physical values anyway so hand-built scenes are covered.
    ops = scene.opacities
    for k in np.flatnonzero(np.isfinite(ops) & ((ops < 0) | (ops > 1))):
        report.append(f"gaussian {k}: opacity {ops[k]} outside [0, 1]")
    scl = scene.scales
    for k in np.flatnonzero(np.isfinite(scl).all(axis=1) & (scl <= 0).any(axis=1)):
        report.append(f"gaussian {k}: non-positive scale {scl[k]}")
    return report


@dataclass
class CameraPose:
    """World-to-camera rigid transform plus pixel intrinsics."""

    view: np.ndarray   # (4, 4) world -> camera, row-major
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=np.float64)
        if self.view.shape != (4, 4):
            raise ValidationError(f"view matrix must be 4x4, got {self.view.shape}")
        R = self.view[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValidationError("rotation block of view matrix is not orthonormal within 1e-6")

    @property
    def rotation(self) -> np.ndarray:
        return self.view[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.view[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def identity(cls, fx: float, fy: float, cx: float, cy: float,
                 width: int, height: int) -> "CameraPose":
        return cls(np.eye(4), fx, fy, cx, cy, width, height)


@dataclass
class LensParams:
    """Thin-lens parameters of one view: focal distance f (scene depth units)
    and aperture parameter Q (depth * pixel units). Q = 0 is the pinhole,
    all-in-focus limit."""

    f: float
    Q: float = 0.0

    def __post_init__(self):
        if not (self.f > 0):
            raise ValidationError(f"focal distance must be > 0, got {self.f}")
        if self.Q < 0:
            raise ValidationError(f"aperture parameter must be >= 0, got {self.Q}")


@dataclass
class TrainView:
    """A training view: pose, learnable lens, and the reference image."""

    index: int
    camera: CameraPose
    lens: LensParams
    image: Optional[np.ndarray] = None   # (H, W, 3) in [0, 1]

    def __post_init__(self):
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            h, w = self.image.shape[:2]
            if (w, h) != (self.camera.width, self.camera.height):
                raise ValidationError(
                    f"view {self.index}: image is {w}x{h} but intrinsics say "
                    f"{self.camera.width}x{self.camera.height}")


@dataclass
class RenderOutput:
    """Forward render products. Depth and CoC maps are transmittance-weighted
    sums (not normalized by accumulated alpha); use the normalized accessors
    for display readbacks."""

    color: np.ndarray    # (H, W, 3)
    depth: np.ndarray    # (H, W)
    coc: np.ndarray      # (H, W), pixels
    alpha: np.ndarray    # (H, W) accumulated alpha in [0, 1]
    cache: object = field(default=None, repr=False)   # forward intermediates for backward

    def normalized_depth(self, eps: float = 1e-12) -> np.ndarray:
        return np.where(self.alpha > eps, self.depth / np.maximum(self.alpha, eps), 0.0)

    def normalized_coc(self, eps: float = 1e-12) -> np.ndarray:
        return np.where(self.alpha > eps, self.coc / np.maximum(self.alpha, eps), 0.0)


@dataclass
class GradientSet:
    """Gradients in physical parameter space for one rendered view."""

    d_centers: np.ndarray         # (N, 3)
    d_quats: np.ndarray           # (N, 4) w.r.t. the stored (pre-normalization) quaternion
    d_scales: np.ndarray          # (N, 3) w.r.t. physical scale
    d_opacities: np.ndarray       # (N,)  w.r.t. physical opacity
    d_sh: np.ndarray              # (N, 3, C)
    d_f: float = 0.0
    d_Q: float = 0.0

    def all_finite(self) -> bool:
        return (np.isfinite(self.d_centers).all() and np.isfinite(self.d_quats).all()
                and np.isfinite(self.d_scales).all() and np.isfinite(self.d_opacities).all()
                and np.isfinite(self.d_sh).all()
                and math.isfinite(self.d_f) and math.isfinite(self.d_Q))

    @classmethod
    def zeros_like(cls, scene: Scene) -> "GradientSet":
        return cls(
            d_centers=np.zeros_like(scene.centers),
            d_quats=np.zeros_like(scene.quats),
            d_scales=np.zeros_like(scene.log_scales),
            d_opacities=np.zeros_like(scene.opacity_logits),
            d_sh=np.zeros_like(scene.sh),
        )

    def add_scene_grads(self, other: "GradientSet") -> None:
        """Accumulate another view's scene gradients in place (lens terms excluded)."""
        self.d_centers += other.d_centers
        self.d_quats += other.d_quats
        self.d_scales += other.d_scales
        self.d_opacities += other.d_opacities
        self.d_sh += other.d_sh


def eval_sh_colors(sh: np.ndarray, dirs: Optional[np.ndarray]) -> np.ndarray:
    """Per-Gaussian RGB from SH coefficients; degree 1 uses the unit view
    direction from the camera center to each Gaussian center."""
    c = 0.5 + SH_C0 * sh[:, :, 0]
    if sh.shape[2] == 4:
        if dirs is None:
            raise ValidationError("degree-1 SH requires view directions")
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        c = c - SH_C1 * y * sh[:, :, 1] + SH_C1 * z * sh[:, :, 2] - SH_C1 * x * sh[:, :, 3]
    return c
