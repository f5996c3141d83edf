"""Projection of 3D Gaussians to screen space with the local-affine (EWA)
approximation: 2D means, 2D covariances, depths, and conservative pixel
extents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraPose, Gaussian3D, Scene, normalize_quats, quat_to_rot

# Screen-space anti-alias dilation added to every projected covariance. The
# same constant must be used by the backward pass (it is additive, so the
# gradient w.r.t. the raw projected covariance passes through unchanged).
LOWPASS = 0.3

DEFAULT_NEAR = 0.01


@dataclass
class Projected2D:
    """One Gaussian in screen space. `cov` includes the low-pass dilation;
    `radius` is 3 sigma of the effective (blur-convolved) covariance."""

    mean: np.ndarray    # (2,) pixels
    cov: np.ndarray     # (2, 2) pixels^2
    depth: float        # camera-space z of the transformed center
    radius: float       # pixels
    visible: bool


@dataclass
class ProjectedArrays:
    """Vectorized projection of a whole scene (invisible entries keep their slot)."""

    means: np.ndarray     # (N, 2)
    covs: np.ndarray      # (N, 2, 2) with low-pass dilation applied
    depths: np.ndarray    # (N,)
    p_cam: np.ndarray     # (N, 3) camera-space centers
    in_front: np.ndarray  # (N,) bool, depth > near


def max_eigenvalue_2x2(cov: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of symmetric 2x2 matrices, shape (..., 2, 2)."""
    mid = 0.5 * (cov[..., 0, 0] + cov[..., 1, 1])
    det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
    return mid + np.sqrt(np.maximum(mid * mid - det, 0.0))


def footprint_radius(cov: np.ndarray) -> np.ndarray:
    """Cutoff radius t = 3 sigma_max of a (possibly batched) 2x2 covariance."""
    return 3.0 * np.sqrt(max_eigenvalue_2x2(cov))


def perspective_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Local-affine Jacobian (N, 2, 3) of the pixel projection at camera-space
    points (N, 3)."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((len(p_cam), 2, 3), dtype=np.float64)
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    return J


def project_arrays(scene: Scene, cam: CameraPose, near: float = DEFAULT_NEAR,
                   lowpass: float = LOWPASS) -> ProjectedArrays:
    """Project all Gaussians of a scene. Entries with depth <= near get
    placeholder means/covariances and in_front=False; they are never rasterized
    but keep their index."""
    Rw = cam.rotation
    t = cam.translation
    p_cam = scene.centers @ Rw.T + t
    z = p_cam[:, 2]
    in_front = z > near

    safe = p_cam.copy()
    safe[~in_front, 2] = 1.0  # placeholder depth so the math below stays finite

    means = np.empty((len(scene), 2), dtype=np.float64)
    means[:, 0] = cam.fx * safe[:, 0] / safe[:, 2] + cam.cx
    means[:, 1] = cam.fy * safe[:, 1] / safe[:, 2] + cam.cy

    R3 = quat_to_rot(normalize_quats(scene.quats))
    s = scene.scales
    V = R3 * s[:, None, :]                       # R diag(s)
    sigma3 = V @ V.transpose(0, 2, 1)            # (N, 3, 3)

    J = perspective_jacobian(safe, cam.fx, cam.fy)
    B = J @ Rw[None, :, :]                       # (N, 2, 3)
    covs = B @ sigma3 @ B.transpose(0, 2, 1)
    covs[:, 0, 0] += lowpass
    covs[:, 1, 1] += lowpass

    return ProjectedArrays(means=means, covs=covs, depths=z, p_cam=p_cam, in_front=in_front)


def visible_on_screen(means: np.ndarray, radius: np.ndarray, width: int,
                      height: int) -> np.ndarray:
    """Screen-bounds test, padded by each Gaussian's footprint radius."""
    return ((means[:, 0] + radius > 0.0) & (means[:, 0] - radius < width)
            & (means[:, 1] + radius > 0.0) & (means[:, 1] - radius < height))


def project_gaussian(g: Gaussian3D, cam: CameraPose, coc_variance: float = 0.0,
                     near: float = DEFAULT_NEAR, lowpass: float = LOWPASS) -> Projected2D:
    """Project a single Gaussian. `coc_variance` is the isotropic blur variance
    added by the DOF kernel; the cutoff radius and bounds test use the
    convolved covariance so blurred Gaussians are binned over their true
    extent."""
    scene = Scene.from_gaussians([g])
    pa = project_arrays(scene, cam, near=near, lowpass=lowpass)
    eff = pa.covs[0].copy()
    eff[0, 0] += coc_variance
    eff[1, 1] += coc_variance
    radius = float(footprint_radius(eff))
    visible = bool(pa.in_front[0]) and bool(
        visible_on_screen(pa.means[:1], np.array([radius]), cam.width, cam.height)[0])
    return Projected2D(mean=pa.means[0], cov=pa.covs[0], depth=float(pa.depths[0]),
                       radius=radius, visible=visible)


def depth_of(g: Gaussian3D, cam: CameraPose) -> float:
    """Camera-space z of the transformed center."""
    return float(cam.rotation[2] @ g.center + cam.translation[2])
