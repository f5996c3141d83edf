"""Thin-lens / circle-of-confusion mathematics: CoC radii, the Gaussian blur
variance fitted to the CoC disk, covariance composition, and the closed-form
partial derivatives consumed by the rasterizer's backward pass.

All functions accept scalars or numpy arrays (broadcasting); derivative
functions return 0 at z = f, where the absolute value is non-differentiable
(a valid subgradient -- the CoC radius vanishes there anyway).
"""

from __future__ import annotations

import numpy as np

from .core import DomainError

LN4 = float(np.log(4.0))
KERNEL_NORM = 1.0 / (2.0 * LN4)


def coc_radius_full(F, A, f, z):
    """CoC radius of the full thin-lens model: (1/2) F A |z - f| / (z (f - F)).

    F: lens focal length, A: aperture diameter, f: focal distance, z: depth.
    """
    F = np.asarray(F, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(f <= F):
        raise DomainError("focal distance must exceed the lens focal length")
    if np.any(z <= 0):
        raise DomainError("depth must be positive")
    if np.any(np.asarray(A) < 0):
        raise DomainError("aperture diameter must be non-negative")
    r = 0.5 * F * A * np.abs(z - f) / (z * (f - F))
    return r if r.ndim else float(r)


def coc_radius(Q, f, z):
    """Simplified CoC radius (1/2) Q |1/z - 1/f| with Q = F A folded into one
    aperture parameter (pixel * depth units, so the radius is in pixels)."""
    Q = np.asarray(Q, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise DomainError("depth must be positive")
    if np.any(f <= 0):
        raise DomainError("focal distance must be positive")
    if np.any(Q < 0):
        raise DomainError("aperture parameter must be non-negative")
    r = 0.5 * Q * np.abs(1.0 / z - 1.0 / f)
    return r if r.ndim else float(r)


def kernel_variance(R):
    """Variance a = R^2 / (2 ln 4) of the isotropic Gaussian kernel fitted to a
    uniform intensity disk of radius R (the L2-best approximation)."""
    R = np.asarray(R, dtype=np.float64)
    a = KERNEL_NORM * R * R
    return a if a.ndim else float(a)


def convolve_cov(cov: np.ndarray, a) -> np.ndarray:
    """Covariance of the blur-convolved Gaussian: cov + a * I, for (..., 2, 2)."""
    out = np.array(cov, dtype=np.float64, copy=True)
    out[..., 0, 0] += a
    out[..., 1, 1] += a
    return out


def _sign_away_from_focus(f, z):
    """sign(1/z - 1/f), which is +1 in front of the focal plane (z < f) and -1
    behind it; 0 exactly at z = f."""
    return np.sign(1.0 / np.asarray(z, dtype=np.float64) - 1.0 / np.asarray(f, dtype=np.float64))


def da_df(R, Q, f, z):
    """d(kernel variance)/d(focal distance): -(1/2ln4) R Q / f^2 for z > f,
    positive for z < f, 0 at z = f."""
    f = np.asarray(f, dtype=np.float64)
    val = _sign_away_from_focus(f, z) * KERNEL_NORM * np.asarray(R) * np.asarray(Q) / (f * f)
    return val if val.ndim else float(val)


def da_dQ(R, f, z):
    """d(kernel variance)/d(aperture parameter): (R / 2ln4) |1/z - 1/f|."""
    val = KERNEL_NORM * np.asarray(R) * np.abs(1.0 / np.asarray(z, dtype=np.float64)
                                               - 1.0 / np.asarray(f, dtype=np.float64))
    return val if val.ndim else float(val)


def da_dz(R, Q, f, z):
    """d(kernel variance)/d(depth): -(1/2ln4) R Q / z^2 for z < f, positive for
    z > f, 0 at z = f."""
    z = np.asarray(z, dtype=np.float64)
    val = -_sign_away_from_focus(f, z) * KERNEL_NORM * np.asarray(R) * np.asarray(Q) / (z * z)
    return val if val.ndim else float(val)


def dcoc_df(Q, f, z):
    """d(CoC radius)/d(focal distance); same branch structure as da_df."""
    f = np.asarray(f, dtype=np.float64)
    val = 0.5 * np.asarray(Q) * _sign_away_from_focus(f, z) / (f * f)
    return val if val.ndim else float(val)


def dcoc_dQ(f, z):
    """d(CoC radius)/d(aperture parameter) = (1/2)|1/z - 1/f|."""
    val = 0.5 * np.abs(1.0 / np.asarray(z, dtype=np.float64) - 1.0 / np.asarray(f, dtype=np.float64))
    return val if val.ndim else float(val)


def dcoc_dz(Q, f, z):
    """d(CoC radius)/d(depth)."""
    z = np.asarray(z, dtype=np.float64)
    val = -0.5 * np.asarray(Q) * _sign_away_from_focus(f, z) / (z * z)
    return val if val.ndim else float(val)
