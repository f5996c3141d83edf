"""Heuristic initialization of per-view lens parameters from the initial point
cloud: focal distance from the median diopter, aperture from a CoC budget over
the 10th-90th percentile depth range."""

from __future__ import annotations

import warnings

import numpy as np

from .core import CameraPose, LensParams, Scene, ValidationError

DEFAULT_TAU = 15.0


def view_depths(scene: Scene, cam: CameraPose) -> np.ndarray:
    """Camera-space depths of all Gaussian centers; non-positive depths are
    excluded (those points are behind this view)."""
    z = scene.centers @ cam.rotation[2] + cam.translation[2]
    return z[z > 0]


def median_diopter(depths: np.ndarray) -> float:
    """Median of 1/z; even counts average the two middle diopters."""
    d = np.sort(1.0 / depths)
    n = len(d)
    if n == 0:
        raise ValidationError("no points with positive depth in this view")
    if n % 2:
        return float(d[n // 2])
    return float(0.5 * (d[n // 2 - 1] + d[n // 2]))


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile on sorted values."""
    v = np.sort(values)
    rank = int(np.ceil(p / 100.0 * len(v)))
    return float(v[max(rank, 1) - 1])


def init_focal(scene: Scene, cams: list[CameraPose]) -> list[float]:
    """Focal distance per view: 1/f = median{1/z} over that view's depths."""
    if len(scene) == 0:
        raise ValidationError("cannot initialize lenses from an empty scene")
    return [1.0 / median_diopter(view_depths(scene, cam)) for cam in cams]


def init_aperture(scene: Scene, cams: list[CameraPose], tau: float = DEFAULT_TAU) -> list[float]:
    """Aperture parameter per view: Q = tau / |1/p10 - 1/p90| with p10/p90 the
    percentile depths, capping the worst-case CoC near tau. Falls back to Q = 0
    with a warning on flat scenes."""
    out = []
    for m, cam in enumerate(cams):
        z = view_depths(scene, cam)
        if len(z) == 0:
            raise ValidationError(f"view {m}: no points with positive depth")
        p10 = nearest_rank_percentile(z, 10.0)
        p90 = nearest_rank_percentile(z, 90.0)
        spread = abs(1.0 / p10 - 1.0 / p90)
        if spread == 0.0:
            warnings.warn(f"view {m}: flat depth distribution, initializing aperture to 0")
            out.append(0.0)
        else:
            out.append(tau / spread)
    return out


def init_lenses(scene: Scene, cams: list[CameraPose], tau: float = DEFAULT_TAU) -> list[LensParams]:
    focals = init_focal(scene, cams)
    apertures = init_aperture(scene, cams, tau)
    return [LensParams(f=f, Q=q) for f, q in zip(focals, apertures)]
