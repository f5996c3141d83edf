"""Persistence and test-data generation: the binary scene container, PLY point
cloud ingestion, PPM/PNG images, the JSON pose container, checkpoints, and a
deterministic synthetic-scene generator whose reference images are rendered by
this engine at known lens parameters (self-consistent supervision for the
recovery experiments)."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .core import (CameraPose, LensParams, Scene, TrainView, ValidationError,
                   logit, SH_C0)
from .iln import ILNParams
from .rasterizer import RasterSettings, render, render_all_in_focus
from .trainer import Adam

SCENE_MAGIC = b"DOFSCENE"
SCENE_VERSION = 1
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class VersionError(FormatError):
    """File written by a newer format version than this reader supports."""


# ---------------------------------------------------------------------------
# scene container

def save_scene(path: Union[str, Path], scene: Scene, cams: Sequence[CameraPose] = (),
               lenses: Sequence[LensParams] = ()) -> None:
    """Versioned binary container: Gaussian records plus optional per-view
    poses and lens parameters, lossless at float64."""
    if lenses and len(lenses) != len(cams):
        raise ValidationError("need one lens per camera")
    buf = io.BytesIO()
    buf.write(SCENE_MAGIC)
    buf.write(struct.pack("<IIQQ", SCENE_VERSION, scene.sh_degree, len(scene), len(cams)))
    rec = np.concatenate([
        scene.centers, scene.quats, scene.log_scales,
        scene.opacity_logits[:, None], scene.sh.reshape(len(scene), -1),
    ], axis=1) if len(scene) else np.zeros((0, 0))
    buf.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())
    for i, cam in enumerate(cams):
        lens = lenses[i] if lenses else LensParams(f=1.0, Q=0.0)
        vals = list(cam.view.reshape(-1)) + [cam.fx, cam.fy, cam.cx, cam.cy,
                                             float(cam.width), float(cam.height),
                                             lens.f, lens.Q]
        buf.write(struct.pack("<24d", *vals))
    Path(path).write_bytes(buf.getvalue())


def load_scene(path: Union[str, Path]) -> tuple[Scene, list[CameraPose], list[LensParams]]:
    data = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated scene file: {what} at byte offset {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(8, "magic") != SCENE_MAGIC:
        raise FormatError("not a scene container (bad magic) at byte offset 0")
    version, sh_degree, n, n_views = struct.unpack("<IIQQ", take(24, "header"))
    if version > SCENE_VERSION:
        raise VersionError(f"scene file version {version} is newer than supported {SCENE_VERSION}")
    n_coeff = 1 if sh_degree == 0 else 4
    width = 3 + 4 + 3 + 1 + 3 * n_coeff
    raw = take(n * width * 8, "gaussian records")
    rec = np.frombuffer(raw, dtype="<f8").reshape(n, width) if n else np.zeros((0, width))
    scene = Scene(
        centers=rec[:, 0:3].copy(),
        quats=rec[:, 3:7].copy(),
        log_scales=rec[:, 7:10].copy(),
        opacity_logits=rec[:, 10].copy(),
        sh=rec[:, 11:].reshape(n, 3, n_coeff).copy(),
    )
    cams, lenses = [], []
    for i in range(n_views):
        vals = struct.unpack("<24d", take(24 * 8, f"view record {i}"))
        cams.append(CameraPose(view=np.array(vals[:16]).reshape(4, 4),
                               fx=vals[16], fy=vals[17], cx=vals[18], cy=vals[19],
                               width=int(vals[20]), height=int(vals[21])))
        lenses.append(LensParams(f=vals[22], Q=vals[23]))
    return scene, cams, lenses


# ---------------------------------------------------------------------------
# PLY ingestion

_PLY_SIZES = {"char": 1, "uchar": 1, "int8": 1, "uint8": 1,
              "short": 2, "ushort": 2, "int16": 2, "uint16": 2,
              "int": 4, "uint": 4, "int32": 4, "uint32": 4, "float": 4, "float32": 4,
              "double": 8, "float64": 8}
_PLY_NP = {"char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
           "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
           "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
           "float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}


def load_ply_points(path: Union[str, Path], default_opacity: float = 0.1) -> Scene:
    """Read an ascii or binary-little-endian PLY with x,y,z (and optional
    red,green,blue) vertex properties into an initial scene: degree-0 SH colors,
    scale set from the mean distance to the 3 nearest neighbors."""
    raw = Path(path).read_bytes()
    header_end = raw.find(b"end_header\n")
    if header_end < 0:
        raise FormatError("PLY header has no end_header")
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()
    body = raw[header_end + len(b"end_header\n"):]

    fmt = None
    n_vertex = 0
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header:
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise FormatError("list properties on vertices are not supported")
            props.append((tok[2], tok[1]))
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise FormatError("PLY vertex element lacks x, y, z position properties")
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")

    if fmt == "ascii":
        rows = []
        for line in body.decode("ascii").split("\n"):
            if line.strip():
                rows.append([float(v) for v in line.split()])
            if len(rows) == n_vertex:
                break
        if len(rows) < n_vertex:
            raise FormatError(f"PLY body has {len(rows)} vertices, header says {n_vertex}")
        table = np.asarray(rows, dtype=np.float64)
        cols = {name: table[:, i] for i, (name, _) in enumerate(props)}
    else:
        dtype = np.dtype([(name, "<" + _PLY_NP[typ]) for name, typ in props])
        need = n_vertex * dtype.itemsize
        if len(body) < need:
            raise FormatError(f"PLY body truncated: {len(body)} bytes, need {need}")
        table = np.frombuffer(body[:need], dtype=dtype)
        cols = {name: table[name].astype(np.float64) for name, _ in props}

    centers = np.column_stack([cols["x"], cols["y"], cols["z"]])
    if {"red", "green", "blue"} <= set(names):
        rgb = np.column_stack([cols["red"], cols["green"], cols["blue"]]) / 255.0
    else:
        rgb = np.full((n_vertex, 3), 0.5)
    sh = ((rgb - 0.5) / SH_C0)[:, :, None]

    if n_vertex >= 4:
        dist, _ = cKDTree(centers).query(centers, k=4)
        mean_nn = dist[:, 1:].mean(axis=1)
    else:
        mean_nn = np.full(n_vertex, 0.1)
    mean_nn = np.maximum(mean_nn, 1e-8)

    quats = np.zeros((n_vertex, 4))
    quats[:, 0] = 1.0
    return Scene(
        centers=centers,
        quats=quats,
        log_scales=np.log(np.repeat(mean_nn[:, None], 3, axis=1)),
        opacity_logits=np.full(n_vertex, float(logit(default_opacity))),
        sh=sh,
    )


# ---------------------------------------------------------------------------
# images

def write_image(path: Union[str, Path], img: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit PNG or ascii PPM (P3), by extension."""
    path = Path(path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w = q.shape[:2]
        lines = [f"P3 {w} {h} 255"]
        for row in q:
            lines.append(" ".join(str(v) for v in row.reshape(-1)))
        path.write_text("\n".join(lines) + "\n")
    elif path.suffix.lower() == ".png":
        Image.fromarray(q, mode="RGB").save(path)
    else:
        raise FormatError(f"unsupported image format {path.suffix!r}")


def read_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        tokens = path.read_text().split()
        if not tokens or tokens[0] != "P3":
            raise FormatError("PPM reader supports only ascii P3")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.array(tokens[4:4 + 3 * w * h], dtype=np.float64)
        if len(vals) < 3 * w * h:
            raise FormatError(f"PPM body truncated: {len(vals)} of {3 * w * h} samples")
        return vals.reshape(h, w, 3) / maxval
    if path.suffix.lower() == ".png":
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    raise FormatError(f"unsupported image format {path.suffix!r}")


# ---------------------------------------------------------------------------
# JSON pose container

def save_views_json(path: Union[str, Path], cams: Sequence[CameraPose],
                    lenses: Optional[Sequence[LensParams]] = None) -> None:
    views = []
    for m, cam in enumerate(cams):
        entry = {"m": m, "W": [float(v) for v in cam.view.reshape(-1)],
                 "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                 "width": cam.width, "height": cam.height}
        if lenses is not None:
            entry["f"] = lenses[m].f
            entry["Q"] = lenses[m].Q
        views.append(entry)
    Path(path).write_text(json.dumps({"views": views}, indent=2))


def load_views_json(path: Union[str, Path]) -> tuple[list[CameraPose], list[Optional[LensParams]]]:
    doc = json.loads(Path(path).read_text())
    cams, lenses = [], []
    for entry in doc["views"]:
        cams.append(CameraPose(view=np.array(entry["W"], dtype=np.float64).reshape(4, 4),
                               fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
                               width=int(entry["width"]), height=int(entry["height"])))
        if "f" in entry:
            lenses.append(LensParams(f=entry["f"], Q=entry.get("Q", 0.0)))
        else:
            lenses.append(None)
    return cams, lenses


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: Union[str, Path], scene: Scene, views: Sequence[TrainView],
                    iln: Optional[ILNParams] = None, optimizer: Optional[Adam] = None,
                    iteration: int = 0, extra: Optional[dict] = None) -> None:
    """npz container with the scene, per-view poses + lens params, ILN weights,
    optimizer moments and the iteration counter; float64 throughout so a
    round-trip renders bit-identically."""
    arrays: dict[str, np.ndarray] = {
        "version": np.asarray(CHECKPOINT_VERSION),
        "iteration": np.asarray(iteration),
        "centers": scene.centers, "quats": scene.quats,
        "log_scales": scene.log_scales, "opacity_logits": scene.opacity_logits,
        "sh": scene.sh,
        "view_matrices": np.stack([v.camera.view for v in views]) if views else np.zeros((0, 4, 4)),
        "intrinsics": np.array([[v.camera.fx, v.camera.fy, v.camera.cx, v.camera.cy,
                                 v.camera.width, v.camera.height] for v in views])
        if views else np.zeros((0, 6)),
        "lens": np.array([[v.lens.f, v.lens.Q] for v in views]) if views else np.zeros((0, 2)),
        "meta": np.frombuffer(json.dumps(extra or {}).encode(), dtype=np.uint8),
    }
    if iln is not None:
        for fname in ILNParams.ARRAY_FIELDS:
            arrays[f"iln_{fname}"] = getattr(iln, fname)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    scene: Scene
    views: list[TrainView]
    iln: Optional[ILNParams]
    optimizer: Optional[Adam]
    iteration: int
    meta: dict = field(default_factory=dict)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with np.load(path) as z:
        version = int(z["version"])
        if version > CHECKPOINT_VERSION:
            raise VersionError(f"checkpoint version {version} is newer than supported "
                               f"{CHECKPOINT_VERSION}")
        scene = Scene(z["centers"], z["quats"], z["log_scales"], z["opacity_logits"], z["sh"])
        views = []
        for m in range(len(z["lens"])):
            fx, fy, cx, cy, w, h = z["intrinsics"][m]
            views.append(TrainView(
                index=m,
                camera=CameraPose(view=z["view_matrices"][m], fx=fx, fy=fy, cx=cx, cy=cy,
                                  width=int(w), height=int(h)),
                lens=LensParams(f=float(z["lens"][m, 0]), Q=float(z["lens"][m, 1])),
            ))
        iln = None
        if "iln_w1" in z:
            iln = ILNParams(*[np.array(z[f"iln_{f}"]) for f in ILNParams.ARRAY_FIELDS])
        opt_arrays = {k: z[k] for k in z.files if k.startswith("adam_")}
        optimizer = Adam.from_state_arrays(opt_arrays) if opt_arrays else None
        meta = json.loads(bytes(z["meta"]).decode() or "{}")
        return Checkpoint(scene=scene, views=views, iln=iln, optimizer=optimizer,
                          iteration=int(z["iteration"]), meta=meta)


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class SyntheticSceneSpec:
    """Reproducible test scene: textured planes at chosen depths (side by side
    on screen) or a random box of points, viewed by a ring of forward-facing
    cameras with known per-view lens parameters."""

    layout: str = "planes"                       # "planes" | "box"
    plane_depths: tuple[float, ...] = (2.0, 6.0)
    count: int = 220
    width: int = 64
    height: int = 64
    focal_px: float = 64.0
    n_views: int = 4
    ring_radius: float = 0.06
    f_star: Union[float, Sequence[float]] = 2.0
    q_star: Union[float, Sequence[float]] = 30.0
    opacity: float = 0.85
    box_extent: float = 1.0
    sh_degree: int = 0

    def lens_for(self, m: int) -> LensParams:
        f = self.f_star[m] if isinstance(self.f_star, (list, tuple)) else self.f_star
        q = self.q_star[m] if isinstance(self.q_star, (list, tuple)) else self.q_star
        return LensParams(f=float(f), Q=float(q))


@dataclass
class SyntheticData:
    scene: Scene
    views: list[TrainView]        # reference images rendered at ground-truth lenses
    aif_images: list[np.ndarray]  # ground-truth all-in-focus renders
    spec: SyntheticSceneSpec


def _plane_points(spec: SyntheticSceneSpec, rng: np.random.Generator):
    """Scatter points on each depth plane inside a vertical screen strip so the
    planes do not occlude each other from any ring camera."""
    n_planes = len(spec.plane_depths)
    per = spec.count // n_planes
    margin = 0.08 * spec.width
    strip = (spec.width - 2 * margin) / n_planes
    pts, plane_of = [], []
    for i, depth in enumerate(spec.plane_depths):
        x_lo = margin + i * strip + 0.06 * strip
        x_hi = margin + (i + 1) * strip - 0.06 * strip
        px = rng.uniform(x_lo, x_hi, per)
        py = rng.uniform(0.12 * spec.height, 0.88 * spec.height, per)
        X = (px - spec.width / 2) / spec.focal_px * depth
        Y = (py - spec.height / 2) / spec.focal_px * depth
        pts.append(np.column_stack([X, Y, np.full(per, float(depth))]))
        plane_of.extend([i] * per)
    return np.concatenate(pts), np.array(plane_of)


def generate_synthetic(spec: SyntheticSceneSpec, seed: int = 0) -> SyntheticData:
    """Ground-truth scene plus reference images rendered by this engine at the
    spec's (f*, Q*), with matching all-in-focus renders."""
    rng = np.random.default_rng(seed)
    if spec.layout == "planes":
        centers, plane_of = _plane_points(spec, rng)
        base_depth = np.asarray(spec.plane_depths)[plane_of]
        spacing = base_depth / spec.focal_px * np.sqrt(
            spec.width * spec.height / max(len(centers), 1)) * 0.9
    elif spec.layout == "box":
        zmin, zmax = min(spec.plane_depths), max(spec.plane_depths)
        z = rng.uniform(zmin, zmax, spec.count)
        half = spec.box_extent * zmin / spec.focal_px * spec.width / 2
        centers = np.column_stack([rng.uniform(-half, half, spec.count),
                                   rng.uniform(-half, half, spec.count), z])
        spacing = np.full(spec.count, 2.0 * half / np.sqrt(spec.count))
    else:
        raise ValidationError(f"unknown synthetic layout {spec.layout!r}")

    n = len(centers)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    rgb = rng.uniform(0.1, 0.9, (n, 3))
    n_coeff = 1 if spec.sh_degree == 0 else 4
    sh = np.zeros((n, 3, n_coeff))
    sh[:, :, 0] = (rgb - 0.5) / SH_C0
    scene = Scene(
        centers=centers,
        quats=quats,
        log_scales=np.log(np.repeat(np.maximum(spacing, 1e-4)[:, None] * 0.55, 3, axis=1)),
        opacity_logits=np.full(n, float(logit(spec.opacity))),
        sh=sh,
    )

    settings = RasterSettings()
    views, aif_images = [], []
    for m in range(spec.n_views):
        angle = 2 * np.pi * m / max(spec.n_views, 1)
        pos = spec.ring_radius * np.array([np.cos(angle), np.sin(angle), 0.0])
        view = np.eye(4)
        view[:3, 3] = -pos
        cam = CameraPose(view=view, fx=spec.focal_px, fy=spec.focal_px,
                         cx=spec.width / 2, cy=spec.height / 2,
                         width=spec.width, height=spec.height)
        lens = spec.lens_for(m)
        ref = render(scene, cam, lens, settings)
        aif = render_all_in_focus(scene, cam, settings)
        views.append(TrainView(index=m, camera=cam, lens=lens, image=ref.color))
        aif_images.append(aif.color)
    return SyntheticData(scene=scene, views=views, aif_images=aif_images, spec=spec)
