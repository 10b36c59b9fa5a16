"""Synthetic scenes with analytic geometry for tests, toy fits, and demos.

Everything here has a closed form: sphere SDFs with exact gradients,
ray-sphere intersections, and Lambertian shading of procedural textures, so
the rest of the package can be checked against ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .scene import CameraModel, MultiViewScene, load_scene, write_scene


@dataclass(frozen=True)
class SphereSpec:
    center: tuple[float, float, float]
    radius: float


class AnalyticSphereSdf:
    """Exact SDF of a union of spheres, with analytic gradients.

    Matches the evaluator protocol used by the losses and tracer: callable on
    (M, 3) points returning (M,) values, plus .gradient(points).
    """

    def __init__(self, spheres: Sequence[SphereSpec] | SphereSpec):
        if isinstance(spheres, SphereSpec):
            spheres = [spheres]
        self.spheres = list(spheres)
        if not self.spheres:
            raise ValueError("need at least one sphere")

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        dists = []
        for s in self.spheres:
            c = torch.as_tensor(s.center, dtype=points.dtype, device=points.device)
            dists.append(torch.linalg.norm(points - c, dim=-1) - s.radius)
        return torch.stack(dists, dim=0).amin(dim=0)

    def gradient(self, points: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        dists = []
        for s in self.spheres:
            c = torch.as_tensor(s.center, dtype=points.dtype, device=points.device)
            dists.append(torch.linalg.norm(points - c, dim=-1) - s.radius)
        stack = torch.stack(dists, dim=0)
        idx = stack.argmin(dim=0)
        grads = torch.zeros_like(points)
        for i, s in enumerate(self.spheres):
            c = torch.as_tensor(s.center, dtype=points.dtype, device=points.device)
            rel = points - c
            n = rel / torch.linalg.norm(rel, dim=-1, keepdim=True).clamp_min(1e-12)
            sel = idx == i
            grads[sel] = n[sel]
        return grads


def ray_sphere_intersect(
    origins: np.ndarray, directions: np.ndarray, center: Sequence[float], radius: float
) -> tuple[np.ndarray, np.ndarray]:
    """First positive intersection of unit-direction rays with a sphere.

    Returns:
        (t, hit): ray parameters (np.inf where no hit) and a hit mask.
    """
    o = np.asarray(origins, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    hit = hit & (t > 1e-9)
    return np.where(hit, t, np.inf), hit


def first_hit(
    origins: np.ndarray, directions: np.ndarray, spheres: Sequence[SphereSpec]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest intersection over a list of spheres.

    Returns:
        (t, sphere_index, hit) with sphere_index = -1 where no hit.
    """
    ts = []
    for s in spheres:
        t, _ = ray_sphere_intersect(origins, directions, s.center, s.radius)
        ts.append(t)
    stack = np.stack(ts, axis=0)
    idx = np.argmin(stack, axis=0)
    t = np.take_along_axis(stack, idx[None], axis=0)[0]
    hit = np.isfinite(t)
    return t, np.where(hit, idx, -1), hit


def smooth_color_field(seed: int, n_waves: int = 3, contrast: float = 0.35):
    """Procedural low-frequency RGB field over 3D points, values in (0, 1).

    Returns a function points (..., 3) float -> (..., 3) colors. Smoothness
    keeps the toy appearance learnable from few views.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.35, 0.75, size=3)
    freqs = rng.uniform(2.0, 6.0, size=(3, n_waves))
    axes = rng.normal(size=(3, n_waves, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(3, n_waves))
    amps = rng.uniform(0.4, 1.0, size=(3, n_waves)) * contrast / n_waves

    def field(points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        out = np.zeros(pts.shape[:-1] + (3,), dtype=np.float64)
        for ch in range(3):
            acc = np.full(pts.shape[:-1], base[ch])
            for k in range(n_waves):
                acc = acc + amps[ch, k] * np.sin(freqs[ch, k] * (pts @ axes[ch, k]) + phases[ch, k])
            out[..., ch] = acc
        return np.clip(out, 0.04, 0.97)

    return field


DEFAULT_LIGHT = np.array([0.45, 0.75, -0.48])
DEFAULT_LIGHT = DEFAULT_LIGHT / np.linalg.norm(DEFAULT_LIGHT)


def render_analytic(
    camera: CameraModel,
    spheres: Sequence[SphereSpec],
    textures: Sequence,
    light_dir: np.ndarray = DEFAULT_LIGHT,
    ambient: float = 0.38,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast a Lambertian render of textured spheres.

    Returns:
        (image (H, W, 3) float in [0, 1], mask (H, W) bool, depth (H, W) ray
        parameter, inf where no hit).
    """
    from .scene import generate_rays

    rays = generate_rays(camera, dtype=torch.float64)
    o = rays.origins.numpy().reshape(-1, 3)
    d = rays.directions.numpy().reshape(-1, 3)
    t, idx, hit = first_hit(o, d, spheres)
    H, W = camera.height, camera.width
    img = np.zeros((H * W, 3), dtype=np.float64)
    for i, (s, tex) in enumerate(zip(spheres, textures)):
        sel = hit & (idx == i)
        if not sel.any():
            continue
        x = o[sel] + t[sel, None] * d[sel]
        n = (x - np.asarray(s.center)) / s.radius
        shade = ambient + (1.0 - ambient) * np.clip(n @ light_dir, 0.0, None)
        img[sel] = np.clip(tex(x) * shade[:, None], 0.0, 1.0)
    return img.reshape(H, W, 3), hit.reshape(H, W), np.where(hit, t, np.inf).reshape(H, W)


def ring_cameras(
    n: int,
    resolution: int,
    distance: float = 2.0,
    focal_scale: float = 1.55,
    elevation_range: tuple[float, float] = (-0.38, 0.62),
    seed: int = 0,
    start_azimuth: float = 0.0,
    azimuth_span: float | None = None,
) -> list[CameraModel]:
    """Cameras on a golden-angle spiral band looking at the origin.

    azimuth_span confines all cameras to a band of that width (a frontal
    capture rig rather than a full orbit): views then share a visible
    hemisphere, so cross-view reprojection finds agreeing surface points.
    """
    golden = math.pi * (3.0 - math.sqrt(5.0))
    cams = []
    lo, hi = elevation_range
    for i in range(n):
        if azimuth_span is None:
            az = start_azimuth + golden * i
        else:
            az = start_azimuth + azimuth_span * ((golden * i / (2.0 * math.pi)) % 1.0)
        frac = (i + 0.5) / n
        el = lo + (hi - lo) * frac
        eye = distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        cams.append(CameraModel.look_at(eye, (0.0, 0.0, 0.0), focal=focal_scale * resolution, width=resolution, height=resolution))
    return cams


@dataclass(frozen=True)
class SphereSceneParams:
    n_views: int = 10
    resolution: int = 64
    radius: float = 0.4
    seed: int = 0
    distance: float = 2.0
    two_spheres: bool = False
    azimuth_span: float | None = None  # None = full orbit; else a frontal band


def make_sphere_scene(params: SphereSceneParams, out_dir: str | Path | None = None) -> MultiViewScene:
    """Render a textured-sphere scene (optionally two spheres for occlusion
    tests) and return it; also writes the scene directory when out_dir given."""
    rng = np.random.default_rng(params.seed)
    if params.two_spheres:
        r0 = params.radius
        spheres = [
            SphereSpec((-0.18, 0.0, 0.05), r0 * 0.62),
            SphereSpec((0.2, 0.02, -0.12), r0 * 0.5),
        ]
        textures = [smooth_color_field(params.seed * 31 + 7), smooth_color_field(params.seed * 31 + 19)]
    else:
        spheres = [SphereSpec((0.0, 0.0, 0.0), params.radius)]
        textures = [smooth_color_field(params.seed * 31 + 7)]
    cams = ring_cameras(
        params.n_views,
        params.resolution,
        distance=params.distance,
        start_azimuth=float(rng.uniform(0.0, 2.0 * math.pi)),
        azimuth_span=params.azimuth_span,
    )
    images = []
    masks = []
    for cam in cams:
        img, mask, _ = render_analytic(cam, spheres, textures)
        images.append(img)
        masks.append(mask)
    images = np.stack(images)
    masks = np.stack(masks)
    meta = {
        "generator": {
            "kind": "two_spheres" if params.two_spheres else "sphere",
            "radius": params.radius,
            "seed": params.seed,
            "spheres": [{"center": list(s.center), "radius": s.radius} for s in spheres],
        }
    }
    if out_dir is not None:
        write_scene(out_dir, images, masks, cams, extra_meta=meta)
        return load_scene(out_dir)
    # Quantize to 8 bits in memory as well so in-memory and on-disk scenes match.
    q = np.clip(images * 255.0 + 0.5, 0, 255).astype(np.uint8).astype(np.float32) / 255.0
    return MultiViewScene(
        images=torch.as_tensor(q, dtype=torch.float32),
        masks=torch.as_tensor(masks),
        cameras=cams,
        name="sphere-toy",
    )


def random_sphere_task(
    seed: int,
    n_views: int = 5,
    resolution: int = 24,
    azimuth_span: float | None = 1.3,
    out_dir: str | Path | None = None,
) -> MultiViewScene:
    """One task from the toy distribution: a randomly sized/colored sphere
    captured by a frontal camera rig."""
    rng = np.random.default_rng(seed)
    radius = float(rng.uniform(0.28, 0.42))
    params = SphereSceneParams(
        n_views=n_views, resolution=resolution, radius=radius, seed=seed, azimuth_span=azimuth_span
    )
    return make_sphere_scene(params, out_dir)


def make_texture_corpus(out_dir: str | Path, n_images: int = 128, resolution: int = 64, seed: int = 0) -> Path:
    """Write a directory of procedural RGB images for codec pretraining.

    Mixes smooth 3D color fields sliced at random planes, radial blobs, and
    soft gradients; diverse enough to teach an identity + warp objective.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(-1, 1, resolution), np.linspace(-1, 1, resolution), indexing="ij")
    for i in range(n_images):
        kind = i % 3
        if kind == 0:
            field = smooth_color_field(seed * 1000 + i, n_waves=4, contrast=0.5)
            z = rng.uniform(-1, 1)
            pts = np.stack([xs, ys, np.full_like(xs, z)], axis=-1)
            img = field(pts)
        elif kind == 1:
            img = np.zeros((resolution, resolution, 3))
            for _ in range(int(rng.integers(2, 6))):
                cx, cy = rng.uniform(-0.8, 0.8, size=2)
                s = rng.uniform(0.08, 0.5)
                col = rng.uniform(0.1, 1.0, size=3)
                blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
                img += blob[..., None] * col[None, None]
            img = np.clip(img / max(1.0, img.max()), 0.0, 1.0)
        else:
            a, b = rng.normal(size=2)
            g = (a * xs + b * ys - (a * xs + b * ys).min())
            g = g / max(g.max(), 1e-6)
            c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
            img = c0[None, None] * (1 - g[..., None]) + c1[None, None] * g[..., None]
        arr = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / f"{i:04d}.png")
    return out
