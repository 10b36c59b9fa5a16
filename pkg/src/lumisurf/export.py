"""Baking a fitted scene into a self-contained render bundle: marching-cubes
mesh extraction, per-view feature maps, cached source geometry, and the
aggregation/decoding weights, serialized in one binary file. The baked path
renders from the mesh alone and never evaluates the distance field."""
from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from skimage import measure

from .aggregation import (
    SourceSurfaceCache,
    aggregate_learned,
    occlusion_mask,
    render_visibility,
    resample_features,
)
from .scene import UNIT_CUBE, CameraModel, generate_rays
from .snapshots import NetworkConfig, Networks
from .raycast import TriangleBvh, barycentric_points, build_bvh, intersect_rays, rasterize_mesh

BUNDLE_MAGIC = b"MNLB"
BUNDLE_VERSION = 1
_ALIGN = 64


def extract_mesh(
    sdf: Callable,
    resolution: int = 128,
    bounds: Sequence[Sequence[float]] = UNIT_CUBE,
    pad_voxels: int = 1,
    chunk: int = 262144,
    gradient_check_samples: int = 2000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Extract the zero level set on a regular grid.

    The grid is padded by pad_voxels on every side so surfaces touching the
    domain boundary still close. Degenerate (zero-area) faces are dropped and
    the winding is flipped, if needed, so face normals follow the field
    gradient (inside negative, outside positive).

    Returns:
        (vertices (V, 3) float64, faces (F, 3) int64, info) where info reports
        voxel size and the fraction of checked faces whose normal agrees with
        the field gradient.
    """
    if resolution < 16:
        raise ValueError(f"grid resolution must be >= 16, got {resolution}")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    n = resolution + 2 * pad_voxels
    voxel = (hi - lo) / (resolution - 1)
    start = lo - pad_voxels * voxel
    axes = [start[k] + voxel[k] * np.arange(n) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    values = np.empty(len(grid), dtype=np.float64)
    with torch.no_grad():
        for s in range(0, len(grid), chunk):
            pts = torch.from_numpy(grid[s : s + chunk]).to(torch.float32)
            values[s : s + chunk] = sdf(pts).to(torch.float64).numpy()
    vol = values.reshape(n, n, n)
    if vol.min() >= 0.0 or vol.max() <= 0.0:
        raise ValueError("field has no zero crossing inside the padded bounds")

    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=tuple(voxel))
    verts = verts.astype(np.float64) + start
    faces = faces.astype(np.int64)

    # Drop zero-area faces.
    tri = verts[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area2 = np.linalg.norm(normals, axis=1)
    keep = area2 > 1e-18
    faces = faces[keep]
    normals = normals[keep] / area2[keep][:, None]

    # Orient faces along the field gradient (outward for a signed distance).
    rng = np.random.default_rng(seed)
    check = rng.choice(len(faces), size=min(gradient_check_samples, len(faces)), replace=False)
    centers = verts[faces[check]].mean(axis=1)
    grads = _field_gradient(sdf, centers)
    agree = (normals[check] * grads).sum(axis=1) > 0
    if agree.mean() < 0.5:
        faces = faces[:, ::-1].copy()
        normals = -normals
        agree = ~agree
    info = {
        "voxel_size": float(voxel.max()),
        "resolution": resolution,
        "pad_voxels": pad_voxels,
        "n_vertices": len(verts),
        "n_faces": len(faces),
        "orientation_agreement": float(agree.mean()),
    }
    return verts, faces, info


def _field_gradient(sdf: Callable, points: np.ndarray) -> np.ndarray:
    """Normalized field gradient at the given points."""
    pts = torch.from_numpy(np.asarray(points, dtype=np.float64)).to(torch.float32)
    if hasattr(sdf, "gradient"):
        g = sdf.gradient(pts).detach().to(torch.float64).numpy()
    else:
        pts = pts.requires_grad_(True)
        with torch.enable_grad():
            val = sdf(pts)
            g = torch.autograd.grad(val.sum(), pts)[0].to(torch.float64).numpy()
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.clip(norm, 1e-12, None)


def write_bundle(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Serialize named arrays plus a JSON manifest.

    Layout: magic, uint32 version, uint64 manifest length, manifest JSON,
    zero padding, then each array aligned to 64 bytes, all little-endian.
    Reading back yields bit-identical arrays.
    """
    entries = []
    offset = 0  # filled after the header size is known
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        blobs.append(a)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "nbytes": a.nbytes})
    # Two-pass: compute the manifest with final offsets.
    def layout(manifest_len: int) -> list[int]:
        offsets = []
        pos = len(BUNDLE_MAGIC) + 4 + 8 + manifest_len
        for a in blobs:
            pos = (pos + _ALIGN - 1) // _ALIGN * _ALIGN
            offsets.append(pos)
            pos += a.nbytes
        return offsets

    manifest_bytes = b""
    offsets = [0] * len(blobs)
    for _ in range(4):  # offsets change manifest length; iterate to fixpoint
        for e, off in zip(entries, offsets):
            e["offset"] = off
        manifest = {"version": BUNDLE_VERSION, "meta": meta, "arrays": entries}
        candidate = json.dumps(manifest, sort_keys=True).encode()
        new_offsets = layout(len(candidate))
        if new_offsets == offsets:
            manifest_bytes = candidate
            break
        offsets = new_offsets
        manifest_bytes = candidate
    else:
        raise RuntimeError("bundle layout failed to stabilize")

    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", BUNDLE_VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for a, off in zip(blobs, offsets):
            fh.write(b"\0" * (off - fh.tell()))
            fh.write(a.tobytes())


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Write the mesh as Wavefront OBJ text (faces 1-indexed, v/f lines only)
    so external tools can open it."""
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
        raise ValueError("faces index outside the vertex array")
    with open(path, "w") as fh:
        for x, y, z in verts:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in tris + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a bundle written by write_bundle. Returns (arrays, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BUNDLE_MAGIC:
            raise ValueError(f"not a render bundle (magic {magic!r})")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {version}")
        manifest_len = struct.unpack("<Q", fh.read(8))[0]
        manifest = json.loads(fh.read(manifest_len).decode())
        arrays = {}
        for e in manifest["arrays"]:
            fh.seek(e["offset"])
            raw = fh.read(e["nbytes"])
            arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


@dataclass
class RenderBundle:
    """Everything the baked renderer needs, field-free."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    features: torch.Tensor  # (N, H, W, d) float32
    source_points: torch.Tensor  # (N, H, W, 3) float32
    source_valid: torch.Tensor  # (N, H, W) bool
    source_depths: torch.Tensor  # (N, H, W) float32, -1 where invalid
    cameras: list[CameraModel]
    aggregator: torch.nn.Module
    decoder: torch.nn.Module | None
    tau_occ: float
    meta: dict
    _bvh: TriangleBvh | None = field(default=None, repr=False)

    @property
    def bvh(self) -> TriangleBvh:
        if self._bvh is None:
            self._bvh = build_bvh(self.vertices, self.faces)
        return self._bvh

    def cache(self) -> SourceSurfaceCache:
        return SourceSurfaceCache(
            points=self.source_points, valid=self.source_valid,
            depths=self.source_depths, stamp=0,
        )


def precompute_assets(
    networks: Networks,
    scene_images: torch.Tensor,
    cameras: Sequence[CameraModel],
    cache: SourceSurfaceCache,
    tau_occ: float,
    mesh_resolution: int = 128,
    bounds: Sequence[Sequence[float]] = UNIT_CUBE,
) -> RenderBundle:
    """Bake the fitted networks and scene into a RenderBundle.

    cache must be refreshed against the final field (the per-scene fit does
    this before returning).
    """
    verts, faces, info = extract_mesh(networks.sdf, resolution=mesh_resolution, bounds=bounds)
    with torch.no_grad():
        feats = networks.encode_images(scene_images).detach().to(torch.float32)
    bounds_arr = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    center = bounds_arr.mean(axis=0)
    orbit = float(np.mean([np.linalg.norm(cam.center - center) for cam in cameras]))
    meta = {
        "mesh": info,
        "tau_occ": tau_occ,
        "feature_dim": networks.feature_dim,
        "network_config": dict(networks.config.__dict__),
        "image_size": [int(scene_images.shape[1]), int(scene_images.shape[2])],
        "cameras": [cam.to_dict() for cam in cameras],
        "bounds": bounds_arr.tolist(),
        "suggested_orbit_radius": orbit,
    }
    return RenderBundle(
        vertices=verts,
        faces=faces,
        features=feats,
        source_points=cache.points.detach().to(torch.float32),
        source_valid=cache.valid.clone(),
        source_depths=cache.depths.detach().to(torch.float32),
        cameras=list(cameras),
        aggregator=networks.aggregator,
        decoder=networks.decoder,
        tau_occ=tau_occ,
        meta=meta,
    )


def save_bundle(path: str | Path, bundle: RenderBundle) -> None:
    arrays: dict[str, np.ndarray] = {
        "vertices": bundle.vertices.astype(np.float64),
        "faces": bundle.faces.astype(np.int64),
        "features": bundle.features.numpy().astype(np.float32),
        "source_points": bundle.source_points.numpy().astype(np.float32),
        "source_valid": bundle.source_valid.numpy().astype(np.uint8),
        "source_depths": bundle.source_depths.numpy().astype(np.float32),
    }
    for key, tensor in bundle.aggregator.state_dict().items():
        arrays[f"aggregator/{key}"] = tensor.detach().cpu().numpy()
    if bundle.decoder is not None:
        for key, tensor in bundle.decoder.state_dict().items():
            arrays[f"decoder/{key}"] = tensor.detach().cpu().numpy()
    write_bundle(path, arrays, bundle.meta)


def load_bundle(path: str | Path) -> RenderBundle:
    """Reconstruct a RenderBundle (including the scorer and decoder modules)
    from a bundle file."""
    from .aggregation import AggregationMlp
    from .codec import FeatureDecoder

    arrays, meta = read_bundle(path)
    net_cfg = NetworkConfig(
        **{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in meta["network_config"].items()
        }
    )
    agg_state = {
        k[len("aggregator/") :]: torch.from_numpy(v)
        for k, v in arrays.items()
        if k.startswith("aggregator/")
    }
    aggregator = AggregationMlp(
        feature_dim=net_cfg.effective_feature_dim,
        hidden=net_cfg.aggregator_hidden,
        layers=net_cfg.aggregator_layers,
    )
    aggregator.load_state_dict(agg_state)
    aggregator.eval()
    decoder = None
    dec_state = {
        k[len("decoder/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("decoder/")
    }
    if dec_state:
        decoder = FeatureDecoder(feature_dim=net_cfg.feature_dim, widths=net_cfg.decoder_widths)
        decoder.load_state_dict(dec_state)
        decoder.eval()
    cameras = [CameraModel.from_dict(c) for c in meta["cameras"]]
    return RenderBundle(
        vertices=arrays["vertices"],
        faces=arrays["faces"],
        features=torch.from_numpy(arrays["features"]),
        source_points=torch.from_numpy(arrays["source_points"]),
        source_valid=torch.from_numpy(arrays["source_valid"]).bool(),
        source_depths=torch.from_numpy(arrays["source_depths"]),
        cameras=cameras,
        aggregator=aggregator,
        decoder=decoder,
        tau_occ=float(meta["tau_occ"]),
        meta=meta,
    )


def _decode(bundle: RenderBundle, features: torch.Tensor) -> torch.Tensor:
    if bundle.decoder is None:
        return features.clamp(0.0, 1.0)
    return bundle.decoder(features.unsqueeze(0), clamp=True).squeeze(0)


def fast_render(
    bundle: RenderBundle,
    camera: CameraModel,
    backend: str = "bvh",
    timings: dict | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Render a camera from the baked assets (no field evaluations).

    Args:
        backend: "bvh" traces camera rays against the mesh BVH; "raster"
            z-buffers the mesh. Both produce per-pixel surface points fed to
            the same resample/aggregate/decode path.
        timings: optional dict that receives per-stage seconds.

    Returns:
        (image (H, W, 3) in [0, 1], hit_mask (H, W) bool, depth (H, W) ray
        parameter, -1.0 on misses).
    """
    t0 = time.perf_counter()
    rays = generate_rays(camera)
    o = rays.origins.numpy().astype(np.float64)
    d = rays.directions.numpy().astype(np.float64)
    if backend == "bvh":
        t, face, u, v = intersect_rays(bundle.bvh, o, d)
        pts = barycentric_points(bundle.vertices, bundle.faces, face, u, v)
        hit = face >= 0
    elif backend == "raster":
        _, face, u, v = rasterize_mesh(
            bundle.vertices, bundle.faces, camera.intrinsics, camera.rotation,
            camera.translation, camera.width, camera.height,
        )
        pts = barycentric_points(bundle.vertices, bundle.faces, face, u, v)
        hit = face >= 0
    else:
        raise ValueError(f"unknown backend {backend!r}")
    t1 = time.perf_counter()

    points = torch.from_numpy(pts).to(torch.float32)
    hit_t = torch.from_numpy(hit)
    with torch.no_grad():
        sampled, inb = resample_features(bundle.features, bundle.cameras, points)
        usable = inb & hit_t.unsqueeze(0)
        visible = occlusion_mask(points, bundle.cache(), bundle.cameras, bundle.tau_occ)
        visible = render_visibility(visible & usable, usable)
        t2 = time.perf_counter()
        agg = aggregate_learned(sampled, visible, rays.directions, bundle.aggregator)
        feat = agg.features * (hit_t & agg.any_visible).unsqueeze(-1)
        t3 = time.perf_counter()
        # Misses render as black, not as decode(0).
        image = _decode(bundle, feat) * hit_t.unsqueeze(-1)
        t4 = time.perf_counter()
    depth = torch.from_numpy(
        np.where(hit, ((pts - o) * d).sum(-1), -1.0)
    ).to(torch.float32)
    if timings is not None:
        timings["intersect"] = t1 - t0
        timings["resample_occlusion"] = t2 - t1
        timings["aggregate"] = t3 - t2
        timings["decode"] = t4 - t3
        timings["total"] = t4 - t0
    return image, hit_t, depth


def benchmark_render(
    bundle: RenderBundle,
    cameras: Sequence[CameraModel],
    repeats: int = 5,
    backend: str = "bvh",
) -> dict:
    """Median per-stage timings (seconds) over repeated renders.

    The first render is discarded as warmup (JIT compilation and BVH build).
    """
    stages: dict[str, list[float]] = {}
    fast_render(bundle, cameras[0], backend=backend)  # warmup
    for _ in range(repeats):
        for cam in cameras:
            t: dict = {}
            fast_render(bundle, cam, backend=backend, timings=t)
            for k, v in t.items():
                stages.setdefault(k, []).append(v)
    report = {f"{k}_median_s": float(np.median(v)) for k, v in stages.items()}
    report["fps"] = 1.0 / report["total_median_s"]
    report["backend"] = backend
    report["renders"] = repeats * len(cameras)
    report["resolution"] = [cameras[0].width, cameras[0].height]
    report["n_faces"] = int(len(bundle.faces))
    report["feature_dim"] = int(bundle.features.shape[-1])
    return report
