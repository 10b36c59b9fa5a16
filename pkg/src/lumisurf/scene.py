"""Multi-view scene containers, camera math, and ray generation.

Conventions used across the package:
  * world-to-camera extrinsics: X_cam = R @ X_world + t, camera looks along +z.
  * pixel (u, v) = (column, row); integer pixel p samples continuous (p + 0.5).
  * scenes are normalized to the unit cube centered at the origin.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

# Axis-aligned scene bounds: unit cube centered at the origin.
UNIT_CUBE = np.array([[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]], dtype=np.float64)

_RAY_EPS = 1e-4


class SceneFormatError(ValueError):
    """Raised when an on-disk scene or a camera fails validation."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with world-to-camera extrinsics.

    Attributes:
        intrinsics: 3x3 row-major K with zero skew.
        rotation: 3x3 row-major world-to-camera rotation.
        translation: length-3 world-to-camera translation.
        width, height: image size in pixels.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.width < 1 or self.height < 1:
            raise SceneFormatError(f"image size must be positive, got {self.width}x{self.height}")
        if not (np.isfinite(K).all() and np.isfinite(R).all() and np.isfinite(t).all()):
            raise SceneFormatError("camera parameters must be finite")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise SceneFormatError(f"focal lengths must be positive, got fx={K[0,0]}, fy={K[1,1]}")
        if abs(K[1, 0]) > 1e-9 or abs(K[2, 0]) > 1e-9 or abs(K[2, 1]) > 1e-9 or abs(K[2, 2] - 1.0) > 1e-9 or abs(K[0, 1]) > 1e-9:
            raise SceneFormatError("intrinsics must be upper-triangular with zero skew and K[2,2]=1")
        if not (0.0 <= K[0, 2] <= self.width and 0.0 <= K[1, 2] <= self.height):
            raise SceneFormatError("principal point lies outside the image bounds")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-6:
            raise SceneFormatError(f"rotation is not orthonormal (max |RR^T - I| = {err:.3e})")
        if np.linalg.det(R) < 0.0:
            raise SceneFormatError("rotation has negative determinant (improper)")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        focal: float,
        width: int,
        height: int,
        up: Sequence[float] = (0.0, 1.0, 0.0),
    ) -> "CameraModel":
        """Build a camera at `eye` looking at `target` with square pixels.

        The image v axis points down; a world point above the target appears in
        the upper half of the image.
        """
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise SceneFormatError("look_at eye and target coincide")
        rz = forward / norm
        rx = np.cross(rz, up)
        nx = np.linalg.norm(rx)
        if nx < 1e-9:
            raise SceneFormatError("look_at direction is parallel to the up vector")
        rx = rx / nx
        ry = np.cross(rz, rx)
        R = np.stack([rx, ry, rz], axis=0)
        t = -R @ eye
        K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, t, width, height)

    def resized(self, width: int, height: int) -> "CameraModel":
        """Same pose, intrinsics rescaled to a new pixel grid."""
        sx, sy = width / self.width, height / self.height
        K = self.intrinsics.copy()
        K[0, :] *= sx
        K[1, :] *= sy
        return CameraModel(K, self.rotation.copy(), self.translation.copy(), width, height)

    def to_dict(self) -> dict:
        return {
            "K": self.intrinsics.reshape(-1).tolist(),
            "R": self.rotation.reshape(-1).tolist(),
            "t": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(
                np.asarray(d["K"], dtype=np.float64),
                np.asarray(d["R"], dtype=np.float64),
                np.asarray(d["t"], dtype=np.float64),
                int(d["width"]),
                int(d["height"]),
            )
        except KeyError as exc:
            raise SceneFormatError(f"camera entry missing field {exc}") from exc

    def torch_extrinsics(self, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(K, R, t) as torch tensors for differentiable projection."""
        return (
            torch.as_tensor(self.intrinsics, dtype=dtype),
            torch.as_tensor(self.rotation, dtype=dtype),
            torch.as_tensor(self.translation, dtype=dtype),
        )


def project_point(camera: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into continuous pixel coordinates.

    Args:
        camera: the camera model.
        points: (..., 3) world coordinates.

    Returns:
        (u, v, depth): continuous pixel coordinates and camera-space depth.
        depth <= 0 means the point is behind (or at) the camera center; u, v
        are zeroed there rather than left as division artifacts.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ camera.rotation.T + camera.translation
    depth = cam[..., 2]
    safe = depth != 0.0
    inv = np.zeros_like(depth)
    np.divide(1.0, depth, out=inv, where=safe)
    u = (camera.fx * cam[..., 0]) * inv + camera.cx
    v = (camera.fy * cam[..., 1]) * inv + camera.cy
    u = np.where(safe, u, 0.0)
    v = np.where(safe, v, 0.0)
    return u, v, depth


@dataclass
class RayBundle:
    """Per-pixel rays of one camera.

    Attributes:
        origins: (H, W, 3) camera center broadcast to every pixel.
        directions: (H, W, 3) unit-norm world directions through pixel centers.
        near, far: scalars bounding the trace interval for every ray in the
            bundle (the hull of the per-ray scene-bounds intersections).
        bounds: (2, 3) scene box the bundle was clipped against; hits reported
            outside a ray's own box segment are discarded by the tracer.
    """

    origins: torch.Tensor
    directions: torch.Tensor
    near: float
    far: float
    bounds: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.origins.shape != self.directions.shape or self.origins.shape[-1] != 3:
            raise ValueError(f"origins/directions shape mismatch: {tuple(self.origins.shape)} vs {tuple(self.directions.shape)}")
        if not (math.isfinite(self.near) and math.isfinite(self.far)) or not self.near < self.far:
            raise ValueError(f"invalid trace interval [{self.near}, {self.far}]")
        if self.bounds is None:
            self.bounds = UNIT_CUBE.copy()
        else:
            self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)

    @property
    def shape(self) -> tuple[int, int]:
        return self.origins.shape[0], self.origins.shape[1]

    def flat(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(R, 3) origins and directions with pixel dims flattened."""
        return self.origins.reshape(-1, 3), self.directions.reshape(-1, 3)

    def per_ray_interval(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Each ray's own [enter, exit] against self.bounds, shape (H, W).

        Rays that miss the box get enter > exit. Axis-parallel rays are
        handled (unbounded inside the slab, empty outside).
        """
        o, d = self.origins, self.directions
        lo = torch.as_tensor(self.bounds[0], dtype=o.dtype)
        hi = torch.as_tensor(self.bounds[1], dtype=o.dtype)
        big = torch.finfo(o.dtype).max / 4
        parallel = d.abs() < 1e-12
        safe_d = torch.where(parallel, torch.ones_like(d), d)
        t0 = (lo - o) / safe_d
        t1 = (hi - o) / safe_d
        t_lo = torch.minimum(t0, t1)
        t_hi = torch.maximum(t0, t1)
        inside = (o >= lo) & (o <= hi)
        pos = torch.full_like(t_lo, big)
        t_lo = torch.where(parallel, torch.where(inside, -pos, pos), t_lo)
        t_hi = torch.where(parallel, torch.where(inside, pos, -pos), t_hi)
        return t_lo.amax(dim=-1), t_hi.amin(dim=-1)


def _cube_interval(origins: np.ndarray, directions: np.ndarray, bounds: np.ndarray) -> tuple[float, float]:
    """Conservative [near, far] hull over the rays that hit the bounds box."""
    lo, hi = bounds[0], bounds[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo[None, :] - origins) / directions
        t1 = (hi[None, :] - origins) / directions
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = tmax > np.maximum(tmin, 0.0)
    if hit.any():
        near = max(float(tmin[hit].min()), _RAY_EPS)
        far = float(tmax[hit].max())
    else:
        # No ray touches the box; fall back to its bounding sphere.
        center = (lo + hi) / 2.0
        radius = float(np.linalg.norm(hi - lo)) / 2.0
        dist = float(np.linalg.norm(origins[0] - center))
        near = max(dist - radius, _RAY_EPS)
        far = dist + radius
    if far <= near:
        far = near + 1e-3
    return near, far


def generate_rays(
    camera: CameraModel,
    bounds: np.ndarray | None = None,
    dtype: torch.dtype = torch.float32,
) -> RayBundle:
    """Rays through every pixel center, with the trace interval clipped to the
    scene bounds (default: the unit cube)."""
    bounds = UNIT_CUBE if bounds is None else np.asarray(bounds, dtype=np.float64)
    H, W = camera.height, camera.width
    u = np.arange(W, dtype=np.float64) + 0.5
    v = np.arange(H, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v, indexing="xy")  # (H, W)
    x = (uu - camera.cx) / camera.fx
    y = (vv - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)  # (H, W, 3)
    dirs_world = dirs_cam @ camera.rotation  # row-vector form of R^T @ d
    dirs_world = dirs_world / np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    center = camera.center
    near, far = _cube_interval(center[None, :].repeat(H * W, 0), dirs_world.reshape(-1, 3), bounds)
    origins = np.broadcast_to(center, (H, W, 3)).copy()
    return RayBundle(
        origins=torch.as_tensor(origins, dtype=dtype),
        directions=torch.as_tensor(dirs_world, dtype=dtype),
        near=near,
        far=far,
        bounds=bounds,
    )


def viewing_directions(camera: CameraModel, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) unit directions from the camera center through pixel centers."""
    return generate_rays(camera, dtype=dtype).directions


@dataclass
class MultiViewScene:
    """Calibrated multi-view capture normalized to the unit cube.

    Attributes:
        images: (N, H, W, 3) float32 in [0, 1].
        masks: (N, H, W) bool foreground masks.
        cameras: per-view camera models.
        bounds: (2, 3) axis-aligned scene bounds.
        normalization: similarity transform that carried the source data into
            the unit cube, {"scale": s, "translation": [tx, ty, tz]}.
    """

    images: torch.Tensor
    masks: torch.Tensor
    cameras: list[CameraModel]
    bounds: np.ndarray = field(default_factory=lambda: UNIT_CUBE.copy())
    normalization: dict = field(default_factory=lambda: {"scale": 1.0, "translation": [0.0, 0.0, 0.0]})
    name: str = "scene"

    def __post_init__(self) -> None:
        n = len(self.cameras)
        if n < 2:
            raise SceneFormatError(f"a scene needs at least 2 views, got {n}")
        if self.images.ndim != 4 or self.images.shape[0] != n or self.images.shape[-1] != 3:
            raise SceneFormatError(f"images must be (N, H, W, 3) with N={n}, got {tuple(self.images.shape)}")
        if self.masks.shape != self.images.shape[:3]:
            raise SceneFormatError(f"masks must be (N, H, W), got {tuple(self.masks.shape)}")
        if self.masks.dtype != torch.bool:
            raise SceneFormatError("masks must be boolean")
        H, W = self.images.shape[1], self.images.shape[2]
        for i, cam in enumerate(self.cameras):
            if cam.width != W or cam.height != H:
                raise SceneFormatError(f"view {i}: camera size {cam.width}x{cam.height} != image size {W}x{H}")
        if float(self.images.min()) < 0.0 or float(self.images.max()) > 1.0:
            raise SceneFormatError("image values must lie in [0, 1]")
        for i in range(n):
            if not bool(self.masks[i].any()):
                raise SceneFormatError(f"view {i}: mask has no foreground pixels")
        lo, hi = self.bounds[0], self.bounds[1]
        for i, cam in enumerate(self.cameras):
            c = cam.center
            if np.all(c >= lo) and np.all(c <= hi):
                raise SceneFormatError(f"view {i}: camera center {c} lies inside the scene bounds")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> tuple[int, int]:
        """(H, W)."""
        return self.images.shape[1], self.images.shape[2]


def write_scene(
    path: str | Path,
    images: np.ndarray,
    masks: np.ndarray,
    cameras: Sequence[CameraModel],
    normalization: dict | None = None,
    bounds: np.ndarray | None = None,
    extra_meta: dict | None = None,
) -> Path:
    """Write a scene directory: images/{i:04d}.png, masks/{i:04d}.png,
    cameras.json, scene.json.

    Args:
        images: (N, H, W, 3) float in [0, 1] or uint8.
        masks: (N, H, W) float/bool; binarized at 0.5 when saved.
    """
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.asarray(images, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    masks = np.asarray(masks)
    for i in range(images.shape[0]):
        Image.fromarray(images[i]).save(path / "images" / f"{i:04d}.png")
        m = (masks[i] >= 0.5).astype(np.uint8) * 255
        Image.fromarray(m, mode="L").save(path / "masks" / f"{i:04d}.png")
    with open(path / "cameras.json", "w") as f:
        json.dump({"views": [c.to_dict() for c in cameras]}, f, indent=1)
    meta = {
        "bounds": (UNIT_CUBE if bounds is None else np.asarray(bounds)).tolist(),
        "normalization": normalization or {"scale": 1.0, "translation": [0.0, 0.0, 0.0]},
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(path / "scene.json", "w") as f:
        json.dump(meta, f, indent=1)
    return path


def load_scene(path: str | Path) -> MultiViewScene:
    """Load a scene directory written by `write_scene` (or compatible).

    Masks are binarized at 0.5. Raises SceneFormatError with the offending
    path when a required file is missing or a camera fails validation.
    """
    path = Path(path)
    cam_file = path / "cameras.json"
    if not cam_file.exists():
        raise SceneFormatError(f"missing camera file: {cam_file}")
    with open(cam_file) as f:
        cam_data = json.load(f)
    views = cam_data.get("views")
    if not isinstance(views, list) or not views:
        raise SceneFormatError(f"{cam_file} has no 'views' list")
    cameras = [CameraModel.from_dict(d) for d in views]

    images = []
    masks = []
    for i in range(len(cameras)):
        img_file = path / "images" / f"{i:04d}.png"
        mask_file = path / "masks" / f"{i:04d}.png"
        if not img_file.exists():
            raise SceneFormatError(f"missing image file: {img_file}")
        if not mask_file.exists():
            raise SceneFormatError(f"missing mask file: {mask_file}")
        img = np.asarray(Image.open(img_file).convert("RGB"), dtype=np.float32) / 255.0
        m = np.asarray(Image.open(mask_file).convert("L"), dtype=np.float32) / 255.0
        images.append(img)
        masks.append(m >= 0.5)

    meta_file = path / "scene.json"
    bounds = UNIT_CUBE.copy()
    normalization = {"scale": 1.0, "translation": [0.0, 0.0, 0.0]}
    if meta_file.exists():
        with open(meta_file) as f:
            meta = json.load(f)
        if "bounds" in meta:
            bounds = np.asarray(meta["bounds"], dtype=np.float64)
        if "normalization" in meta:
            normalization = meta["normalization"]

    return MultiViewScene(
        images=torch.as_tensor(np.stack(images)),
        masks=torch.as_tensor(np.stack(masks)),
        cameras=cameras,
        bounds=bounds,
        normalization=normalization,
        name=path.name,
    )
