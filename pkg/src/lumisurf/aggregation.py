"""Feature re-projection into source views, occlusion-aware visibility, and
per-pixel aggregation across views (learned softmax scores or a fixed
view-direction power kernel).

Feature mode note: the pipeline also runs with raw RGB "features" (d = 3,
encoder/decoder bypassed); everything here is dimension-agnostic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene import CameraModel, RayBundle, generate_rays
from .sdf import SphereTraceConfig, sphere_trace

RGB_FEATURE_DIM = 3  # feature dim when the codec is bypassed


@dataclass
class SourceSurfaceCache:
    """Per-view traced surface points used for occlusion tests and as frozen
    target geometry on appearance-only iterations.

    stamp: iteration index of the last refresh; monotonically non-decreasing.
    """

    points: torch.Tensor  # (N, H, W, 3)
    valid: torch.Tensor  # (N, H, W) bool
    depths: torch.Tensor  # (N, H, W)
    stamp: int = -1

    @classmethod
    def allocate(cls, n_views: int, height: int, width: int, dtype: torch.dtype = torch.float32) -> "SourceSurfaceCache":
        return cls(
            points=torch.zeros(n_views, height, width, 3, dtype=dtype),
            valid=torch.zeros(n_views, height, width, dtype=torch.bool),
            depths=torch.full((n_views, height, width), -1.0, dtype=dtype),
            stamp=-1,
        )

    def refresh(
        self,
        sdf: Callable,
        rays: Sequence[RayBundle],
        view_indices: Sequence[int],
        trace_cfg: SphereTraceConfig,
        stamp: int,
    ) -> None:
        """Re-trace the given views with the current field (detached)."""
        if stamp < self.stamp:
            raise ValueError(f"cache stamp must not decrease: {stamp} < {self.stamp}")
        for i in view_indices:
            res = sphere_trace(sdf, rays[i], trace_cfg)
            self.points[i] = res.positions
            self.valid[i] = res.converged
            self.depths[i] = torch.where(res.converged, res.depths, torch.full_like(res.depths, -1.0))
        self.stamp = stamp


def project_to_views(
    cameras: Sequence[CameraModel], points: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project target points into each source camera (differentiable).

    Args:
        points: (H, W, 3) world points.

    Returns:
        (uv (N, H, W, 2) continuous pixel coords, depth (N, H, W), in_front
        (N, H, W) bool).
    """
    uvs = []
    depths = []
    for cam in cameras:
        K, R, t = cam.torch_extrinsics(points.dtype)
        cam_pts = points @ R.T + t
        z = cam_pts[..., 2]
        safe_z = z.clamp(min=1e-9)
        u = K[0, 0] * cam_pts[..., 0] / safe_z + K[0, 2]
        v = K[1, 1] * cam_pts[..., 1] / safe_z + K[1, 2]
        uvs.append(torch.stack([u, v], dim=-1))
        depths.append(z)
    uv = torch.stack(uvs, dim=0)
    depth = torch.stack(depths, dim=0)
    return uv, depth, depth > 1e-9


def _grid_from_uv(uv: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Continuous pixel coords -> grid_sample coords (align_corners=False)."""
    gx = uv[..., 0] * 2.0 / width - 1.0
    gy = uv[..., 1] * 2.0 / height - 1.0
    return torch.stack([gx, gy], dim=-1)


def in_bounds_mask(uv: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """True where all four bilinear corners are inside the source image."""
    u, v = uv[..., 0], uv[..., 1]
    return (u >= 0.5) & (u <= width - 0.5) & (v >= 0.5) & (v <= height - 0.5)


def resample_features(
    features: torch.Tensor, cameras: Sequence[CameraModel], target_points: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinearly sample every view's feature map at the projections of the
    target surface points.

    Differentiable with respect to target_points (and features), which is how
    appearance gradients reach the geometry.

    Args:
        features: (N, H, W, C) per-view feature maps.
        target_points: (Ht, Wt, 3) world points.

    Returns:
        (resampled (N, Ht, Wt, C), in_bounds (N, Ht, Wt) bool). Out-of-bounds
        samples are zero.
    """
    N, H, W, C = features.shape
    if len(cameras) != N:
        raise ValueError(f"{N} feature maps but {len(cameras)} cameras")
    uv, _, in_front = project_to_views(cameras, target_points)
    grid = _grid_from_uv(uv, W, H).to(features.dtype)
    sampled = F.grid_sample(
        features.permute(0, 3, 1, 2), grid, mode="bilinear", padding_mode="zeros", align_corners=False
    ).permute(0, 2, 3, 1)
    inside = in_bounds_mask(uv, W, H) & in_front
    return sampled, inside


def occlusion_mask(
    target_points: torch.Tensor,
    cache: SourceSurfaceCache,
    cameras: Sequence[CameraModel],
    tau_occ: float,
    view_indices: Sequence[int] | None = None,
) -> torch.Tensor:
    """Visibility of target points from each source view.

    A point is visible from view i when its projection lands in bounds, the
    cached source trace converged at the projected pixel, and the cached
    surface point interpolated there lies within tau_occ of the target point
    (i.e. the source view sees the same surface, not a closer occluder).

    The surface point is a bilinear blend of the valid corner points only,
    renormalized, so a silhouette-adjacent projection is judged against the
    surface rather than against background placeholders.

    Returns:
        (N, Ht, Wt) bool visibility.
    """
    idx = list(range(cache.points.shape[0])) if view_indices is None else list(view_indices)
    cams = [cameras[i] for i in idx]
    pts = cache.points[idx]
    val = cache.valid[idx]
    N, H, W, _ = pts.shape
    with torch.no_grad():
        tp = target_points.detach()
        uv, _, in_front = project_to_views(cams, tp)
        x = uv[..., 0].to(pts.dtype) - 0.5
        y = uv[..., 1].to(pts.dtype) - 0.5
        x0, y0 = x.floor(), y.floor()
        fx, fy = x - x0, y - y0
        view = torch.arange(N).view(N, *([1] * (tp.ndim - 1))).expand(x.shape)
        blend = torch.zeros(x.shape + (3,), dtype=pts.dtype)
        total = torch.zeros(x.shape, dtype=pts.dtype)
        for dx, dy, wgt in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            ui = (x0 + dx).long().clamp(0, W - 1)
            vi = (y0 + dy).long().clamp(0, H - 1)
            ok = val[view, vi, ui].to(pts.dtype) * wgt
            blend = blend + ok.unsqueeze(-1) * pts[view, vi, ui]
            total = total + ok
        interp = blend / total.clamp_min(1e-12).unsqueeze(-1)
        un = x.round().long().clamp(0, W - 1)
        vn = y.round().long().clamp(0, H - 1)
        valid_nearest = val[view, vn, un] & (total > 1e-6)
        dist = torch.linalg.norm(interp - tp.unsqueeze(0), dim=-1)
        visible = in_bounds_mask(uv, W, H) & in_front & valid_nearest & (dist < tau_occ)
    return visible


def source_view_directions(cameras: Sequence[CameraModel], target_points: torch.Tensor) -> torch.Tensor:
    """Unit directions from each source camera center to the target points,
    shape (N, Ht, Wt, 3)."""
    dirs = []
    for cam in cameras:
        c = torch.as_tensor(cam.center, dtype=target_points.dtype)
        rel = target_points - c
        dirs.append(rel / torch.linalg.norm(rel, dim=-1, keepdim=True).clamp_min(1e-12))
    return torch.stack(dirs, dim=0)


class AggregationMlp(nn.Module):
    """Per-pixel scoring MLP: concat(feature, target view direction) -> one
    raw score per view. 5 linear layers, 32 hidden units."""

    def __init__(self, feature_dim: int = 16, hidden: int = 32, layers: int = 5):
        super().__init__()
        if layers < 2:
            raise ValueError("AggregationMlp needs at least 2 layers")
        self.feature_dim = feature_dim
        dims = [feature_dim + 3] + [hidden] * (layers - 1) + [1]
        mods = []
        for i in range(layers):
            mods.append(nn.Linear(dims[i], dims[i + 1]))
            if i < layers - 1:
                mods.append(nn.ReLU(inplace=True))
        self.net = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


@dataclass
class AggregateResult:
    features: torch.Tensor  # (Ht, Wt, C)
    weights: torch.Tensor  # (N, Ht, Wt), zero where invisible
    any_visible: torch.Tensor  # (Ht, Wt) bool


def render_visibility(visible: torch.Tensor, usable: torch.Tensor) -> torch.Tensor:
    """Inference-time visibility: pixels where every source fails the
    occlusion test fall back to all usable sources (in bounds, in front of the
    camera, on a traced surface).

    Grazing surface points, seen at steep angles by every view, routinely
    exceed the occlusion tolerance; blending their best-guess features beats
    rendering holes. Training must NOT use this fallback: there the same
    pixels are excluded from the losses instead.
    """
    none = ~visible.any(dim=0, keepdim=True)
    return visible | (usable & none)


def aggregate_learned(
    features: torch.Tensor,
    visible: torch.Tensor,
    target_dirs: torch.Tensor,
    mlp: Callable[[torch.Tensor], torch.Tensor],
) -> AggregateResult:
    """Blend per-view features with a softmax over learned scores.

    Invisible views get exactly zero weight; pixels with no visible view
    produce the zero feature and are flagged via any_visible.

    Args:
        features: (N, Ht, Wt, C) resampled features (zeroed where invisible is
            fine; they are masked regardless).
        visible: (N, Ht, Wt) bool.
        target_dirs: (Ht, Wt, 3) unit viewing directions of the target rays.
    """
    N, Ht, Wt, C = features.shape
    dirs = target_dirs.unsqueeze(0).expand(N, -1, -1, -1)
    scores = mlp(torch.cat([features, dirs], dim=-1))  # (N, Ht, Wt)
    neg = torch.finfo(scores.dtype).min / 4
    masked = torch.where(visible, scores, torch.full_like(scores, neg))
    any_visible = visible.any(dim=0)
    shifted = masked - masked.amax(dim=0, keepdim=True).detach()
    exps = torch.exp(shifted) * visible.to(scores.dtype)
    denom = exps.sum(dim=0, keepdim=True).clamp_min(1e-30)
    weights = exps / denom
    weights = weights * any_visible.unsqueeze(0)
    blended = (weights.unsqueeze(-1) * features * visible.unsqueeze(-1)).sum(dim=0)
    return AggregateResult(features=blended, weights=weights, any_visible=any_visible)


def aggregate_fixed(
    features: torch.Tensor,
    visible: torch.Tensor,
    target_dirs: torch.Tensor,
    source_dirs: torch.Tensor,
    kappa: float = 8.0,
) -> AggregateResult:
    """Blend with the fixed kernel max(0, <V_t, dir_i>)^kappa, normalized over
    visible views; falls back to uniform weights over visible views when all
    kernels vanish (e.g. every dot product negative)."""
    N = features.shape[0]
    dots = (source_dirs * target_dirs.unsqueeze(0)).sum(dim=-1)
    w = dots.clamp_min(0.0).pow(kappa) * visible.to(features.dtype)
    any_visible = visible.any(dim=0)
    total = w.sum(dim=0, keepdim=True)
    degenerate = (total <= 1e-20) & any_visible.unsqueeze(0)
    uniform = visible.to(features.dtype) / visible.to(features.dtype).sum(dim=0, keepdim=True).clamp_min(1.0)
    w = torch.where(degenerate.expand(N, -1, -1), uniform, w / total.clamp_min(1e-20))
    w = w * any_visible.unsqueeze(0)
    blended = (w.unsqueeze(-1) * features * visible.unsqueeze(-1)).sum(dim=0)
    return AggregateResult(features=blended, weights=w, any_visible=any_visible)
