"""Image and geometry metrics plus small utilities for summarizing training
runs (EMA smoothing, threshold-crossing times, metric curves)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

PSNR_CAP_DB = 99.0


def masked_psnr(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> float:
    """PSNR with the squared error zeroed outside the mask but averaged over
    all pixels and channels (peak 1.0). Identical images return the cap value
    instead of infinity.

    Args:
        rendered/target: (H, W, 3) in [0, 1].
        mask: (H, W) bool.
    """
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    diff = (rendered - target) * mask.unsqueeze(-1).to(rendered.dtype)
    mse = float((diff ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * float(np.log10(mse)))


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean nearest-neighbor euclidean distance
    from a to b plus the same from b to a."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    return float(d_ab.mean() + d_ba.mean())


def sample_mesh_points(
    vertices: np.ndarray, faces: np.ndarray, count: int, seed: int = 0
) -> np.ndarray:
    """Uniform area-weighted surface samples from a triangle mesh."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    tri = v[f]  # (F, 3, 3)
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    if area.sum() <= 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(f), size=count, p=area / area.sum())
    u = rng.random(count)
    w = rng.random(count)
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    t = tri[idx]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + w[:, None] * (t[:, 2] - t[:, 0])


def mask_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of two boolean masks (1.0 when both empty)."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def ema_smooth(values: Sequence[float], smoothing: float) -> list[float]:
    """Exponential moving average with the first output equal to the first
    input (no zero-bias warmup).

    smoothing is the weight on the new sample: v_hat[i] = (1 - s) * v_hat[i-1]
    + s * v[i].
    """
    if not 0.0 < smoothing <= 1.0:
        raise ValueError(f"smoothing must be in (0, 1], got {smoothing}")
    out: list[float] = []
    for v in values:
        if not out:
            out.append(float(v))
        else:
            out.append((1.0 - smoothing) * out[-1] + smoothing * float(v))
    return out


def time_to_metric(
    samples: Sequence[tuple[float, float]], threshold: float, higher_is_better: bool = True
) -> float | None:
    """Earliest sample time at which the metric crosses the threshold.

    Args:
        samples: (time, value) pairs in increasing time order.

    Returns:
        The crossing time, or None if the threshold is never reached.
    """
    for t, v in samples:
        if (v >= threshold) if higher_is_better else (v <= threshold):
            return float(t)
    return None


def read_history(path: str | Path) -> list[dict]:
    """Load a JSONL training log."""
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_metric_curves(
    curves: dict[str, Sequence[tuple[float, float]]],
    out_path: str | Path,
    xlabel: str = "iteration",
    ylabel: str = "value",
    title: str | None = None,
    smoothing: float | None = None,
) -> None:
    """Write a PNG comparing one or more (x, y) curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, pts in curves.items():
        if not pts:
            continue
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        if smoothing is not None:
            ys = ema_smooth(ys, smoothing)
        ax.plot(xs, ys, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
