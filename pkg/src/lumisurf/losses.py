"""Training objectives: masked reconstruction, silhouette (mask) consistency,
and the eikonal regularizer, plus their weighted combination.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import torch
import torch.nn.functional as F

TermInput = Union[torch.Tensor, float, Callable[[], Union[torch.Tensor, float]]]


class EmptyMaskError(ValueError):
    """Raised when a loss is asked to normalize by an empty mask."""


class NonFiniteLossError(RuntimeError):
    """Raised by the trainer when a loss stops being finite."""


@dataclass(frozen=True)
class LossWeights:
    """Loss balance. lambda1 is tied to alpha (lambda1 * alpha == 100) and is
    recomputed whenever alpha changes, so it is exposed as a property."""

    alpha: float = 50.0
    lambda2: float = 3.0
    tau: float = 1e-3
    eikonal_count: int = 5000

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def lambda1(self) -> float:
        return 100.0 / self.alpha


@dataclass
class LossBreakdown:
    """Per-term values plus their weighted total. Terms skipped on
    appearance-only iterations are reported as 0.0 (never evaluated)."""

    l_r: torch.Tensor
    l_m: torch.Tensor
    l_e: torch.Tensor
    total: torch.Tensor
    recon_pixels: int = 0
    mask_pixels: int = 0

    def floats(self) -> dict:
        return {
            "l_r": float(self.l_r.detach()),
            "l_m": float(self.l_m.detach()),
            "l_e": float(self.l_e.detach()),
            "total": float(self.total.detach()),
        }


def reconstruction_loss(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mean absolute error, channels summed per pixel.

    (1 / sum(M)) * sum_{p: M=1} sum_c |rendered - target|. A fully empty mask
    is an error rather than a silent zero.
    """
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    if mask.shape != rendered.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match image {tuple(rendered.shape)}")
    m = mask.bool()
    count = int(m.sum())
    if count == 0:
        raise EmptyMaskError("reconstruction_loss: mask selects no pixels")
    diff = (rendered - target).abs().sum(dim=-1)
    return (diff * m).sum() / count


def mask_loss(phi_min: torch.Tensor, mask: torch.Tensor, alpha: float, tau: float) -> torch.Tensor:
    """Silhouette consistency via BCE on sigmoid(-alpha * phi_min).

    Restricted to the pixel set S = {p : M[p] = 0 or phi_min[p] < tau} and
    normalized by alpha * sum(M). Computed in logits form
    (binary_cross_entropy_with_logits on z = -alpha * phi_min) so large alpha
    stays finite.
    """
    if phi_min.shape != mask.shape:
        raise ValueError(f"phi_min shape {tuple(phi_min.shape)} != mask shape {tuple(mask.shape)}")
    m = mask.bool()
    mask_area = int(m.sum())
    if mask_area == 0:
        raise EmptyMaskError("mask_loss: mask has no foreground pixels")
    in_set = (~m) | (phi_min.detach() < tau)
    if not bool(in_set.any()):
        return phi_min.sum() * 0.0
    logits = -alpha * phi_min[in_set]
    labels = m[in_set].to(phi_min.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, labels, reduction="sum")
    return bce / (alpha * mask_area)


def eikonal_loss(
    field,
    count: int,
    generator: torch.Generator,
    bounds: tuple[float, float] = (-0.5, 0.5),
    device: torch.device | str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Mean squared deviation of |grad phi| from 1 on fresh uniform samples.

    Args:
        field: anything exposing .gradient(points, create_graph=...) -> (M, 3).
        count: number of sample points drawn from the unit cube.
        generator: torch RNG; samples are drawn fresh on every call.
    """
    lo, hi = bounds
    pts = lo + (hi - lo) * torch.rand(count, 3, generator=generator, dtype=dtype)
    pts = pts.to(device)
    grad = field.gradient(pts, create_graph=torch.is_grad_enabled())
    norms = torch.linalg.norm(grad, dim=-1)
    return ((norms - 1.0) ** 2).mean()


def _resolve(term: TermInput) -> torch.Tensor:
    if callable(term):
        term = term()
    if not torch.is_tensor(term):
        term = torch.as_tensor(float(term))
    return term


def total_loss(
    recon: TermInput,
    mask_term: TermInput,
    eikonal_term: TermInput,
    weights: LossWeights,
    shape_terms_enabled: bool = True,
) -> LossBreakdown:
    """Combine the three terms: total = l_r + lambda1 * l_m + lambda2 * l_e.

    mask_term and eikonal_term may be callables; when shape_terms_enabled is
    False they are reported as 0 and never invoked.
    """
    l_r = _resolve(recon)
    if shape_terms_enabled:
        l_m = _resolve(mask_term)
        l_e = _resolve(eikonal_term)
        total = l_r + weights.lambda1 * l_m + weights.lambda2 * l_e
    else:
        l_m = torch.zeros_like(l_r)
        l_e = torch.zeros_like(l_r)
        total = l_r
    return LossBreakdown(l_r=l_r, l_m=l_m, l_e=l_e, total=total)
