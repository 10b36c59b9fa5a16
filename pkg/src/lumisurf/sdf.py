"""Neural signed distance field: sinusoidal MLP, sphere tracer, and the
differentiable surface-intersection machinery.

The tracer marches from both ends of the ray interval with a hard per-step
budget; rays that stall are reconciled by probing the bracketed interval and
refining the first sign change with secant/bisection steps. Gradients with
respect to network parameters flow through `differentiable_hit` (implicit
differentiation at the frozen hit point), never through the march itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .scene import RayBundle


class SpherePretrainError(RuntimeError):
    """Raised when SDF initialization cannot reach the required accuracy."""


class SirenDense(nn.Linear):
    """Linear layer followed by sin(omega * (Wx + b)) when not final."""


class SirenSdf(nn.Module):
    """Sinusoidal MLP R^3 -> R.

    Args:
        depth: number of linear layers (depth 5 means 3 -> w -> w -> w -> w -> 1).
        width: hidden width.
        omega0: frequency multiplier applied to every pre-activation.
    """

    def __init__(self, depth: int = 5, width: int = 128, omega0: float = 30.0):
        super().__init__()
        if depth < 2:
            raise ValueError("SirenSdf needs at least 2 layers")
        self.depth = depth
        self.width = width
        self.omega0 = omega0
        dims = [3] + [width] * (depth - 1) + [1]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(depth))
        self._init_weights()

    def _init_weights(self) -> None:
        with torch.no_grad():
            first = self.layers[0]
            first.weight.uniform_(-1.0 / 3.0, 1.0 / 3.0)
            for layer in self.layers[1:]:
                bound = math.sqrt(6.0 / layer.in_features) / self.omega0
                layer.weight.uniform_(-bound, bound)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        if points.shape[-1] != 3:
            raise ValueError(f"points must be (..., 3), got {tuple(points.shape)}")
        h = points
        for layer in self.layers[:-1]:
            h = torch.sin(self.omega0 * layer(h))
        return self.layers[-1](h).squeeze(-1)

    def gradient(self, points: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        return sdf_gradient(self, points, create_graph=create_graph)


def eval_sdf(sdf: Callable[[torch.Tensor], torch.Tensor], points: torch.Tensor) -> torch.Tensor:
    """Evaluate the field at (..., 3) points. Differentiable; rejects
    non-finite inputs rather than propagating NaNs into the tracer."""
    if not torch.isfinite(points).all():
        raise ValueError("eval_sdf received non-finite points")
    return sdf(points)


def sdf_gradient(
    sdf: Callable[[torch.Tensor], torch.Tensor],
    points: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Spatial gradient d(phi)/dp via autograd (never finite differences).

    With create_graph=True the result stays differentiable w.r.t. network
    parameters (needed by the eikonal term).
    """
    if not torch.isfinite(points).all():
        raise ValueError("sdf_gradient received non-finite points")
    pts = points if points.requires_grad else points.detach().requires_grad_(True)
    with torch.enable_grad():
        values = sdf(pts)
        (grad,) = torch.autograd.grad(
            values, pts, grad_outputs=torch.ones_like(values), create_graph=create_graph
        )
    return grad


@dataclass(frozen=True)
class SphereTraceConfig:
    """Tracer settings. Defaults follow the training recipe: 8 sphere-trace
    steps from each ray end and a 5e-5 convergence band."""

    max_steps: int = 8
    convergence_threshold: float = 5e-5
    refine_samples: int = 16
    refine_iterations: int = 8
    # Zoom rounds around the minimum-|phi| probe sample. Grazing rays can dip
    # below zero over an interval narrower than the probe spacing; re-probing
    # a shrinking window resolves them without touching the step budget.
    probe_zoom_rounds: int = 3


@dataclass
class SphereTraceResult:
    """Detached trace outputs for one ray bundle.

    positions/depths hold the last front-march state for non-converged rays so
    callers can inspect where the march stalled.
    """

    positions: torch.Tensor  # (H, W, 3)
    depths: torch.Tensor  # (H, W)
    converged: torch.Tensor  # (H, W) bool
    values: torch.Tensor  # (H, W) phi at the reported position


def _march(
    sdf: Callable,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t_start: torch.Tensor,
    sign: float,
    near: float,
    far: float,
    cfg: SphereTraceConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """One directional sphere-trace march (sign=+1 front, -1 back).

    Returns (t, phi, converged, bracket_lo, bracket_hi, has_bracket) where the
    bracket stores a sign change observed between consecutive march samples.
    """
    n = origins.shape[0]
    t = t_start.clone()
    phi = eval_sdf(sdf, origins + t.unsqueeze(-1) * dirs)
    converged = phi.abs() < cfg.convergence_threshold
    # A non-finite field value (diverged network) kills the ray: marching on
    # it would query the field at non-finite points.
    escaped = ~torch.isfinite(phi)
    bracket_lo = torch.zeros(n, dtype=t.dtype, device=t.device)
    bracket_hi = torch.zeros(n, dtype=t.dtype, device=t.device)
    has_bracket = torch.zeros(n, dtype=torch.bool, device=t.device)
    for _ in range(cfg.max_steps):
        active = ~(converged | escaped)
        if not bool(active.any()):
            break
        idx = active.nonzero(as_tuple=True)[0]
        t_new = t[idx] + sign * phi[idx]
        t_new = t_new.clamp(min=near, max=far)
        phi_new = eval_sdf(sdf, origins[idx] + t_new.unsqueeze(-1) * dirs[idx])
        flipped = (torch.sign(phi_new) * torch.sign(phi[idx]) < 0) & ~has_bracket[idx]
        if bool(flipped.any()):
            f_idx = idx[flipped]
            lo = torch.minimum(t[f_idx], t_new[flipped])
            hi = torch.maximum(t[f_idx], t_new[flipped])
            bracket_lo[f_idx] = lo
            bracket_hi[f_idx] = hi
            has_bracket[f_idx] = True
        t[idx] = t_new
        phi[idx] = phi_new
        converged = converged | (phi.abs() < cfg.convergence_threshold)
        at_edge = (t >= far) if sign > 0 else (t <= near)
        escaped = escaped | (at_edge & ~converged & (phi.abs() > 10 * cfg.convergence_threshold))
        escaped = escaped | ~torch.isfinite(phi)
    return t, phi, converged, bracket_lo, bracket_hi, has_bracket


def _refine_bracket(
    sdf: Callable,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t_lo: torch.Tensor,
    t_hi: torch.Tensor,
    cfg: SphereTraceConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Secant/bisection hybrid on intervals with a known sign change."""
    phi_lo = eval_sdf(sdf, origins + t_lo.unsqueeze(-1) * dirs)
    phi_hi = eval_sdf(sdf, origins + t_hi.unsqueeze(-1) * dirs)
    t_best = t_lo.clone()
    phi_best = phi_lo.clone()
    for _ in range(cfg.refine_iterations):
        denom = phi_hi - phi_lo
        t_sec = t_lo - phi_lo * (t_hi - t_lo) / torch.where(denom.abs() < 1e-30, torch.ones_like(denom), denom)
        t_mid = 0.5 * (t_lo + t_hi)
        # Fall back to bisection when the secant point leaves the bracket.
        inside = (t_sec > t_lo) & (t_sec < t_hi) & (denom.abs() >= 1e-30)
        t_new = torch.where(inside, t_sec, t_mid)
        phi_new = eval_sdf(sdf, origins + t_new.unsqueeze(-1) * dirs)
        better = phi_new.abs() < phi_best.abs()
        t_best = torch.where(better, t_new, t_best)
        phi_best = torch.where(better, phi_new, phi_best)
        same_side = torch.sign(phi_new) * torch.sign(phi_lo) >= 0
        t_lo = torch.where(same_side, t_new, t_lo)
        phi_lo = torch.where(same_side, phi_new, phi_lo)
        t_hi = torch.where(same_side, t_hi, t_new)
        phi_hi = torch.where(same_side, phi_hi, phi_new)
    return t_best, phi_best


def _probe_and_refine(
    sdf: Callable,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t_lo: torch.Tensor,
    t_hi: torch.Tensor,
    cfg: SphereTraceConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Dense scan of [t_lo, t_hi] with secant refinement of the first sign
    change; rays with no crossing at the current resolution re-probe a
    shrinking window around their smallest sample (grazing dips can be
    narrower than the scan spacing). Returns (t, phi, converged).
    """
    t_out = t_lo.clone()
    phi_out = eval_sdf(sdf, origins + t_lo.unsqueeze(-1) * dirs)
    converged = phi_out.abs() < cfg.convergence_threshold
    lo = t_lo.clone()
    hi = t_hi.clone()
    active = ~converged
    for round_idx in range(cfg.probe_zoom_rounds + 1):
        if not bool(active.any()):
            break
        idx = active.nonzero(as_tuple=True)[0]
        steps = torch.linspace(0.0, 1.0, cfg.refine_samples, dtype=t_lo.dtype, device=t_lo.device)
        ts = lo[idx].unsqueeze(1) + steps.unsqueeze(0) * (hi[idx] - lo[idx]).unsqueeze(1)  # (G, S)
        pts = origins[idx].unsqueeze(1) + ts.unsqueeze(-1) * dirs[idx].unsqueeze(1)
        vals = eval_sdf(sdf, pts.reshape(-1, 3)).reshape(ts.shape)
        sign_change = (torch.sign(vals[:, 1:]) * torch.sign(vals[:, :1])) < 0  # vs the entry sample
        found = sign_change.any(dim=1)
        if bool(found.any()):
            f = found.nonzero(as_tuple=True)[0]
            first = sign_change[f].float().argmax(dim=1) + 1
            sel = idx[f]
            t_r, phi_r = _refine_bracket(sdf, origins[sel], dirs[sel], ts[f, first - 1], ts[f, first], cfg)
            ok = phi_r.abs() < cfg.convergence_threshold
            t_out[sel] = torch.where(ok, t_r, t_out[sel])
            phi_out[sel] = torch.where(ok, phi_r, phi_out[sel])
            converged[sel] = converged[sel] | ok
            active[sel] = active[sel] & ~ok
        # Only actual crossings count as hits; a sample merely inside the
        # convergence band without a sign change is a near-tangent miss, which
        # keeps the traced silhouette consistent with the zero level set.
        rest = (~found).nonzero(as_tuple=True)[0]
        if len(rest) == 0 or round_idx == cfg.probe_zoom_rounds:
            continue
        # Zoom around the (signed) minimum sample for the next round.
        k = vals[rest].argmin(dim=1).clamp(min=1, max=cfg.refine_samples - 2)
        sel = idx[rest]
        lo[sel] = ts[rest, k - 1]
        hi[sel] = ts[rest, k + 1]
    return t_out, phi_out, converged


def sphere_trace(sdf: Callable, rays: RayBundle, cfg: SphereTraceConfig | None = None) -> SphereTraceResult:
    """Bidirectional sphere tracing over [near, far].

    Front and back marches each get cfg.max_steps evaluations; rays where
    neither march converged are reconciled by sampling the interval between
    the two march endpoints and secant-refining the first sign change.
    All outputs are detached.
    """
    cfg = cfg or SphereTraceConfig()
    H, W = rays.shape
    with torch.no_grad():
        o, d = rays.flat()
        n = o.shape[0]
        near, far = rays.near, rays.far
        t_f, phi_f, conv_f, blo_f, bhi_f, br_f = _march(
            sdf, o, d, torch.full((n,), near, dtype=o.dtype, device=o.device), +1.0, near, far, cfg
        )
        t = t_f.clone()
        phi = phi_f.clone()
        converged = conv_f.clone()

        # Front brackets: the march crossed the surface without landing on it.
        need = ~converged & br_f
        if bool(need.any()):
            idx = need.nonzero(as_tuple=True)[0]
            t_r, phi_r = _refine_bracket(sdf, o[idx], d[idx], blo_f[idx], bhi_f[idx], cfg)
            ok = phi_r.abs() < cfg.convergence_threshold
            t[idx] = torch.where(ok, t_r, t[idx])
            phi[idx] = torch.where(ok, phi_r, phi[idx])
            converged[idx] = converged[idx] | ok

        # Remaining rays: march back from the far end and reconcile.
        need = ~converged
        if bool(need.any()):
            idx = need.nonzero(as_tuple=True)[0]
            t_b, phi_b, conv_b, blo_b, bhi_b, br_b = _march(
                sdf,
                o[idx],
                d[idx],
                torch.full((idx.shape[0],), far, dtype=o.dtype, device=o.device),
                -1.0,
                near,
                far,
                cfg,
            )
            # Probe the stalled interval [t_front, t_back] for a sign change.
            # This runs even when the back march converged: its hit is the
            # BACK face, valid only if no earlier crossing hides in the gap.
            gap = t_b > t[idx]
            if bool(gap.any()):
                g = gap.nonzero(as_tuple=True)[0]
                gi = idx[g]
                t_r, phi_r, ok = _probe_and_refine(sdf, o[gi], d[gi], t[gi], t_b[g], cfg)
                t[gi] = torch.where(ok, t_r, t[gi])
                phi[gi] = torch.where(ok, phi_r, phi[gi])
                converged[gi] = converged[gi] | ok
            # Back-march brackets and convergences stand in when the front
            # march found nothing at all (thin-structure fallback).
            still = ~converged[idx]
            use_back = still & conv_b
            if bool(use_back.any()):
                sel = idx[use_back.nonzero(as_tuple=True)[0]]
                t[sel] = t_b[use_back]
                phi[sel] = phi_b[use_back]
                converged[sel] = True
            use_br = ~converged[idx] & br_b
            if bool(use_br.any()):
                g = use_br.nonzero(as_tuple=True)[0]
                sel = idx[g]
                t_r, phi_r = _refine_bracket(sdf, o[sel], d[sel], blo_b[g], bhi_b[g], cfg)
                ok = phi_r.abs() < cfg.convergence_threshold
                t[sel] = torch.where(ok, t_r, t[sel])
                phi[sel] = torch.where(ok, phi_r, phi[sel])
                converged[sel] = converged[sel] | ok

        positions = o + t.unsqueeze(-1) * d
        # Hits must lie on the ray's own scene-box segment: the shared
        # [near, far] hull lets corner rays march beyond their box exit, where
        # the field is unconstrained.
        enter, leave = rays.per_ray_interval()
        on_segment = (t >= enter.reshape(-1) - 1e-3) & (t <= leave.reshape(-1) + 1e-3)
        converged = converged & on_segment
    return SphereTraceResult(
        positions=positions.reshape(H, W, 3),
        depths=t.reshape(H, W),
        converged=converged.reshape(H, W),
        values=phi.reshape(H, W),
    )


def differentiable_hit(
    sdf: Callable,
    positions: torch.Tensor,
    directions: torch.Tensor,
    converged: torch.Tensor,
    grazing_threshold: float = 1e-6,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Attach parameter gradients to frozen trace positions.

    Implements implicit differentiation of the surface intersection: for a hit
    x0 on ray direction v, the returned point is

        x(theta) = x0 - ((phi_theta(x0) - stopgrad(phi_theta(x0)))
                         / <grad phi(x0)|detached, v>) * v

    whose forward value is exactly x0 and whose theta-gradient equals
    -v * d(phi)/d(theta) / <grad phi, v>, the derivative of the true
    intersection. Rays with |<grad phi, v>| < grazing_threshold are flagged
    invalid (grazing) and must be dropped from losses.

    Args:
        positions: (..., 3) detached trace positions.
        directions: (..., 3) unit ray directions.
        converged: (...) bool trace convergence mask.

    Returns:
        (points (..., 3) with gradient, valid (...) bool).
    """
    x0 = positions.detach()
    v = directions.detach()
    flat = x0.reshape(-1, 3)
    phi = eval_sdf(sdf, flat).reshape(x0.shape[:-1])
    with torch.no_grad():
        grad = sdf_gradient(sdf, flat, create_graph=False).reshape(x0.shape)
    denom = (grad * v).sum(dim=-1)
    valid = converged & (denom.abs() >= grazing_threshold)
    safe = torch.where(valid, denom, torch.ones_like(denom))
    offset = (phi - phi.detach()) / safe
    points = x0 - offset.unsqueeze(-1) * v
    return points, valid


def min_sdf_along_ray(
    sdf: Callable, rays: RayBundle, n_samples: int = 40, chunk: int = 262144
) -> tuple[torch.Tensor, torch.Tensor]:
    """Minimum field value along each ray from evenly spaced samples.

    Evaluates n_samples depths in [near, far] without gradients, then
    re-evaluates the argmin sample with gradients so the result is
    differentiable through the value at the (detached) argmin location.

    Returns:
        (phi_min (H, W) with gradient, t_min (H, W) detached depths).
    """
    H, W = rays.shape
    o, d = rays.flat()
    n = o.shape[0]
    ts = torch.linspace(rays.near, rays.far, n_samples, dtype=o.dtype, device=o.device)
    best_val = torch.full((n,), float("inf"), dtype=o.dtype, device=o.device)
    best_t = torch.full((n,), rays.near, dtype=o.dtype, device=o.device)
    with torch.no_grad():
        rows_per_chunk = max(1, chunk // n_samples)
        for s in range(0, n, rows_per_chunk):
            e = min(n, s + rows_per_chunk)
            pts = o[s:e].unsqueeze(1) + ts.view(1, -1, 1) * d[s:e].unsqueeze(1)  # (C, S, 3)
            vals = eval_sdf(sdf, pts.reshape(-1, 3)).reshape(e - s, n_samples)
            m, idx = vals.min(dim=1)
            best_val[s:e] = m
            best_t[s:e] = ts[idx]
    pts_min = o + best_t.unsqueeze(-1) * d
    phi_min = eval_sdf(sdf, pts_min)
    return phi_min.reshape(H, W), best_t.reshape(H, W)


def pretrain_sphere(
    sdf: SirenSdf,
    radius: float = 0.5,
    target_error: float = 1e-3,
    max_iterations: int = 50000,
    batch_size: int = 5000,
    eikonal_weight: float = 0.1,
    lr: float = 3e-4,
    seed: int = 0,
    check_every: int = 250,
    domain_half_extent: float = 1.0,
    verbose: bool = False,
) -> dict:
    """Fit the network to an analytic sphere SDF of the given radius.

    Regresses phi(p) to |p| - radius on uniform box samples with a small
    eikonal regularizer. The box is wider than the scene cube
    (domain_half_extent per axis) so the field stays sane on the parts of the
    trace interval that corner rays cover outside the cube. Stops when the
    held-out mean absolute error drops below target_error, or errors out if it
    cannot reach 1e-2 by the iteration cap (a larger network is needed at that
    point).

    Returns:
        history dict with iterations used and final held-out error.
    """
    if not 0.0 < radius <= 0.5:
        raise ValueError(f"sphere radius must lie in (0, 0.5] (half the cube side), got {radius}")
    gen = torch.Generator().manual_seed(seed)
    device = next(sdf.parameters()).device
    dtype = next(sdf.parameters()).dtype
    scale = 2.0 * domain_half_extent
    holdout = ((torch.rand(20000, 3, generator=gen, dtype=dtype) - 0.5) * scale).to(device)
    holdout_target = torch.linalg.norm(holdout, dim=-1) - radius
    opt = torch.optim.Adam(sdf.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=2000, gamma=0.7)
    err = float("inf")
    it = 0
    for it in range(1, max_iterations + 1):
        pts = ((torch.rand(batch_size, 3, generator=gen, dtype=dtype) - 0.5) * scale).to(device)
        target = torch.linalg.norm(pts, dim=-1) - radius
        pred = sdf(pts)
        loss = (pred - target).abs().mean()
        if eikonal_weight > 0:
            grad = sdf_gradient(sdf, pts, create_graph=True)
            loss = loss + eikonal_weight * ((torch.linalg.norm(grad, dim=-1) - 1.0) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if it % check_every == 0 or it == max_iterations:
            with torch.no_grad():
                err = float((sdf(holdout) - holdout_target).abs().mean())
            if verbose:
                print(f"pretrain_sphere iter {it}: holdout MAE {err:.2e}")
            if err < target_error:
                break
    if err >= 1e-2:
        raise SpherePretrainError(
            f"sphere initialization reached only {err:.2e} mean abs error after {it} iterations; "
            "increase the network width/depth or the iteration cap"
        )
    return {"iterations": it, "holdout_mae": err, "radius": radius}
