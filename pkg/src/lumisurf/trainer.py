"""Per-scene optimization: alternating shape/appearance iterations, cached
source-view surface geometry, scheduled hyperparameters, and deterministic
checkpointing."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .aggregation import (
    SourceSurfaceCache,
    aggregate_learned,
    occlusion_mask,
    render_visibility,
    resample_features,
)
from .losses import (
    LossWeights,
    NonFiniteLossError,
    eikonal_loss,
    mask_loss,
    reconstruction_loss,
    total_loss,
)
from .codec import freeze_batchnorm
from .scene import CameraModel, MultiViewScene, generate_rays
from .sdf import SphereTraceConfig, differentiable_hit, min_sdf_along_ray, sphere_trace
from .snapshots import Networks, config_hash, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Per-scene fitting schedule.

    Learning rates, the silhouette sharpness alpha, and the occlusion
    tolerance all follow stepwise schedules indexed by iteration; shape
    iterations are front-loaded (every iteration below shape_warmup) and then
    periodic (every shape_period-th iteration).
    """

    iterations: int = 50000
    lr_shape: float = 1e-4
    lr_shape_milestones: tuple[int, ...] = (500, 1000, 3000, 7000, 15000, 31000)
    lr_appearance: float = 5e-4
    lr_appearance_halflife: int = 2000
    alpha0: float = 50.0
    alpha_milestones: tuple[int, ...] = (2000, 4000, 6000)
    tau: float = 1e-3
    tau_occ_schedule: tuple[tuple[float, int | None], ...] = ((1e-3, 5000), (1e-4, 10000), (1e-5, None))
    lambda2: float = 3.0
    eikonal_count: int = 5000
    shape_warmup: int = 50
    shape_period: int = 7
    max_views_per_batch: int = 7
    max_targets: int = 4
    shape_subbatch: int = 4
    trace: SphereTraceConfig = field(default_factory=SphereTraceConfig)
    seed: int = 0
    checkpoint_schedule: tuple[tuple[int, int | None], ...] = ((5, 50), (25, 250), (250, None))
    log_every: int = 10
    eval_every: int = 0  # 0 disables held-out evaluation
    stop_at_psnr: float | None = None  # early stop once held-out PSNR crosses this

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "trace"}
        d["trace"] = self.trace.__dict__.copy()
        return d


def is_shape_iteration(i: int, warmup: int, period: int) -> bool:
    """Shape gradients run every iteration below warmup, then every period-th."""
    if i < warmup:
        return True
    return (i - warmup) % period == 0


def hyperparams_at(cfg: TrainConfig, i: int) -> tuple[float, float, float, float, float]:
    """Scheduled values at iteration i.

    Returns:
        (lr_shape, lr_appearance, alpha, tau_occ, lambda1).
    """
    eta1 = cfg.lr_shape * 0.5 ** sum(1 for m in cfg.lr_shape_milestones if i >= m)
    eta2 = cfg.lr_appearance * 0.5 ** (i // cfg.lr_appearance_halflife)
    alpha = cfg.alpha0 * 2.0 ** sum(1 for m in cfg.alpha_milestones if i >= m)
    tau_occ = cfg.tau_occ_schedule[-1][0]
    for value, limit in cfg.tau_occ_schedule:
        if limit is None or i < limit:
            tau_occ = value
            break
    return eta1, eta2, alpha, tau_occ, 100.0 / alpha


def should_checkpoint(completed: int, schedule: Sequence[tuple[int, int | None]]) -> bool:
    """True when the completed-iteration count lands on the cadence for its
    bracket ((period, limit) pairs; limit None = open-ended)."""
    if completed <= 0:
        return False
    for period, limit in schedule:
        if limit is None or completed <= limit:
            return completed % period == 0
    return False


def select_views(
    n_views: int, cfg: TrainConfig, generator: torch.Generator
) -> tuple[list[int], list[int], list[int]]:
    """Draw the per-iteration view batch.

    Returns:
        (batch, targets, shape_targets): batch is k = min(N, max_views) view
        indices; targets are l = clamp(k - 3, 1, max_targets) of them that
        receive reconstruction losses; shape_targets is the prefix of targets
        that receives shape gradients on shape iterations.
    """
    k = min(n_views, cfg.max_views_per_batch)
    perm = torch.randperm(n_views, generator=generator).tolist()
    batch = perm[:k]
    n_targets = max(1, min(k - 3, cfg.max_targets))
    targets = batch[:n_targets]
    return batch, targets, targets[: cfg.shape_subbatch]


def render_view(
    networks: Networks,
    camera: CameraModel,
    scene_cameras: Sequence[CameraModel],
    features: torch.Tensor,
    cache: SourceSurfaceCache,
    tau_occ: float,
    trace_cfg: SphereTraceConfig,
    bounds: Sequence[Sequence[float]] | None = None,
    clamp: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Render an arbitrary camera from per-view feature maps.

    Traces the camera's rays against the current field, re-samples every
    source view's features at the hits, blends them with the learned scorer,
    and decodes to RGB. No gradients.

    Returns:
        (image (H, W, 3), hit_mask (H, W) bool, depth (H, W), miss = -1).
    """
    with torch.no_grad():
        rays = generate_rays(camera, bounds=bounds)
        traced = sphere_trace(networks.sdf, rays, trace_cfg)
        pts = traced.positions
        sampled, inb = resample_features(features, scene_cameras, pts)
        usable = inb & traced.converged.unsqueeze(0)
        visible = occlusion_mask(pts, cache, scene_cameras, tau_occ) & usable
        visible = render_visibility(visible, usable)
        agg = aggregate_learned(sampled, visible, rays.directions, networks.aggregator)
        feat = agg.features * (traced.converged & agg.any_visible).unsqueeze(-1)
        # Misses render as black, not as decode(0): a decoder with biases maps
        # zero features to an arbitrary color.
        image = networks.decode_features(feat, clamp=clamp) * traced.converged.unsqueeze(-1)
        depth = torch.where(traced.converged, traced.depths, torch.full_like(traced.depths, -1.0))
    return image, traced.converged, depth


@dataclass
class FitResult:
    history: list[dict]
    final_psnr: float | None
    stopped_at: int
    cache: SourceSurfaceCache
    cfg_hash: str


def fit(
    networks: Networks,
    scene: MultiViewScene,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    eval_views: tuple[Sequence[CameraModel], torch.Tensor, torch.Tensor] | None = None,
    psnr_fn: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], float] | None = None,
    checkpoint_networks: bool = True,
) -> FitResult:
    """Fit the network bundle to one scene.

    Args:
        eval_views: optional (cameras, images (M, H, W, 3), masks (M, H, W))
            held out from training, evaluated every cfg.eval_every iterations.
        psnr_fn: masked PSNR implementation used for evaluation (kept
            injectable so callers control the metric definition).

    Returns:
        FitResult with the loss/evaluation history and the final source cache
        (refreshed against the final parameters).
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "checkpoints").mkdir(exist_ok=True)
    cfg_hash = config_hash({**cfg.to_dict(), "networks": networks.config.__dict__})

    images = scene.images
    masks = scene.masks
    cameras = scene.cameras
    n_views, H, W = images.shape[0], images.shape[1], images.shape[2]
    div = networks.decoder_divisor
    if H % div or W % div:
        raise ValueError(f"image size {H}x{W} not divisible by decoder requirement {div}")

    # Frozen normalization statistics; weights still receive gradients.
    for mod in (networks.encoder, networks.decoder):
        if mod is not None:
            freeze_batchnorm(mod)
            mod.eval()

    generator = torch.Generator().manual_seed(cfg.seed)
    opt_shape = torch.optim.Adam(networks.shape_parameters(), lr=cfg.lr_shape)
    opt_app = torch.optim.Adam(networks.appearance_parameters(), lr=cfg.lr_appearance)

    rays = [generate_rays(cam, bounds=scene.bounds) for cam in cameras]
    cache = SourceSurfaceCache.allocate(n_views, H, W)
    cache.refresh(networks.sdf, rays, range(n_views), cfg.trace, stamp=0)

    history: list[dict] = []
    log_file = (out_path / "losses.jsonl").open("w") if out_path is not None else None
    started = time.monotonic()
    last_psnr: float | None = None
    stopped_at = cfg.iterations

    try:
        for i in range(cfg.iterations):
            eta1, eta2, alpha, tau_occ, lambda1 = hyperparams_at(cfg, i)
            for group in opt_shape.param_groups:
                group["lr"] = eta1
            for group in opt_app.param_groups:
                group["lr"] = eta2
            weights = LossWeights(
                alpha=alpha, lambda2=cfg.lambda2, tau=cfg.tau, eikonal_count=cfg.eikonal_count
            )
            shape_iter = is_shape_iteration(i, cfg.shape_warmup, cfg.shape_period)
            if shape_iter and i > 0:
                cache.refresh(networks.sdf, rays, range(n_views), cfg.trace, stamp=i)

            batch, targets, shape_targets = select_views(n_views, cfg, generator)
            feats = networks.encode_images(images[batch])  # (k, H, W, d)
            batch_cams = [cameras[b] for b in batch]

            l_r_sum = images.new_zeros(())
            l_m_sum = images.new_zeros(())
            n_recon = 0
            for t in targets:
                t_pos = batch.index(t)
                src_pos = [p for p in range(len(batch)) if p != t_pos]
                src_cams = [batch_cams[p] for p in src_pos]
                src_feats = feats[src_pos]
                shape_grad = shape_iter and t in shape_targets

                if shape_grad:
                    traced = sphere_trace(networks.sdf, rays[t], cfg.trace)
                    pts, valid = differentiable_hit(
                        networks.sdf, traced.positions, rays[t].directions, traced.converged
                    )
                else:
                    pts, valid = cache.points[t], cache.valid[t]

                sampled, inb = resample_features(src_feats, src_cams, pts)
                visible = occlusion_mask(pts, cache, cameras, tau_occ, view_indices=[batch[p] for p in src_pos])
                visible = visible & inb & valid.unsqueeze(0)
                agg = aggregate_learned(sampled, visible, rays[t].directions, networks.aggregator)
                feat_img = agg.features * (valid & agg.any_visible).unsqueeze(-1)
                rendered = networks.decode_features(feat_img, clamp=False)

                recon_mask = masks[t] & valid & agg.any_visible
                if bool(recon_mask.any()):
                    l_r_sum = l_r_sum + reconstruction_loss(rendered, images[t], recon_mask)
                    n_recon += 1

                if shape_grad:
                    phi_min, _ = min_sdf_along_ray(networks.sdf, rays[t])
                    l_m_sum = l_m_sum + mask_loss(phi_min, masks[t], alpha, cfg.tau)

            if shape_iter:
                l_e = eikonal_loss(networks.sdf, cfg.eikonal_count, generator)
            else:
                l_e = images.new_zeros(())

            breakdown = total_loss(l_r_sum, l_m_sum, l_e, weights=weights, shape_terms_enabled=shape_iter)
            loss = breakdown.total
            if not torch.isfinite(loss):
                if out_path is not None:
                    save_checkpoint(
                        out_path / "diverged.pt", networks, i, time.monotonic() - started, cfg_hash
                    )
                raise NonFiniteLossError(f"non-finite loss at iteration {i}: {breakdown.floats()}")

            opt_shape.zero_grad(set_to_none=True)
            opt_app.zero_grad(set_to_none=True)
            if loss.grad_fn is not None:  # no renderable pixels yet and no shape terms
                loss.backward()
                if shape_iter:
                    opt_shape.step()
                opt_app.step()

            completed = i + 1
            record = None
            if cfg.log_every and (i % cfg.log_every == 0 or completed == cfg.iterations):
                record = {
                    "iteration": i,
                    "l_r": float(breakdown.l_r.detach()),
                    "l_m": float(breakdown.l_m.detach()),
                    "l_e": float(breakdown.l_e.detach()),
                    "total": float(loss.detach()),
                    "alpha": alpha,
                    "lr_shape": eta1,
                    "lr_appearance": eta2,
                    "tau_occ": tau_occ,
                    "shape_iteration": shape_iter,
                    "recon_targets": n_recon,
                    "wall_seconds": time.monotonic() - started,
                }
            if cfg.eval_every and eval_views is not None and (completed % cfg.eval_every == 0):
                last_psnr = _evaluate(networks, scene, cache, eval_views, tau_occ, cfg, psnr_fn)
                if record is None:
                    record = {"iteration": i, "wall_seconds": time.monotonic() - started}
                record["eval_psnr"] = last_psnr
            if record is not None:
                history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
            if out_path is not None and checkpoint_networks and should_checkpoint(completed, cfg.checkpoint_schedule):
                save_checkpoint(
                    out_path / "checkpoints" / f"iter_{completed:06d}.pt",
                    networks, completed, time.monotonic() - started, cfg_hash,
                )
            if (
                cfg.stop_at_psnr is not None
                and last_psnr is not None
                and last_psnr >= cfg.stop_at_psnr
            ):
                stopped_at = completed
                break
        else:
            stopped_at = cfg.iterations
    finally:
        if log_file is not None:
            log_file.close()

    # Final refresh so exported/cached geometry matches the final parameters.
    cache.refresh(networks.sdf, rays, range(n_views), cfg.trace, stamp=stopped_at)
    if cfg.eval_every and eval_views is not None:
        _, _, _, tau_occ, _ = hyperparams_at(cfg, stopped_at)
        last_psnr = _evaluate(networks, scene, cache, eval_views, tau_occ, cfg, psnr_fn)
    if out_path is not None and checkpoint_networks:
        save_checkpoint(
            out_path / "checkpoints" / "final.pt",
            networks, stopped_at, time.monotonic() - started, cfg_hash,
        )
    return FitResult(history=history, final_psnr=last_psnr, stopped_at=stopped_at, cache=cache, cfg_hash=cfg_hash)


def _evaluate(
    networks: Networks,
    scene: MultiViewScene,
    cache: SourceSurfaceCache,
    eval_views: tuple[Sequence[CameraModel], torch.Tensor, torch.Tensor],
    tau_occ: float,
    cfg: TrainConfig,
    psnr_fn: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], float] | None,
) -> float:
    """Mean masked PSNR over the held-out views."""
    if psnr_fn is None:
        from .evaluation import masked_psnr

        psnr_fn = masked_psnr
    cams, imgs, msks = eval_views
    with torch.no_grad():
        feats = networks.encode_images(scene.images)
        vals = []
        for cam, img, msk in zip(cams, imgs, msks):
            rendered, _, _ = render_view(
                networks, cam, scene.cameras, feats, cache, tau_occ, cfg.trace, bounds=scene.bounds
            )
            vals.append(psnr_fn(rendered, img, msk))
    return float(sum(vals) / len(vals))
