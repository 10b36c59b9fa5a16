"""Per-view feature codec: a residual hourglass encoder producing
resolution-preserving d-channel feature maps, and a UNet decoder mapping
aggregated features back to RGB.

Public tensors are channels-last (N, H, W, C); layouts are permuted
internally. Batch-norm running statistics are trained only during codec
pretraining and frozen for per-scene fitting (small view sets give unreliable
statistics); use `freeze_batchnorm`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class _ResBlock(nn.Module):
    """conv-bn-relu-conv-bn main path with a conv-relu skip; the first conv
    halves or doubles the resolution."""

    def __init__(self, cin: int, cout: int, mode: str):
        super().__init__()
        # Convs feeding a batch norm carry no bias: the normalization would
        # cancel it exactly, leaving a permanently gradient-free parameter.
        if mode == "down":
            self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
            self.skip = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        elif mode == "up":
            self.conv1 = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False)
            self.skip = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        else:
            self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
            self.skip = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(self.skip(x)) + h


class FeatureEncoder(nn.Module):
    """Hourglass of 4 residual blocks (two stride-2 down, two up) mapping
    (N, H, W, 3) images to (N, H, W, d) features. H and W must be divisible
    by 4."""

    def __init__(self, feature_dim: int = 16, widths: tuple[int, int, int] = (32, 64, 32)):
        super().__init__()
        self.feature_dim = feature_dim
        self.widths = tuple(widths)
        w1, w2, w3 = widths
        self.blocks = nn.ModuleList(
            [
                _ResBlock(3, w1, "down"),
                _ResBlock(w1, w2, "down"),
                _ResBlock(w2, w3, "up"),
                _ResBlock(w3, feature_dim, "up"),
            ]
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {tuple(images.shape)}")
        H, W = images.shape[1], images.shape[2]
        if H % 4 or W % 4:
            raise ValueError(f"encoder needs H, W divisible by 4, got {H}x{W}")
        # Normalize memory layout so results depend on values only, not on
        # which kernel the caller's stride pattern happens to dispatch.
        h = images.permute(0, 3, 1, 2).contiguous()
        for block in self.blocks:
            h = block(h)
        return h.permute(0, 2, 3, 1)


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class FeatureDecoder(nn.Module):
    """UNet from (N, H, W, d) aggregated features to (N, H, W, 3) RGB.

    Down blocks are conv-relu-conv-relu followed by 2x average pooling; up
    blocks bilinearly upsample and concatenate the skip activation. Output is
    clamped to [0, 1] in eval mode only so training gradients stay alive.
    H and W must be divisible by 2**len(widths).
    """

    def __init__(self, feature_dim: int = 16, widths: Sequence[int] = (64, 128, 256)):
        super().__init__()
        self.feature_dim = feature_dim
        self.widths = tuple(widths)
        downs = []
        cin = feature_dim
        for w in widths:
            downs.append(_double_conv(cin, w))
            cin = w
        self.downs = nn.ModuleList(downs)
        self.pool = nn.AvgPool2d(2)
        self.bottleneck = _double_conv(cin, cin)
        ups = []
        rev = list(widths)[::-1]
        for i, w in enumerate(rev):
            cin_up = (cin if i == 0 else rev[i - 1]) + w
            ups.append(_double_conv(cin_up, w))
        self.ups = nn.ModuleList(ups)
        self.out_conv = nn.Conv2d(widths[0], 3, 1)

    @property
    def divisor(self) -> int:
        return 2 ** len(self.widths)

    def forward(self, features: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        if features.ndim != 4 or features.shape[-1] != self.feature_dim:
            raise ValueError(f"features must be (N, H, W, {self.feature_dim}), got {tuple(features.shape)}")
        H, W = features.shape[1], features.shape[2]
        if H % self.divisor or W % self.divisor:
            raise ValueError(f"decoder needs H, W divisible by {self.divisor}, got {H}x{W}")
        # see FeatureEncoder.forward: fix the layout so equal values give
        # bit-equal outputs
        h = features.permute(0, 3, 1, 2).contiguous()
        skips = []
        for down in self.downs:
            h = down(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for up, skip in zip(self.ups, skips[::-1]):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = up(torch.cat([h, skip], dim=1))
        rgb = self.out_conv(h).permute(0, 2, 3, 1)
        if clamp is None:
            clamp = not self.training
        return rgb.clamp(0.0, 1.0) if clamp else rgb


def freeze_batchnorm(module: nn.Module) -> nn.Module:
    """Lock batch-norm running statistics (affine weights stay trainable).

    Flips every BN layer to eval mode and zeroes its momentum; per-scene
    fitting keeps codec modules in eval mode throughout, so the frozen
    running statistics are used for normalization while weight gradients
    still flow.
    """
    for m in module.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()
            m.momentum = 0.0
    return module


@dataclass(frozen=True)
class WarpConfig:
    """Random warp family for codec pretraining: a mild homography composed
    with a smooth sinusoidal displacement field."""

    max_sine_amplitude: float = 8.0  # pixels
    max_corner_shift: float = 0.05  # fraction of image size
    min_sine_waves: int = 1
    max_sine_waves: int = 3

    @property
    def max_displacement(self) -> float:
        """Upper bound in pixels for a (H+W)/2-sized image of size s:
        corner shift is bounded per-image at sample time."""
        return self.max_sine_amplitude


def sample_warp(
    height: int, width: int, generator: torch.Generator, cfg: WarpConfig | None = None
) -> torch.Tensor:
    """Sample a dense warp as absolute source-pixel coordinates.

    Returns:
        (H, W, 2) float tensor; entry (v, u) holds the continuous (x, y)
        source location that target pixel (u, v) pulls from. Identity would be
        (u + 0.5, v + 0.5).
    """
    cfg = cfg or WarpConfig()

    def runif(lo: float, hi: float, *shape) -> torch.Tensor:
        return lo + (hi - lo) * torch.rand(*shape, generator=generator, dtype=torch.float64)

    # Mild random homography from jittered unit-square corners.
    src = torch.tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    jitter = runif(-cfg.max_corner_shift, cfg.max_corner_shift, 4, 2)
    dst = src + jitter
    H_mat = _homography_from_points(src, dst)

    u = torch.arange(width, dtype=torch.float64) + 0.5
    v = torch.arange(height, dtype=torch.float64) + 0.5
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    norm = torch.stack([uu / width, vv / height, torch.ones_like(uu)], dim=-1)  # (H, W, 3)
    warped = norm @ H_mat.T
    warped = warped[..., :2] / warped[..., 2:3]
    coords = torch.stack([warped[..., 0] * width, warped[..., 1] * height], dim=-1)

    # Smooth sinusoidal displacement, bounded amplitude in pixels.
    n_waves = int(torch.randint(cfg.min_sine_waves, cfg.max_sine_waves + 1, (1,), generator=generator))
    total_amp = float(runif(0.3, 1.0, 1)) * cfg.max_sine_amplitude
    for axis in range(2):
        disp = torch.zeros(height, width, dtype=torch.float64)
        for _ in range(n_waves):
            fu = float(runif(0.5, 2.0, 1)) * 2 * math.pi / width
            fv = float(runif(0.5, 2.0, 1)) * 2 * math.pi / height
            phase = float(runif(0.0, 2 * math.pi, 1))
            disp = disp + torch.sin(fu * uu + fv * vv + phase)
        disp = disp / n_waves * (total_amp / 2.0)
        coords[..., axis] = coords[..., axis] + disp
    return coords.to(torch.float32)


def _homography_from_points(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Direct linear transform from 4 point correspondences."""
    A = []
    for (x, y), (xp, yp) in zip(src.tolist(), dst.tolist()):
        A.append([x, y, 1, 0, 0, 0, -xp * x, -xp * y, -xp])
        A.append([0, 0, 0, x, y, 1, -yp * x, -yp * y, -yp])
    A = torch.tensor(A, dtype=torch.float64)
    _, _, vh = torch.linalg.svd(A)
    h = vh[-1]
    return (h / h[-1]).reshape(3, 3)


def apply_warp(tensor: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly resample channels-last maps at warp coordinates.

    Args:
        tensor: (N, H, W, C) or (H, W, C).
        coords: (H, W, 2) absolute source coordinates from `sample_warp`.

    Out-of-bounds samples are zero (zero padding).
    """
    squeeze = tensor.ndim == 3
    if squeeze:
        tensor = tensor.unsqueeze(0)
    N, H, W, _ = tensor.shape
    grid = torch.stack([coords[..., 0] * 2.0 / W - 1.0, coords[..., 1] * 2.0 / H - 1.0], dim=-1)
    grid = grid.unsqueeze(0).expand(N, -1, -1, -1).to(tensor.dtype)
    out = F.grid_sample(
        tensor.permute(0, 3, 1, 2), grid, mode="bilinear", padding_mode="zeros", align_corners=False
    ).permute(0, 2, 3, 1)
    return out.squeeze(0) if squeeze else out


def warp_in_bounds(coords: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """(H, W) bool mask of warp targets whose 4 bilinear corners are inside."""
    u, v = coords[..., 0], coords[..., 1]
    return (u >= 0.5) & (u <= width - 0.5) & (v >= 0.5) & (v <= height - 0.5)


@dataclass(frozen=True)
class CodecPretrainConfig:
    iterations: int = 3000
    batch_size: int = 8
    lr: float = 5e-4
    resolution: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    min_corpus: int = 100
    warp: WarpConfig = WarpConfig()
    log_every: int = 200


def _load_corpus(corpus: str | Path | Sequence[np.ndarray], resolution: int) -> torch.Tensor:
    from PIL import Image

    if isinstance(corpus, (str, Path)):
        files = sorted(p for p in Path(corpus).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
        arrays = []
        for p in files:
            img = Image.open(p).convert("RGB")
            if img.size != (resolution, resolution):
                img = img.resize((resolution, resolution), Image.BILINEAR)
            arrays.append(np.asarray(img, dtype=np.float32) / 255.0)
    else:
        arrays = [np.asarray(a, dtype=np.float32) for a in corpus]
    if not arrays:
        raise ValueError("codec pretraining corpus is empty")
    return torch.as_tensor(np.stack(arrays))


def masked_l1(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the pixels where `valid` is True.

    Args:
        pred, target: (N, H, W, 3) image batches.
        valid: (H, W) bool or float mask applied to every batch element.

    Both pretraining losses share this reduction so that the warp loss under
    an identity warp is bit-identical to the identity loss.
    """
    weights = valid.to(pred.dtype)[None, :, :, None]
    n = (weights.sum() * pred.shape[0] * 3.0).clamp(min=1.0)
    return ((pred - target).abs() * weights).sum() / n


def pretrain_codec(
    encoder: FeatureEncoder,
    decoder: FeatureDecoder,
    corpus: str | Path | Sequence[np.ndarray],
    cfg: CodecPretrainConfig | None = None,
    verbose: bool = False,
) -> dict:
    """Joint identity + warp pretraining on an image corpus.

    Per batch: L = |D(E(I)) - I|_1 + |D(W(E(I))) - W(I)|_1 with W a random
    homography-plus-sine warp applied identically to features and pixels.
    Requires at least cfg.min_corpus images. Batch-norm statistics train here
    and are meant to be frozen afterwards for per-scene fitting.

    Returns:
        history dict with per-log losses and final held-out identity PSNR.
    """
    cfg = cfg or CodecPretrainConfig()
    images = _load_corpus(corpus, cfg.resolution)
    if images.shape[0] < cfg.min_corpus:
        raise ValueError(f"codec pretraining needs >= {cfg.min_corpus} images, got {images.shape[0]}")
    gen = torch.Generator().manual_seed(cfg.seed)
    n_val = max(1, int(images.shape[0] * cfg.val_fraction))
    perm = torch.randperm(images.shape[0], generator=gen)
    val = images[perm[:n_val]]
    train = images[perm[n_val:]]

    encoder.train()
    decoder.train()
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(1, cfg.iterations // 3), gamma=0.5)
    history = []
    H = W = cfg.resolution
    all_valid = torch.ones(H, W, dtype=torch.bool)
    for it in range(1, cfg.iterations + 1):
        idx = torch.randint(0, train.shape[0], (cfg.batch_size,), generator=gen)
        batch = train[idx]
        feats = encoder(batch)
        recon = decoder(feats, clamp=False)
        loss_id = masked_l1(recon, batch, all_valid)
        coords = sample_warp(H, W, gen, cfg.warp)
        warped_feats = apply_warp(feats, coords)
        warped_imgs = apply_warp(batch, coords)
        recon_w = decoder(warped_feats, clamp=False)
        # Zero-padded out-of-bounds pixels are not real warp targets; training
        # on them pulls the decoder toward inpainting black borders.
        loss_warp = masked_l1(recon_w, warped_imgs, warp_in_bounds(coords, W, H))
        loss = loss_id + loss_warp
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if it % cfg.log_every == 0 or it == cfg.iterations:
            lid, lw = float(loss_id.detach()), float(loss_warp.detach())
            history.append({"iteration": it, "loss_identity": lid, "loss_warp": lw})
            if verbose:
                print(f"pretrain_codec iter {it}: identity {lid:.4f} warp {lw:.4f}")

    encoder.eval()
    decoder.eval()
    with torch.no_grad():
        rec = decoder(encoder(val))
        mse = float(((rec - val) ** 2).mean())
    psnr = 99.0 if mse <= 0 else min(99.0, -10.0 * math.log10(mse))
    encoder.train()
    decoder.train()
    return {"history": history, "val_identity_psnr": psnr, "n_train": int(train.shape[0]), "n_val": n_val}
