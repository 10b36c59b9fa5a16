"""Network bundle shared by training, meta-learning, and export, plus flat
parameter snapshots (for interpolated initialization updates) and checkpoint
serialization."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import torch
import torch.nn as nn

from .aggregation import RGB_FEATURE_DIM, AggregationMlp
from .codec import FeatureDecoder, FeatureEncoder
from .sdf import SirenSdf


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs for the full model bundle.

    rgb_features=True bypasses the codec entirely: source images are used as
    3-channel feature maps and the decoder is skipped at render time.
    """

    sdf_depth: int = 5
    sdf_width: int = 128
    omega0: float = 30.0
    feature_dim: int = 16
    encoder_widths: tuple[int, ...] = (32, 64, 32)
    decoder_widths: tuple[int, ...] = (64, 128, 256)
    aggregator_hidden: int = 32
    aggregator_layers: int = 5
    rgb_features: bool = False

    @property
    def effective_feature_dim(self) -> int:
        return RGB_FEATURE_DIM if self.rgb_features else self.feature_dim

    def compact(self) -> "NetworkConfig":
        """Smaller variant for low-resolution experiments."""
        return NetworkConfig(
            sdf_depth=self.sdf_depth,
            sdf_width=64,
            omega0=self.omega0,
            feature_dim=8,
            encoder_widths=(16, 32, 16),
            decoder_widths=(32, 64),
            aggregator_hidden=self.aggregator_hidden,
            aggregator_layers=self.aggregator_layers,
            rgb_features=self.rgb_features,
        )


class Networks(nn.Module):
    """Container for the SDF, the feature codec, and the aggregation scorer.

    Shape parameters (the SDF) and appearance parameters (codec + aggregator)
    are exposed separately because they train under different optimizers and
    schedules.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.sdf = SirenSdf(depth=config.sdf_depth, width=config.sdf_width, omega0=config.omega0)
        if config.rgb_features:
            self.encoder = None
            self.decoder = None
        else:
            self.encoder = FeatureEncoder(feature_dim=config.feature_dim, widths=config.encoder_widths)
            self.decoder = FeatureDecoder(feature_dim=config.feature_dim, widths=config.decoder_widths)
        self.aggregator = AggregationMlp(
            feature_dim=config.effective_feature_dim,
            hidden=config.aggregator_hidden,
            layers=config.aggregator_layers,
        )

    @property
    def feature_dim(self) -> int:
        return self.config.effective_feature_dim

    @property
    def decoder_divisor(self) -> int:
        """Resolution divisor imposed on rendered images (1 in RGB mode)."""
        if self.decoder is None:
            return 1
        return max(self.decoder.divisor, 4)  # encoder needs H, W divisible by 4

    def shape_parameters(self) -> Iterator[nn.Parameter]:
        return self.sdf.parameters()

    def appearance_parameters(self) -> Iterator[nn.Parameter]:
        mods: list[nn.Module] = [self.aggregator]
        if self.encoder is not None:
            mods.insert(0, self.encoder)
        if self.decoder is not None:
            mods.insert(1, self.decoder)
        for m in mods:
            yield from m.parameters()

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """(N, H, W, 3) images -> (N, H, W, d) feature maps (identity in RGB
        mode)."""
        if self.encoder is None:
            return images
        return self.encoder(images)

    def decode_features(self, features: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        """(..., H, W, d) blended features -> (..., H, W, 3) colors."""
        if self.decoder is None:
            return features if clamp is None or not clamp else features.clamp(0.0, 1.0)
        single = features.dim() == 3
        batch = features.unsqueeze(0) if single else features
        out = self.decoder(batch, clamp=clamp)
        return out.squeeze(0) if single else out


@dataclass
class ParameterSnapshot:
    """Detached CPU copy of every parameter, keyed by qualified name."""

    tensors: dict[str, torch.Tensor]

    @classmethod
    def capture(cls, module: nn.Module) -> "ParameterSnapshot":
        return cls({k: v.detach().cpu().clone() for k, v in module.state_dict().items()})

    def apply_to(self, module: nn.Module) -> None:
        module.load_state_dict({k: v.clone() for k, v in self.tensors.items()})

    def lerp(self, other: "ParameterSnapshot", weight: float) -> "ParameterSnapshot":
        """self + weight * (other - self), the interpolated-initialization
        update rule.

        The endpoints copy a side verbatim: weight 1 means "adopt the other
        parameters" and must reproduce them bit for bit (a + 1.0 * (b - a)
        does not round-trip in floating point), weight 0 means "do not move".
        """
        if self.tensors.keys() != other.tensors.keys():
            raise ValueError("snapshots cover different parameter sets")
        if weight == 0.0:
            return ParameterSnapshot({k: v.clone() for k, v in self.tensors.items()})
        if weight == 1.0:
            return ParameterSnapshot({k: v.clone() for k, v in other.tensors.items()})
        out = {}
        for k, a in self.tensors.items():
            b = other.tensors[k]
            if a.dtype.is_floating_point:
                out[k] = a + weight * (b - a)
            else:
                out[k] = b.clone()  # counters (e.g. BN batch counts) follow the new state
        return ParameterSnapshot(out)

    def l2_distance(self, other: "ParameterSnapshot") -> float:
        acc = 0.0
        for k, a in self.tensors.items():
            if a.dtype.is_floating_point:
                acc += float(((other.tensors[k] - a) ** 2).sum())
        return acc ** 0.5

    def finite(self) -> bool:
        return all(torch.isfinite(v).all() for v in self.tensors.values() if v.dtype.is_floating_point)


def state_digest(module: nn.Module) -> str:
    """SHA-256 over the raw little-endian bytes of the state dict in sorted
    key order. Stable across serialization details, so two runs produce the
    same digest exactly when their parameters match bit for bit."""
    h = hashlib.sha256()
    state = module.state_dict()
    for k in sorted(state.keys()):
        h.update(k.encode())
        t = state[k].detach().cpu().contiguous()
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def config_hash(config_dict: dict) -> str:
    """Canonical-JSON SHA-256 of a configuration mapping."""
    return hashlib.sha256(json.dumps(config_dict, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(
    path,
    networks: Networks,
    iteration: int,
    wall_seconds: float,
    cfg_hash: str,
    extra: dict | None = None,
) -> None:
    payload = {
        "state": networks.state_dict(),
        "network_config": networks.config.__dict__,
        "iteration": iteration,
        "wall_seconds": wall_seconds,
        "config_hash": cfg_hash,
        "digest": state_digest(networks),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, networks: Networks | None = None) -> dict:
    """Load a checkpoint; if networks is given, restore its parameters and
    verify the stored digest."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if networks is not None:
        networks.load_state_dict(payload["state"])
        if state_digest(networks) != payload["digest"]:
            raise RuntimeError(f"checkpoint digest mismatch for {path}")
    return payload


def build_networks(config: NetworkConfig | None = None, seed: int | None = None) -> Networks:
    """Construct a network bundle, optionally under a fixed seed so repeated
    builds start identical."""
    if seed is not None:
        torch.manual_seed(seed)
    return Networks(config or NetworkConfig())
