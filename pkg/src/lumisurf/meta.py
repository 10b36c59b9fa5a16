"""Meta-learned initialization: repeatedly adapt the network bundle to a
sampled task scene and move the stored initialization toward the adapted
parameters (interpolated first-order meta update)."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

from .losses import NonFiniteLossError
from .scene import MultiViewScene
from .snapshots import Networks, ParameterSnapshot, config_hash, save_checkpoint
from .trainer import TrainConfig, fit


class MetaDivergenceError(RuntimeError):
    """Raised when too many consecutive inner adaptations diverge."""


@dataclass(frozen=True)
class MetaConfig:
    """Outer-loop settings.

    beta is the interpolation step toward adapted parameters; when beta_final
    is set it decays linearly over the outer iterations. Divergent inner runs
    (non-finite parameters or a parameter jump above divergence_l2) are
    skipped; more than max_consecutive_skips in a row aborts the run.
    """

    outer_iterations: int = 200
    inner_iterations: int = 64
    beta: float = 0.1
    beta_final: float | None = None
    seed: int = 0
    divergence_l2: float = 1e4
    max_consecutive_skips: int = 8
    checkpoint_every: int = 25

    def __post_init__(self) -> None:
        if self.inner_iterations < 1:
            raise ValueError(f"inner_iterations must be >= 1, got {self.inner_iterations}")
        for name, value in (("beta", self.beta), ("beta_final", self.beta_final)):
            if value is not None and not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.outer_iterations < 0:
            raise ValueError(f"outer_iterations must be >= 0, got {self.outer_iterations}")

    def beta_at(self, outer_index: int) -> float:
        if self.beta_final is None or self.outer_iterations <= 1:
            return self.beta
        frac = outer_index / (self.outer_iterations - 1)
        return self.beta + (self.beta_final - self.beta) * frac

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def reptile_update(
    init: ParameterSnapshot, adapted: ParameterSnapshot, beta: float
) -> ParameterSnapshot:
    """init + beta * (adapted - init)."""
    return init.lerp(adapted, beta)


def reptile_train(
    networks: Networks,
    task_sampler: Callable[[int], MultiViewScene],
    inner_cfg: TrainConfig,
    meta_cfg: MetaConfig,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Run the outer meta-training loop in place on `networks`.

    Args:
        task_sampler: maps an outer iteration index to a task scene
            (deterministic given the index, so runs are reproducible).
        inner_cfg: per-task adaptation schedule; its iteration count is
            overridden by meta_cfg.inner_iterations and its seed is derived
            from meta_cfg.seed and the outer index.

    Returns:
        Per-outer-iteration log records.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(
        {**meta_cfg.to_dict(), "inner": inner_cfg.to_dict(), "networks": networks.config.__dict__}
    )
    log_file = (out_path / "meta.jsonl").open("w") if out_path is not None else None
    records: list[dict] = []
    started = time.monotonic()
    consecutive_skips = 0

    try:
        for o in range(meta_cfg.outer_iterations):
            init = ParameterSnapshot.capture(networks)
            scene = task_sampler(o)
            task_cfg = TrainConfig(
                **{
                    **inner_cfg.to_dict(),
                    "iterations": meta_cfg.inner_iterations,
                    # Shape optimizes on every inner step: warmup spans the
                    # whole inner loop.
                    "shape_warmup": meta_cfg.inner_iterations,
                    "seed": meta_cfg.seed * 1000003 + o,
                    "trace": inner_cfg.trace,
                    "eval_every": 0,
                    "stop_at_psnr": None,
                    # Keep only the first/last in-memory loss records per task.
                    "log_every": max(1, meta_cfg.inner_iterations),
                }
            )
            skipped = False
            final_total = None
            try:
                result = fit(networks, scene, task_cfg, out_dir=None, checkpoint_networks=False)
                if result.history:
                    final_total = result.history[-1].get("total")
            except NonFiniteLossError:
                skipped = True
            adapted = ParameterSnapshot.capture(networks)
            jump = init.l2_distance(adapted)
            if not skipped and (not adapted.finite() or jump > meta_cfg.divergence_l2):
                skipped = True
            beta = meta_cfg.beta_at(o)
            if skipped:
                init.apply_to(networks)
                consecutive_skips += 1
                if consecutive_skips > meta_cfg.max_consecutive_skips:
                    raise MetaDivergenceError(
                        f"{consecutive_skips} consecutive divergent tasks at outer iteration {o}"
                    )
            else:
                consecutive_skips = 0
                reptile_update(init, adapted, beta).apply_to(networks)

            record = {
                "outer": o,
                "beta": beta,
                "skipped": skipped,
                "parameter_jump": jump,
                "inner_final_total": final_total,
                "wall_seconds": time.monotonic() - started,
            }
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            completed = o + 1
            if out_path is not None and (
                completed % meta_cfg.checkpoint_every == 0 or completed == meta_cfg.outer_iterations
            ):
                save_checkpoint(
                    out_path / f"meta_{completed:05d}.pt",
                    networks, completed, time.monotonic() - started, cfg_hash,
                )
    finally:
        if log_file is not None:
            log_file.close()
    return records
