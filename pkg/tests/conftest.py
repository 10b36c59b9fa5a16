"""Shared fixtures.

Expensive artifacts (pretrained fields, the codec, the end-to-end fits, the
meta-learning run) are built once and cached on disk under
tests/.fixture_cache, keyed by a hash of their full build configuration plus
CACHE_VERSION. Delete the directory (or bump CACHE_VERSION) to force a cold
rebuild; every builder is deterministic given its seeds, so a cold run
reproduces the same artifacts.

The cache can be pre-warmed outside pytest with scripts/warm_fixtures.py.
"""
from __future__ import annotations

import functools
import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from lumisurf.codec import CodecPretrainConfig, FeatureDecoder, FeatureEncoder, pretrain_codec
from lumisurf.meta import MetaConfig, reptile_train
from lumisurf.scene import MultiViewScene
from lumisurf.sdf import SirenSdf, pretrain_sphere
from lumisurf.snapshots import NetworkConfig, Networks, build_networks, config_hash
from lumisurf.synthetic import (
    SphereSceneParams,
    make_sphere_scene,
    make_texture_corpus,
    random_sphere_task,
)
from lumisurf.trainer import TrainConfig, fit

CACHE_VERSION = 1
CACHE_DIR = Path(
    os.environ.get("LUMISURF_FIXTURE_CACHE", str(Path(__file__).resolve().parent / ".fixture_cache"))
)


def _log(msg: str) -> None:
    print(f"[fixtures] {msg}", file=sys.stderr, flush=True)


def cached(name: str, spec: dict, builder):
    """Disk-memoize builder() under a spec-hash key."""
    key = config_hash({"cache_version": CACHE_VERSION, **spec})[:16]
    path = CACHE_DIR / f"{name}_{key}.pt"
    if path.exists():
        return torch.load(path, map_location="cpu", weights_only=False)
    _log(f"building {name} (cold cache, key {key})")
    payload = builder()
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    torch.save(payload, tmp)
    tmp.replace(path)
    _log(f"built {name} -> {path.name}")
    return payload


# ---------------------------------------------------------------------------
# Scenes (cheap, rebuilt in memory per session)

TOY_SCENE_PARAMS = SphereSceneParams(n_views=10, resolution=64, radius=0.4, seed=3, azimuth_span=1.3)
TOY_TRAIN_VIEWS = list(range(8))
TOY_HOLDOUT_VIEWS = [8, 9]
TWO_SPHERE_PARAMS = SphereSceneParams(n_views=6, resolution=64, radius=0.4, seed=5, two_spheres=True)


def subset_scene(scene: MultiViewScene, indices: list[int]) -> MultiViewScene:
    return MultiViewScene(
        images=scene.images[indices],
        masks=scene.masks[indices],
        cameras=[scene.cameras[i] for i in indices],
        bounds=scene.bounds,
        normalization=scene.normalization,
        name=scene.name,
    )


def get_toy_scene() -> MultiViewScene:
    return make_sphere_scene(TOY_SCENE_PARAMS)


def silhouette_mixed(mask: torch.Tensor) -> torch.Tensor:
    """(N, H, W) bool: pixels whose 3x3 neighborhood mixes True and False."""
    import torch.nn.functional as F

    v = mask.float().unsqueeze(1)
    return (-F.max_pool2d(-v, 3, 1, 1) != F.max_pool2d(v, 3, 1, 1)).squeeze(1)


def source_boundary_pixels(cache, cameras, target_points: torch.Tensor, depth_gap: float = 0.08) -> torch.Tensor:
    """Target pixels whose projection lands next to a source discontinuity.

    Occlusion decisions are undefined within a pixel of a source silhouette
    or depth step, so oracle comparisons exclude these boundary pixels.
    """
    import torch.nn.functional as F

    from lumisurf.aggregation import project_to_views

    d = cache.depths.unsqueeze(1).float()
    depth_range = (F.max_pool2d(d, 3, 1, 1) + F.max_pool2d(-d, 3, 1, 1)).squeeze(1)
    boundary = silhouette_mixed(cache.valid) | (depth_range > depth_gap)
    uv, _, _ = project_to_views(cameras, target_points)
    H, W = cache.valid.shape[1:]
    out = []
    for i in range(len(cameras)):
        ui = (uv[i, ..., 0] - 0.5).round().long().clamp(0, W - 1)
        vi = (uv[i, ..., 1] - 0.5).round().long().clamp(0, H - 1)
        out.append(boundary[i][vi, ui])
    return torch.stack(out)


def brute_force_visibility(
    field,
    cameras,
    target_points: torch.Tensor,
    samples: int = 512,
    chunk: int = 2048,
) -> torch.Tensor:
    """Dense ray-march visibility oracle, independent of the occlusion code.

    A target point is visible from a source camera when the segment from the
    camera center to just short of the point never dips into the field's
    interior, and its projection lands in bounds in front of the camera.

    Returns:
        (N, ...) bool with the leading pixel shape of target_points.
    """
    from lumisurf.scene import project_point

    lead = target_points.shape[:-1]
    pts = target_points.reshape(-1, 3).to(torch.float64)
    ts = torch.linspace(0.0, 1.0, samples, dtype=torch.float64)[None, :, None]
    out = []
    for cam in cameras:
        c = torch.as_tensor(cam.center, dtype=torch.float64)
        visible = torch.zeros(pts.shape[0], dtype=torch.bool)
        for lo in range(0, pts.shape[0], chunk):
            sel = pts[lo : lo + chunk]
            rel = sel - c
            span = (rel.norm(dim=-1, keepdim=True) - 1e-3).clamp(min=0.0)
            d = rel / rel.norm(dim=-1, keepdim=True)
            marched = c + d[:, None, :] * (ts * span[:, None, :])  # (P, S, 3)
            phi_min = field(marched).min(dim=1).values
            visible[lo : lo + chunk] = phi_min > -1e-4
        u, v, depth = project_point(cam, pts.numpy())
        inb = (
            (u >= 0.5)
            & (u <= cam.width - 0.5)
            & (v >= 0.5)
            & (v <= cam.height - 0.5)
            & (depth > 0)
        )
        out.append(visible & torch.as_tensor(inb))
    return torch.stack(out).reshape(len(cameras), *lead)


# ---------------------------------------------------------------------------
# Pretrained sphere fields

SPHERE_SIREN_SPEC = {
    "kind": "siren_sphere",
    "width": 128,
    "depth": 5,
    "radius": 0.5,
    "target_error": 1e-3,
    "max_iterations": 60000,
    "batch_size": 5000,
    "domain_half_extent": 1.0,
    "seed": 0,
}


def build_sphere_siren() -> dict:
    torch.manual_seed(SPHERE_SIREN_SPEC["seed"])
    sdf = SirenSdf(depth=SPHERE_SIREN_SPEC["depth"], width=SPHERE_SIREN_SPEC["width"])
    info = pretrain_sphere(
        sdf,
        radius=SPHERE_SIREN_SPEC["radius"],
        target_error=SPHERE_SIREN_SPEC["target_error"],
        max_iterations=SPHERE_SIREN_SPEC["max_iterations"],
        batch_size=SPHERE_SIREN_SPEC["batch_size"],
        domain_half_extent=SPHERE_SIREN_SPEC["domain_half_extent"],
        seed=SPHERE_SIREN_SPEC["seed"],
    )
    return {"state": sdf.state_dict(), "info": info, "spec": SPHERE_SIREN_SPEC}


def get_sphere_siren_payload() -> dict:
    return cached("sphere_siren", SPHERE_SIREN_SPEC, build_sphere_siren)


def load_sphere_siren() -> SirenSdf:
    payload = get_sphere_siren_payload()
    sdf = SirenSdf(depth=SPHERE_SIREN_SPEC["depth"], width=SPHERE_SIREN_SPEC["width"])
    sdf.load_state_dict(payload["state"])
    sdf.eval()
    return sdf


# The toy-fit sphere matches the toy scene radius so fitting starts near the
# right shape, like the real pipeline (pretrain radius = rough object scale).
TOY_SPHERE_SPEC = {**SPHERE_SIREN_SPEC, "radius": 0.4}


def build_toy_sphere() -> dict:
    torch.manual_seed(TOY_SPHERE_SPEC["seed"])
    sdf = SirenSdf(depth=TOY_SPHERE_SPEC["depth"], width=TOY_SPHERE_SPEC["width"])
    info = pretrain_sphere(
        sdf,
        radius=TOY_SPHERE_SPEC["radius"],
        target_error=TOY_SPHERE_SPEC["target_error"],
        max_iterations=TOY_SPHERE_SPEC["max_iterations"],
        batch_size=TOY_SPHERE_SPEC["batch_size"],
        domain_half_extent=TOY_SPHERE_SPEC["domain_half_extent"],
        seed=TOY_SPHERE_SPEC["seed"],
    )
    return {"state": sdf.state_dict(), "info": info, "spec": TOY_SPHERE_SPEC}


def get_toy_sphere_payload() -> dict:
    return cached("toy_sphere", TOY_SPHERE_SPEC, build_toy_sphere)


META_NET_CONFIG = NetworkConfig(sdf_width=64, rgb_features=True)
META_SPHERE_SPEC = {
    **SPHERE_SIREN_SPEC,
    "width": 64,
    "radius": 0.35,
    "target_error": 1.5e-3,
    "max_iterations": 40000,
}


def build_meta_sphere() -> dict:
    torch.manual_seed(META_SPHERE_SPEC["seed"])
    sdf = SirenSdf(depth=META_SPHERE_SPEC["depth"], width=META_SPHERE_SPEC["width"])
    info = pretrain_sphere(
        sdf,
        radius=META_SPHERE_SPEC["radius"],
        target_error=META_SPHERE_SPEC["target_error"],
        max_iterations=META_SPHERE_SPEC["max_iterations"],
        batch_size=META_SPHERE_SPEC["batch_size"],
        domain_half_extent=META_SPHERE_SPEC["domain_half_extent"],
        seed=META_SPHERE_SPEC["seed"],
    )
    return {"state": sdf.state_dict(), "info": info, "spec": META_SPHERE_SPEC}


def get_meta_sphere_payload() -> dict:
    return cached("meta_sphere", META_SPHERE_SPEC, build_meta_sphere)


# Small field for gradient-suite and protocol tests: cheap enough to build in
# minutes but a genuine trained SIREN with a traceable surface.
MICRO_SPHERE_SPEC = {
    **SPHERE_SIREN_SPEC,
    "width": 32,
    "radius": 0.4,
    "target_error": 5e-3,
    "max_iterations": 15000,
    "batch_size": 2000,
}


def build_micro_sphere() -> dict:
    torch.manual_seed(MICRO_SPHERE_SPEC["seed"])
    sdf = SirenSdf(depth=MICRO_SPHERE_SPEC["depth"], width=MICRO_SPHERE_SPEC["width"])
    info = pretrain_sphere(
        sdf,
        radius=MICRO_SPHERE_SPEC["radius"],
        target_error=MICRO_SPHERE_SPEC["target_error"],
        max_iterations=MICRO_SPHERE_SPEC["max_iterations"],
        batch_size=MICRO_SPHERE_SPEC["batch_size"],
        domain_half_extent=MICRO_SPHERE_SPEC["domain_half_extent"],
        seed=MICRO_SPHERE_SPEC["seed"],
    )
    return {"state": sdf.state_dict(), "info": info, "spec": MICRO_SPHERE_SPEC}


def get_micro_sphere_payload() -> dict:
    return cached("micro_sphere", MICRO_SPHERE_SPEC, build_micro_sphere)


def load_micro_sphere() -> SirenSdf:
    payload = get_micro_sphere_payload()
    sdf = SirenSdf(depth=MICRO_SPHERE_SPEC["depth"], width=MICRO_SPHERE_SPEC["width"])
    sdf.load_state_dict(payload["state"])
    sdf.eval()
    return sdf


# ---------------------------------------------------------------------------
# Codec

CODEC_CORPUS_SPEC = {"n_images": 192, "resolution": 64, "seed": 11}
CODEC_TRAIN_SPEC = {
    "kind": "codec",
    "corpus": CODEC_CORPUS_SPEC,
    "iterations": 3000,
    "batch_size": 8,
    "lr": 5e-4,
    "seed": 0,
    "val_count": 19,
    "feature_dim": 16,
}


def build_codec() -> dict:
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        make_texture_corpus(tmp, **CODEC_CORPUS_SPEC)
        from lumisurf.codec import _load_corpus

        images = _load_corpus(tmp, CODEC_CORPUS_SPEC["resolution"])
    gen = torch.Generator().manual_seed(CODEC_TRAIN_SPEC["seed"])
    perm = torch.randperm(images.shape[0], generator=gen)
    n_val = CODEC_TRAIN_SPEC["val_count"]
    val, train = images[perm[:n_val]], images[perm[n_val:]]

    torch.manual_seed(CODEC_TRAIN_SPEC["seed"])
    encoder = FeatureEncoder(feature_dim=CODEC_TRAIN_SPEC["feature_dim"])
    decoder = FeatureDecoder(feature_dim=CODEC_TRAIN_SPEC["feature_dim"])
    encoder.eval(), decoder.eval()
    with torch.no_grad():
        init_val_l1 = float((decoder(encoder(val), clamp=False) - val).abs().mean())
    encoder.train(), decoder.train()

    cfg = CodecPretrainConfig(
        iterations=CODEC_TRAIN_SPEC["iterations"],
        batch_size=CODEC_TRAIN_SPEC["batch_size"],
        lr=CODEC_TRAIN_SPEC["lr"],
        resolution=CODEC_CORPUS_SPEC["resolution"],
        seed=CODEC_TRAIN_SPEC["seed"] + 1,
    )
    report = pretrain_codec(encoder, decoder, [im.numpy() for im in train], cfg)
    return {
        "encoder": encoder.state_dict(),
        "decoder": decoder.state_dict(),
        "report": report,
        "val": val,
        "init_val_l1": init_val_l1,
        "spec": CODEC_TRAIN_SPEC,
    }


def get_codec_payload() -> dict:
    return cached("codec", CODEC_TRAIN_SPEC, build_codec)


def load_codec() -> tuple[FeatureEncoder, FeatureDecoder]:
    payload = get_codec_payload()
    encoder = FeatureEncoder(feature_dim=CODEC_TRAIN_SPEC["feature_dim"])
    decoder = FeatureDecoder(feature_dim=CODEC_TRAIN_SPEC["feature_dim"])
    encoder.load_state_dict(payload["encoder"])
    decoder.load_state_dict(payload["decoder"])
    encoder.eval(), decoder.eval()
    return encoder, decoder


# ---------------------------------------------------------------------------
# End-to-end toy fit (acceptance 6; also feeds the export/service checks)

TOY_FIT_TRAIN_SPEC = {
    "kind": "toy_fit",
    "scene": TOY_SCENE_PARAMS.__dict__,
    "train_views": TOY_TRAIN_VIEWS,
    "holdout_views": TOY_HOLDOUT_VIEWS,
    "iterations": 2000,
    "eval_every": 50,
    "stop_at_psnr": 28.0,
    "seed": 0,
    "networks": NetworkConfig().__dict__,
    "init": TOY_SPHERE_SPEC,
    "codec": CODEC_TRAIN_SPEC,
}


def build_toy_fit() -> dict:
    scene = get_toy_scene()
    train_scene = subset_scene(scene, TOY_TRAIN_VIEWS)
    eval_views = (
        [scene.cameras[i] for i in TOY_HOLDOUT_VIEWS],
        scene.images[TOY_HOLDOUT_VIEWS],
        scene.masks[TOY_HOLDOUT_VIEWS],
    )
    net_cfg = NetworkConfig()
    networks = build_networks(net_cfg, seed=TOY_FIT_TRAIN_SPEC["seed"])
    networks.sdf.load_state_dict(get_toy_sphere_payload()["state"])
    codec = get_codec_payload()
    networks.encoder.load_state_dict(codec["encoder"])
    networks.decoder.load_state_dict(codec["decoder"])
    cfg = TrainConfig(
        iterations=TOY_FIT_TRAIN_SPEC["iterations"],
        eval_every=TOY_FIT_TRAIN_SPEC["eval_every"],
        stop_at_psnr=TOY_FIT_TRAIN_SPEC["stop_at_psnr"],
        seed=TOY_FIT_TRAIN_SPEC["seed"],
        log_every=10,
    )
    result = fit(networks, train_scene, cfg, out_dir=None, eval_views=eval_views)
    return {
        "state": networks.state_dict(),
        "network_config": net_cfg.__dict__,
        "history": result.history,
        "final_psnr": result.final_psnr,
        "stopped_at": result.stopped_at,
        "config_hash": result.cfg_hash,
        "spec": TOY_FIT_TRAIN_SPEC,
    }


def get_toy_fit_payload() -> dict:
    return cached("toy_fit", TOY_FIT_TRAIN_SPEC, build_toy_fit)


def load_toy_fit_networks() -> Networks:
    payload = get_toy_fit_payload()
    networks = Networks(NetworkConfig(**_tupled(payload["network_config"])))
    networks.load_state_dict(payload["state"])
    networks.eval()
    return networks


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# Meta-learning run (acceptance 7) and the paired-arm comparison

META_TASK_SPEC = {"n_views": 5, "resolution": 24, "azimuth_span": 1.3}
# 24 px pixel footprints put the cached-surface interpolation error above the
# production occlusion tolerances, so the inner fits run a footprint-scaled
# constant tolerance instead of the full-resolution schedule.
META_TAU_OCC = 5e-3
META_TRAIN_SPEC = {
    "kind": "meta",
    "networks": META_NET_CONFIG.__dict__,
    "init": META_SPHERE_SPEC,
    "outer_iterations": 200,
    "inner_iterations": 64,
    "beta": 0.1,
    "beta_final": 0.02,
    "seed": 0,
    "tasks": META_TASK_SPEC,
    "task_seed_base": 1000,
    "inner": {"eikonal_count": 1000, "tau_occ": META_TAU_OCC},
}


def meta_task_sampler(o: int) -> MultiViewScene:
    return random_sphere_task(seed=META_TRAIN_SPEC["task_seed_base"] + o, **META_TASK_SPEC)


def _meta_init_networks() -> Networks:
    networks = build_networks(META_NET_CONFIG, seed=META_TRAIN_SPEC["seed"])
    networks.sdf.load_state_dict(get_meta_sphere_payload()["state"])
    return networks


def build_meta() -> dict:
    networks = _meta_init_networks()
    init_state = {k: v.clone() for k, v in networks.state_dict().items()}
    inner = TrainConfig(
        eikonal_count=META_TRAIN_SPEC["inner"]["eikonal_count"],
        tau_occ_schedule=((META_TAU_OCC, None),),
    )
    meta_cfg = MetaConfig(
        outer_iterations=META_TRAIN_SPEC["outer_iterations"],
        inner_iterations=META_TRAIN_SPEC["inner_iterations"],
        beta=META_TRAIN_SPEC["beta"],
        beta_final=META_TRAIN_SPEC["beta_final"],
        seed=META_TRAIN_SPEC["seed"],
    )
    records = reptile_train(networks, meta_task_sampler, inner, meta_cfg, out_dir=None)
    return {
        "init_state": init_state,
        "meta_state": networks.state_dict(),
        "records": records,
        "spec": META_TRAIN_SPEC,
    }


def get_meta_payload() -> dict:
    return cached("meta", META_TRAIN_SPEC, build_meta)


ARMS_SPEC = {
    "kind": "meta_arms",
    "meta": META_TRAIN_SPEC,
    "task_seeds": [900001, 900002, 900003],
    "fit_seeds": [0, 1, 2],
    "threshold_db": 25.0,
    "max_iterations": 600,
    "eval_every": 10,
}


def _arm_fit(state: dict, task_seed: int, fit_seed: int) -> dict:
    """Fit one held-out task from a given initialization; report the eval
    trajectory and the first iteration count whose held-out PSNR crosses the
    threshold."""
    scene = random_sphere_task(seed=task_seed, **META_TASK_SPEC)
    n = scene.n_views
    train_scene = subset_scene(scene, list(range(n - 1)))
    eval_views = ([scene.cameras[n - 1]], scene.images[[n - 1]], scene.masks[[n - 1]])
    networks = Networks(META_NET_CONFIG)
    networks.load_state_dict(state)
    cfg = TrainConfig(
        iterations=ARMS_SPEC["max_iterations"],
        eval_every=ARMS_SPEC["eval_every"],
        stop_at_psnr=ARMS_SPEC["threshold_db"],
        eikonal_count=META_TRAIN_SPEC["inner"]["eikonal_count"],
        tau_occ_schedule=((META_TAU_OCC, None),),
        seed=fit_seed,
        log_every=0,
    )
    result = fit(networks, train_scene, cfg, out_dir=None, eval_views=eval_views)
    reached = result.final_psnr is not None and result.final_psnr >= ARMS_SPEC["threshold_db"]
    return {
        "task_seed": task_seed,
        "fit_seed": fit_seed,
        "iterations_to_threshold": result.stopped_at if reached else None,
        "final_psnr": result.final_psnr,
        "history": [r for r in result.history if "eval_psnr" in r],
    }


def build_meta_arms() -> dict:
    meta = get_meta_payload()
    results = {"meta": [], "default": []}
    for task_seed in ARMS_SPEC["task_seeds"]:
        for fit_seed in ARMS_SPEC["fit_seeds"]:
            _log(f"arm fits for task {task_seed} seed {fit_seed}")
            results["meta"].append(_arm_fit(meta["meta_state"], task_seed, fit_seed))
            results["default"].append(_arm_fit(meta["init_state"], task_seed, fit_seed))
    return {"results": results, "spec": ARMS_SPEC}


def get_meta_arms_payload() -> dict:
    return cached("meta_arms", ARMS_SPEC, build_meta_arms)


# ---------------------------------------------------------------------------
# Small codec-mode render bundle for format/service protocol tests (decoder
# stride 4, so resolution mismatches are reachable). Appearance nets are
# untrained; protocol tests do not care about image quality.

def build_protocol_bundle_file(out_path: Path) -> Path:
    from lumisurf.aggregation import SourceSurfaceCache
    from lumisurf.export import precompute_assets, save_bundle
    from lumisurf.scene import generate_rays
    from lumisurf.sdf import SphereTraceConfig

    scene = make_sphere_scene(SphereSceneParams(n_views=4, resolution=32, radius=0.4, seed=9))
    cfg = NetworkConfig(**{**NetworkConfig().compact().__dict__, "sdf_width": MICRO_SPHERE_SPEC["width"]})
    networks = build_networks(cfg, seed=0)
    networks.sdf.load_state_dict(get_micro_sphere_payload()["state"])
    networks.eval()
    n, H, W = scene.images.shape[:3]
    rays = [generate_rays(cam, bounds=scene.bounds) for cam in scene.cameras]
    cache = SourceSurfaceCache.allocate(n, H, W)
    cache.refresh(networks.sdf, rays, range(n), SphereTraceConfig(), stamp=0)
    bundle = precompute_assets(
        networks, scene.images, scene.cameras, cache, tau_occ=1e-3,
        mesh_resolution=48, bounds=scene.bounds,
    )
    save_bundle(out_path, bundle)
    return out_path


@pytest.fixture(scope="session")
def protocol_bundle_path(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("bundle") / "protocol.mnb"
    return build_protocol_bundle_file(out)


@functools.lru_cache(maxsize=1)
def get_toy_render_bundle():
    """Bake the fitted toy scene into a render bundle (built once per process;
    the online-vs-baked comparisons and the service tests share it).

    Returns (bundle, scene, networks, tau_occ).
    """
    from lumisurf.aggregation import SourceSurfaceCache
    from lumisurf.export import precompute_assets
    from lumisurf.scene import generate_rays
    from lumisurf.sdf import SphereTraceConfig
    from lumisurf.trainer import TrainConfig, hyperparams_at

    scene = subset_scene(get_toy_scene(), TOY_TRAIN_VIEWS)
    networks = load_toy_fit_networks()
    payload = get_toy_fit_payload()
    n, H, W = scene.images.shape[:3]
    rays = [generate_rays(cam, bounds=scene.bounds) for cam in scene.cameras]
    cache = SourceSurfaceCache.allocate(n, H, W)
    cache.refresh(networks.sdf, rays, range(n), SphereTraceConfig(), stamp=0)
    _, _, _, tau_occ, _ = hyperparams_at(TrainConfig(), payload["stopped_at"])
    bundle = precompute_assets(
        networks, scene.images, scene.cameras, cache, tau_occ,
        mesh_resolution=128, bounds=scene.bounds,
    )
    return bundle, scene, networks, tau_occ


# ---------------------------------------------------------------------------
# pytest fixtures

@pytest.fixture(scope="session")
def toy_scene() -> MultiViewScene:
    return get_toy_scene()


@pytest.fixture(scope="session")
def two_sphere_scene() -> MultiViewScene:
    return make_sphere_scene(TWO_SPHERE_PARAMS)


@pytest.fixture(scope="session")
def sphere_siren() -> SirenSdf:
    return load_sphere_siren()


@pytest.fixture(scope="session")
def micro_sphere() -> SirenSdf:
    return load_micro_sphere()


@pytest.fixture(scope="session")
def sphere_siren_info() -> dict:
    return get_sphere_siren_payload()["info"]


@pytest.fixture(scope="session")
def codec_payload() -> dict:
    return get_codec_payload()


@pytest.fixture(scope="session")
def codec_pair() -> tuple[FeatureEncoder, FeatureDecoder]:
    return load_codec()


@pytest.fixture(scope="session")
def toy_fit_payload() -> dict:
    return get_toy_fit_payload()


@pytest.fixture(scope="session")
def toy_fit_networks() -> Networks:
    return load_toy_fit_networks()


@pytest.fixture(scope="session")
def meta_payload() -> dict:
    return get_meta_payload()


@pytest.fixture(scope="session")
def meta_arms_payload() -> dict:
    return get_meta_arms_payload()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield
