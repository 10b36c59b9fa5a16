"""Command-line entry points: scene synthesis, pretraining, meta-training,
per-scene fitting, baking, rendering, evaluation, benchmarking, and the render
service.

Option precedence everywhere: explicit flags beat the YAML --config file,
which beats built-in defaults. Exit code 2 marks usage errors, 1 runtime
failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _load_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping at the top level")
    return data


def _merge(cls, yaml_dict: dict, overrides: dict):
    """Build a config dataclass from defaults, then YAML, then CLI flags."""
    valid = {f.name for f in dataclass_fields(cls)}
    unknown = set(yaml_dict) - valid
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    merged = dict(yaml_dict)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("tau_occ_schedule", "checkpoint_schedule", "lr_shape_milestones", "alpha_milestones"):
        if key in merged and merged[key] is not None:
            merged[key] = tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in merged[key])
    return cls(**merged)


def _network_config(args, yaml_dict: dict):
    from .snapshots import NetworkConfig

    section = yaml_dict.get("networks", {})
    overrides = {
        "sdf_width": getattr(args, "sdf_width", None),
        "sdf_depth": getattr(args, "sdf_depth", None),
        "feature_dim": getattr(args, "feature_dim", None),
        "rgb_features": True if getattr(args, "rgb_features", False) else None,
    }
    cfg = _merge(NetworkConfig, section, overrides)
    if getattr(args, "compact", False):
        base = cfg.compact()
        cfg = base if not cfg.rgb_features else type(cfg)(**{**base.__dict__, "rgb_features": True})
    return cfg


def _load_scene(path: str):
    from .scene import load_scene

    return load_scene(path)


def _seeded(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32 - 1))


def cmd_make_toy_scene(args) -> int:
    from .synthetic import SphereSceneParams, make_sphere_scene

    params = SphereSceneParams(
        n_views=args.views,
        resolution=args.resolution,
        radius=args.radius,
        seed=args.seed,
        two_spheres=args.two_spheres,
    )
    make_sphere_scene(params, out_dir=args.out)
    print(f"wrote {args.views}-view scene to {args.out}")
    return 0


def cmd_pretrain_shape(args) -> int:
    from .sdf import pretrain_sphere
    from .snapshots import build_networks, config_hash, save_checkpoint

    yaml_dict = _load_yaml(args.config)
    net_cfg = _network_config(args, yaml_dict)
    _seeded(args.seed)
    networks = build_networks(net_cfg, seed=args.seed)
    info = pretrain_sphere(
        networks.sdf,
        radius=args.radius,
        target_error=args.target_error,
        max_iterations=args.max_iterations,
        seed=args.seed,
        verbose=args.verbose,
    )
    save_checkpoint(
        args.out, networks, info["iterations"], 0.0,
        config_hash({"pretrain_sphere": info, "networks": net_cfg.__dict__}),
        extra={"pretrain": info},
    )
    print(json.dumps(info))
    return 0


def cmd_pretrain_codec(args) -> int:
    from .codec import CodecPretrainConfig, FeatureDecoder, FeatureEncoder, pretrain_codec

    yaml_dict = _load_yaml(args.config)
    cfg = _merge(
        CodecPretrainConfig,
        yaml_dict.get("codec_pretrain", {}),
        {
            "iterations": args.iterations,
            "batch_size": args.batch_size,
            "resolution": args.resolution,
            "seed": args.seed,
            "lr": args.lr,
        },
    )
    _seeded(cfg.seed)
    encoder = FeatureEncoder(feature_dim=args.feature_dim or 16)
    decoder = FeatureDecoder(feature_dim=args.feature_dim or 16)
    report = pretrain_codec(encoder, decoder, args.corpus, cfg)
    torch.save(
        {
            "encoder": encoder.state_dict(),
            "decoder": decoder.state_dict(),
            "feature_dim": encoder.feature_dim,
            "val_identity_psnr": report["val_identity_psnr"],
        },
        args.out,
    )
    print(json.dumps({k: v for k, v in report.items() if k != "history"}))
    return 0


def cmd_meta_train(args) -> int:
    from .meta import MetaConfig, reptile_train
    from .snapshots import build_networks, load_checkpoint
    from .synthetic import random_sphere_task
    from .trainer import TrainConfig

    yaml_dict = _load_yaml(args.config)
    net_cfg = _network_config(args, yaml_dict)
    inner = _merge(TrainConfig, yaml_dict.get("inner", {}), {"seed": args.seed})
    meta_cfg = _merge(
        MetaConfig,
        yaml_dict.get("meta", {}),
        {
            "outer_iterations": args.outer_iterations,
            "inner_iterations": args.inner_iterations,
            "beta": args.beta,
            "beta_final": args.beta_final,
            "seed": args.seed,
        },
    )
    networks = build_networks(net_cfg, seed=args.seed)
    if args.init is not None:
        load_checkpoint(args.init, networks)

    def sampler(o: int):
        return random_sphere_task(
            seed=args.seed * 7919 + o, n_views=args.task_views, resolution=args.task_resolution
        )

    records = reptile_train(networks, sampler, inner, meta_cfg, out_dir=args.out)
    skipped = sum(1 for r in records if r["skipped"])
    print(json.dumps({"outer_iterations": len(records), "skipped": skipped, "out": str(args.out)}))
    return 0


def cmd_fit(args) -> int:
    from .snapshots import build_networks, load_checkpoint
    from .trainer import TrainConfig, fit

    yaml_dict = _load_yaml(args.config)
    net_cfg = _network_config(args, yaml_dict)
    overrides = {
        "iterations": args.iterations,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "stop_at_psnr": args.stop_at_psnr,
        "log_every": args.log_every,
    }
    cfg = _merge(TrainConfig, yaml_dict.get("fit", {}), overrides)
    scene = _load_scene(args.scene)
    networks = build_networks(net_cfg, seed=cfg.seed)
    if args.init is not None:
        load_checkpoint(args.init, networks)
    if args.codec is not None:
        payload = torch.load(args.codec, map_location="cpu", weights_only=False)
        if networks.encoder is None:
            raise ValueError("--codec given but the network bundle runs in RGB feature mode")
        networks.encoder.load_state_dict(payload["encoder"])
        networks.decoder.load_state_dict(payload["decoder"])

    eval_views = None
    if args.holdout:
        idx = [int(x) for x in args.holdout.split(",")]
        train_idx = [i for i in range(len(scene.cameras)) if i not in idx]
        if not train_idx or not idx:
            raise ValueError(f"holdout {idx} leaves no train/eval split for {len(scene.cameras)} views")
        eval_views = (
            [scene.cameras[i] for i in idx],
            scene.images[idx],
            scene.masks[idx],
        )
        scene = type(scene)(
            images=scene.images[train_idx],
            masks=scene.masks[train_idx],
            cameras=[scene.cameras[i] for i in train_idx],
            bounds=scene.bounds,
            name=scene.name,
        )
    result = fit(networks, scene, cfg, out_dir=args.out, eval_views=eval_views)
    print(
        json.dumps(
            {
                "stopped_at": result.stopped_at,
                "final_psnr": result.final_psnr,
                "config_hash": result.cfg_hash,
                "out": str(args.out),
            }
        )
    )
    return 0


def _networks_from_checkpoint(path: str):
    from .snapshots import NetworkConfig, Networks, load_checkpoint

    payload = torch.load(path, map_location="cpu", weights_only=False)
    raw = payload["network_config"]
    cfg = NetworkConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    networks = Networks(cfg)
    networks.load_state_dict(payload["state"])
    return networks, payload


def cmd_export(args) -> int:
    from .aggregation import SourceSurfaceCache
    from .export import precompute_assets, save_bundle
    from .scene import generate_rays
    from .trainer import TrainConfig, hyperparams_at

    scene = _load_scene(args.scene)
    networks, payload = _networks_from_checkpoint(args.checkpoint)
    networks.eval()
    n, H, W = scene.images.shape[:3]
    rays = [generate_rays(cam, bounds=scene.bounds) for cam in scene.cameras]
    cache = SourceSurfaceCache.allocate(n, H, W)
    from .sdf import SphereTraceConfig

    trace = SphereTraceConfig()
    cache.refresh(networks.sdf, rays, range(n), trace, stamp=0)
    tau_occ = args.tau_occ
    if tau_occ is None:
        _, _, _, tau_occ, _ = hyperparams_at(TrainConfig(), payload.get("iteration", 0))
    bundle = precompute_assets(
        networks, scene.images, scene.cameras, cache, tau_occ,
        mesh_resolution=args.mesh_resolution, bounds=scene.bounds,
    )
    save_bundle(args.out, bundle)
    if args.obj is not None:
        from .export import write_obj

        write_obj(args.obj, bundle.vertices, bundle.faces)
    print(json.dumps({"out": str(args.out), **bundle.meta["mesh"]}))
    return 0


def _camera_from_args(args, width: int, height: int):
    from .scene import CameraModel

    if args.pose is not None:
        vals = [float(x) for x in args.pose.split(",")]
        if len(vals) != 16:
            raise ValueError(f"--pose needs 16 comma-separated floats, got {len(vals)}")
        mat = np.array(vals, dtype=np.float64).reshape(4, 4)
        if args.intrinsics is None:
            raise ValueError("--pose also needs --intrinsics")
        kv = [float(x) for x in args.intrinsics.split(",")]
        if len(kv) != 9:
            raise ValueError(f"--intrinsics needs 9 comma-separated floats, got {len(kv)}")
        K = np.array(kv, dtype=np.float64).reshape(3, 3)
        return CameraModel(
            intrinsics=K, rotation=mat[:3, :3], translation=mat[:3, 3], width=width, height=height
        )
    return None


def cmd_render(args) -> int:
    from PIL import Image

    from .export import fast_render, load_bundle
    from .scene import CameraModel

    bundle = load_bundle(args.bundle)
    H, W = bundle.meta["image_size"]
    width = args.width or W
    height = args.height or H

    if args.path is not None:
        # Camera-path mode: JSON list of {"pose": [16], "intrinsics": [9]},
        # frames written numbered into --out (a directory).
        with open(args.path) as fh:
            waypoints = json.load(fh)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for i, wp in enumerate(waypoints):
            mat = np.asarray(wp["pose"], dtype=np.float64).reshape(4, 4)
            K = np.asarray(wp["intrinsics"], dtype=np.float64).reshape(3, 3)
            cam = CameraModel(K, mat[:3, :3], mat[:3, 3], width, height)
            image, _, _ = fast_render(bundle, cam, backend=args.backend)
            arr = (image.numpy() * 255.0 + 0.5).astype(np.uint8)
            frame = out_dir / f"frame_{i:05d}.png"
            Image.fromarray(arr).save(frame)
            written.append(str(frame))
        print(json.dumps({"frames": len(written), "out": str(out_dir)}))
        return 0

    camera = _camera_from_args(args, width, height)
    if camera is None:
        if args.view_index is None:
            raise ValueError("give --pose/--intrinsics, --view-index, or --path")
        base = bundle.cameras[args.view_index]
        camera = base if (width, height) == (base.width, base.height) else base.resized(width, height)
    image, hit, depth = fast_render(bundle, camera, backend=args.backend)
    arr = (image.numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(args.out)
    print(json.dumps({"out": str(args.out), "hit_fraction": float(hit.float().mean())}))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import masked_psnr
    from .export import fast_render, load_bundle

    scene = _load_scene(args.scene)
    bundle = load_bundle(args.bundle)
    idx = [int(x) for x in args.views.split(",")] if args.views else list(range(len(scene.cameras)))
    rows = []
    for i in idx:
        image, hit, _ = fast_render(bundle, scene.cameras[i], backend=args.backend)
        rows.append(
            {
                "view": i,
                "psnr": masked_psnr(image, scene.images[i], scene.masks[i]),
                "hit_iou": float(
                    (hit & scene.masks[i]).sum() / max(1, (hit | scene.masks[i]).sum())
                ),
            }
        )
    report = {
        "per_view": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_hit_iou": float(np.mean([r["hit_iou"] for r in rows])),
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return 0


def cmd_benchmark(args) -> int:
    from .export import benchmark_render, load_bundle

    bundle = load_bundle(args.bundle)
    base = bundle.cameras[0]
    cam = base if (args.width, args.height) == (base.width, base.height) else base.resized(
        args.width, args.height
    )
    report = benchmark_render(bundle, [cam], repeats=args.repeats, backend=args.backend)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.bundle, stream_quality=args.quality)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lumisurf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-scene", help="write a synthetic multi-view sphere scene")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--radius", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--two-spheres", action="store_true")
    p.set_defaults(func=cmd_make_toy_scene)

    p = sub.add_parser("pretrain-shape", help="initialize the distance field to a sphere")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--target-error", type=float, default=1e-3)
    p.add_argument("--max-iterations", type=int, default=50000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sdf-width", type=int)
    p.add_argument("--sdf-depth", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--rgb-features", action="store_true")
    p.add_argument("--compact", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_pretrain_shape)

    p = sub.add_parser("pretrain-codec", help="pretrain the feature encoder/decoder on an image corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--feature-dim", type=int)
    p.set_defaults(func=cmd_pretrain_codec)

    p = sub.add_parser("meta-train", help="meta-learn an initialization over synthetic tasks")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--init", help="checkpoint to start the initialization from")
    p.add_argument("--outer-iterations", type=int)
    p.add_argument("--inner-iterations", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--beta-final", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-views", type=int, default=5)
    p.add_argument("--task-resolution", type=int, default=24)
    p.add_argument("--sdf-width", type=int)
    p.add_argument("--sdf-depth", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--rgb-features", action="store_true")
    p.add_argument("--compact", action="store_true")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("fit", help="fit the networks to one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--init", help="starting checkpoint (e.g. pretrained or meta-learned)")
    p.add_argument("--codec", help="pretrained codec weights (.pt from pretrain-codec)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", help="comma-separated view indices held out for evaluation")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--stop-at-psnr", type=float)
    p.add_argument("--log-every", type=int)
    p.add_argument("--sdf-width", type=int)
    p.add_argument("--sdf-depth", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--rgb-features", action="store_true")
    p.add_argument("--compact", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("export", help="bake a fitted checkpoint + scene into a render bundle")
    p.add_argument("--ckpt", "--checkpoint", dest="checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", "--mesh-resolution", dest="mesh_resolution", type=int, default=128)
    p.add_argument("--tau-occ", type=float)
    p.add_argument("--obj", help="also write the mesh as a Wavefront OBJ file")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("render", help="render one image (or a camera path) from a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="output PNG, or a directory with --path")
    p.add_argument("--view-index", type=int)
    p.add_argument("--pose", help="16 comma-separated floats, row-major world-to-camera 4x4")
    p.add_argument("--intrinsics", help="9 comma-separated floats, row-major 3x3")
    p.add_argument("--path", help="JSON camera path: list of {pose, intrinsics} waypoints")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--backend", choices=["bvh", "raster"], default="bvh")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="masked PSNR of bundle renders against scene images")
    p.add_argument("--scene", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--metric", choices=["psnr"], default="psnr")
    p.add_argument("--views", help="comma-separated view indices (default: all)")
    p.add_argument("--backend", choices=["bvh", "raster"], default="bvh")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="median per-stage render timings")
    p.add_argument("--bundle", required=True)
    p.add_argument("--width", type=int, default=800)
    p.add_argument("--height", type=int, default=600)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--backend", choices=["bvh", "raster"], default="bvh")
    p.add_argument("--report")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("serve", help="HTTP/WebSocket render service for a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--quality", type=int, default=85, help="JPEG quality for /stream frames")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
