"""Pre-build the expensive test fixtures into tests/.fixture_cache.

Runs the exact builder functions the test suite uses (tests/conftest.py), so a
later pytest run hits a warm cache with identical artifacts. Stages can be
selected by name:

    python3 scripts/warm_fixtures.py                  # everything, in order
    python3 scripts/warm_fixtures.py micro codec      # just these stages
"""
from __future__ import annotations

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import conftest as fx  # noqa: E402

STAGES = {
    "micro": fx.get_micro_sphere_payload,
    "toy_sphere": fx.get_toy_sphere_payload,
    "sphere": fx.get_sphere_siren_payload,
    "meta_sphere": fx.get_meta_sphere_payload,
    "codec": fx.get_codec_payload,
    "toy_fit": fx.get_toy_fit_payload,
    "meta": fx.get_meta_payload,
    "arms": fx.get_meta_arms_payload,
}


def main(argv: list[str]) -> int:
    names = argv or list(STAGES)
    unknown = [n for n in names if n not in STAGES]
    if unknown:
        print(f"unknown stages: {unknown}; choose from {list(STAGES)}", file=sys.stderr)
        return 2
    for name in names:
        t0 = time.time()
        payload = STAGES[name]()
        dt = time.time() - t0
        summary = ""
        if name in ("micro", "toy_sphere", "sphere", "meta_sphere"):
            summary = f"mae {payload['info']['holdout_mae']:.2e} iters {payload['info']['iterations']}"
        elif name == "codec":
            summary = f"val psnr {payload['report']['val_identity_psnr']:.2f} dB"
        elif name == "toy_fit":
            summary = f"psnr {payload['final_psnr']:.2f} dB at iter {payload['stopped_at']}"
        elif name == "meta":
            skips = sum(1 for r in payload["records"] if r["skipped"])
            summary = f"{len(payload['records'])} outer iterations, {skips} skipped"
        elif name == "arms":
            rows = payload["results"]
            m = [r["iterations_to_threshold"] for r in rows["meta"]]
            d = [r["iterations_to_threshold"] for r in rows["default"]]
            summary = f"meta {m} vs default {d}"
        print(f"stage {name}: done in {dt:.0f}s  {summary}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
