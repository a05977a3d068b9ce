"""Run every config in configs/ through the full pipeline.

Usage: python scripts/run_configs.py [--out results] [--workers N]
"""

import argparse
import json
from pathlib import Path

from openevt.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run_all(out: Path, workers: int) -> dict:
    status = {}
    for cfg in sorted((ROOT / "configs").glob("*.json")):
        dest = out / cfg.stem
        status[cfg.stem] = main(["run", "--config", str(cfg), "--out", str(dest), "--workers", str(workers)])
        manifest = json.loads((dest / "manifest.json").read_text())
        codes = [w["code"] for w in manifest["warnings"]] + [e["name"] for e in manifest["errors"]]
        print(f"{cfg.stem:14s} exit={status[cfg.stem]} alpha={manifest['alpha']!r} "
              f"{manifest['wall_clock_seconds']:.1f}s {' '.join(codes)}")
    return status


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=ROOT / "results")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    run_all(args.out, args.workers)
