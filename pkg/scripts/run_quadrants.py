"""Run the four closed-loop quadrant experiments and summarise the final pressure patterns.

usage: python scripts/run_quadrants.py [--config c.toml] [--out-dir runs/quadrants] [--workers N] [--dt DT]
"""

import argparse
import json
import os
from dataclasses import asdict, replace

from softarm.experiments import run_all_quadrants, write_csv, write_plotdata
from softarm.scene import SceneConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out-dir", default="runs/quadrants")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--dt", type=float, help="override the integrator time step")
    args = ap.parse_args()
    cfg = SceneConfig.load(args.config) if args.config else SceneConfig()
    if args.dt:
        cfg = replace(cfg, integrator=replace(cfg.integrator, dt=args.dt), log_stride=max(1, round(cfg.log_stride * cfg.integrator.dt / args.dt)))
    results = run_all_quadrants(cfg, workers=args.workers)
    summary = []
    for q, (log, rep) in enumerate(results, start=1):
        d = os.path.join(args.out_dir, f"q{q}")
        os.makedirs(d, exist_ok=True)
        write_csv(log, os.path.join(d, "log.csv"))
        write_plotdata(log, d, "quadrant")
        summary.append(asdict(rep))
        P = ", ".join(f"{p:.3f}" for p in rep.final_pressures)
        tip = ", ".join(f"{x * 100:+.2f}" for x in rep.final_tip)
        print(f"Q{q}: tip=({tip}) cm  P=({P})  e_k {rep.initial_error:.0f} -> {rep.final_error:.1f}  "
              f"{rep.reason} at {rep.steps * cfg.integrator.dt:.2f} s  runtime {rep.runtime:.0f} s")
    with open(os.path.join(args.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
