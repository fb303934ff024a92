"""Run the open-loop periodic experiment and write the log plus plot data.

usage: python scripts/run_periodic.py [--config c.toml] [--out-dir runs/periodic]
"""

import argparse
import json
import os
from dataclasses import asdict

from softarm.experiments import run_periodic, write_csv, write_plotdata
from softarm.scene import SceneConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out-dir", default="runs/periodic")
    args = ap.parse_args()
    cfg = SceneConfig.load(args.config) if args.config else SceneConfig()
    os.makedirs(args.out_dir, exist_ok=True)
    log, report = run_periodic(cfg)
    write_csv(log, os.path.join(args.out_dir, "periodic.csv"))
    write_plotdata(log, args.out_dir, "periodic")
    with open(os.path.join(args.out_dir, "report.json"), "w") as fh:
        json.dump(asdict(report), fh, indent=2)
    print(f"delta_x={report.delta_x * 100:.3f} cm  delta_y={report.delta_y * 100:.3f} cm  "
          f"period={report.period:.2f} s  runtime={report.runtime:.1f} s")


if __name__ == "__main__":
    main()
