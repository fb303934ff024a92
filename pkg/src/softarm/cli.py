"""Command-line interface: ``softarm {gen-mesh,run,validate,dump-config}``.

Exit codes: 0 success, 1 validation or convergence failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _threads() -> int:
    raw = os.environ.get("SOFTARM_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"SOFTARM_THREADS must be an integer, got '{raw}'")
    return max(1, n)


def _parse_value(text: str):
    parts = text.split(",")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        return text
    return vals[0] if len(vals) == 1 else vals


def _parse_vector(text: str):
    try:
        vals = [float(p) for p in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 3:
        raise ValueError(f"expected three comma-separated numbers, got '{text}'")
    return tuple(vals)


def _load_config(path):
    from .scene import SceneConfig

    return SceneConfig() if path is None else SceneConfig.load(path)


def _jsonable(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def cmd_gen_mesh(args) -> int:
    from .mesh import ArmParams, generate_arm, write_arm

    overrides = {}
    for item in args.param or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--param expects key=value, got '{item}'")
        overrides[key.strip()] = _parse_value(value.strip())
    params = ArmParams.from_dict({**ArmParams().to_dict(), **overrides})
    geom = generate_arm(params)
    write_arm(geom, args.out)
    print(json.dumps({
        "out": args.out,
        "spa_nodes": geom.spa.n_nodes,
        "spa_tets": len(geom.spa.tets),
        "spine_nodes": geom.spine.n_nodes,
        "spine_tets": len(geom.spine.tets),
        "coupling_pairs": len(geom.coupling),
        "tip": geom.tip.tolist(),
    }, indent=2))
    return EXIT_OK


def cmd_run_periodic(args) -> int:
    from .experiments import run_periodic, write_csv, write_plotdata

    cfg = _load_config(args.config)
    log, report = run_periodic(cfg)
    write_csv(log, args.out)
    if args.plot_dir:
        write_plotdata(log, args.plot_dir, "periodic")
    print(json.dumps(_jsonable(asdict(report)), indent=2))
    return EXIT_OK


def _quadrant_out(path: str, q: int) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}_q{q}{ext or '.csv'}"


def cmd_run_quadrant(args) -> int:
    from .experiments import run_all_quadrants, run_quadrant, write_csv, write_plotdata

    cfg = _load_config(args.config)
    if args.all_quadrants:
        if args.target is not None:
            raise ValueError("--target cannot be combined with --all-quadrants")
        results = run_all_quadrants(cfg, workers=min(4, _threads()))
        outputs = [(q, _quadrant_out(args.out, q), res) for q, res in zip((1, 2, 3, 4), results)]
    else:
        if args.q is None:
            raise ValueError("run quadrant needs --q or --all-quadrants")
        target = _parse_vector(args.target) if args.target is not None else None
        outputs = [(args.q, args.out, run_quadrant(cfg, args.q, target))]
    ok = True
    summary = []
    for q, path, (log, report) in outputs:
        write_csv(log, path)
        if args.plot_dir:
            write_plotdata(log, os.path.join(args.plot_dir, f"q{q}") if len(outputs) > 1 else args.plot_dir, "quadrant")
        summary.append(_jsonable(asdict(report)))
        ok &= report.converged
    print(json.dumps(summary if len(summary) > 1 else summary[0], indent=2))
    if not ok:
        for s in summary:
            if not s["converged"]:
                print(f"quadrant {s['quadrant']}: no convergence within the duration cap, final e_k = {s['final_error']}",
                      file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validation import validate

    report = validate(seed=args.seed, include_dynamics=not args.quick)
    print(report.text())
    if not report.passed:
        print(f"{len(report.failures())} check(s) failed", file=sys.stderr)
        return EXIT_FAIL
    print("all checks passed")
    return EXIT_OK


def cmd_dump_config(args) -> int:
    cfg = _load_config(args.config)
    sys.stdout.write(cfg.dumps())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softarm", description="FEM simulation of a pneumatic soft arm with PI pressure control.")
    p.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mesh", help="generate the parametric arm meshes (spa.tmesh, spine.tmesh)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="override an arm parameter; tuples as comma lists, e.g. cavity_y=0.003,0.011")
    g.set_defaults(func=cmd_gen_mesh)

    r = sub.add_parser("run", help="run an experiment")
    rsub = r.add_subparsers(dest="experiment", required=True)
    rp = rsub.add_parser("periodic", help="open-loop antiphase left/right pressure oscillation")
    rp.add_argument("--config", help="TOML scene config (defaults if omitted)")
    rp.add_argument("--out", required=True, help="CSV log path")
    rp.add_argument("--plot-dir", help="also write per-figure plot data here")
    rp.set_defaults(func=cmd_run_periodic)

    rq = rsub.add_parser("quadrant", help="closed-loop PI run toward a quadrant target")
    rq.add_argument("--q", type=int, choices=(1, 2, 3, 4), help="target quadrant")
    rq.add_argument("--config", help="TOML scene config (defaults if omitted)")
    rq.add_argument("--out", required=True, help="CSV log path (suffixed _q1.._q4 with --all-quadrants)")
    rq.add_argument("--target", help="override target as 'x,y,z' in metres, relative to the rest tip")
    rq.add_argument("--all-quadrants", action="store_true",
                    help="run Q1-Q4 concurrently (worker count bounded by SOFTARM_THREADS)")
    rq.add_argument("--plot-dir", help="also write per-figure plot data here")
    rq.set_defaults(func=cmd_run_quadrant)

    v = sub.add_parser("validate", help="run the numerical self-check suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--quick", action="store_true", help="skip the checks that step the full arm")
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("dump-config", help="print the effective config as TOML")
    d.add_argument("--config", help="TOML scene config to merge over the defaults")
    d.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .mesh import MeshError
    from .scene import ConfigError, SimulationError

    try:
        return args.func(args)
    except (ConfigError, MeshError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
