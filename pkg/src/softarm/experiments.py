"""Experiment harness: periodic actuation, four-quadrant PI control, CSV logs and plot data."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import find_peaks

from .scene import ConfigError, Record, SceneConfig, build_scene, quadrant_target

CSV_HEADER = ("t", "P1", "P2", "P3", "P4", "tip_x", "tip_y", "tip_z", "e_k", "u_k")


class ConvergenceError(RuntimeError):
    """A run ended without meeting its stop criterion."""


@dataclass
class TrajectoryLog:
    """Logged rows ``(t, P1..P4, tip_x, tip_y, tip_z, e_k, u_k)``; controller cells are None when unused."""

    rows: List[tuple] = field(default_factory=list)

    def append(self, rec: Record) -> None:
        self.rows.append((rec.t, *map(float, rec.pressures), *map(float, rec.tip), rec.e_k, rec.u_k))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = CSV_HEADER.index(name)
        return np.array([np.nan if r[i] is None else r[i] for r in self.rows], dtype=float)

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    @property
    def pressures(self) -> np.ndarray:
        return np.stack([self.column(f"P{i}") for i in range(1, 5)], axis=1) if self.rows else np.zeros((0, 4))

    @property
    def tip(self) -> np.ndarray:
        return np.stack([self.column(c) for c in ("tip_x", "tip_y", "tip_z")], axis=1) if self.rows else np.zeros((0, 3))


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def format_csv(log: TrajectoryLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in log.rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(log: TrajectoryLog, path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(format_csv(log))


def parse_csv(text: str) -> TrajectoryLog:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} cells, got {len(rec)}")
        rows.append(tuple(None if c == "" else float(c) for c in rec))
    return TrajectoryLog(rows)


def read_csv(path) -> TrajectoryLog:
    with open(path, encoding="ascii") as fh:
        return parse_csv(fh.read())


def write_plotdata(log: TrajectoryLog, out_dir, kind: str) -> List[str]:
    """Plot-ready column extracts: ``periodic`` -> periodic_plot.csv, ``quadrant`` -> pressures and error tables."""
    os.makedirs(out_dir, exist_ok=True)
    t, P, tip = log.t, log.pressures, log.tip
    if kind == "periodic":
        tables = {
            "periodic_plot.csv": (
                ("t", "P_left", "P_right", "tip_x", "tip_y", "tip_z"),
                [t, P[:, 1] + P[:, 3], P[:, 0] + P[:, 2], tip[:, 0], tip[:, 1], tip[:, 2]],
            )
        }
    elif kind == "quadrant":
        tables = {
            "quadrant_pressures.csv": (("t", "P1", "P2", "P3", "P4"), [t, *P.T]),
            "quadrant_error.csv": (("t", "e_k"), [t, log.column("e_k")]),
        }
    else:
        raise ValueError(f"unknown plot kind '{kind}'")
    written = []
    for name, (header, cols) in tables.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="ascii", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])
        written.append(path)
    return written


# --------------------------------------------------------------------------- periodic


@dataclass
class PeriodicReport:
    delta_x: float  # peak-to-peak tip displacement [m]
    delta_y: float
    delta_z: float
    period: float  # dominant period of tip_y [s], nan if undetermined
    p_left_range: Tuple[float, float]
    p_right_range: Tuple[float, float]
    steps: int
    runtime: float
    max_gap: float
    max_drift: float


def dominant_period(t: np.ndarray, y: np.ndarray, prominence: float = 0.25) -> float:
    """Mean spacing of successive maxima and of successive minima of ``y``.

    Extrema must stand out by ``prominence`` times the peak-to-peak range and
    are refined by a parabola through the three samples around them. Endpoints
    never count, so a start-up transient does not shift the estimate.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    span = float(np.ptp(y)) if len(y) else 0.0
    if span == 0.0 or len(y) < 3:
        return math.nan
    spacings = []
    for sig in (y, -y):
        idx, _ = find_peaks(sig, prominence=prominence * span)
        if len(idx) < 2:
            continue
        a, b, c = sig[idx - 1], sig[idx], sig[idx + 1]
        curv = a - 2 * b + c
        shift = np.where(curv != 0, 0.5 * (a - c) / np.where(curv != 0, curv, 1.0), 0.0)
        tp = t[idx] + shift * (t[idx + 1] - t[idx - 1]) / 2
        spacings.extend(np.diff(tp))
    return float(np.mean(spacings)) if spacings else math.nan


def run_periodic(cfg: SceneConfig) -> Tuple[TrajectoryLog, PeriodicReport]:
    if cfg.mode != "periodic":
        cfg = replace(cfg, mode="periodic")
    start = time.perf_counter()
    scene = build_scene(cfg)
    log = TrajectoryLog()
    n, stride = cfg.n_steps, cfg.log_stride
    for k in range(n + 1):
        rec = scene.actuate()
        if k % stride == 0:
            log.append(rec)
        if k == n:
            break
        scene.advance()
    P, tip = log.pressures, log.tip
    left, right = P[:, 1] + P[:, 3], P[:, 0] + P[:, 2]
    ptp = np.ptp(tip, axis=0)
    report = PeriodicReport(
        float(ptp[0]), float(ptp[1]), float(ptp[2]),
        dominant_period(log.t, tip[:, 1]),
        (float(left.min()), float(left.max())),
        (float(right.min()), float(right.max())),
        n, time.perf_counter() - start, scene.max_gap, scene.max_drift,
    )
    return log, report


# --------------------------------------------------------------------------- quadrant


@dataclass
class QuadrantReport:
    quadrant: Optional[int]
    target: Tuple[float, float, float]
    final_tip: Tuple[float, float, float]
    final_pressures: Tuple[float, float, float, float]
    initial_error: float  # e_k at t = 0, working units
    final_error: float
    settling_time: float  # [s], nan if the tip never settled
    converged: bool
    reason: str  # "error", "settled" or "duration"
    steps: int
    runtime: float
    max_gap: float
    max_drift: float
    pressure_bounds: Tuple[float, float]  # min and max cavity pressure over every step


def settling_time(t: np.ndarray, tip: np.ndarray, band: float) -> float:
    """First time after which the tip stays within ``band`` of its final position."""
    if len(t) == 0:
        return math.nan
    dist = np.linalg.norm(tip - tip[-1], axis=1)
    outside = np.flatnonzero(dist > band)
    if len(outside) == 0:
        return float(t[0])
    if outside[-1] == len(t) - 1:
        return math.nan
    return float(t[outside[-1] + 1])


def run_quadrant(cfg: SceneConfig, quadrant: Optional[int] = None, target=None) -> Tuple[TrajectoryLog, QuadrantReport]:
    """Closed-loop run toward ``target`` (metres, relative to the rest tip) or the quadrant default.

    Stops at a log row when e_k drops below the stop error, or when the
    pressures have not changed for ``settle_time`` (every remaining demand is
    blocked by a pressure bound), or at the duration cap.
    """
    if target is None:
        target = quadrant_target(quadrant) if quadrant is not None else cfg.target
    cfg = replace(cfg, mode="controller", target=tuple(float(x) for x in target))
    start = time.perf_counter()
    scene = build_scene(cfg)
    stop = cfg.controller.deadband_working if cfg.stop_error is None else cfg.stop_error
    settle_steps = max(1, int(round(cfg.settle_time / cfg.integrator.dt)))
    log = TrajectoryLog()
    n, stride = cfg.n_steps, cfg.log_stride
    unchanged = 0
    prev = None
    p_lo, p_hi = math.inf, -math.inf
    reason = "duration"
    initial_error = math.nan
    for k in range(n + 1):
        rec = scene.actuate()
        p_lo, p_hi = min(p_lo, rec.pressures.min()), max(p_hi, rec.pressures.max())
        unchanged = unchanged + 1 if prev is not None and np.array_equal(rec.pressures, prev) else 0
        prev = rec.pressures
        if k == 0:
            initial_error = rec.e_k
        if k % stride == 0 or k == n:
            log.append(rec)
            if rec.e_k < stop:
                reason = "error"
                break
            if unchanged >= settle_steps:
                reason = "settled"
                break
        if k == n:
            break
        scene.advance()
    tip = log.tip
    span = max(float(np.linalg.norm(cfg.target)), cfg.controller.deadband_working * cfg.controller.length_unit)
    report = QuadrantReport(
        quadrant,
        cfg.target,
        tuple(float(x) for x in tip[-1]),
        tuple(float(x) for x in log.pressures[-1]),
        float(initial_error),
        float(log.rows[-1][8]),
        settling_time(log.t, tip, 0.02 * span),
        reason != "duration",
        reason,
        scene.step_count,
        time.perf_counter() - start,
        scene.max_gap,
        scene.max_drift,
        (float(p_lo), float(p_hi)),
    )
    return log, report


def _quadrant_job(args):
    cfg, q, target = args
    return run_quadrant(cfg, q, target)


def run_all_quadrants(cfg: SceneConfig, workers: int = 1, quadrants: Sequence[int] = (1, 2, 3, 4)):
    """Independent quadrant runs, optionally in separate processes. Returns results in quadrant order."""
    jobs = [(cfg, q, None) for q in quadrants]
    if workers <= 1:
        return [_quadrant_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_quadrant_job, jobs))
