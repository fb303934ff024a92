"""Cavity pressure loads and the open-loop periodic pressure program."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

log = logging.getLogger(__name__)


def pressure_forces(triangles: np.ndarray, q: np.ndarray, pressure: float, n_nodes: int | None = None) -> Tuple[np.ndarray, int]:
    """Nodal forces of a uniform follower pressure on an oriented triangle set.

    Each triangle pushes ``P * area * normal`` along its winding normal, split
    equally between its three nodes. Returns ``(forces (n, 3), n_degenerate)``;
    zero-area triangles are skipped and counted.
    """
    x = np.asarray(q, dtype=float).reshape(-1, 3)
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    n = len(x) if n_nodes is None else n_nodes
    a, b, c = x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]]
    cross = np.cross(b - a, c - a)  # 2 * area * normal
    degenerate = ~np.any(cross != 0.0, axis=1)
    nd = int(degenerate.sum())
    if nd:
        log.warning("skipped %d zero-area cavity triangles", nd)
    per_node = np.where(degenerate[:, None], 0.0, pressure * cross / 6.0)
    f = np.zeros((n, 3))
    for k in range(3):
        np.add.at(f, tris[:, k], per_node)
    return f, nd


@dataclass
class PressureCavity:
    """A closed cavity surface of one body; triangle normals point from the cavity into the solid."""

    name: str
    triangles: np.ndarray  # global node indices
    body: str = "spa"
    pressure: float = 0.0
    p_max: float = math.inf
    unit: float = 1.0  # Pa per pressure unit
    degenerate_count: int = field(default=0, init=False)

    def set_pressure(self, p: float) -> None:
        self.pressure = min(max(float(p), 0.0), self.p_max)

    def forces(self, q: np.ndarray, n_nodes: int | None = None) -> np.ndarray:
        f, nd = pressure_forces(self.triangles, q, self.pressure * self.unit, n_nodes)
        self.degenerate_count += nd
        return f


@dataclass(frozen=True)
class PeriodicSignalConfig:
    p0: float = 0.65
    amplitude: float = 0.65
    frequency: float = 0.05
    phase: float = 0.0

    def __post_init__(self):
        if self.p0 - self.amplitude < 0:
            raise ValueError("periodic signal would go negative: need p0 >= amplitude")
        if self.amplitude < 0 or self.frequency < 0:
            raise ValueError("amplitude and frequency must be non-negative")


def periodic_pressures(t: float, cfg: PeriodicSignalConfig = PeriodicSignalConfig()) -> Tuple[float, float]:
    """Antiphase left/right pressures; their sum is always 2 * p0."""
    s = cfg.amplitude * math.sin(2.0 * math.pi * cfg.frequency * t + cfg.phase)
    return cfg.p0 + s, cfg.p0 - s


def merge_cavities(p_left: float, p_right: float) -> Tuple[float, float, float, float]:
    """Split merged side pressures over cavities (P1, P2, P3, P4).

    The left pair is (P2, P4) and the right pair (P1, P3); each side pressure
    is the sum of its two equal cavity pressures.
    """
    if p_left < 0 or p_right < 0:
        raise ValueError("side pressures must be non-negative")
    half_l, half_r = 0.5 * p_left, 0.5 * p_right
    return half_r, half_l, half_r, half_l
