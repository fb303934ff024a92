"""Independent reference computations used by the validation suite."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np


def fd_gradient(fun, x: np.ndarray, h_rel: float = 1e-6) -> np.ndarray:
    """Central differences of a batched scalar function ``fun((m, k)) -> (m,)``, per row."""
    x = np.asarray(x, dtype=float)
    h = h_rel * np.maximum(np.abs(x).max(axis=1, keepdims=True), 1e-12)
    g = np.zeros_like(x)
    for j in range(x.shape[1]):
        xp, xm = x.copy(), x.copy()
        xp[:, j] += h[:, 0]
        xm[:, j] -= h[:, 0]
        g[:, j] = (fun(xp) - fun(xm)) / (2 * h[:, 0])
    return g


def fd_jacobian(fun, x: np.ndarray, h_rel: float = 1e-6) -> np.ndarray:
    """Central differences of a batched vector function ``fun((m, k)) -> (m, k)``; returns (m, k, k)."""
    x = np.asarray(x, dtype=float)
    h = h_rel * np.maximum(np.abs(x).max(axis=1, keepdims=True), 1e-12)
    m, k = x.shape
    J = np.zeros((m, k, k))
    for j in range(k):
        xp, xm = x.copy(), x.copy()
        xp[:, j] += h[:, 0]
        xm[:, j] -= h[:, 0]
        J[:, :, j] = (fun(xp) - fun(xm)) / (2 * h)
    return J


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Worst per-row relative error ||a - b|| / ||b||."""
    a = np.asarray(a).reshape(len(a), -1)
    b = np.asarray(b).reshape(len(b), -1)
    num = np.linalg.norm(a - b, axis=1)
    den = np.maximum(np.linalg.norm(b, axis=1), 1e-300)
    return float(np.max(num / den))


def surface_area(x: np.ndarray, tris: np.ndarray) -> float:
    p = x[tris]
    return float(0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum())


def enclosed_volume(x: np.ndarray, tris: np.ndarray) -> float:
    """Signed volume bounded by a closed triangle surface (positive for outward winding)."""
    p = x[tris]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


def synthetic_trajectory(rng: np.random.Generator, n: int, target: Sequence[float]) -> np.ndarray:
    """A tip path that approaches ``target`` with noise, crossing the deadband in both directions."""
    target = np.asarray(target, dtype=float)
    s = 1.0 - np.exp(-np.linspace(0.0, 6.0, n))
    wobble = 0.004 * np.sin(np.linspace(0.0, 25.0, n))[:, None] * np.array([0.2, 1.0, -0.7])
    return s[:, None] * target + wobble + 0.0005 * rng.standard_normal((n, 3))


_ROWS = ((1.0, -1.0, -1.0), (1.0, 1.0, -1.0), (1.0, -1.0, 1.0), (1.0, 1.0, 1.0))


def controller_reference(p_star, p, integral: float, pressures: List[float], cfg) -> Tuple[float, List[float], float, float]:
    """Scalar, loop-by-loop evaluation of the PI pressure update. Returns (I, P, e_k, u_k)."""
    e = [(float(p_star[i]) - float(p[i])) / cfg.length_unit for i in range(3)]
    delta = cfg.deadband * cfg.deadband_unit / cfg.length_unit
    d = []
    for row in _ROWS:
        di = row[0] * e[0] + row[1] * e[1] + row[2] * e[2]
        d.append(0.0 if abs(di) < delta else di)
    e_k = sum(di * di for di in d) ** 0.5
    I_new = integral + e_k * cfg.dt
    u = cfg.kp * e_k + cfg.ki * I_new
    alpha = sum(abs(di) for di in d)
    dP = [u * di / alpha if alpha > 0 else 0.0 for di in d]
    if cfg.anti_windup and any(pressures[i] >= cfg.p_max and dP[i] > 0 for i in range(4)):
        I_new = integral
        u = cfg.kp * e_k + cfg.ki * I_new
        dP = [u * di / alpha if alpha > 0 else 0.0 for di in d]
    out = [min(max(pressures[i] + dP[i], cfg.p_min), cfg.p_max) for i in range(4)]
    return I_new, out, e_k, u


def free_fall_step(q, v, dt: float, alpha: float, g):
    """Backward Euler for m a = m g - alpha m v: v' = (v + dt g) / (1 + dt alpha), q' = q + dt v'."""
    v_new = (v + dt * g) / (1.0 + dt * alpha)
    return q + dt * v_new, v_new
