"""Error-based PI cavity pressure controller.

Chain per control step: Cartesian tip error -> four cavity demands -> deadband
-> scalar error (2-norm) -> PI magnitude -> signed L1 distribution -> clipped
pressure update. Errors enter the chain in a configurable working length unit
because the gains are only meaningful relative to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np

# rows: cavities P1..P4, columns: (e_x, e_y, e_z)
DEMAND_MATRIX = np.array(
    [
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
    ]
)


@dataclass(frozen=True)
class ControllerConfig:
    kp: float = 2e-6
    ki: float = 2e-8
    deadband: float = 0.05
    p_min: float = 0.0
    p_max: float = 1.3
    dt: float = 0.01
    length_unit: float = 1e-5  # metres per working unit of the error fed to the gains
    deadband_unit: float = 1e-2  # metres per unit of ``deadband``
    anti_windup: bool = True

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0:
            raise ValueError("controller gains must be non-negative")
        if self.deadband < 0:
            raise ValueError("deadband must be non-negative")
        if not self.p_min < self.p_max:
            raise ValueError("need p_min < p_max")
        if not self.dt > 0 or not self.length_unit > 0 or not self.deadband_unit > 0:
            raise ValueError("dt and units must be positive")

    @property
    def deadband_working(self) -> float:
        """Deadband expressed in the working length unit."""
        return self.deadband * self.deadband_unit / self.length_unit


@dataclass(frozen=True)
class ControllerState:
    integral: float = 0.0
    pressures: np.ndarray = field(default_factory=lambda: np.zeros(4))
    e_k: float = 0.0
    u_k: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pressures", np.asarray(self.pressures, dtype=float).reshape(4).copy())


def tracking_error(p_star, p) -> np.ndarray:
    return np.asarray(p_star, dtype=float) - np.asarray(p, dtype=float)


def demand(e) -> np.ndarray:
    return DEMAND_MATRIX @ np.asarray(e, dtype=float)


def apply_deadband(d, delta: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return np.where(np.abs(d) < delta, 0.0, d)


def scalar_error(d_tilde) -> float:
    return float(np.sqrt(np.sum(np.square(d_tilde))))


def pi_update(integral: float, e_k: float, cfg: ControllerConfig) -> Tuple[float, float]:
    """Returns (new integral, u_k); the integral is updated before the output."""
    integral = integral + e_k * cfg.dt
    return integral, cfg.kp * e_k + cfg.ki * integral


def distribute(u_k: float, d_tilde) -> np.ndarray:
    d_tilde = np.asarray(d_tilde, dtype=float)
    alpha = float(np.sum(np.abs(d_tilde)))
    if alpha > 0:
        return u_k * (d_tilde / alpha)
    return np.zeros_like(d_tilde)


def clip_pressures(P, dP, cfg: ControllerConfig) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(P, dtype=float) + np.asarray(dP, dtype=float), cfg.p_min), cfg.p_max)


def controller_step(p_star, p_tip, state: ControllerState, cfg: ControllerConfig) -> ControllerState:
    """One control update; ``p_star`` and ``p_tip`` are in metres, in the same frame."""
    e = tracking_error(p_star, p_tip) / cfg.length_unit
    d = apply_deadband(demand(e), cfg.deadband_working)
    e_k = scalar_error(d)
    integral, u_k = pi_update(state.integral, e_k, cfg)
    dP = distribute(u_k, d)
    if cfg.anti_windup and np.any((state.pressures >= cfg.p_max) & (dP > 0)):
        # hold the integral while a saturated cavity is still being pushed up
        integral = state.integral
        u_k = cfg.kp * e_k + cfg.ki * integral
        dP = distribute(u_k, d)
    return replace(state, integral=integral, pressures=clip_pressures(state.pressures, dP, cfg), e_k=e_k, u_k=u_k)
