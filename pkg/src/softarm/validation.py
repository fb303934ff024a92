"""Numerical self-checks run by ``softarm validate``.

Every check compares a production code path against an independent oracle
(finite differences, a closed-form recursion, a straight-line re-derivation)
and records the measured value next to its tolerance. Two hooks allow fault
injection: ``pressure_fn`` replaces the cavity load function and
``snh_tangent`` replaces the Stable Neo-Hookean stress derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import oracles
from .actuation import pressure_forces
from .controller import ControllerConfig, ControllerState, controller_step
from .dynamics import Body, ConstraintSet, IntegratorConfig, MassModel, MechanicalState, System, step
from .experiments import format_csv, run_periodic
from .materials import (
    ElementBasis,
    LinearElasticParams,
    StableNeoHookeanParams,
    element_energy,
    element_forces,
    element_stiffness,
    snh_energy_density,
    snh_first_piola,
)
from .mesh import ArmParams, TetMesh, generate_arm
from .scene import SceneConfig, build_scene


@dataclass
class CheckResult:
    module: str
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.module}.{self.name}: {self.value:.3e} (tol {self.tolerance:.1e})"


@dataclass
class ValidationReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, module, name, value, tol, passed=None) -> CheckResult:
        value = float(value)
        ok = bool(value <= tol) if passed is None else bool(passed)
        if math.isnan(value):
            ok = False
        c = CheckResult(module, name, value, tol, ok)
        self.checks.append(c)
        return c

    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def text(self) -> str:
        return "\n".join(c.line() for c in self.checks)


class _TangentOverride:
    """SNH material whose stress derivative comes from a user function."""

    def __init__(self, params: StableNeoHookeanParams, tangent: Callable):
        self.params = params
        self.tangent = tangent

    def energy_density(self, F):
        return snh_energy_density(F, self.params)

    def stress(self, F):
        return snh_first_piola(F, self.params)

    def stress_derivative(self, F):
        return self.tangent(F, self.params)


def random_elements(rng: np.random.Generator, m: int, noise: float = 0.25):
    """Well-shaped random rest tets and deformed copies with F = I + noise, det F >= 0.2."""
    base = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    rest = base[None] + 0.15 * rng.standard_normal((m, 4, 3))
    rest *= 0.01
    F = np.eye(3)[None] + noise * rng.standard_normal((m, 3, 3))
    bad = np.linalg.det(F) < 0.2
    while bad.any():
        F[bad] = np.eye(3) + noise * rng.standard_normal((int(bad.sum()), 3, 3))
        bad = np.linalg.det(F) < 0.2
    x = np.einsum("mij,maj->mai", F, rest) + 0.001 * rng.standard_normal((m, 1, 3))
    return rest, x


def _gradient_check(material, rest, x, h_rel=1e-6):
    basis = ElementBasis.from_rest(rest)
    f = element_forces(basis, x, material).reshape(len(x), 12)
    fd = oracles.fd_gradient(lambda y: element_energy(basis, y.reshape(-1, 4, 3), material), x.reshape(len(x), 12), h_rel)
    return oracles.rel_error(f, -fd)


def _tangent_check(material, rest, x, h_rel=1e-6):
    basis = ElementBasis.from_rest(rest)
    K = element_stiffness(basis, x, material)
    fd = oracles.fd_jacobian(lambda y: -element_forces(basis, y.reshape(-1, 4, 3), material).reshape(len(y), 12), x.reshape(len(x), 12), h_rel)
    return oracles.rel_error(K, fd)


def bent_configuration(vertices: np.ndarray, length: float, angle: float = 0.6, axis: int = 1) -> np.ndarray:
    """Map the straight arm onto a circular arc of total angle ``angle`` bending toward ``axis``."""
    x = vertices[:, 0]
    off = vertices[:, axis]
    R = length / angle
    th = x / R
    out = vertices.copy()
    out[:, 0] = (R - off) * np.sin(th)
    out[:, axis] = R - (R - off) * np.cos(th)
    return out


def validate(
    pressure_fn: Optional[Callable] = None,
    snh_tangent: Optional[Callable] = None,
    seed: int = 0,
    n_random: int = 20,
    include_dynamics: bool = True,
) -> ValidationReport:
    rep = ValidationReport()
    rng = np.random.default_rng(seed)
    pressure_fn = pressure_forces if pressure_fn is None else pressure_fn

    # materials: forces vs energy, tangent vs forces
    snh = StableNeoHookeanParams(0.24203e6, 0.24203e6)
    snh_t = snh if snh_tangent is None else _TangentOverride(snh, snh_tangent)
    lin = LinearElasticParams(75e6, 0.45)
    rest, x = random_elements(rng, n_random)
    rep.add("materials", "snh_force_fd", _gradient_check(snh, rest, x), 1e-4)
    rep.add("materials", "snh_tangent_fd", _tangent_check(snh_t, rest, x), 1e-3)
    rest, x = random_elements(rng, n_random)
    rep.add("materials", "linear_force_fd", _gradient_check(lin, rest, x), 1e-4)
    rep.add("materials", "linear_tangent_fd", _tangent_check(lin, rest, x), 1e-3)

    # actuation: closure and orientation of every cavity, straight and bent
    geom = generate_arm(ArmParams())
    spa = geom.spa
    L = geom.params.length
    P = 1.0
    worst_f = worst_m = worst_o = 0.0
    for q in (spa.vertices, bent_configuration(spa.vertices, L)):
        for name in geom.cavities:
            tris = spa.tri_group(name).triangles
            f, _ = pressure_fn(tris, q, P, spa.n_nodes)
            area = oracles.surface_area(q, tris)
            net_f = np.linalg.norm(f.sum(axis=0)) / (P * area)
            net_m = np.linalg.norm(np.cross(q, f).sum(axis=0)) / (P * area * L)
            vol = oracles.enclosed_volume(q, tris)
            c = q[np.unique(tris)].mean(axis=0)
            work = float(np.sum(f * (q - c)))  # equals 3 P V for an outward-oriented closed surface
            worst_f, worst_m = max(worst_f, net_f), max(worst_m, net_m)
            orient_err = abs(work - 3 * P * vol) / (3 * P * abs(vol)) if vol > 0 else math.inf
            worst_o = max(worst_o, orient_err)
    rep.add("actuation", "cavity_net_force", worst_f, 1e-12)
    rep.add("actuation", "cavity_net_torque", worst_m, 1e-12)
    rep.add("actuation", "cavity_orientation", worst_o, 1e-9)

    # controller: 500 steps against the straight-line reimplementation
    cfg = ControllerConfig()
    target = np.array([0.0, 0.015, 0.010])
    traj = oracles.synthetic_trajectory(rng, 500, target)
    st = ControllerState()
    I_ref, P_ref = 0.0, [0.0] * 4
    worst = 0.0
    for p in traj:
        st = controller_step(target, p, st, cfg)
        I_ref, P_ref, _, _ = oracles.controller_reference(target, p, I_ref, P_ref, cfg)
        worst = max(worst, abs(st.integral - I_ref), float(np.max(np.abs(st.pressures - np.array(P_ref)))))
    rep.add("controller", "reference_chain", worst, 1e-12)

    # dynamics: free point mass against the closed-form recursion
    integ = IntegratorConfig()
    rep.add("dynamics", "free_fall_recursion", free_fall_error(integ, 1000), 1e-12)

    if include_dynamics:
        cfg = SceneConfig(duration=1.0, log_stride=5)
        scene = build_scene(cfg)
        for _ in range(100):
            scene.actuate()
            scene.advance()
        rep.add("dynamics", "fixed_drift", scene.max_drift, 1e-10)
        rep.add("dynamics", "bilateral_gap", scene.max_gap, 1e-6)
        short = replace(cfg, duration=0.2)
        a = format_csv(run_periodic(short)[0])
        b = format_csv(run_periodic(short)[0])
        rep.add("scene", "determinism", 0.0 if a == b else 1.0, 0.0)
    return rep


def free_fall_error(integ: IntegratorConfig, n_steps: int, mass: float = 0.3) -> float:
    """Max relative deviation of a free point mass from the implicit-Euler recursion."""
    mesh = TetMesh(np.zeros((1, 3)), np.zeros((0, 4), dtype=np.int64))
    system = System([Body("point", mesh, None, MassModel(np.array([mass]), 0.0))])
    state = MechanicalState(np.zeros(3), np.zeros(3))
    q_ref, v_ref = np.zeros(3), np.zeros(3)
    worst = 0.0
    for _ in range(n_steps):
        state, _ = step(state, system, ConstraintSet(), integ)
        q_ref, v_ref = oracles.free_fall_step(q_ref, v_ref, integ.dt, integ.rayleigh_mass, np.array(integ.gravity))
        worst = max(worst, float(np.max(np.abs(state.q - q_ref) / np.maximum(1.0, np.abs(q_ref)))),
                    float(np.max(np.abs(state.v - v_ref) / np.maximum(1.0, np.abs(v_ref)))))
    return worst
