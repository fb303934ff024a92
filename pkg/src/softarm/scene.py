"""Scene configuration, assembly of the arm and the per-step animation loop.

Cavity pressures are handled as dimensionless signal values; ``pressure_unit``
converts them to pascals when the surface loads are applied. Materials,
densities and gravity are in SI units.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .actuation import PeriodicSignalConfig, PressureCavity, merge_cavities, periodic_pressures
from .controller import ControllerConfig, ControllerState, controller_step
from .dynamics import (
    Body,
    ConstrainedSolver,
    ConstraintSet,
    IntegratorConfig,
    LinearSolveError,
    MechanicalState,
    StepInfo,
    System,
    lump_mass,
    step,
)
from .materials import LinearElasticParams, StableNeoHookeanParams
from .mesh import (
    CAVITY_NAMES,
    ArmParams,
    BarycentricMap,
    MeshError,
    TetMesh,
    apply_map,
    build_barycentric_map,
    generate_arm,
    load_mesh,
)


class ConfigError(ValueError):
    """Invalid or inconsistent scene configuration."""


class SimulationError(RuntimeError):
    """A time step failed; the message carries the step index."""


# quadrant -> (sign_y, sign_z) of the target; cavity Pi has the largest demand in quadrant Qi
QUADRANT_SIGNS = {1: (-1, -1), 2: (1, -1), 3: (-1, 1), 4: (1, 1)}
TARGET_MAGNITUDE = (0.0, 0.015, 0.010)


def quadrant_target(quadrant: int, magnitude=TARGET_MAGNITUDE) -> Tuple[float, float, float]:
    if quadrant not in QUADRANT_SIGNS:
        raise ConfigError(f"quadrant must be 1..4, got {quadrant}")
    sy, sz = QUADRANT_SIGNS[quadrant]
    return (float(magnitude[0]), sy * abs(magnitude[1]), sz * abs(magnitude[2]))


@dataclass
class MaterialConfig:
    model: str
    density: float
    mu: Optional[float] = None
    lam: Optional[float] = None
    lambda_is_lame: bool = True
    youngs: Optional[float] = None
    poisson: Optional[float] = None

    def to_dict(self) -> dict:
        keys = {"stable_neohookean": ("mu", "lam", "lambda_is_lame"), "linear_elastic": ("youngs", "poisson")}
        d = {"model": self.model, "density": self.density}
        d.update({k: getattr(self, k) for k in keys.get(self.model, ()) if getattr(self, k) is not None})
        return d

    def build(self):
        if self.model == "stable_neohookean":
            if self.mu is None or self.lam is None:
                raise ConfigError("stable_neohookean material needs mu and lam")
            # the energy's lambda equals Lame lambda + mu when linearized at rest
            lam = self.lam + self.mu if self.lambda_is_lame else self.lam
            return StableNeoHookeanParams(self.mu, lam)
        if self.model == "linear_elastic":
            if self.youngs is None or self.poisson is None:
                raise ConfigError("linear_elastic material needs youngs and poisson")
            return LinearElasticParams(self.youngs, self.poisson)
        raise ConfigError(f"unknown material model '{self.model}'")


def _default_spa():
    return MaterialConfig("stable_neohookean", density=1080.0, mu=0.24203e6, lam=0.0)


def _default_spine():
    return MaterialConfig("linear_elastic", density=1150.0, youngs=75e6, poisson=0.45)


@dataclass
class SceneConfig:
    arm: ArmParams = field(default_factory=ArmParams)
    spa_mesh: Optional[str] = None
    spine_mesh: Optional[str] = None
    tip: Optional[Tuple[float, float, float]] = None
    spa: MaterialConfig = field(default_factory=_default_spa)
    spine: MaterialConfig = field(default_factory=_default_spine)
    pressure_unit: float = 1.25e5  # Pa per unit of the (dimensionless) cavity pressure signal
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    mode: str = "periodic"
    periodic: PeriodicSignalConfig = field(default_factory=PeriodicSignalConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    target: Tuple[float, float, float] = quadrant_target(1)
    stop_error: Optional[float] = None  # working units; None means the deadband
    settle_time: float = 1.0  # [s] unchanged pressures for this long also end a quadrant run
    duration: float = 40.0
    log_stride: int = 10

    def __post_init__(self):
        if self.mode not in ("periodic", "controller", "none"):
            raise ConfigError(f"unknown actuation mode '{self.mode}'")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not self.settle_time > 0:
            raise ConfigError("settle_time must be positive")
        if self.log_stride < 1:
            raise ConfigError("log_stride must be >= 1")
        if not self.pressure_unit > 0:
            raise ConfigError("pressure_unit must be positive")
        if (self.spa_mesh is None) != (self.spine_mesh is None):
            raise ConfigError("spa_mesh and spine_mesh must be given together")
        self.target = tuple(float(x) for x in self.target)
        if self.controller.dt != self.integrator.dt:
            self.controller = replace(self.controller, dt=self.integrator.dt)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.integrator.dt))

    # ------------------------------------------------------------------ (de)serialization

    def to_dict(self) -> dict:
        geometry = {"source": "files", "spa_mesh": self.spa_mesh, "spine_mesh": self.spine_mesh}
        if self.spa_mesh is None:
            geometry = {"source": "generate", **self.arm.to_dict()}
        if self.tip is not None:
            geometry["tip"] = list(self.tip)

        def clean(d):
            return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}

        ctrl = clean(asdict(self.controller))
        ctrl.pop("dt")
        ctrl["target"] = list(self.target)
        if self.stop_error is not None:
            ctrl["stop_error"] = self.stop_error
        ctrl["settle_time"] = self.settle_time
        return {
            "geometry": geometry,
            "materials": {
                "pressure_unit": self.pressure_unit,
                "spa": self.spa.to_dict(),
                "spine": self.spine.to_dict(),
            },
            "integrator": clean(asdict(self.integrator)),
            "actuation": {"mode": self.mode, "periodic": clean(asdict(self.periodic)), "controller": ctrl},
            "run": {"duration": self.duration, "log_stride": self.log_stride},
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "SceneConfig":
        d = dict(d)
        unknown = set(d) - {"geometry", "materials", "integrator", "actuation", "run"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kw = {}
        try:
            geo = dict(d.get("geometry", {}))
            source = geo.pop("source", "generate")
            if "tip" in geo:
                kw["tip"] = tuple(geo.pop("tip"))
            if source == "generate":
                kw["arm"] = ArmParams.from_dict(geo)
            elif source == "files":
                for key in ("spa_mesh", "spine_mesh"):
                    if key not in geo:
                        raise ConfigError(f"geometry source 'files' needs {key}")
                    kw[key] = os.path.join(base_dir, geo.pop(key))
                if geo:
                    raise ConfigError(f"unknown geometry key(s): {', '.join(sorted(geo))}")
            else:
                raise ConfigError(f"unknown geometry source '{source}'")

            mat = dict(d.get("materials", {}))
            if "pressure_unit" in mat:
                kw["pressure_unit"] = float(mat.pop("pressure_unit"))
            for key in ("spa", "spine"):
                if key in mat:
                    kw[key] = _build(MaterialConfig, mat.pop(key), f"materials.{key}")
            if mat:
                raise ConfigError(f"unknown materials key(s): {', '.join(sorted(mat))}")

            if "integrator" in d:
                integ = dict(d["integrator"])
                if "gravity" in integ:
                    integ["gravity"] = tuple(integ["gravity"])
                kw["integrator"] = _build(IntegratorConfig, integ, "integrator")

            act = dict(d.get("actuation", {}))
            if "mode" in act:
                kw["mode"] = act.pop("mode")
            if "periodic" in act:
                kw["periodic"] = _build(PeriodicSignalConfig, act.pop("periodic"), "actuation.periodic")
            if "controller" in act:
                ctrl = dict(act.pop("controller"))
                if "target" in ctrl:
                    kw["target"] = tuple(ctrl.pop("target"))
                for key in ("stop_error", "settle_time"):
                    if key in ctrl:
                        kw[key] = float(ctrl.pop(key))
                dt = kw["integrator"].dt if "integrator" in kw else IntegratorConfig().dt
                kw["controller"] = _build(ControllerConfig, {**ctrl, "dt": dt}, "actuation.controller")
            if act:
                raise ConfigError(f"unknown actuation key(s): {', '.join(sorted(act))}")

            run = dict(d.get("run", {}))
            for key in ("duration", "log_stride"):
                if key in run:
                    kw[key] = run.pop(key)
            if run:
                raise ConfigError(f"unknown run key(s): {', '.join(sorted(run))}")
            return cls(**kw)
        except ConfigError:
            raise
        except (ValueError, TypeError, MeshError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def load(cls, path) -> "SceneConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def _build(klass, d, where):
    names = {f.name for f in fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return klass(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


# --------------------------------------------------------------------------- scene


@dataclass
class Record:
    t: float
    pressures: np.ndarray
    tip: np.ndarray  # displacement from the rest tip [m]
    e_k: Optional[float]
    u_k: Optional[float]


class Scene:
    """A single soft arm: actuator and spine bodies, constraints, cavities, tip marker."""

    def __init__(self, cfg: SceneConfig, spa: TetMesh, spine: TetMesh, coupling: np.ndarray, tip_point):
        self.cfg = cfg
        try:
            spa_mat = cfg.spa.build()
            spine_mat = cfg.spine.build()
        except ValueError as exc:
            raise ConfigError(f"material: {exc}") from exc
        bodies = [
            Body("spa", spa, spa_mat, lump_mass(spa, cfg.spa.density)),
            Body("spine", spine, spine_mat, lump_mass(spine, cfg.spine.density)),
        ]
        self.system = System(bodies)
        off = self.system.body("spine").offset
        self.rest_q = self.system.rest_positions()
        fixed = np.concatenate([spa.node_group("fixed").nodes, spine.node_group("fixed").nodes + off])
        if len(fixed) == 0:
            raise ConfigError("no fixed nodes: the arm would be unconstrained")
        pairs = np.stack([coupling[:, 0], coupling[:, 1] + off], axis=1)
        self.constraints = ConstraintSet(fixed, self.rest_q.reshape(-1, 3)[fixed], pairs)
        ic = cfg.integrator
        self.solver = ConstrainedSolver(self.system.n_dofs, self.constraints, ic.solver, ic.tol, ic.max_iter)

        self.cavities: List[PressureCavity] = []
        for name in CAVITY_NAMES:
            group = spa.groups.get(f"cavity_{name}")
            if group is None or not hasattr(group, "triangles"):
                raise ConfigError(f"missing cavity group 'cavity_{name}' in actuator mesh")
            if not group.closed:
                raise ConfigError(f"cavity group 'cavity_{name}' is not a closed surface")
            self.cavities.append(PressureCavity(name, group.triangles, "spa", 0.0, cfg.controller.p_max, cfg.pressure_unit))

        self.tip_body, self.tip_map = self._tip_map(np.asarray(tip_point, dtype=float))
        self.state = MechanicalState(self.rest_q.copy(), np.zeros_like(self.rest_q))
        self.rest_tip = self.tip_absolute()
        self.step_count = 0
        self.controller: Optional[ControllerState] = None
        self.last_info: Optional[StepInfo] = None
        self.max_gap = 0.0
        self.max_drift = 0.0
        if cfg.mode == "controller":
            self.controller = ControllerState()
        if cfg.mode == "periodic":
            self._set_pressures(merge_cavities(*periodic_pressures(0.0, cfg.periodic)))

    def _tip_map(self, point) -> Tuple[str, BarycentricMap]:
        for body in self.system.bodies:
            try:
                return body.name, build_barycentric_map(body.mesh, body.mesh.vertices, point[None, :])
            except MeshError:
                continue
        raise ConfigError(f"tip point {point.tolist()} is not inside any body")

    @property
    def time(self) -> float:
        return self.step_count * self.cfg.integrator.dt

    @property
    def pressures(self) -> np.ndarray:
        return np.array([c.pressure for c in self.cavities])

    def _set_pressures(self, p) -> None:
        for cav, value in zip(self.cavities, p):
            cav.set_pressure(value)

    def tip_absolute(self, q=None) -> np.ndarray:
        q = self.state.q if q is None else q
        sl = self.system.body_slice(self.tip_body)
        return apply_map(self.tip_map, q[sl])[0]

    def tip_position(self) -> np.ndarray:
        """Tip displacement from the rest tip, in the controller frame."""
        return self.tip_absolute() - self.rest_tip

    def actuate(self) -> Record:
        """Evaluate the actuation for the current (pre-step) state and return its log record."""
        tip = self.tip_position()
        e_k = u_k = None
        if self.cfg.mode == "periodic":
            self._set_pressures(merge_cavities(*periodic_pressures(self.time, self.cfg.periodic)))
        elif self.cfg.mode == "controller":
            self.controller = controller_step(np.asarray(self.cfg.target), tip, self.controller, self.cfg.controller)
            self._set_pressures(self.controller.pressures)
            e_k, u_k = self.controller.e_k, self.controller.u_k
        return Record(self.time, self.pressures, tip, e_k, u_k)

    def loads(self) -> np.ndarray:
        n = self.system.n_nodes
        f = np.zeros((n, 3))
        for cav in self.cavities:
            if cav.pressure != 0.0:
                f += cav.forces(self.state.q, n)
        return f.reshape(-1)

    def advance(self) -> StepInfo:
        """Assemble, solve and update the mechanical state by one time step."""
        try:
            self.state, info = step(self.state, self.system, self.constraints, self.cfg.integrator, self.loads(), self.solver)
        except (LinearSolveError, ValueError) as exc:
            raise SimulationError(f"step {self.step_count} (t = {self.time:g} s): {exc}") from exc
        self.step_count += 1
        self.last_info = info
        self.max_gap = max(self.max_gap, info.max_gap)
        self.max_drift = max(self.max_drift, info.max_drift)
        return info


def build_scene(cfg: SceneConfig) -> Scene:
    if cfg.spa_mesh is not None:
        try:
            spa, spine = load_mesh(cfg.spa_mesh), load_mesh(cfg.spine_mesh)
        except OSError as exc:
            raise ConfigError(f"cannot read mesh: {exc}") from exc
        except MeshError as exc:
            raise ConfigError(f"mesh: {exc}") from exc
        try:
            a, b = spa.node_group("coupling").nodes, spine.node_group("coupling").nodes
        except MeshError as exc:
            raise ConfigError(f"mesh: {exc}") from exc
        if len(a) != len(b):
            raise ConfigError("coupling groups of the two meshes differ in length")
        coupling = np.stack([a, b], axis=1)
        tip = cfg.tip
        if tip is None:
            raise ConfigError("geometry from files needs an explicit tip point")
    else:
        try:
            geom = generate_arm(cfg.arm)
        except MeshError as exc:
            raise ConfigError(f"geometry: {exc}") from exc
        spa, spine, coupling = geom.spa, geom.spine, geom.coupling
        tip = geom.tip if cfg.tip is None else cfg.tip
    return Scene(cfg, spa, spine, coupling, tip)


def animation_step(scene: Scene) -> Record:
    """Actuate from the pre-step state, then integrate one step. Returns the pre-step record."""
    rec = scene.actuate()
    scene.advance()
    return rec


def tip_position(scene: Scene) -> np.ndarray:
    return scene.tip_position()
