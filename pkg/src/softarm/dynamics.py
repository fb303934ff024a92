"""Implicit Euler integration of constrained FEM bodies.

One linearization per step in velocity-increment form::

    (M + dt C + dt^2 K) dv = dt (f_ext + f_int(q) - C v) - dt^2 K v

with Rayleigh damping C = alpha M + beta K, K the Hessian of the elastic
energy and f_int = -grad(energy). Fixed nodes and bilateral node pairs are
enforced at velocity level with position-drift correction so that the
constraint error after the position update is zero up to solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .materials import Assembler, ElementBasis, element_energy, element_forces, element_stiffness
from .mesh import TetMesh, signed_volumes


class LinearSolveError(RuntimeError):
    """Singular system or iterative solver failure."""


@dataclass
class MechanicalState:
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        if self.q.shape != self.v.shape or self.q.size % 3:
            raise ValueError("q and v must have equal length, a multiple of 3")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v))):
            raise ValueError("non-finite mechanical state")

    def copy(self) -> "MechanicalState":
        return MechanicalState(self.q.copy(), self.v.copy())


@dataclass(frozen=True)
class MassModel:
    mass: np.ndarray  # per node [kg]
    density: float

    def __post_init__(self):
        if np.any(np.asarray(self.mass) <= 0):
            raise ValueError("lumped masses must be positive")


def lump_mass(mesh: TetMesh, density: float) -> MassModel:
    vol = signed_volumes(mesh.vertices, mesh.tets)
    m = np.bincount(mesh.tets.ravel(), weights=np.repeat(density * vol / 4.0, 4), minlength=mesh.n_nodes)
    return MassModel(m, density)


@dataclass
class IntegratorConfig:
    dt: float = 0.01
    rayleigh_mass: float = 0.1
    rayleigh_stiffness: float = 0.1
    newton_iters: int = 1
    solver: str = "pcg"
    tol: float = 1e-10
    max_iter: int = 20000
    gravity: Tuple[float, float, float] = (0.0, 0.0, -9.81)
    psd_projection: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.rayleigh_mass < 0 or self.rayleigh_stiffness < 0:
            raise ValueError("Rayleigh coefficients must be non-negative")
        if self.newton_iters < 1:
            raise ValueError("newton_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("solver tolerance must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown linear solver '{self.solver}'")
        self.gravity = tuple(float(g) for g in self.gravity)


# --------------------------------------------------------------------------- bodies


@dataclass
class Body:
    name: str
    mesh: TetMesh
    material: object
    mass: MassModel
    offset: int = 0  # first global node index
    basis: Optional[ElementBasis] = None

    def __post_init__(self):
        if len(self.mass.mass) != self.mesh.n_nodes:
            raise ValueError(f"body '{self.name}': mass has {len(self.mass.mass)} entries for {self.mesh.n_nodes} nodes")
        if self.basis is None and len(self.mesh.tets):
            self.basis = ElementBasis.from_mesh(self.mesh)


class System:
    """Several bodies stacked into one global degree-of-freedom vector."""

    def __init__(self, bodies: Sequence[Body]):
        self.bodies: List[Body] = []
        offset = 0
        for b in bodies:
            b.offset = offset
            offset += b.mesh.n_nodes
            self.bodies.append(b)
        self.n_nodes = offset
        self.node_mass = np.concatenate([b.mass.mass for b in self.bodies]) if self.bodies else np.zeros(0)
        self.dof_mass = np.repeat(self.node_mass, 3)
        tets = [b.mesh.tets + b.offset for b in self.bodies if len(b.mesh.tets)]
        self._assembler = Assembler(np.concatenate(tets) if tets else np.zeros((0, 4), dtype=np.int64), self.n_nodes)

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    def body(self, name: str) -> Body:
        for b in self.bodies:
            if b.name == name:
                return b
        raise KeyError(name)

    def rest_positions(self) -> np.ndarray:
        return np.concatenate([b.mesh.vertices.reshape(-1) for b in self.bodies])

    def body_slice(self, name: str) -> slice:
        b = self.body(name)
        return slice(3 * b.offset, 3 * (b.offset + b.mesh.n_nodes))

    def _element_positions(self, q):
        x = np.asarray(q, dtype=float).reshape(-1, 3)
        return [(b, x[b.mesh.tets + b.offset]) for b in self.bodies if len(b.mesh.tets)]

    def internal(self, q, psd: bool = False) -> Tuple[np.ndarray, sp.csr_matrix]:
        parts = self._element_positions(q)
        if not parts:
            n = self.n_dofs
            return np.zeros(n), sp.csr_matrix((n, n))
        fe = np.concatenate([element_forces(b.basis, x, b.material) for b, x in parts])
        Ke = np.concatenate([element_stiffness(b.basis, x, b.material, psd=psd) for b, x in parts])
        return self._assembler.vector(fe), self._assembler.matrix(Ke)

    def internal_forces(self, q) -> np.ndarray:
        parts = self._element_positions(q)
        if not parts:
            return np.zeros(self.n_dofs)
        return self._assembler.vector(np.concatenate([element_forces(b.basis, x, b.material) for b, x in parts]))

    def elastic_energy(self, q) -> float:
        return float(sum(element_energy(b.basis, x, b.material).sum() for b, x in self._element_positions(q)))

    def kinetic_energy(self, v) -> float:
        return 0.5 * float(np.dot(self.dof_mass * v, v))

    def gravity_forces(self, g) -> np.ndarray:
        return (self.node_mass[:, None] * np.asarray(g, dtype=float)[None, :]).reshape(-1)


# --------------------------------------------------------------------------- constraints


@dataclass
class ConstraintSet:
    """Fixed nodes pinned to ``fixed_positions`` and bilateral pairs (a, b) with x_a = x_b.

    Node indices are global (see :class:`System`).
    """

    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fixed_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    bilateral: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        fixed = np.asarray(self.fixed, dtype=np.int64).reshape(-1)
        pos = np.asarray(self.fixed_positions, dtype=float).reshape(-1, 3)
        if len(pos) != len(fixed):
            raise ValueError("one target position is needed per fixed node")
        fixed, first = np.unique(fixed, return_index=True)
        self.fixed, self.fixed_positions = fixed, pos[first]
        pairs = np.asarray(self.bilateral, dtype=np.int64).reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise ValueError("bilateral pair couples a node to itself")
        # parallel duplicates, including reversed pairs, would make the KKT matrix singular
        key = np.sort(pairs, axis=1)
        _, first = np.unique(key, axis=0, return_index=True)
        self.bilateral = pairs[np.sort(first)]
        clash = np.intersect1d(self.fixed, self.bilateral.ravel())
        if clash.size:
            raise ValueError(f"node {int(clash[0])} is both fixed and in a bilateral pair")

    @property
    def fixed_dofs(self) -> np.ndarray:
        return (3 * self.fixed[:, None] + np.arange(3)).ravel()

    @property
    def n_rows(self) -> int:
        return 3 * (len(self.fixed) + len(self.bilateral))

    def bilateral_matrix(self, n_dofs: int) -> sp.csr_matrix:
        k = len(self.bilateral)
        rows = np.repeat(np.arange(3 * k), 2)
        a = 3 * self.bilateral[:, 0, None] + np.arange(3)
        b = 3 * self.bilateral[:, 1, None] + np.arange(3)
        cols = np.stack([a.ravel(), b.ravel()], axis=1).ravel()
        vals = np.tile([1.0, -1.0], 3 * k)
        return sp.csr_matrix((vals, (rows, cols)), shape=(3 * k, n_dofs))

    def gaps(self, q) -> np.ndarray:
        x = np.asarray(q).reshape(-1, 3)
        return np.linalg.norm(x[self.bilateral[:, 0]] - x[self.bilateral[:, 1]], axis=1)

    def drift(self, q) -> np.ndarray:
        x = np.asarray(q).reshape(-1, 3)
        return np.linalg.norm(x[self.fixed] - self.fixed_positions, axis=1)

    def targets(self, state: MechanicalState, dt: float) -> Tuple[np.ndarray, np.ndarray]:
        """Velocity-increment targets: fixed dofs land on their targets, pairs close their gap."""
        q, v = state.q.reshape(-1, 3), state.v.reshape(-1, 3)
        f = self.fixed
        fixed_dv = (-v[f] - (q[f] - self.fixed_positions) / dt).ravel()
        a, b = self.bilateral[:, 0], self.bilateral[:, 1]
        c = (-(q[a] - q[b]) / dt - (v[a] - v[b])).ravel()
        return fixed_dv, c


# --------------------------------------------------------------------------- linear algebra


def linear_solve(A, b, method: str = "cg", tol: float = 1e-10, max_iter: int = 20000, precond=None) -> np.ndarray:
    """Solve A x = b by preconditioned CG (SPD A) or sparse LU (``method="direct"``).

    ``precond`` overrides the Jacobi preconditioner with any callable r -> M^-1 r.
    Raises :class:`LinearSolveError` when the relative residual exceeds ``tol``
    (``max(tol, 1e-8)`` for LU).
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    if method == "direct":
        try:
            x = spla.splu(A.tocsc()).solve(b)
        except RuntimeError as exc:
            raise LinearSolveError(f"singular system: {exc}") from exc
        limit = max(tol, 1e-8)
    elif method == "cg":
        if precond is None:
            d = A.diagonal()
            if np.any(d <= 0):
                raise LinearSolveError("CG needs a positive diagonal")
            precond = lambda r: r / d  # noqa: E731
        M = spla.LinearOperator(A.shape, matvec=precond, dtype=float)
        x, _ = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=max_iter, M=M)
        limit = 10 * tol
    else:
        raise ValueError(f"unknown method '{method}'")
    res = float(np.linalg.norm(A @ x - b))
    if not np.isfinite(res) or res > limit * bnorm:
        raise LinearSolveError(f"{method} solve failed: relative residual {res / bnorm:.3e} > {limit:.1e}")
    return x


SOLVERS = ("pcg", "lu", "cg", "kkt")


class ConstrainedSolver:
    """Solves [A H^T; H 0][dv; lam] = [b; rhs] for a fixed constraint layout.

    H stacks one identity row per fixed dof, then (e_a - e_b) rows per
    bilateral pair. Methods:

    * ``kkt``: sparse LU of the full saddle-point matrix.
    * ``lu``: eliminate fixed dofs and pair secondaries (dv_b = dv_a - c),
      sparse LU of the reduced SPD matrix.
    * ``cg``: same reduction, Jacobi-preconditioned CG.
    * ``pcg``: same reduction, CG preconditioned by the LU factors of an
      earlier reduced matrix, refactored when CG needs more than
      ``refactor_iters`` iterations.

    Multipliers are impulses; the constraint force on the system is -H^T lam / dt.
    """

    def __init__(self, n_dofs: int, constraints: ConstraintSet, method: str = "pcg", tol: float = 1e-10,
                 max_iter: int = 20000, refactor_iters: int = 12):
        if method not in SOLVERS:
            raise ValueError(f"unknown constrained solver '{method}'")
        self.n = n_dofs
        self.cons = constraints
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.refactor_iters = refactor_iters
        self._lu = None
        self.factorizations = 0
        self.last_iterations = 0
        n = n_dofs
        self.fd = constraints.fixed_dofs
        pairs = constraints.bilateral
        self.ad = (3 * pairs[:, 0, None] + np.arange(3)).ravel()
        self.bd = (3 * pairs[:, 1, None] + np.arange(3)).ravel()
        if len(self.fd) and (self.fd.max() >= n):
            raise ValueError("fixed node index out of range")
        if len(self.bd) and max(self.ad.max(), self.bd.max()) >= n:
            raise ValueError("bilateral node index out of range")
        self.free = np.setdiff1d(np.arange(n), self.fd)
        if method != "kkt":
            if len(np.unique(self.bd)) != len(self.bd) or np.intersect1d(self.bd, self.ad).size:
                raise ValueError("pair elimination needs each secondary node in exactly one pair; use method='kkt'")
            keep = np.setdiff1d(self.free, self.bd)
            col = np.full(n, -1)
            col[keep] = np.arange(len(keep))
            rows = np.concatenate([keep, self.bd])
            cols = np.concatenate([col[keep], col[self.ad]])
            self.Z = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, len(keep)))
            self.Zt = self.Z.T.tocsr()
        else:
            self.H = constraints.bilateral_matrix(n)[:, self.free]

    def _factor(self, Ar):
        try:
            self._lu = spla.splu(Ar.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise LinearSolveError(f"singular reduced system: {exc}") from exc
        self.factorizations += 1

    def solve(self, A, b, fixed_dv=None, c=None) -> Tuple[np.ndarray, np.ndarray]:
        A = sp.csr_matrix(A)
        b = np.asarray(b, dtype=float)
        if A.shape != (self.n, self.n) or b.shape != (self.n,):
            raise ValueError(f"system size mismatch: expected {self.n} dofs")
        fd, bd = self.fd, self.bd
        dv = np.zeros(self.n)
        if fixed_dv is not None:
            dv[fd] = fixed_dv
        c = np.zeros(len(bd)) if c is None else np.asarray(c, dtype=float)

        if self.method == "kkt":
            rhs = b - A @ dv
            free = self.free
            K = sp.bmat([[A[free][:, free], self.H.T], [self.H, None]], format="csr") if len(bd) else A[free][:, free]
            sol = linear_solve(K, np.concatenate([rhs[free], c]), method="direct", tol=self.tol)
            dv[free] = sol[: len(free)]
            lam_b = sol[len(free):]
        else:
            dv[bd] = -c
            Ar = (self.Zt @ A @ self.Z).tocsr()
            r = self.Zt @ (b - A @ dv)
            if self.method == "lu":
                self._factor(Ar)
                y = self._lu.solve(r)
                res = np.linalg.norm(Ar @ y - r)
                if not np.isfinite(res) or res > max(self.tol, 1e-8) * max(np.linalg.norm(r), 1e-300):
                    raise LinearSolveError(f"LU solve residual {res:.3e} too large")
            elif self.method == "cg":
                y = linear_solve(Ar, r, method="cg", tol=self.tol, max_iter=self.max_iter)
            else:
                y = self._pcg(Ar, r)
            dv = dv + self.Z @ y
            lam_b = (A @ dv)[bd] - b[bd]
        lam_f = b[fd] - (A @ dv)[fd]
        return dv, np.concatenate([lam_f, lam_b])

    def _pcg(self, Ar, r):
        if not np.any(r):
            return np.zeros_like(r)
        if self._lu is None or self._lu.shape != Ar.shape:
            self._factor(Ar)
        counter = [0]

        def cb(_):
            counter[0] += 1

        # a stale preconditioner gets a short budget; past it, a fresh factorization solves directly
        M = spla.LinearOperator(Ar.shape, matvec=self._lu.solve, dtype=float)
        budget = min(self.max_iter, 4 * self.refactor_iters)
        y, _ = spla.cg(Ar, r, rtol=self.tol, atol=0.0, maxiter=budget, M=M, callback=cb)
        rnorm = np.linalg.norm(r)
        ok = np.linalg.norm(Ar @ y - r) <= 10 * self.tol * rnorm
        if not ok or counter[0] > self.refactor_iters:
            self._factor(Ar)
            if not ok:
                y = self._lu.solve(r)
                y = y + self._lu.solve(r - Ar @ y)  # one step of iterative refinement
                res = np.linalg.norm(Ar @ y - r)
                if not (np.isfinite(res) and res <= max(10 * self.tol, 1e-8) * rnorm):
                    raise LinearSolveError(f"reduced solve residual {res:.3e} too large")
        self.last_iterations = counter[0]
        return y


def solve_constrained(
    A,
    b,
    constraints: ConstraintSet,
    fixed_dv: Optional[np.ndarray] = None,
    c: Optional[np.ndarray] = None,
    method: str = "kkt",
    tol: float = 1e-10,
    max_iter: int = 20000,
) -> Tuple[np.ndarray, np.ndarray]:
    """One-shot constrained solve; see :class:`ConstrainedSolver` for the layout of the result."""
    return ConstrainedSolver(sp.csr_matrix(A).shape[0], constraints, method, tol, max_iter).solve(A, b, fixed_dv, c)



# --------------------------------------------------------------------------- stepping


@dataclass
class StepInfo:
    multipliers: np.ndarray
    max_gap: float
    max_drift: float


def assemble_system(
    state: MechanicalState, system: System, config: IntegratorConfig, loads: Optional[np.ndarray] = None
) -> Tuple[sp.csr_matrix, np.ndarray]:
    if state.q.size != system.n_dofs:
        raise ValueError(f"state has {state.q.size} dofs, system has {system.n_dofs}")
    A, b, K = _linearize(state.q, state.v, state.v, system, config, _external(system, config, loads))
    # linearized at q; the dt^2 K v term accounts for the position update
    return A, b - config.dt**2 * (K @ state.v)


def _external(system, config, loads):
    f = system.gravity_forces(config.gravity)
    if loads is not None:
        loads = np.asarray(loads, dtype=float)
        if loads.shape != f.shape:
            raise ValueError(f"load vector has {loads.size} entries, system has {f.size} dofs")
        f = f + loads
    return f


def _linearize(q_lin, v_old, v_lin, system, config, f_ext):
    """Matrix and right-hand side for the velocity increment measured from ``v_lin``."""
    dt, alpha, beta = config.dt, config.rayleigh_mass, config.rayleigh_stiffness
    f_int, K = system.internal(q_lin, psd=config.psd_projection)
    Mdiag = sp.diags(system.dof_mass)
    A = (Mdiag * (1.0 + dt * alpha) + K * (dt * beta + dt * dt)).tocsr()
    Cv = alpha * system.dof_mass * v_lin + beta * (K @ v_lin)
    b = dt * (f_ext + f_int - Cv) - system.dof_mass * (v_lin - v_old)
    return A, b, K


def step(
    state: MechanicalState,
    system: System,
    constraints: ConstraintSet,
    config: IntegratorConfig,
    loads: Optional[np.ndarray] = None,
    solver: Optional[ConstrainedSolver] = None,
) -> Tuple[MechanicalState, StepInfo]:
    """Advance one implicit Euler step; pass a persistent ``solver`` to reuse factorizations."""
    dt = config.dt
    if solver is None:
        solver = ConstrainedSolver(system.n_dofs, constraints, config.solver, config.tol, config.max_iter)
    fixed_dv, c = constraints.targets(state, dt)
    q, v = state.q, state.v
    A, b = assemble_system(state, system, config, loads)
    dv, lam = solver.solve(A, b, fixed_dv, c)
    for _ in range(config.newton_iters - 1):
        v_new = v + dv
        A, r, _ = _linearize(q + dt * v_new, v, v_new, system, config, _external(system, config, loads))
        ddv, dlam = solver.solve(A, r)
        dv += ddv
        lam += dlam

    v_new = v + dv
    q_new = q + dt * v_new
    gaps = constraints.gaps(q_new)
    drift = constraints.drift(q_new)
    info = StepInfo(lam, float(gaps.max()) if gaps.size else 0.0, float(drift.max()) if drift.size else 0.0)
    return MechanicalState(q_new, v_new), info
