import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from softarm.dynamics import (
    Body,
    ConstrainedSolver,
    ConstraintSet,
    IntegratorConfig,
    LinearSolveError,
    MassModel,
    MechanicalState,
    System,
    assemble_system,
    linear_solve,
    lump_mass,
    solve_constrained,
    step,
)
from softarm.materials import LinearElasticParams, StableNeoHookeanParams
from softarm.mesh import TetMesh

from conftest import unit_tet_mesh


def point_system(mass=2.0):
    mesh = TetMesh(np.zeros((1, 3)), np.zeros((0, 4), dtype=np.int64))
    return System([Body("p", mesh, None, MassModel(np.array([mass]), 0.0))])


def two_tets():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=float)
    return TetMesh(v, np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))


def small_beam(material=None, density=1000.0, scale=0.01):
    mesh = two_tets()
    mesh = TetMesh(mesh.vertices * scale, mesh.tets)
    material = material or StableNeoHookeanParams(1e4, 1e4)
    return System([Body("beam", mesh, material, lump_mass(mesh, density))])


class TestMass:
    def test_unit_tet(self):
        m = lump_mass(unit_tet_mesh(), 6.0)
        np.testing.assert_allclose(m.mass, 0.25)

    def test_shared_nodes_accumulate(self):
        m = lump_mass(two_tets(), 6.0)
        # second tet has volume 1/3
        np.testing.assert_allclose(m.mass, [0.25, 0.75, 0.75, 0.75, 0.5])
        assert m.mass.sum() == pytest.approx(6.0 * (1 / 6 + 1 / 3))

    def test_total_mass(self, arm):
        m = lump_mass(arm.spa, 1080.0)
        from softarm.mesh import mesh_volume

        assert m.mass.sum() == pytest.approx(1080.0 * mesh_volume(arm.spa), rel=1e-12)


class TestAssembly:
    def test_point_mass_free_fall(self):
        sys_ = point_system(2.0)
        cfg = IntegratorConfig(dt=0.01, rayleigh_mass=0.0, rayleigh_stiffness=0.0)
        state = MechanicalState(np.zeros(3), np.zeros(3))
        A, b = assemble_system(state, sys_, cfg)
        np.testing.assert_allclose(A.toarray(), 2.0 * np.eye(3))
        np.testing.assert_allclose(b, 0.01 * 2.0 * np.array([0, 0, -9.81]))

    def test_rest_state_is_equilibrium(self):
        sys_ = small_beam()
        cfg = IntegratorConfig(rayleigh_mass=0.0, rayleigh_stiffness=0.0, gravity=(0, 0, 0))
        q = sys_.rest_positions()
        state = MechanicalState(q, np.zeros_like(q))
        _, b = assemble_system(state, sys_, cfg)
        np.testing.assert_allclose(b, 0.0, atol=1e-14)

    def test_matrix_symmetric(self, rng):
        sys_ = small_beam()
        q = sys_.rest_positions() + 1e-3 * rng.standard_normal(15)
        A, _ = assemble_system(MechanicalState(q, rng.standard_normal(15)), sys_, IntegratorConfig())
        assert abs(A - A.T).max() <= 1e-12 * abs(A).max()

    def test_load_size_checked(self):
        sys_ = point_system()
        with pytest.raises(ValueError):
            assemble_system(MechanicalState(np.zeros(3), np.zeros(3)), sys_, IntegratorConfig(), loads=np.zeros(6))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            IntegratorConfig(dt=0.0)
        with pytest.raises(ValueError):
            IntegratorConfig(solver="magic")
        with pytest.raises(ValueError):
            IntegratorConfig(rayleigh_mass=-1.0)

    def test_state_rejects_nan(self):
        with pytest.raises(ValueError):
            MechanicalState(np.array([np.nan, 0, 0]), np.zeros(3))


class TestLinearSolve:
    def test_identity(self):
        b = np.arange(1.0, 6.0)
        for method in ("cg", "direct"):
            np.testing.assert_allclose(linear_solve(sp.identity(5), b, method=method), b)

    @pytest.mark.parametrize("method", ["cg", "direct"])
    def test_random_spd_matches_dense(self, method, rng):
        G = rng.standard_normal((50, 50))
        A = G @ G.T + 50 * np.eye(50)
        b = rng.standard_normal(50)
        x = linear_solve(sp.csr_matrix(A), b, method=method)
        ref = np.linalg.solve(A, b)
        assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_singular_direct(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(LinearSolveError):
            linear_solve(A, np.array([1.0, 0.0]), method="direct")

    def test_cg_non_convergence_reports(self, rng):
        G = rng.standard_normal((40, 40))
        A = G @ G.T + 1e-6 * np.eye(40)
        with pytest.raises(LinearSolveError, match="residual"):
            linear_solve(sp.csr_matrix(A), rng.standard_normal(40), method="cg", max_iter=2)


def _spd(rng, n):
    G = rng.standard_normal((n, n))
    return sp.csr_matrix(G @ G.T + n * np.eye(n))


class TestConstrainedSolve:
    def test_no_constraints_is_plain_solve(self, rng):
        A = _spd(rng, 12)
        b = rng.standard_normal(12)
        dv, lam = solve_constrained(A, b, ConstraintSet())
        np.testing.assert_allclose(dv, np.linalg.solve(A.toarray(), b), rtol=1e-9)
        assert lam.size == 0

    @pytest.mark.parametrize("method", ["pcg", "lu", "cg"])
    def test_methods_agree_with_kkt(self, method, rng):
        A = _spd(rng, 18)
        b = rng.standard_normal(18)
        cons = ConstraintSet(fixed=[0], fixed_positions=np.zeros((1, 3)), bilateral=[[1, 4], [2, 5]])
        fixed_dv = rng.standard_normal(3)
        c = rng.standard_normal(6)
        ref, lam_ref = ConstrainedSolver(18, cons, "kkt").solve(A, b, fixed_dv, c)
        dv, lam = ConstrainedSolver(18, cons, method).solve(A, b, fixed_dv, c)
        np.testing.assert_allclose(dv, ref, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(lam, lam_ref, rtol=1e-7, atol=1e-9)
        H = cons.bilateral_matrix(18)
        np.testing.assert_allclose(H @ dv, c, atol=1e-10)
        np.testing.assert_allclose(dv[:3], fixed_dv)

    def test_multipliers_balance_equations(self, rng):
        A = _spd(rng, 12)
        b = rng.standard_normal(12)
        cons = ConstraintSet(bilateral=[[0, 2]])
        dv, lam = ConstrainedSolver(12, cons, "kkt").solve(A, b)
        H = cons.bilateral_matrix(12).toarray()
        np.testing.assert_allclose(A @ dv + H.T @ lam, b, atol=1e-10)

    def test_duplicate_pairs_are_removed(self):
        cons = ConstraintSet(bilateral=[[0, 1], [1, 0], [0, 1]])
        assert cons.bilateral.tolist() == [[0, 1]]

    def test_self_pair_rejected(self):
        with pytest.raises(ValueError):
            ConstraintSet(bilateral=[[3, 3]])

    def test_fixed_and_paired_rejected(self):
        with pytest.raises(ValueError):
            ConstraintSet(fixed=[1], fixed_positions=np.zeros((1, 3)), bilateral=[[1, 2]])

    def test_chained_pairs_need_kkt(self):
        cons = ConstraintSet(bilateral=[[0, 1], [1, 2]])
        with pytest.raises(ValueError, match="kkt"):
            ConstrainedSolver(9, cons, "lu")
        A = sp.identity(9, format="csr")
        dv, _ = ConstrainedSolver(9, cons, "kkt").solve(A, np.arange(9.0))
        x = dv.reshape(3, 3)
        np.testing.assert_allclose(x[0], x[1])
        np.testing.assert_allclose(x[1], x[2])

    def test_singular_kkt(self):
        A = sp.csr_matrix((6, 6))
        with pytest.raises(LinearSolveError):
            ConstrainedSolver(6, ConstraintSet(), "kkt").solve(A, np.ones(6))

    def test_pcg_refactors_and_reuses(self, rng):
        A = _spd(rng, 30)
        s = ConstrainedSolver(30, ConstraintSet(), "pcg")
        for k in range(3):
            b = rng.standard_normal(30)
            dv, _ = s.solve(A * (1 + 0.01 * k), b)
            np.testing.assert_allclose(A * (1 + 0.01 * k) @ dv, b, atol=1e-8)
        assert s.factorizations == 1


class TestStep:
    def test_free_fall_undamped_closed_form(self):
        cfg = IntegratorConfig(dt=0.01, rayleigh_mass=0.0, rayleigh_stiffness=0.0)
        sys_ = point_system()
        state = MechanicalState(np.zeros(3), np.zeros(3))
        g = np.array(cfg.gravity)
        q = np.zeros(3)
        for k in range(1, 1001):
            state, _ = step(state, sys_, ConstraintSet(), cfg)
            v = k * cfg.dt * g
            q = q + cfg.dt * v
            assert np.max(np.abs(state.v - v)) <= 1e-12 * max(1.0, np.abs(v).max())
            assert np.max(np.abs(state.q - q)) <= 1e-12 * max(1.0, np.abs(q).max())

    def test_fixed_node_reaction_balances_gravity(self):
        mesh = unit_tet_mesh()
        mesh = TetMesh(mesh.vertices * 0.01, mesh.tets)
        sys_ = System([Body("t", mesh, LinearElasticParams(1e6, 0.3), lump_mass(mesh, 1000.0))])
        cons = ConstraintSet(fixed=[0, 1, 2, 3], fixed_positions=mesh.vertices)
        cfg = IntegratorConfig(dt=0.01)
        q = mesh.vertices.ravel()
        state, info = step(MechanicalState(q, np.zeros(12)), sys_, cons, cfg, solver=ConstrainedSolver(12, cons, "kkt"))
        np.testing.assert_allclose(state.q, q, atol=1e-15)
        # impulses cancel gravity on every node: lam = dt * m g
        expected = (cfg.dt * sys_.node_mass[:, None] * np.array(cfg.gravity)).ravel()
        np.testing.assert_allclose(info.multipliers, expected, rtol=1e-9, atol=1e-15)

    def test_bilateral_pair_closes(self, rng):
        m1 = TetMesh(unit_tet_mesh().vertices * 0.01, unit_tet_mesh().tets)
        m2 = TetMesh(m1.vertices + [0.01, 0, 0], m1.tets)
        mat = StableNeoHookeanParams(1e4, 1e4)
        sys_ = System([Body("a", m1, mat, lump_mass(m1, 1000.0)), Body("b", m2, mat, lump_mass(m2, 1000.0))])
        # node 1 of body a sits at (0.01, 0, 0) == node 0 of body b
        cons = ConstraintSet(fixed=[0, 2, 3], fixed_positions=m1.vertices[[0, 2, 3]], bilateral=[[1, 4]])
        q = sys_.rest_positions()
        state = MechanicalState(q, 0.01 * rng.standard_normal(q.size))
        for _ in range(5):
            state, info = step(state, sys_, cons, IntegratorConfig())
            assert info.max_gap <= 1e-8
            assert info.max_drift <= 1e-10

    def test_zero_gravity_rest_is_fixed_point(self):
        sys_ = small_beam()
        cfg = IntegratorConfig(gravity=(0.0, 0.0, 0.0))
        q = sys_.rest_positions()
        state = MechanicalState(q, np.zeros_like(q))
        for _ in range(10):
            state, _ = step(state, sys_, ConstraintSet(), cfg)
        np.testing.assert_allclose(state.q, q, atol=1e-15)
        np.testing.assert_allclose(state.v, 0.0, atol=1e-15)

    def test_dissipation(self, rng):
        sys_ = small_beam()
        cfg = IntegratorConfig(gravity=(0.0, 0.0, 0.0), rayleigh_mass=0.5, rayleigh_stiffness=0.01, dt=0.001)
        q0 = sys_.rest_positions()
        state = MechanicalState(q0 + 2e-4 * rng.standard_normal(q0.size), np.zeros_like(q0))
        energy = sys_.elastic_energy(state.q)
        for _ in range(50):
            state, _ = step(state, sys_, ConstraintSet(), cfg)
            e = sys_.elastic_energy(state.q) + sys_.kinetic_energy(state.v)
            assert e <= energy * (1 + 1e-10)
            energy = e

    def test_newton_iterations_agree_for_small_motion(self):
        sys_ = small_beam()
        q = sys_.rest_positions()
        s0 = MechanicalState(q, np.zeros_like(q))
        a, _ = step(s0, sys_, ConstraintSet(), IntegratorConfig(newton_iters=1))
        b, _ = step(s0, sys_, ConstraintSet(), IntegratorConfig(newton_iters=3))
        np.testing.assert_allclose(a.q, b.q, atol=1e-9)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        sys_ = small_beam()
        q = sys_.rest_positions() + 1e-4 * rng.standard_normal(15)
        s = MechanicalState(q, np.zeros(15))
        a, _ = step(s, sys_, ConstraintSet(), IntegratorConfig())
        b, _ = step(s, sys_, ConstraintSet(), IntegratorConfig())
        assert a.q.tobytes() == b.q.tobytes()
