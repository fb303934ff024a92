"""Constitutive models and linear-tetrahedron element kinematics.

All evaluators accept batched inputs: deformation gradients of shape
``(..., 3, 3)`` and element nodal positions of shape ``(m, 4, 3)``.
Stress derivatives are returned as 9x9 matrices acting on column-major
``vec(F)`` (index ``i + 3*j`` for ``F[i, j]``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .mesh import TetMesh

_I3 = np.eye(3)


def vec(A: np.ndarray) -> np.ndarray:
    """Column-major flattening of the trailing 3x3 block."""
    return np.swapaxes(A, -1, -2).reshape(A.shape[:-2] + (9,))


def unvec(v: np.ndarray) -> np.ndarray:
    return np.swapaxes(v.reshape(v.shape[:-1] + (3, 3)), -1, -2)


def cofactor(F: np.ndarray) -> np.ndarray:
    """dJ/dF, i.e. det(F) F^-T, computed from column cross products (valid for singular F)."""
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.stack([np.cross(f1, f2), np.cross(f2, f0), np.cross(f0, f1)], axis=-1)


def _skew(a: np.ndarray) -> np.ndarray:
    z = np.zeros(a.shape[:-1])
    x, y, w = a[..., 0], a[..., 1], a[..., 2]
    return np.stack(
        [np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], axis=-2
    )


def det_hessian(F: np.ndarray) -> np.ndarray:
    """Second derivative of det(F) with respect to vec(F)."""
    f0, f1, f2 = (_skew(F[..., :, j]) for j in range(3))
    Z = np.zeros_like(f0)
    rows = [
        np.concatenate([Z, -f2, f1], axis=-1),
        np.concatenate([f2, Z, -f0], axis=-1),
        np.concatenate([-f1, f0, Z], axis=-1),
    ]
    return np.concatenate(rows, axis=-2)


@dataclass(frozen=True)
class StableNeoHookeanParams:
    mu: float
    lam: float = 0.0

    def __post_init__(self):
        if not self.mu > 0 or self.lam < 0:
            raise ValueError(f"stable Neo-Hookean needs mu > 0 and lambda >= 0, got mu={self.mu}, lambda={self.lam}")

    def scaled(self, c: float) -> "StableNeoHookeanParams":
        return replace(self, mu=self.mu * c, lam=self.lam * c)

    def energy_density(self, F):
        return snh_energy_density(F, self)

    def stress(self, F):
        return snh_first_piola(F, self)

    def stress_derivative(self, F):
        return snh_stress_derivative(F, self)


@dataclass(frozen=True)
class LinearElasticParams:
    youngs: float
    poisson: float

    def __post_init__(self):
        if not self.youngs > 0 or not (-1.0 < self.poisson < 0.5):
            raise ValueError(f"linear elasticity needs E > 0 and -1 < nu < 0.5, got E={self.youngs}, nu={self.poisson}")

    @property
    def lame_lambda(self) -> float:
        E, nu = self.youngs, self.poisson
        return E * nu / ((1 + nu) * (1 - 2 * nu))

    @property
    def lame_mu(self) -> float:
        return self.youngs / (2 * (1 + self.poisson))

    def scaled(self, c: float) -> "LinearElasticParams":
        return replace(self, youngs=self.youngs * c)

    def energy_density(self, F):
        eps = _small_strain(F)
        tr = np.trace(eps, axis1=-2, axis2=-1)
        return self.lame_mu * np.einsum("...ij,...ij->...", eps, eps) + 0.5 * self.lame_lambda * tr**2

    def stress(self, F):
        return linear_stress(F, self)

    def stress_derivative(self, F):
        mu, lam = self.lame_mu, self.lame_lambda
        D4 = mu * (np.einsum("ik,jl->ijkl", _I3, _I3) + np.einsum("il,jk->ijkl", _I3, _I3)) + lam * np.einsum("ij,kl->ijkl", _I3, _I3)
        # vec index i + 3j -> row-major over (j, i)
        D9 = D4.transpose(1, 0, 3, 2).reshape(9, 9)
        return np.broadcast_to(D9, np.shape(F)[:-2] + (9, 9))


def snh_energy_density(F: np.ndarray, params: StableNeoHookeanParams) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    Ic = np.einsum("...ij,...ij->...", F, F)
    J = np.linalg.det(F)
    mu, lam = params.mu, params.lam
    return 0.5 * mu * (Ic - 3.0) - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2


def snh_first_piola(F: np.ndarray, params: StableNeoHookeanParams) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)[..., None, None]
    return params.mu * F + (params.lam * (J - 1.0) - params.mu) * cofactor(F)


def snh_stress_derivative(F: np.ndarray, params: StableNeoHookeanParams) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)[..., None, None]
    g = vec(cofactor(F))
    return (
        params.mu * np.eye(9)
        + (params.lam * (J - 1.0) - params.mu) * det_hessian(F)
        + params.lam * g[..., :, None] * g[..., None, :]
    )


def _small_strain(F):
    F = np.asarray(F, dtype=float)
    return 0.5 * (F + np.swapaxes(F, -1, -2)) - _I3


def linear_stress(F: np.ndarray, params: LinearElasticParams) -> np.ndarray:
    eps = _small_strain(F)
    tr = np.trace(eps, axis1=-2, axis2=-1)[..., None, None]
    return 2.0 * params.lame_mu * eps + params.lame_lambda * tr * _I3


# --------------------------------------------------------------------------- elements


@dataclass(frozen=True)
class ElementBasis:
    Dm_inv: np.ndarray  # (m, 3, 3)
    volume: np.ndarray  # (m,)
    grad: np.ndarray  # (m, 4, 3) shape-function gradients, rows sum to zero
    B: np.ndarray  # (m, 9, 12) maps flattened nodal positions to vec(F)

    @classmethod
    def from_rest(cls, rest_elements: np.ndarray) -> "ElementBasis":
        x = np.asarray(rest_elements, dtype=float).reshape(-1, 4, 3)
        Dm = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))
        vol = np.linalg.det(Dm) / 6.0
        if np.any(vol <= 0):
            raise ValueError(f"element {int(np.argmax(vol <= 0))} has non-positive rest volume")
        Dm_inv = np.linalg.inv(Dm)
        grad = np.concatenate([-Dm_inv.sum(axis=1, keepdims=True), Dm_inv], axis=1)
        m = len(x)
        B = np.zeros((m, 3, 3, 4, 3))  # (j, i, a, l) -> vec index i + 3j, dof 3a + l
        for i in range(3):
            B[:, :, i, :, i] = np.transpose(grad, (0, 2, 1))
        return cls(Dm_inv, vol, grad, B.reshape(m, 9, 12))

    @classmethod
    def from_mesh(cls, mesh: TetMesh, rest=None) -> "ElementBasis":
        rest = mesh.vertices if rest is None else np.asarray(rest, dtype=float).reshape(-1, 3)
        return cls.from_rest(rest[mesh.tets])


def deformation_gradient(basis: ElementBasis, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 4, 3)
    Ds = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))
    return Ds @ basis.Dm_inv


def element_energy(basis: ElementBasis, x, material) -> np.ndarray:
    return basis.volume * material.energy_density(deformation_gradient(basis, x))


def element_forces(basis: ElementBasis, x, material) -> np.ndarray:
    """Nodal internal forces -d(W psi)/dx, shape (m, 4, 3)."""
    P = material.stress(deformation_gradient(basis, x))
    H = -basis.volume[:, None, None] * (P @ np.transpose(basis.Dm_inv, (0, 2, 1)))
    f123 = np.transpose(H, (0, 2, 1))
    return np.concatenate([-f123.sum(axis=1, keepdims=True), f123], axis=1)


def project_psd(D: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (D + np.swapaxes(D, -1, -2)))
    return (V * np.clip(w, 0.0, None)[..., None, :]) @ np.swapaxes(V, -1, -2)


def element_stiffness(basis: ElementBasis, x, material, psd: bool = False) -> np.ndarray:
    """Element tangent stiffness d^2(W psi)/dx^2, shape (m, 12, 12), dofs ordered node-major."""
    D = material.stress_derivative(deformation_gradient(basis, x))
    if psd:
        D = project_psd(D)
    Bt = np.transpose(basis.B, (0, 2, 1))
    K = basis.volume[:, None, None] * (Bt @ D @ basis.B)
    return 0.5 * (K + np.transpose(K, (0, 2, 1)))


class Assembler:
    """Fixed sparsity pattern for scattering element blocks into a global CSR matrix."""

    def __init__(self, tets: np.ndarray, n_nodes: int):
        tets = np.asarray(tets, dtype=np.int64)
        self.n_nodes = n_nodes
        dofs = (3 * tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        self.dofs = dofs
        rows = np.repeat(dofs, 12, axis=1).ravel()
        cols = np.tile(dofs, (1, 12)).ravel()
        n = 3 * n_nodes
        key = rows * n + cols
        uniq, self._slot = np.unique(key, return_inverse=True)
        r, c = np.divmod(uniq, n)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
        self.indices = c
        self.nnz = len(uniq)

    def matrix(self, Ke: np.ndarray) -> sp.csr_matrix:
        n = 3 * self.n_nodes
        data = np.bincount(self._slot, weights=Ke.reshape(-1), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(n, n))

    def vector(self, fe: np.ndarray) -> np.ndarray:
        return np.bincount(self.dofs.ravel(), weights=fe.reshape(-1), minlength=3 * self.n_nodes)


def assemble(mesh: TetMesh, q, material, basis: ElementBasis | None = None, assembler: Assembler | None = None, psd: bool = False):
    """Global internal force vector (length 3n) and sparse tangent stiffness (3n x 3n)."""
    basis = ElementBasis.from_mesh(mesh) if basis is None else basis
    assembler = Assembler(mesh.tets, mesh.n_nodes) if assembler is None else assembler
    x = np.asarray(q, dtype=float).reshape(-1, 3)[mesh.tets]
    f = assembler.vector(element_forces(basis, x, material))
    K = assembler.matrix(element_stiffness(basis, x, material, psd=psd))
    return f, K


def total_energy(mesh: TetMesh, q, material, basis: ElementBasis | None = None) -> float:
    basis = ElementBasis.from_mesh(mesh) if basis is None else basis
    x = np.asarray(q, dtype=float).reshape(-1, 3)[mesh.tets]
    return float(element_energy(basis, x, material).sum())
