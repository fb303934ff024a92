"""Tetrahedral meshes, the ``tmesh`` file format, arm geometry and barycentric maps."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field, fields
from itertools import permutations
from typing import Dict, Iterable, Tuple, Union

import numpy as np


class MeshError(ValueError):
    """Raised for malformed mesh files and invalid mesh data."""


@dataclass(frozen=True)
class TriGroup:
    """Oriented triangle set. ``closed`` surfaces are edge-manifold with consistent winding."""

    triangles: np.ndarray
    closed: bool = False

    def __post_init__(self):
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triangles", tris)


@dataclass(frozen=True)
class NodeGroup:
    nodes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.int64).reshape(-1))


Group = Union[TriGroup, NodeGroup]


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    v = vertices[tets]
    d = v[:, 1:] - v[:, :1]
    return np.linalg.det(d) / 6.0


def _edges_consistent(tris: np.ndarray) -> bool:
    """True when every directed edge appears once and its reverse exactly once."""
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    seen = set(map(tuple, directed.tolist()))
    if len(seen) != len(directed):
        return False
    return all((b, a) in seen for a, b in seen)


@dataclass
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    groups: Dict[str, Group] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        self.validate()

    @property
    def n_nodes(self) -> int:
        return len(self.vertices)

    def validate(self) -> None:
        n = len(self.vertices)
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinate")
        if self.tets.size:
            bad = np.flatnonzero((self.tets < 0).any(axis=1) | (self.tets >= n).any(axis=1))
            if bad.size:
                raise MeshError(f"tet {bad[0]} has vertex index out of range [0, {n})")
            vol = signed_volumes(self.vertices, self.tets)
            scale = max(float(np.ptp(self.vertices, axis=0).max()), 1e-300) ** 3
            bad = np.flatnonzero(vol <= 1e-14 * scale)
            if bad.size:
                i = bad[0]
                kind = "degenerate (zero-volume)" if abs(vol[i]) <= 1e-14 * scale else "negative-volume"
                raise MeshError(f"tet {i} is {kind}: signed volume {vol[i]:.3e}")
        for name, g in self.groups.items():
            idx = g.triangles if isinstance(g, TriGroup) else g.nodes
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise MeshError(f"group '{name}' has vertex index out of range [0, {n})")
            if isinstance(g, TriGroup) and g.closed and not _edges_consistent(g.triangles):
                raise MeshError(f"group '{name}' is flagged closed but is not a consistently wound closed surface")

    def tri_group(self, name: str) -> TriGroup:
        g = self.groups.get(name)
        if not isinstance(g, TriGroup):
            raise MeshError(f"no triangle group named '{name}'")
        return g

    def node_group(self, name: str) -> NodeGroup:
        g = self.groups.get(name)
        if not isinstance(g, NodeGroup):
            raise MeshError(f"no node group named '{name}'")
        return g


def mesh_volume(mesh: TetMesh) -> float:
    return float(signed_volumes(mesh.vertices, mesh.tets).sum())


def triangle_area_normal(points: np.ndarray, tri) -> Tuple[float, np.ndarray]:
    """Area and unit normal of one triangle; the normal follows the winding (right-hand rule)."""
    a, b, c = (np.asarray(points[i], dtype=float) for i in tri)
    n = np.cross(b - a, c - a)
    norm = float(np.linalg.norm(n))
    if norm == 0.0:
        raise MeshError(f"zero-area triangle {tuple(int(i) for i in tri)}")
    return 0.5 * norm, n / norm


# --------------------------------------------------------------------------- tmesh I/O


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split()
        if line:
            yield lineno, line


def parse_mesh(text: str) -> TetMesh:
    lines = _tokens(text)

    def take(expect=None, n=None):
        try:
            lineno, toks = next(lines)
        except StopIteration:
            raise MeshError("unexpected end of file") from None
        if expect is not None and toks[0] != expect:
            raise MeshError(f"line {lineno}: expected '{expect}', got '{toks[0]}'")
        if n is not None and len(toks) != n:
            raise MeshError(f"line {lineno}: expected {n} fields, got {len(toks)}")
        return lineno, toks

    def count(toks, lineno, pos=1):
        try:
            c = int(toks[pos])
        except (ValueError, IndexError):
            raise MeshError(f"line {lineno}: bad count") from None
        if c < 0:
            raise MeshError(f"line {lineno}: negative count")
        return c

    def rows(k, width, conv):
        out = []
        for _ in range(k):
            lineno, toks = take(n=width)
            try:
                out.append([conv(t) for t in toks])
            except ValueError:
                raise MeshError(f"line {lineno}: cannot parse {' '.join(toks)!r}") from None
        return out

    lineno, toks = take("tmesh", 2)
    if toks[1] != "1":
        raise MeshError(f"line {lineno}: unsupported tmesh version {toks[1]}")
    lineno, toks = take("nodes", 2)
    verts = rows(count(toks, lineno), 3, float)
    lineno, toks = take("tets", 2)
    tets = rows(count(toks, lineno), 4, int)
    lineno, toks = take("groups", 2)
    groups: Dict[str, Group] = {}
    for _ in range(count(toks, lineno)):
        lineno, toks = take("group", 4)
        name, kind = toks[1], toks[2]
        if name in groups:
            raise MeshError(f"line {lineno}: duplicate group name '{name}'")
        k = count(toks, lineno, 3)
        if kind == "tri":
            tris = np.array(rows(k, 3, int), dtype=np.int64).reshape(-1, 3)
            groups[name] = TriGroup(tris, closed=bool(len(tris)) and _edges_consistent(tris))
        elif kind == "nodes":
            groups[name] = NodeGroup(np.array(rows(k, 1, int), dtype=np.int64).reshape(-1))
        else:
            raise MeshError(f"line {lineno}: unknown group kind '{kind}'")
    try:
        lineno, toks = next(lines)
        raise MeshError(f"line {lineno}: trailing content")
    except StopIteration:
        pass
    return TetMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(tets, dtype=np.int64).reshape(-1, 4), groups)


def load_mesh(path) -> TetMesh:
    with open(path, "r", encoding="ascii") as fh:
        return parse_mesh(fh.read())


def format_mesh(mesh: TetMesh) -> str:
    out = io.StringIO()
    out.write("tmesh 1\n")
    out.write(f"nodes {mesh.n_nodes}\n")
    for x, y, z in mesh.vertices.tolist():
        out.write(f"{x!r} {y!r} {z!r}\n")
    out.write(f"tets {len(mesh.tets)}\n")
    for t in mesh.tets.tolist():
        out.write("{} {} {} {}\n".format(*t))
    out.write(f"groups {len(mesh.groups)}\n")
    for name, g in mesh.groups.items():
        if isinstance(g, TriGroup):
            out.write(f"group {name} tri {len(g.triangles)}\n")
            for t in g.triangles.tolist():
                out.write("{} {} {}\n".format(*t))
        else:
            out.write(f"group {name} nodes {len(g.nodes)}\n")
            for i in g.nodes.tolist():
                out.write(f"{i}\n")
    return out.getvalue()


def write_mesh(mesh: TetMesh, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_mesh(mesh))


# --------------------------------------------------------------------------- arm geometry


@dataclass(frozen=True)
class ArmParams:
    """Parametric soft arm: x is the beam axis, y lateral, z vertical.

    Cavity and spine extents are given as absolute (inner, outer) offsets from
    the beam axis; the four cavities are the mirror images of one box in the
    (+y, +z) quadrant.
    """

    length: float = 0.12
    width: float = 0.03
    height: float = 0.03
    cavity_y: Tuple[float, float] = (0.003, 0.011)
    cavity_z: Tuple[float, float] = (0.0015, 0.0095)
    cavity_x: Tuple[float, float] = (0.008, 0.112)
    spine_thickness: float = 0.002
    spine_height: float = 0.011
    spine_length: float = 0.12
    element_size: float = 0.01

    def check(self) -> None:
        L, hw, hh = self.length, self.width / 2, self.height / 2
        if min(L, self.width, self.height, self.spine_thickness, self.spine_height, self.spine_length, self.element_size) <= 0:
            raise MeshError("all arm dimensions must be positive")
        if self.element_size >= min(L, self.width, self.height):
            raise MeshError("element size must be smaller than every arm dimension")
        (y0, y1), (z0, z1), (x0, x1) = self.cavity_y, self.cavity_z, self.cavity_x
        if not (self.spine_thickness / 2 < y0 < y1 < hw):
            raise MeshError("cavity y-extent overlaps the spine or the outer wall")
        if not (0 < z0 < z1 < hh):
            raise MeshError("cavity z-extent overlaps the septum or the outer wall")
        if not (0 < x0 < x1 < L):
            raise MeshError("cavity x-extent must leave end caps at both ends")
        if not (self.spine_height / 2 < hh and self.spine_length <= L):
            raise MeshError("spine must lie inside the actuator body")

    @classmethod
    def from_dict(cls, d: dict) -> "ArmParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise MeshError(f"unknown arm parameter(s): {', '.join(sorted(unknown))}")
        kw = {k: (tuple(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if isinstance(getattr(self, f.name), tuple) else getattr(self, f.name)) for f in fields(self)}


# cavity name -> (sign_y, sign_z) of its quadrant; each cavity bends the arm toward the opposite one
CAVITY_QUADRANTS = {"P1": (1, 1), "P2": (-1, 1), "P3": (1, -1), "P4": (-1, -1)}
CAVITY_NAMES = tuple(CAVITY_QUADRANTS)


@dataclass
class ArmGeometry:
    spa: TetMesh
    spine: TetMesh
    cavities: Tuple[str, ...]
    fixed: Tuple[str, str]
    coupling: np.ndarray  # (K, 2) rows of (spa node, spine node)
    tip: np.ndarray
    params: ArmParams


def _axis_lines(breaks: Iterable[float], h: float) -> np.ndarray:
    b = np.unique(np.round(np.asarray(sorted(breaks), dtype=float), 12))
    pts = [b[0]]
    for lo, hi in zip(b[:-1], b[1:]):
        n = max(1, math.ceil((hi - lo) / h - 1e-9))
        pts.extend(lo + (hi - lo) * np.arange(1, n + 1) / n)
    pts[-1] = b[-1]
    return np.asarray(pts)


def _sym_lines(half_breaks: Iterable[float], h: float) -> np.ndarray:
    """Lines symmetric about zero, built on the positive half and mirrored exactly."""
    pos = _axis_lines([0.0, *half_breaks], h)
    return np.concatenate([-pos[:0:-1], pos])


_FREUDENTHAL = [
    tuple(tuple(int(sum(1 for a in perm[:k] if a == ax)) for ax in range(3)) for k in range(4))
    for perm in permutations(range(3))
]


def _face_quads(axis: int, side: int):
    """Corner offsets of the cell face normal to ``axis`` split along the cell's face diagonal."""
    b, c = [a for a in range(3) if a != axis]

    def corner(ub, uc):
        off = [0, 0, 0]
        off[axis], off[b], off[c] = side, ub, uc
        return tuple(off)

    return [(corner(0, 0), corner(1, 0), corner(1, 1)), (corner(0, 0), corner(1, 1), corner(0, 1))]


def generate_arm(params: ArmParams = ArmParams()) -> ArmGeometry:
    """Structured hex grid, six tets per hex, with cavity and spine cells carved out of the actuator."""
    params.check()
    p = params
    h = p.element_size
    xs = _axis_lines([0.0, *p.cavity_x, p.spine_length, p.length], h)
    ys = _sym_lines([p.spine_thickness / 2, *p.cavity_y, p.width / 2], h)
    zs = _sym_lines([p.spine_height / 2, *p.cavity_z, p.height / 2], h)
    nx, ny, nz = len(xs), len(ys), len(zs)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def gid(i, j, k):
        return (i * ny + j) * nz + k

    cx, cy, cz = (0.5 * (a[1:] + a[:-1]) for a in (xs, ys, zs))
    ccx, ccy, ccz = np.meshgrid(cx, cy, cz, indexing="ij")
    spine_cell = (np.abs(ccy) < p.spine_thickness / 2) & (np.abs(ccz) < p.spine_height / 2) & (ccx < p.spine_length)
    cavity_cell = np.zeros(ccx.shape, dtype=np.int64)  # 0 none, i+1 for cavity i
    for ci, (sy, sz) in enumerate(CAVITY_QUADRANTS.values()):
        inside = (
            (ccx > p.cavity_x[0]) & (ccx < p.cavity_x[1])
            & (sy * ccy > p.cavity_y[0]) & (sy * ccy < p.cavity_y[1])
            & (sz * ccz > p.cavity_z[0]) & (sz * ccz < p.cavity_z[1])
        )
        cavity_cell[inside] = ci + 1
    spa_cell = ~spine_cell & (cavity_cell == 0)

    # the split pattern is mirrored in cells below y=0 / z=0, so the mesh is symmetric in both planes
    flip_y, flip_z = cy < 0, cz < 0

    def corner_id(i, j, k, a, b, c, keep_axis=-1):
        b = 1 - b if flip_y[j] and keep_axis != 1 else b
        c = 1 - c if flip_z[k] and keep_axis != 2 else c
        return gid(i + a, j + b, k + c)

    def tets_of(mask):
        out = []
        for i, j, k in zip(*np.nonzero(mask)):
            for path in _FREUDENTHAL:
                out.append([corner_id(i, j, k, a, b, c) for a, b, c in path])
        return np.asarray(out, dtype=np.int64).reshape(-1, 4)

    def orient(tets):
        vol = signed_volumes(grid, tets)
        flip = vol < 0
        tets[flip] = tets[flip][:, [0, 1, 3, 2]]
        return tets

    spa_g = orient(tets_of(spa_cell))
    spine_g = orient(tets_of(spine_cell))

    cav_tris = {}
    for ci, name in enumerate(CAVITY_NAMES):
        tris = []
        for i, j, k in zip(*np.nonzero(cavity_cell == ci + 1)):
            for axis in range(3):
                for side in (0, 1):
                    nb = [i, j, k]
                    nb[axis] += 1 if side else -1
                    if cavity_cell[tuple(nb)] == ci + 1:
                        continue
                    for tri in _face_quads(axis, side):
                        ids = [corner_id(i, j, k, a, b, c, keep_axis=axis) for a, b, c in tri]
                        n = np.cross(grid[ids[1]] - grid[ids[0]], grid[ids[2]] - grid[ids[0]])
                        if n[axis] * (1 if side else -1) < 0:
                            ids[1], ids[2] = ids[2], ids[1]
                        tris.append(ids)
        cav_tris[name] = np.asarray(tris, dtype=np.int64)

    def compact(tets):
        used = np.unique(tets)
        remap = np.full(len(grid), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return used, remap

    spa_used, spa_map = compact(spa_g)
    spine_used, spine_map = compact(spine_g)

    spa_fixed = np.flatnonzero(grid[spa_used, 0] == xs[0])
    spine_fixed = np.flatnonzero(grid[spine_used, 0] == xs[0])
    shared = np.intersect1d(spa_used, spine_used)
    shared = shared[grid[shared, 0] != xs[0]]
    coupling = np.stack([spa_map[shared], spine_map[shared]], axis=1)

    spa_groups: Dict[str, Group] = {f"cavity_{n}": TriGroup(spa_map[t], closed=True) for n, t in cav_tris.items()}
    spa_groups["fixed"] = NodeGroup(spa_fixed)
    spa_groups["coupling"] = NodeGroup(coupling[:, 0])
    spine_groups: Dict[str, Group] = {"fixed": NodeGroup(spine_fixed), "coupling": NodeGroup(coupling[:, 1])}

    spa = TetMesh(grid[spa_used], spa_map[spa_g], spa_groups)
    spine = TetMesh(grid[spine_used], spine_map[spine_g], spine_groups)
    if np.any(spa_map[cav_tris["P1"]] < 0):
        raise MeshError("cavity surface is not supported by actuator elements")
    return ArmGeometry(
        spa=spa,
        spine=spine,
        cavities=tuple(f"cavity_{n}" for n in CAVITY_NAMES),
        fixed=("fixed", "fixed"),
        coupling=coupling,
        tip=np.array([p.length, 0.0, 0.0]),
        params=p,
    )


def analytic_spa_volume(p: ArmParams) -> float:
    (y0, y1), (z0, z1), (x0, x1) = p.cavity_y, p.cavity_z, p.cavity_x
    cavities = 4 * (y1 - y0) * (z1 - z0) * (x1 - x0)
    spine = p.spine_thickness * p.spine_height * p.spine_length
    return p.length * p.width * p.height - cavities - spine


def write_arm(geom: ArmGeometry, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_mesh(geom.spa, os.path.join(out_dir, "spa.tmesh"))
    write_mesh(geom.spine, os.path.join(out_dir, "spine.tmesh"))


# --------------------------------------------------------------------------- barycentric maps


@dataclass(frozen=True)
class BarycentricMap:
    tet_index: np.ndarray  # (K,)
    nodes: np.ndarray  # (K, 4) vertex indices of the containing tet
    weights: np.ndarray  # (K, 4)
    n_source: int


def barycentric_coords(vertices: np.ndarray, tets: np.ndarray, point) -> np.ndarray:
    """Barycentric coordinates of ``point`` with respect to every tet, shape (M, 4)."""
    v = vertices[tets]
    d = np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))
    rhs = np.asarray(point, dtype=float)[None, :] - v[:, 0]
    w123 = np.linalg.solve(d, rhs[..., None])[..., 0]
    return np.concatenate([1.0 - w123.sum(axis=1, keepdims=True), w123], axis=1)


def build_barycentric_map(mesh: TetMesh, rest: np.ndarray, points, inside_tol: float = 1e-9, dist_tol: float = 1e-6) -> BarycentricMap:
    rest = np.asarray(rest, dtype=float).reshape(-1, 3)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    idx, wts = [], []
    for pt in points:
        w = barycentric_coords(rest, mesh.tets, pt)
        wmin = w.min(axis=1)
        hit = np.flatnonzero(wmin >= -inside_tol)
        if hit.size:
            t = int(hit[0])
        else:
            t = int(np.argmax(wmin))
            clamped = np.clip(w[t], 0.0, None)
            clamped /= clamped.sum()
            nearest = clamped @ rest[mesh.tets[t]]
            if np.linalg.norm(nearest - pt) > dist_tol:
                raise MeshError(f"point {pt.tolist()} lies outside the mesh")
        idx.append(t)
        wts.append(w[t])
    tet_index = np.asarray(idx, dtype=np.int64)
    return BarycentricMap(tet_index, mesh.tets[tet_index].copy(), np.asarray(wts).reshape(-1, 4), mesh.n_nodes)


def apply_map(bmap: BarycentricMap, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if len(q) != bmap.n_source:
        raise MeshError(f"map expects {bmap.n_source} source nodes, got {len(q)}")
    return np.einsum("kj,kjd->kd", bmap.weights, q[bmap.nodes])
