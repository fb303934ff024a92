import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softarm.mesh import (
    CAVITY_NAMES,
    ArmParams,
    MeshError,
    NodeGroup,
    TetMesh,
    TriGroup,
    analytic_spa_volume,
    apply_map,
    build_barycentric_map,
    format_mesh,
    generate_arm,
    load_mesh,
    mesh_volume,
    parse_mesh,
    triangle_area_normal,
    write_arm,
)

from conftest import unit_tet_mesh


def _faces(tets):
    f = np.concatenate([tets[:, [0, 1, 2]], tets[:, [0, 1, 3]], tets[:, [0, 2, 3]], tets[:, [1, 2, 3]]])
    return collections.Counter(map(tuple, np.sort(f, axis=1).tolist()))


def test_unit_tet_volume():
    assert mesh_volume(unit_tet_mesh()) == pytest.approx(1 / 6, abs=1e-15)


def test_inverted_tet_reports_index():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    with pytest.raises(MeshError, match="tet 1 is negative-volume"):
        TetMesh(v, np.array([[0, 1, 2, 3], [0, 1, 2, 4]]))


def test_degenerate_tet_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    with pytest.raises(MeshError, match="degenerate"):
        TetMesh(v, np.array([[0, 1, 2, 3]]))


def test_index_out_of_range():
    v = np.eye(3)
    with pytest.raises(MeshError, match="out of range"):
        TetMesh(v, np.array([[0, 1, 2, 5]]))


def test_triangle_area_normal_right_hand_rule():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    area, n = triangle_area_normal(pts, (0, 1, 2))
    assert area == 0.5
    np.testing.assert_array_equal(n, [0, 0, 1])
    _, n2 = triangle_area_normal(pts, (0, 2, 1))
    np.testing.assert_array_equal(n2, [0, 0, -1])


def test_zero_area_triangle_raises():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(MeshError):
        triangle_area_normal(pts, (0, 1, 2))


def test_closed_flag_requires_closed_surface():
    m = unit_tet_mesh()
    open_tris = np.array([[0, 2, 1], [0, 1, 3]])
    with pytest.raises(MeshError, match="closed"):
        TetMesh(m.vertices, m.tets, {"c": TriGroup(open_tris, closed=True)})


def test_roundtrip_is_canonical(arm):
    text = format_mesh(arm.spa)
    again = parse_mesh(text)
    assert format_mesh(again) == text
    np.testing.assert_array_equal(again.vertices, arm.spa.vertices)
    for name in CAVITY_NAMES:
        assert again.tri_group(f"cavity_{name}").closed


@pytest.mark.parametrize(
    "text, message",
    [
        ("tmesh 2\n", "version"),
        ("tmesh 1\nnodes 1\n0 0\n", "line 3"),
        ("tmesh 1\nnodes 1\n0 0 x\n", "line 3"),
        ("tmesh 1\nnodes 0\ntets 0\ngroups 1\ngroup a box 0\n", "unknown group kind"),
        ("tmesh 1\nnodes 0\ntets 0\n", "end of file"),
        ("tmesh 1\nnodes 0\ntets 0\ngroups 0\nextra\n", "trailing"),
    ],
)
def test_parse_errors_carry_line_numbers(text, message):
    with pytest.raises(MeshError, match=message):
        parse_mesh(text)


def test_files_on_disk(tmp_path, arm):
    write_arm(arm, tmp_path)
    spa = load_mesh(tmp_path / "spa.tmesh")
    spine = load_mesh(tmp_path / "spine.tmesh")
    assert spa.n_nodes == arm.spa.n_nodes and spine.n_nodes == arm.spine.n_nodes
    assert len(spa.node_group("coupling").nodes) == len(spine.node_group("coupling").nodes)


class TestGeneratedArm:
    def test_volume_matches_box_minus_cavities_and_spine(self, arm):
        assert mesh_volume(arm.spa) == pytest.approx(analytic_spa_volume(arm.params), rel=1e-12)
        p = arm.params
        assert mesh_volume(arm.spine) == pytest.approx(p.spine_thickness * p.spine_height * p.spine_length, rel=1e-12)

    def test_desk_scale_element_count(self, arm):
        assert 2000 <= len(arm.spa.tets) <= 4000

    def test_conforming(self, arm):
        for mesh in (arm.spa, arm.spine):
            assert max(_faces(mesh.tets).values()) == 2

    def test_four_closed_cavities_enclose_their_box(self, arm):
        p = arm.params
        box = (p.cavity_x[1] - p.cavity_x[0]) * (p.cavity_y[1] - p.cavity_y[0]) * (p.cavity_z[1] - p.cavity_z[0])
        for name in arm.cavities:
            g = arm.spa.tri_group(name)
            assert g.closed
            x = arm.spa.vertices[g.triangles]
            vol = np.einsum("ij,ij->i", x[:, 0], np.cross(x[:, 1], x[:, 2])).sum() / 6
            assert vol == pytest.approx(box, rel=1e-12)

    def test_cavity_quadrants(self, arm):
        expected = {"P1": (1, 1), "P2": (-1, 1), "P3": (1, -1), "P4": (-1, -1)}
        for name, (sy, sz) in expected.items():
            c = arm.spa.vertices[np.unique(arm.spa.tri_group(f"cavity_{name}").triangles)].mean(axis=0)
            assert np.sign(c[1]) == sy and np.sign(c[2]) == sz

    def test_mirror_symmetric(self, arm):
        v = arm.spa.vertices
        key = {tuple(np.round(p, 12) + 0.0): i for i, p in enumerate(v)}
        tets = set(map(tuple, np.sort(arm.spa.tets, axis=1).tolist()))
        for m in ([1, -1, 1], [1, 1, -1]):
            perm = np.array([key[tuple(np.round(p * m, 12) + 0.0)] for p in v])
            assert set(map(tuple, np.sort(perm[arm.spa.tets], axis=1).tolist())) == tets

    def test_coupling_pairs_coincide(self, arm):
        a = arm.spa.vertices[arm.coupling[:, 0]]
        b = arm.spine.vertices[arm.coupling[:, 1]]
        np.testing.assert_array_equal(a, b)
        assert len(arm.coupling) > 0

    def test_fixed_faces_at_root(self, arm):
        for mesh in (arm.spa, arm.spine):
            nodes = mesh.node_group("fixed").nodes
            assert len(nodes) > 0
            assert np.all(mesh.vertices[nodes, 0] == 0.0)

    def test_tip_inside_spine(self, arm):
        bmap = build_barycentric_map(arm.spine, arm.spine.vertices, arm.tip[None])
        np.testing.assert_allclose(apply_map(bmap, arm.spine.vertices)[0], arm.tip, atol=1e-15)


@pytest.mark.parametrize(
    "override, message",
    [
        ({"cavity_y": (0.0005, 0.011)}, "spine"),
        ({"cavity_z": (0.0015, 0.02)}, "outer wall"),
        ({"cavity_x": (0.0, 0.1)}, "end caps"),
        ({"element_size": 0.05}, "element size"),
        ({"length": -1.0}, "positive"),
    ],
)
def test_infeasible_parameters(override, message):
    with pytest.raises(MeshError, match=message):
        generate_arm(ArmParams(**override))


def test_unknown_parameter():
    with pytest.raises(MeshError, match="unknown"):
        ArmParams.from_dict({"lenght": 0.1})


@settings(max_examples=15, deadline=None)
@given(
    length=st.floats(0.06, 0.16),
    h=st.floats(0.006, 0.015),
)
def test_generated_volume_property(length, h):
    p = ArmParams(length=length, cavity_x=(0.008, length - 0.008), spine_length=length, element_size=h)
    g = generate_arm(p)
    assert mesh_volume(g.spa) == pytest.approx(analytic_spa_volume(p), rel=1e-10)
    assert max(_faces(g.spa.tets).values()) == 2


class TestBarycentric:
    def test_vertex_maps_exactly(self):
        m = unit_tet_mesh()
        bmap = build_barycentric_map(m, m.vertices, m.vertices)
        np.testing.assert_allclose(apply_map(bmap, m.vertices), m.vertices, atol=1e-15)

    def test_outside_point_rejected(self):
        m = unit_tet_mesh()
        with pytest.raises(MeshError, match="outside"):
            build_barycentric_map(m, m.vertices, [[1.0, 1.0, 1.0]])

    def test_face_point_within_tolerance(self):
        m = unit_tet_mesh()
        bmap = build_barycentric_map(m, m.vertices, [[0.25, 0.25, -1e-8]])
        assert np.all(bmap.weights >= -1e-6)

    @settings(max_examples=40, deadline=None)
    @given(
        w=st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
        A=st.lists(st.floats(-0.3, 0.3), min_size=9, max_size=9),
        t=st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    )
    def test_affine_motion_reproduced(self, w, A, t):
        m = unit_tet_mesh()
        w = np.array(w) / np.sum(w)
        point = w @ m.vertices
        bmap = build_barycentric_map(m, m.vertices, point[None])
        F = np.eye(3) + np.array(A).reshape(3, 3)
        q = m.vertices @ F.T + np.array(t)
        np.testing.assert_allclose(apply_map(bmap, q)[0], F @ point + t, atol=1e-12)

    def test_partition_of_unity(self, arm):
        pts = np.array([[0.05, 0.0, 0.0], [0.1, 0.0005, -0.004], arm.tip])
        bmap = build_barycentric_map(arm.spine, arm.spine.vertices, pts)
        np.testing.assert_allclose(bmap.weights.sum(axis=1), 1.0, atol=1e-14)

    def test_size_mismatch(self):
        m = unit_tet_mesh()
        bmap = build_barycentric_map(m, m.vertices, m.vertices[:1])
        with pytest.raises(MeshError):
            apply_map(bmap, np.zeros((5, 3)))


def test_node_group_lookup_errors():
    m = unit_tet_mesh()
    m2 = TetMesh(m.vertices, m.tets, {"n": NodeGroup([0, 1])})
    with pytest.raises(MeshError):
        m2.tri_group("n")
    with pytest.raises(MeshError):
        m2.node_group("missing")
