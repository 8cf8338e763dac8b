import numpy as np
import pytest
from hypothesis import given, strategies as st

from invshade import geom
from invshade.geom import Pose, TriangleMesh


def tetra_cube():
    """Unit cube whose face diagonals are the edges of an inscribed tetrahedron.

    With that split every corner sees the same triangle areas on its three
    faces, so area weighting keeps the corner normals symmetric.
    """
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    tet = {i for i, c in enumerate(corners) if int(c.sum()) % 2 == 0}
    faces = []
    for axis in range(3):
        for side in (0, 1):
            quad = [i for i, c in enumerate(corners) if c[axis] == side]
            diag = [i for i in quad if i in tet]
            other = [i for i in quad if i not in tet]
            for o in other:
                tri = [diag[0], o, diag[1]]
                n = np.cross(corners[tri[1]] - corners[tri[0]], corners[tri[2]] - corners[tri[0]])
                outward = np.zeros(3)
                outward[axis] = 1 if side else -1
                if n @ outward < 0:
                    tri = tri[::-1]
                faces.append(tri)
    return TriangleMesh(corners - 0.5, faces)


def random_mesh(rng, n=6):
    m = geom.grid_plane(n, n)
    pos = m.positions.copy()
    pos[:, 2] = 0.1 * rng.standard_normal(len(pos))
    return m.with_positions(pos)


# ---------------------------------------------------------------------------
# normals


def test_cube_corner_normals_point_along_diagonals():
    m = tetra_cube()
    expect = np.sign(m.positions) / np.sqrt(3)
    assert np.allclose(m.normals, expect, atol=1e-12)


def test_single_ccw_triangle_faces_up():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert np.array_equal(m.normals, np.tile([0.0, 0.0, 1.0], (3, 1)))


def test_icosphere_normals_close_to_radial():
    m = geom.icosphere(2)
    assert len(m.faces) == 320
    radial = m.positions / np.linalg.norm(m.positions, axis=1, keepdims=True)
    angle = np.degrees(np.arccos(np.clip(np.sum(radial * m.normals, axis=1), -1, 1)))
    assert angle.max() < 5.0


def test_rejects_out_of_range_and_degenerate_faces():
    with pytest.raises(ValueError, match="out of range"):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ValueError, match="degenerate"):
        TriangleMesh(np.eye(3), [[0, 1, 1]])


def test_skin_weights_must_sum_to_one():
    with pytest.raises(ValueError, match="sum to 1"):
        TriangleMesh(np.eye(3), [[0, 1, 2]], skin_weights=np.full((3, 2), 0.4))


def test_vertex_normals_backward_matches_finite_differences(rng):
    m = random_mesh(rng)
    g = rng.standard_normal(m.normals.shape)
    grad = geom.vertex_normals_backward(m.positions, m.faces, g)
    d = rng.standard_normal(m.positions.shape)
    h = 1e-6
    f = lambda x: np.sum(g * geom.compute_vertex_normals(x, m.faces))
    fd = (f(m.positions + h * d) - f(m.positions - h * d)) / (2 * h)
    assert np.sum(grad * d) == pytest.approx(fd, rel=1e-6)


# ---------------------------------------------------------------------------
# deformation


def test_zero_offsets_keep_positions():
    m = geom.icosphere(1)
    out = geom.apply_vertex_offsets(m, np.zeros(m.n_vertices))
    assert np.array_equal(out.positions, m.positions)


def test_offset_moves_along_normal():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    out = geom.apply_vertex_offsets(m, [0.5, 0.0, 0.0])
    assert np.allclose(out.positions[0], [0, 0, 0.5])


def test_uniform_offset_inflates_icosphere():
    m = geom.icosphere(3)
    r = np.linalg.norm(geom.apply_vertex_offsets(m, np.full(m.n_vertices, 0.1)).positions, axis=1)
    assert r.min() >= 1.099 and r.max() <= 1.101


def test_offsets_wrong_length():
    with pytest.raises(ValueError, match="expected"):
        geom.apply_vertex_offsets(geom.icosphere(0), np.zeros(3))


@given(st.integers(0, 2 ** 31), st.floats(0.001, 0.5))
def test_offset_then_negated_offset_is_identity_with_fixed_normals(seed, scale):
    rng = np.random.default_rng(seed)
    m = geom.icosphere(1)
    l = scale * rng.standard_normal(m.n_vertices)
    x = m.positions + m.normals * l[:, None]
    back = x - m.normals * l[:, None]
    assert np.abs(back - m.positions).max() <= 1e-12


def two_bone_mesh(weights):
    m = geom.icosphere(1)
    w = np.tile(weights, (m.n_vertices, 1))
    return TriangleMesh(m.positions, m.faces, skin_weights=w)


def test_identity_pose_is_bitwise_noop():
    m = two_bone_mesh([0.3, 0.7])
    assert np.array_equal(geom.pose_mesh(m, Pose.identity(2)).positions, m.positions)


def test_single_bone_translation():
    m = two_bone_mesh([1.0])
    t = np.array([0.1, -2.0, 0.5])
    out = geom.pose_mesh(m, Pose(np.eye(3)[None], t[None]))
    assert np.allclose(out.positions, m.positions + t, atol=1e-15)


def test_two_bone_blend_is_average_translation():
    m = two_bone_mesh([0.5, 0.5])
    t = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    out = geom.pose_mesh(m, Pose(np.tile(np.eye(3), (2, 1, 1)), t))
    assert np.allclose(out.positions, m.positions + t.mean(axis=0), atol=1e-15)


def test_pose_rejects_improper_rotation():
    with pytest.raises(ValueError, match="proper rotation"):
        Pose(-np.eye(3)[None], np.zeros((1, 3)))


def test_pose_bone_count_mismatch():
    with pytest.raises(ValueError, match="bones"):
        geom.pose_mesh(two_bone_mesh([1.0]), Pose.identity(2))


# ---------------------------------------------------------------------------
# regularizers


def test_unit_edges_with_zero_target_give_unit_edge_loss():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]], [[0, 1, 2]])
    assert geom.mesh_regularizers(m.positions, m.faces, 0.0).edge == pytest.approx(1.0, abs=1e-15)


def test_flat_grid_has_no_bending_or_interior_laplacian():
    m = geom.grid_plane(6, 5, (2.0, 1.0))
    reg = geom.mesh_regularizers(m.positions, m.faces, 0.1)
    assert reg.normal == pytest.approx(0.0, abs=1e-15)
    lx = geom.uniform_laplacian(m.n_vertices, m.faces) @ m.positions
    boundary = np.isin(np.arange(m.n_vertices), geom.unique_edges(m.faces).ravel()) & (
        (m.positions[:, 0] == 0) | (m.positions[:, 0] == 2) | (m.positions[:, 1] == 0) | (m.positions[:, 1] == 1))
    assert np.abs(lx[~boundary]).max() < 1e-14


def test_displaced_vertex_raises_all_three_losses():
    m = geom.icosphere(2)
    edges = geom.unique_edges(m.faces)
    target = np.linalg.norm(m.positions[edges[:, 0]] - m.positions[edges[:, 1]], axis=1).mean()
    base = geom.mesh_regularizers(m.positions, m.faces, target)
    x = m.positions.copy()
    x[7] *= 1.2
    bumped = geom.mesh_regularizers(x, m.faces, target)
    assert bumped.edge > base.edge
    assert bumped.normal > base.normal
    assert bumped.laplacian > base.laplacian


@given(st.integers(0, 2 ** 31))
def test_regularizer_adjoints_on_random_50_vertex_meshes(seed):
    rng = np.random.default_rng(seed)
    m = geom.grid_plane(10, 5)
    x = m.positions + 0.05 * rng.standard_normal(m.positions.shape)
    target = 0.08
    reg = geom.mesh_regularizers(x, m.faces, target)
    d = rng.standard_normal(x.shape)
    h = 1e-6
    for name in ("edge", "normal", "laplacian"):
        f = lambda y: getattr(geom.mesh_regularizers(y, m.faces, target), name)
        fd = (f(x + h * d) - f(x - h * d)) / (2 * h)
        an = np.sum(getattr(reg, f"grad_{name}") * d)
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8), name


# ---------------------------------------------------------------------------
# distances


def test_self_distance():
    m = geom.icosphere(2)
    cd, p2s = geom.chamfer_and_p2s(m, m, 4000, seed=3)
    assert p2s == 0.0
    pts = geom.sample_surface(m, 4000, np.random.default_rng(3))
    # mean nearest-neighbour spacing of the sample set
    from scipy.spatial import cKDTree
    spacing = cKDTree(pts).query(pts, k=2)[0][:, 1].mean()
    assert cd <= spacing


def test_chamfer_is_deterministic_per_seed_and_symmetric():
    a, b = geom.icosphere(2), geom.icosphere(1, radius=1.1)
    cd, p2s = geom.chamfer_and_p2s(a, b, 2000, 9)
    assert (cd, p2s) == geom.chamfer_and_p2s(a, b, 2000, 9)
    assert geom.chamfer_and_p2s(b, a, 2000, 9)[0] == cd


def test_parallel_squares():
    a = geom.grid_plane(3, 3)
    b = geom.grid_plane(3, 3, z=0.3)
    _, p2s = geom.chamfer_and_p2s(a, b, 3000, 0)
    assert p2s == pytest.approx(0.3, abs=1e-6)


def test_concentric_spheres():
    a = geom.icosphere(4)
    b = geom.icosphere(4, radius=1.05)
    _, p2s = geom.chamfer_and_p2s(a, b, 5000, 0)
    assert abs(p2s - 0.05) <= 0.005


def test_primitive_uv_layouts_cover_unit_square():
    for m in (geom.uv_sphere(8, 16), geom.box([0, 0, 0], [1, 1, 1]), geom.grid_plane(4, 4)):
        assert m.uvs.min() >= 0.0 and m.uvs.max() <= 1.0
