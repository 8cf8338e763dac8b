import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import binary_erosion

from invshade import geom
from invshade.fields import UVField, field_init
from invshade.o2n import NormalConversion, offsets_to_normals, surface_points
from invshade.raster import Camera, GBuffer, interpolate, rasterize


def top_camera(res, center=(0.0, 0.0), height=3.0, fov=36.0):
    cx, cy = center
    return Camera.look_at([cx + 0.05, cy - 0.03, height], [cx, cy, 0.0], [0, 1, 0], fov, res, res)


def plane(n=4, size=2.0, slope=0.0):
    m = geom.grid_plane(n, n, (size, size))
    pos = m.positions - [size / 2, size / 2, 0.0]
    pos[:, 2] = slope * pos[:, 0]
    return m.with_positions(pos)


def angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)))


def test_zero_offset_field_leaves_positions():
    gb = rasterize(plane(), top_camera(16))
    x, l = surface_points(gb, field_init((5, 5), 1))
    assert np.array_equal(x[gb.mask], gb.position[gb.mask])
    assert not l.any()


def test_single_pixel_direct_formula():
    one = np.ones((1, 1), bool)
    gb = GBuffer(one, np.zeros((1, 1), np.int64), np.full((1, 1, 3), 1 / 3), np.full((1, 1, 2), 0.5),
                 np.array([[[1.0, 2.0, 3.0]]]), np.array([[[0.0, 1.0, 0.0]]]), np.ones((1, 1)), None, None)
    x, _ = surface_points(gb, field_init((3, 3), 1, 0.25))
    assert np.array_equal(x[0, 0], [1.0, 2.25, 3.0])


def test_offset_equal_to_u_lifts_plane_by_u():
    m = plane(size=2.0)
    gb = rasterize(m, top_camera(16))
    f = UVField(np.array([[0.0, 1.0], [0.0, 1.0]])[..., None])
    x, _ = surface_points(gb, f)
    rows, cols = np.nonzero(gb.mask)
    pick = np.linspace(0, len(rows) - 1, 5).astype(int)
    for r, c in zip(rows[pick], cols[pick]):
        u = (gb.position[r, c, 0] + 1.0) / 2.0
        assert x[r, c, 2] == pytest.approx(u, abs=1e-12)
        assert np.array_equal(x[r, c, :2], gb.position[r, c, :2])


def test_flat_plane_gives_up_normals():
    gb = rasterize(plane(), top_camera(16))
    maps = offsets_to_normals(gb.position, gb)
    assert maps.valid.sum() > 100
    assert np.allclose(maps.n_surf[maps.valid], [0, 0, 1], atol=1e-12)


@pytest.mark.parametrize("a", [-0.7, 0.25, 1.3])
def test_ramp_matches_analytic_normal(a):
    gb = rasterize(plane(slope=a), top_camera(32))
    maps = offsets_to_normals(gb.position, gb)
    expect = np.array([-a, 0.0, 1.0]) / np.sqrt(1 + a * a)
    assert maps.valid.sum() > 400
    assert np.abs(maps.n_surf[maps.valid] - expect).max() <= 1e-6


def sinusoid_scene(res=128, amp=0.05, nodes=513):
    m = geom.grid_plane(8, 8, (1.6, 1.6))
    m = m.with_positions(m.positions - [0.3, 0.3, 0.0])  # covers [-0.3, 1.3]^2, uv spans it
    cam = Camera.look_at([0.5, 0.5, 3.0], [0.5, 0.5, 0.0], [0, 1, 0], 21.0, res, res)
    s = np.linspace(-0.3, 1.3, nodes)
    x, y = np.meshgrid(s, s, indexing="xy")
    height = amp * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    gb = rasterize(m, cam)
    return gb, UVField(height[..., None])


def test_sinusoid_normals_within_two_degrees_on_average():
    amp = 0.05
    gb, field = sinusoid_scene(amp=amp)
    x, _ = surface_points(gb, field)
    maps = offsets_to_normals(x, gb)
    px, py = x[..., 0], x[..., 1]
    hx = amp * 2 * np.pi * np.cos(2 * np.pi * px) * np.sin(2 * np.pi * py)
    hy = amp * 2 * np.pi * np.sin(2 * np.pi * px) * np.cos(2 * np.pi * py)
    n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    inner = binary_erosion(gb.mask, iterations=1, border_value=0) & maps.valid
    err = angle_deg(maps.n_surf[inner], n[inner])
    assert inner.sum() > 120 * 120
    assert err.mean() <= 2.0
    assert err.max() <= 5.0


def test_zero_offsets_agree_with_interpolated_normals_on_sphere():
    m = geom.uv_sphere(48, 96)
    cam = Camera.look_at([0.0, -3.5, 0.8], [0, 0, 0], [0, 0, 1], 40.0, 256, 256)
    gb = rasterize(m, cam)
    maps = offsets_to_normals(gb.position, gb)
    assert angle_deg(maps.n_surf[gb.mask], gb.normal[gb.mask]).mean() <= 3.0


@given(st.integers(0, 2 ** 31))
def test_rigid_motion_rotates_normals(seed):
    rng = np.random.default_rng(seed)
    m = plane(n=5)
    m = m.with_positions(m.positions + np.array([0, 0, 1]) * 0.1 * rng.standard_normal((m.n_vertices, 1)))
    cam = top_camera(20)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    t = rng.standard_normal(3)
    field = UVField(0.02 * rng.standard_normal((6, 6, 1)))
    nc = NormalConversion()
    a = nc.forward(rasterize(m, cam), field)
    moved = m.with_positions(m.positions @ r.T + t)
    gb2 = rasterize(moved, cam.transformed(r, t))
    b = nc.forward(gb2, field)
    both = a.valid & b.valid
    assert both.sum() > 100
    assert np.abs(b.n_surf[both] - a.n_surf[both] @ r.T).max() <= 1e-5


@given(st.floats(1e-3, 1e3))
def test_uniform_scaling_of_surface_points_keeps_normals(s):
    m = plane(n=5)
    m = m.with_positions(m.positions + np.array([0, 0, 1]) * np.sin(m.positions[:, :1] * 3) * 0.1)
    gb = rasterize(m, top_camera(20))
    a = offsets_to_normals(gb.position, gb)
    b = offsets_to_normals(s * gb.position, gb)
    assert np.array_equal(a.valid, b.valid)
    assert np.allclose(a.n_surf, b.n_surf, atol=1e-12)


@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.6))
def test_shrinking_the_mask_never_adds_valid_pixels(seed, drop):
    rng = np.random.default_rng(seed)
    m = geom.uv_sphere(12, 24)
    gb = rasterize(m, Camera.look_at([0, -3, 0.5], [0, 0, 0], [0, 0, 1], 40.0, 24, 24))
    before = offsets_to_normals(gb.position, gb).valid
    keep = gb.mask & (rng.random(gb.mask.shape) >= drop)
    shrunk = GBuffer(keep, gb.triangle_id, gb.barycentrics, gb.uv, gb.position, gb.normal, gb.depth, gb.camera,
                     gb.mesh)
    after = offsets_to_normals(gb.position, shrunk).valid
    assert not np.any(after & ~before)


def test_fewer_than_two_terms_falls_back_to_base_normal():
    gb = rasterize(plane(slope=0.4), top_camera(16))
    lonely = np.zeros_like(gb.mask)
    r, c = np.argwhere(gb.mask)[0]
    lonely[r, c] = True
    one = GBuffer(lonely, gb.triangle_id, gb.barycentrics, gb.uv, gb.position, gb.normal, gb.depth, gb.camera,
                  gb.mesh)
    maps = offsets_to_normals(gb.position, one)
    assert not maps.valid.any()
    assert np.array_equal(maps.n_surf[r, c], gb.normal[r, c])


def test_zero_cotangent_gives_zero_parameter_grads():
    m = plane(slope=0.2)
    gb = rasterize(m, top_camera(16))
    nc = NormalConversion()
    nc.forward(gb, UVField(0.01 * np.random.default_rng(0).standard_normal((5, 5, 1))))
    out = nc.backward(np.zeros(gb.shape + (3,)))
    assert not out.offset_values.any()
    assert not out.vertex_positions.any()
    assert not out.vertex_normals.any()


def normal_loss(n, target, mask):
    return float(np.sum(np.where(mask[..., None], (n - target) ** 2, 0.0)))


def test_offset_field_adjoint_on_16x16_ramp(rng):
    m = plane(slope=0.3)
    gb = rasterize(m, top_camera(16))
    target = rng.standard_normal(gb.shape + (3,))
    values = 0.01 * rng.standard_normal((6, 6, 1))
    nc = NormalConversion()
    maps = nc.forward(gb, UVField(values))
    grad = nc.backward(2 * np.where(gb.mask[..., None], maps.n_surf - target, 0.0)).offset_values
    d = rng.standard_normal(values.shape)
    h = 1e-6
    f = lambda v: normal_loss(offsets_to_normals(surface_points(gb, UVField(v))[0], gb).n_surf, target, gb.mask)
    fd = (f(values + h * d) - f(values - h * d)) / (2 * h)
    assert abs(np.sum(grad * d) - fd) <= 1e-4 * abs(fd)


def test_single_vertex_adjoint(rng):
    m = plane(n=4, slope=0.3)
    cam = top_camera(16)
    tri = rasterize(m, cam).triangle_id
    field = UVField(0.01 * rng.standard_normal((6, 6, 1)))
    target = rng.standard_normal((16, 16, 3))
    mask = tri >= 0

    def forward(pos):
        mesh = m.with_positions(pos)
        nc = NormalConversion()
        return mesh, nc, nc.forward(interpolate(mesh, cam, tri), field)

    mesh, nc, maps = forward(m.positions)
    out = nc.backward(2 * np.where(mask[..., None], maps.n_surf - target, 0.0))
    g = out.vertex_positions + geom.vertex_normals_backward(mesh.positions, mesh.faces, out.vertex_normals)
    interior = np.flatnonzero((np.abs(m.positions[:, 0]) < 0.9) & (np.abs(m.positions[:, 1]) < 0.9))
    v = interior[len(interior) // 2]
    h = 1e-5
    for axis in range(3):
        p, q = m.positions.copy(), m.positions.copy()
        p[v, axis] += h
        q[v, axis] -= h
        fd = (normal_loss(forward(p)[2].n_surf, target, mask) - normal_loss(forward(q)[2].n_surf, target, mask)) / (2 * h)
        assert abs(g[v, axis] - fd) <= 1e-3 * max(abs(fd), 1e-8)


def test_backward_before_forward_raises():
    with pytest.raises(RuntimeError):
        NormalConversion().backward(np.zeros((2, 2, 3)))
