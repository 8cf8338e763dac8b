import numpy as np
import pytest
from hypothesis import given, strategies as st

from invshade import fileio, geom
from invshade.bvh import build_bvh
from invshade.deshade import (DeshadeRequest, NormalPrior, NormalPriorRequest, deshade_analytic, deshade_external,
                              frame_path, noisy_normals, normal_prior)
from invshade.raster import Camera, rasterize
from invshade.shade import LightProbeSphere, probe_sphere, shading_image, visibility


def scene(seed=0, res=24):
    rng = np.random.default_rng(seed)
    a = geom.uv_sphere(16, 32)
    b = geom.box([0.9, 0.0, -0.5], [0.3, 0.3, 0.3], subdivisions=2)
    m = geom.merge_meshes([a, b])
    gb = rasterize(m, Camera.look_at([0.5, -3.0, 1.0], [0.3, 0, 0], [0, 0, 1], 50.0, res, res))
    probes = probe_sphere(8, 16)
    probes.radiance[...] = rng.uniform(0.0, 0.4, probes.radiance.shape)
    vis = visibility(gb.position, gb.mask, build_bvh(m), probes, 1e-4, m.bbox_diagonal())
    albedo = rng.uniform(0.05, 1.0, gb.shape + (3,))
    return gb, probes, vis, albedo


def test_unit_shading_is_identity():
    gb, _, _, albedo = scene()
    # one probe of radiance 1/dw straight along each normal would do; a full-sphere probe with
    # radiance 1/pi gives S = 1 for every normal under full visibility
    probes = LightProbeSphere(np.full((1, 1, 3), 1.0), np.array([[0.0, 0.0, 1.0]]), np.array([1.0]))
    n = np.zeros(gb.shape + (3,))
    n[gb.mask] = [0.0, 0.0, 1.0]
    from invshade.shade import full_visibility
    vis = full_visibility(gb.mask, probes)
    out, conf = deshade_analytic(DeshadeRequest(albedo, n, gb.mask), probes, vis, gb)
    assert np.array_equal(conf, gb.mask)
    assert np.array_equal(out[gb.mask], albedo[gb.mask])


@given(st.integers(0, 1000))
def test_recovers_albedo_from_multiplicative_pairs(seed):
    gb, probes, vis, albedo = scene(seed)
    s = shading_image(gb, gb.normal, probes, vis)
    out, conf = deshade_analytic(DeshadeRequest(albedo * s, gb.normal, gb.mask), probes, vis, gb)
    assert conf.sum() > 50
    assert np.abs(out[conf] - albedo[conf]).max() <= 1e-5


def test_dark_pixels_pass_through_with_zero_confidence():
    gb, probes, vis, albedo = scene()
    dim = probes.with_radiance(probes.radiance * 1e-3)
    shaded = albedo * 0.3
    out, conf = deshade_analytic(DeshadeRequest(shaded, gb.normal, gb.mask), dim, vis, gb, s_floor=0.05)
    assert not conf.any()
    assert np.array_equal(out, np.clip(shaded, 0, 1))


def test_idempotent_on_its_own_output():
    gb, probes, vis, albedo = scene(3)
    s = shading_image(gb, gb.normal, probes, vis)
    out, conf = deshade_analytic(DeshadeRequest(albedo * s, gb.normal, gb.mask), probes, vis, gb)
    again, conf2 = deshade_analytic(DeshadeRequest(out * s, gb.normal, gb.mask), probes, vis, gb)
    keep = conf & conf2 & (out < 1.0).all(axis=-1) & (out > 0.0).all(axis=-1)
    assert keep.sum() > 50
    assert np.abs(again[keep] - out[keep]).max() <= 1e-12


def test_external_reads_frame_files(tmp_path):
    gb, probes, vis, albedo = scene()
    a32 = albedo.astype(np.float32)
    fileio.write_pfm(frame_path(tmp_path, 4), a32)
    req = DeshadeRequest(a32.astype(np.float64), gb.normal, gb.mask, frame=4)
    assert np.array_equal(deshade_external(req, tmp_path), req.albedo_shaded)


def test_external_missing_frame_names_it(tmp_path):
    req = DeshadeRequest(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.ones((4, 4), bool), frame=17)
    with pytest.raises(OSError, match="frame 17"):
        deshade_external(req, tmp_path)


def test_analytic_output_round_trips_through_provider_files(tmp_path):
    gb, probes, vis, albedo = scene(5)
    s = shading_image(gb, gb.normal, probes, vis)
    out, _ = deshade_analytic(DeshadeRequest(albedo * s, gb.normal, gb.mask), probes, vis, gb)
    fileio.write_pfm(frame_path(tmp_path, 0), out)
    loaded = deshade_external(DeshadeRequest(out, gb.normal, gb.mask), tmp_path)
    assert np.array_equal(loaded, out.astype(np.float32).astype(np.float64))
    fileio.write_pfm(frame_path(tmp_path, 1), loaded)
    assert frame_path(tmp_path, 0).read_bytes() == frame_path(tmp_path, 1).read_bytes()


# ---------------------------------------------------------------------------
# normal prior


def gt_normals(n=120, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v, np.ones((n, n), bool)


def test_identity_prior_returns_input_bitwise():
    n, m = gt_normals(16)
    assert normal_prior(NormalPriorRequest(n, np.zeros_like(n), m), "identity") is n


def test_zero_sigma_returns_ground_truth():
    n, m = gt_normals(16)
    out = normal_prior(NormalPriorRequest(n * 0, n, m), "gt_noisy", sigma_deg=0.0, gt_normals=lambda v, f: (n, m))
    assert np.array_equal(out, n)


def test_ten_degree_noise_has_expected_mean_deviation():
    n, m = gt_normals(120)
    out = noisy_normals(n, m, 10.0, seed=3, frame=0)
    dev = np.degrees(np.arccos(np.clip(np.sum(out * n, axis=-1), -1, 1)))[m]
    assert dev.size >= 10_000
    assert 7.0 <= dev.mean() <= 13.0
    assert np.allclose(np.linalg.norm(out, axis=-1), 1.0)


def test_noise_is_deterministic_and_independent_per_frame():
    n, m = gt_normals(32)
    a = noisy_normals(n, m, 5.0, seed=1, frame=0)
    assert np.array_equal(a, noisy_normals(n, m, 5.0, seed=1, frame=0))
    assert not np.array_equal(a, noisy_normals(n, m, 5.0, seed=1, frame=1))
    assert not np.array_equal(a, noisy_normals(n, m, 5.0, seed=2, frame=0))


def test_external_prior_reads_per_view_directory(tmp_path):
    n, m = gt_normals(8)
    (tmp_path / "view01").mkdir()
    fileio.write_pfm(frame_path(tmp_path / "view01", 2), n)
    prior = NormalPrior("external", directory=tmp_path)
    out = prior(NormalPriorRequest(n, n, m, frame=2, view=1))
    assert np.array_equal(out, n.astype(np.float32))


def test_prior_configuration_errors():
    with pytest.raises(ValueError, match="unknown"):
        NormalPrior("hallucinate")
    with pytest.raises(ValueError, match="ground-truth"):
        NormalPrior("gt_noisy")
    with pytest.raises(ValueError, match="directory"):
        NormalPrior("external")
