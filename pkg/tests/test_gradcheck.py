import pytest

from invshade.gradcheck import LOOSE, TIGHT, REGISTRY, gradcheck, registered_ops


def test_field_query_seed_3_is_tight():
    r = gradcheck("field_query", 3)
    assert r["pass"] and r["max_rel_err"] < 1e-6


def test_o2n_ramp_seed_7():
    r = gradcheck("o2n_ramp", 7)
    assert r["pass"] and r["max_rel_err"] < 1e-4


@pytest.mark.parametrize("mode", ["literal", "microfacet"])
def test_render_wrt_probes(mode):
    assert gradcheck(f"render_{mode}_radiance", 0)["max_rel_err"] < 1e-4


@pytest.mark.parametrize("op", registered_ops())
def test_every_op_passes_one_seed(op):
    r = gradcheck(op, 11)
    assert r["pass"], r


def test_bilinear_and_mse_ops_carry_the_tight_tolerance():
    for op in ("field_query", "loss_mse", "brdf_literal"):
        assert REGISTRY[op].tolerance == TIGHT
    assert all(entry.tolerance <= LOOSE for entry in REGISTRY.values())


def test_registry_covers_the_differentiable_ops():
    need = {"field_query", "surface_points_chain", "o2n_chain", "rasterize_backward", "brdf_literal",
            "brdf_microfacet", "loss_mse", "loss_ssim", "mesh_regularizers"}
    need |= {f"render_{m}_{w}" for m in ("literal", "microfacet") for w in ("albedo", "roughness", "radiance",
                                                                              "normal")}
    assert need <= set(registered_ops())


def test_unknown_op_raises():
    with pytest.raises(ValueError, match="unknown op"):
        gradcheck("not_an_op", 0)


def test_report_is_deterministic():
    assert gradcheck("o2n_chain", 5) == gradcheck("o2n_chain", 5)
