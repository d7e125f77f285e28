import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icafpn import autodiff as ad
from icafpn import nn
from icafpn.afw import afw_block
from icafpn.autodiff import ParamStore, Tensor
from icafpn.ica import zero_residual_branches
from icafpn.neck import (
    LEVELS,
    VARIANTS,
    FusionWeights,
    NeckConfig,
    Pyramid,
    aff,
    fpn_baseline_forward,
    fusion_alphas,
    icaf_fpn_forward,
    lateral,
)


def store():
    return ParamStore(seed=21, precision=64)


def feats_for(rng, size, widths=(4, 6, 8, 10)):
    return {lvl: Tensor(rng.normal(size=(1, c, size // 2**lvl, size // 2**lvl))) for lvl, c in zip((2, 3, 4, 5), widths)}


# ---- fusion weights ---------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-100, 100))
def test_alpha_on_simplex_and_shift_invariant(logits, shift):
    a = FusionWeights(Tensor(np.array(logits))).alpha.data
    assert (a >= 0).all()
    assert abs(a.sum() - 1.0) <= 1e-12
    b = FusionWeights(Tensor(np.array(logits) + shift)).alpha.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_zero_logits_give_thirds():
    np.testing.assert_allclose(FusionWeights(Tensor(np.zeros(3))).alpha.data, np.full(3, 1 / 3), atol=1e-15)


def test_saturated_corner_selects_if(rng):
    t = [Tensor(rng.normal(size=(1, 4, 3, 3))) for _ in range(3)]
    out = aff(*t, FusionWeights(Tensor(np.array([20.0, -20.0, -20.0]))))
    np.testing.assert_allclose(out.data, t[0].data, rtol=0, atol=1e-6)


def test_convex_fixed_point(rng):
    t = Tensor(rng.normal(size=(1, 4, 3, 3)))
    for logits in ([0.3, -2.0, 5.0], [0.0, 0.0, 0.0]):
        np.testing.assert_allclose(aff(t, t, t, FusionWeights(Tensor(np.array(logits)))).data, t.data, atol=1e-14)


def test_aff_shape_mismatch(rng):
    a, b = Tensor(np.zeros((1, 4, 3, 3))), Tensor(np.zeros((1, 4, 2, 3)))
    with pytest.raises(ad.DimensionError):
        aff(a, a, b, FusionWeights(Tensor(np.zeros(3))))


# ---- lateral -----------------------------------------------------------------------------


def test_lateral_identity_and_projection(rng):
    params = store()
    c = Tensor(rng.normal(size=(1, 6, 4, 4)))
    lateral(c, params, "lat", 6)
    params.set("lat.weight", np.eye(6)[:, :, None, None])
    np.testing.assert_array_equal(lateral(c, params, "lat", 6).data, c.data)
    assert lateral(Tensor(rng.normal(size=(1, 128, 16, 16))), store(), "lat", 64).shape == (1, 64, 16, 16)


def test_lateral_gradcheck(rng):
    params = store()
    c = Tensor(rng.normal(size=(1, 5, 3, 3)))
    lateral(c, params, "lat", 4)
    err, _ = ad.grad_check(lambda: lateral(c, params, "lat", 4), {"C": c, **dict(params.items())})
    assert err < 1e-6


# ---- geometry ------------------------------------------------------------------------------


@pytest.mark.parametrize("size", [64, 128, 96])
@pytest.mark.parametrize("variant", VARIANTS)
def test_stride_table(rng, size, variant):
    feats = feats_for(rng, size)
    outs = icaf_fpn_forward(Pyramid(feats, (size, size)), store(), NeckConfig(width=6, variant=variant))
    assert [o.shape for o in outs] == [(1, 6, size // s, size // s) for s in (8, 16, 32)]


def test_pyramid_validates_geometry(rng):
    feats = feats_for(rng, 64)
    with pytest.raises(ad.DimensionError):
        Pyramid(feats, (128, 128))


def test_unknown_variant():
    with pytest.raises(ValueError):
        NeckConfig(variant="bifpn")


def test_forward_is_deterministic(rng):
    feats = feats_for(rng, 64)
    a = icaf_fpn_forward(feats, ParamStore(seed=4, precision=64), NeckConfig(width=6))
    b = icaf_fpn_forward(feats, ParamStore(seed=4, precision=64), NeckConfig(width=6))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_parameter_census_grows_with_blocks(rng):
    feats = feats_for(rng, 64)
    counts = {}
    for v in VARIANTS:
        params = store()
        icaf_fpn_forward(feats, params, NeckConfig(width=6, variant=v))
        counts[v] = params.count()
    assert counts["full"] > counts["ica+afw-no-aff"] > counts["afw-only"]
    assert counts["ica+afw-no-aff"] > counts["ica-only"]
    assert counts["full"] > counts["fpn-baseline"]
    no_c2 = store()
    icaf_fpn_forward(feats, no_c2, NeckConfig(width=6, use_c2=False))
    assert no_c2.count() < counts["full"]
    assert not any(k.startswith("afw.align2") for k, _ in no_c2.items())


def test_full_with_zeroed_branches_matches_compositional_reference(rng):
    feats = feats_for(rng, 64)
    params = store()
    cfg = NeckConfig(width=6)
    icaf_fpn_forward(feats, params, cfg)
    for lvl in LEVELS:
        zero_residual_branches(params, f"neck.ica{lvl}")
    out = icaf_fpn_forward(feats, params, cfg)
    af = afw_block(feats, params, 6)
    for i, lvl in enumerate(LEVELS):
        c_prime = nn.conv(feats[lvl], params, f"neck.ica{lvl}.conv", 6, k=3).data
        lat = nn.conv1x1(feats[lvl], params, f"neck.lat{lvl}", 6).data
        np.testing.assert_allclose(out[i].data, (c_prime + af[i].data + lat) / 3, rtol=0, atol=1e-12)
    assert fusion_alphas(params) == {lvl: [pytest.approx(1 / 3)] * 3 for lvl in LEVELS}


def test_no_aff_variant_sums_branches(rng):
    feats = feats_for(rng, 64)
    params = store()
    out = icaf_fpn_forward(feats, params, NeckConfig(width=6, variant="afw-only"))
    af = afw_block(feats, params, 6)
    for i, lvl in enumerate(LEVELS):
        lat = nn.conv1x1(feats[lvl], params, f"neck.lat{lvl}", 6).data
        np.testing.assert_allclose(out[i].data, lat + af[i].data, atol=1e-12)


# ---- FPN baseline ----------------------------------------------------------------------------


def _identity_fpn(params, width):
    """Laterals pass channels through, smoothing is the identity 3x3 kernel, biases zero."""
    for lvl in LEVELS:
        params.set(f"fpn.lat{lvl}.weight", np.eye(width)[:, :, None, None])
        params.set(f"fpn.lat{lvl}.bias", np.zeros(width))
        k = np.zeros((width, width, 3, 3))
        k[np.arange(width), np.arange(width), 1, 1] = 1.0
        params.set(f"fpn.smooth{lvl}.weight", k)
        params.set(f"fpn.smooth{lvl}.bias", np.zeros(width))


def test_fpn_single_pixel_spreads_into_upsampled_block():
    params = store()
    _identity_fpn(params, 1)
    c3, c4, c5 = (Tensor(np.zeros((1, 1, s, s))) for s in (8, 4, 2))
    c5.data[0, 0, 1, 0] = 1.0
    p3, p4, p5 = fpn_baseline_forward(c3, c4, c5, params, 1)
    want4 = np.zeros((4, 4))
    want4[2:4, 0:2] = 1.0
    np.testing.assert_array_equal(p4.data[0, 0], want4)
    want3 = np.zeros((8, 8))
    want3[4:8, 0:4] = 1.0
    np.testing.assert_array_equal(p3.data[0, 0], want3)
    np.testing.assert_array_equal(p5.data, c5.data)


def test_fpn_zero_c5_leaves_p4_lateral_path(rng):
    params = store()
    c3, c4 = Tensor(rng.normal(size=(1, 3, 8, 8))), Tensor(rng.normal(size=(1, 5, 4, 4)))
    c5 = Tensor(np.zeros((1, 7, 2, 2)))
    _, p4, _ = fpn_baseline_forward(c3, c4, c5, params, 4)
    # lateral bias is zero at init so the upsampled C5 path adds nothing
    want = nn.conv(nn.conv1x1(c4, params, "fpn.lat4", 4), params, "fpn.smooth4", 4, k=3)
    np.testing.assert_array_equal(p4.data, want.data)


def test_end_to_end_neck_gradcheck(rng):
    feats = feats_for(rng, 32)
    params = store()
    cfg = NeckConfig(width=6)
    fn = lambda: ad.concat([o.reshape(-1) for o in icaf_fpn_forward(feats, params, cfg)], axis=0)
    fn()
    inputs = {**{f"C{lvl}": t for lvl, t in feats.items()}, **dict(params.items())}
    err, per = ad.grad_check(fn, inputs, max_entries=6)
    assert err < 1e-4, max(per, key=per.get)
    groups = {"neck.ica", "afw.", "neck.lat", "neck.aff"}
    assert all(any(k.startswith(g) for k in per) for g in groups)
