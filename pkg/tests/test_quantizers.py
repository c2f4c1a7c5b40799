import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qeq.quantizers import (ClippingRange, DegenerateRangeError, QuantGrid, QuantizationError, QuantizerSpec,
                            apot_grid, calibrate, companded_grid, companding_quantize, distortion, minkowski_sum,
                            mu_compress, mu_expand, pot_grid, symmetric_signed_grid, uniform_grid, unit_uniform_grid)


# -- calibrate ------------------------------------------------------------------

def test_calibrate_minmax_matches_data():
    rng_, s, z = calibrate(np.arange(16.0), "minmax", bits=4)
    assert (rng_.lo, rng_.hi, s, z) == (0.0, 15.0, 1.0, 0)


def test_calibrate_mean_sigma():
    rng_, s, z = calibrate(np.array([-1.0, 1.0]), "mean-sigma", kappa=4, bits=3)
    assert (rng_.lo, rng_.hi) == (-4.0, 4.0)
    assert s == pytest.approx(8 / 7)
    assert z == math.floor(4 / (8 / 7))


@pytest.mark.parametrize("mode", ["mean-sigma", "minmax", "mse"])
def test_calibrate_degenerate(mode):
    with pytest.raises(DegenerateRangeError):
        calibrate(np.full(10, 2.5), mode)


def test_calibrate_fixed_and_mse(rng):
    r, s, z = calibrate(rng.normal(size=10), "fixed", fixed=(-2.0, 2.0), bits=2)
    assert (r.lo, r.hi, s) == (-2.0, 2.0, pytest.approx(4 / 3))
    v = rng.normal(size=20_000)
    r_mse, s_mse, z_mse = calibrate(v, "mse", bits=3)
    r_mm, s_mm, z_mm = calibrate(v, "minmax", bits=3)
    assert distortion(uniform_grid(s_mse, z_mse, 3), v) <= distortion(uniform_grid(s_mm, z_mm, 3), v)


def test_clipping_range_invariant():
    with pytest.raises(DegenerateRangeError):
        ClippingRange(1.0, 1.0)


# -- grids ---------------------------------------------------------------------

def test_uniform_grid_examples():
    np.testing.assert_array_equal(uniform_grid(1, 0, 2).symbols, [0, 1, 2, 3])
    np.testing.assert_array_equal(uniform_grid(1, 2, 2).symbols, [-2, -1, 0, 1])
    g = uniform_grid(0.25, 0, 3)
    np.testing.assert_array_equal(g.symbols, 0.25 * np.arange(8))
    with pytest.raises(QuantizationError):
        uniform_grid(0.0, 0, 2)


def test_symmetric_grid_examples():
    np.testing.assert_array_equal(symmetric_signed_grid(1, 2).symbols, [-2, -1, 0, 1])
    np.testing.assert_array_equal(symmetric_signed_grid(0.5, 3).symbols, 0.5 * np.arange(-4, 4))
    with pytest.raises(QuantizationError):
        symmetric_signed_grid(-1, 2)


def test_quantize_clip_round_rule():
    g = uniform_grid(0.5, 0, 3)
    assert g.quantize(1.4) == (1.5, 3)
    assert g.quantize(10.0) == (3.5, 7)
    assert g.quantize(-3.0) == (0.0, 0)


def test_round_half_to_even():
    g = uniform_grid(1.0, 0, 3)
    np.testing.assert_array_equal(g(np.array([0.5, 1.5, 2.5])), [0.0, 2.0, 2.0])


def test_pot_grid_examples():
    g = pot_grid(1, 1, 3)
    np.testing.assert_array_equal(g.symbols, [-1, -0.5, -0.25, -0.125, 0, 0.125, 0.25, 0.5, 1])
    np.testing.assert_array_equal(pot_grid(2, 1, 2).symbols, [-2, -1, 0, 1, 2])
    assert g(0.6) == 0.5
    # count 2 (2^(b-1) + 1) - 1 as printed
    for b in range(1, 7):
        assert len(pot_grid(1, 1, b)) == 2 * (2 ** (b - 1) + 1) - 1


def test_nearest_tie_goes_to_smaller_magnitude():
    g = QuantGrid(np.array([-1.0, 0.0, 1.0]), 2, "pot")
    assert g(0.5) == 0.0 and g(-0.5) == 0.0


def test_apot_matches_bruteforce_minkowski():
    n, b0 = 2, 2
    base = [0.0] + [2.0 ** (-n * e) for e in range(2 ** b0)]  # |PoT| with r = n, width b0+1
    sets = [[2.0 ** -i * v for v in base] for i in range(n)]
    mags = minkowski_sum(*sets)
    want = np.unique(np.concatenate([-mags, mags]))
    np.testing.assert_array_equal(apot_grid(1.0, 4, 2).symbols, want)


def test_apot_single_term_is_shifted_pot():
    for b in (2, 3):
        np.testing.assert_allclose(apot_grid(1.0, b, b, 0.0).symbols, pot_grid(1.0, 1, b + 1).symbols)


def test_apot_shift():
    a0, a1 = apot_grid(1.0, 4, 2, 0.0), apot_grid(1.0, 4, 2, 1.0)
    np.testing.assert_array_equal(a1.symbols, a0.symbols + 1.0)


def test_apot_bad_params():
    with pytest.raises(QuantizationError):
        apot_grid(1.0, 5, 2)


def test_apot_cardinality_reported():
    # the true count after merging duplicate sums
    for b, b0 in [(4, 2), (6, 2), (6, 3), (4, 1)]:
        g = apot_grid(1.0, b, b0)
        assert len(g) == len(np.unique(g.symbols))


# -- companding -------------------------------------------------------------------

def test_compress_endpoints():
    for mu in (0.5, 10.0, 255.0):
        assert mu_compress(0.0, mu) == 0.0
        assert mu_compress(1.0, mu) == pytest.approx(1.0, abs=1e-15)
        assert mu_compress(-1.0, mu) == pytest.approx(-1.0, abs=1e-15)


def test_compress_value():
    assert mu_compress(0.1, 255.0) == pytest.approx(math.log(26.5) / math.log(256), abs=1e-12)
    assert mu_compress(0.1, 255.0) == pytest.approx(0.59100, abs=5e-5)


def test_compress_invalid_mu():
    with pytest.raises(QuantizationError):
        mu_compress(0.5, 0.0)


def test_companding_round_trip(rng):
    w = rng.uniform(-1, 1, 1000)
    for mu in (1e-4, 1.0, 255.0):
        assert np.max(np.abs(mu_expand(mu_compress(w, mu), mu) - w)) < 1e-12


def test_companding_zero_and_density():
    clip = ClippingRange(-1.0, 1.0)
    g = companded_grid(255.0, 4, clip)
    assert len(g) == 16
    assert g(0.0) == 0.0 and companding_quantize(0.0, 255.0, unit_uniform_grid(4), clip) == 0.0
    d = np.diff(g.symbols)
    assert d[len(d) // 2] < d[0] and d[len(d) // 2] < d[-1]


def test_companding_zero_maps_to_zero_symmetric_clip():
    # an inner grid with an odd level count has zero as a level
    clip = ClippingRange(-1.0, 1.0)
    inner = QuantGrid(np.linspace(-1, 1, 7), 3, "uniform", 1 / 3, 3)
    assert companding_quantize(0.0, 255.0, inner, clip) == 0.0


def test_companded_spec_centres_on_zero(rng):
    # calibration on one-sided data still gives a grid that is dense at zero
    g = QuantizerSpec(kind="companded", mu=255.0).build(rng.uniform(-0.2, 1.0, 500), 4)
    assert g(0.0) == 0.0
    assert g.clip_lo == -g.clip_hi


def test_companding_small_mu_is_uniform():
    clip = ClippingRange(-1.0, 1.0)
    g = companded_grid(1e-4, 4, clip)
    assert np.max(np.abs(g.symbols - symmetric_signed_grid(1 / 8, 4).symbols)) < 1e-3


def test_companded_grid_matches_pipeline(rng):
    clip = ClippingRange(-0.7, 1.3)
    g = companded_grid(100.0, 5, clip)
    w = rng.uniform(-1, 1.5, 500)
    np.testing.assert_allclose(g(w), companding_quantize(w, 100.0, g.inner, clip), atol=1e-12)


# -- distortion ------------------------------------------------------------------

def test_distortion_on_grid_zero():
    g = uniform_grid(0.5, 2, 3)
    assert distortion(g, g.symbols) == 0.0


def test_distortion_uniform_noise_variance():
    s, b = 0.1, 4
    x = np.random.default_rng(7).uniform(0, s * (2**b - 1), 1_000_000)
    assert distortion(uniform_grid(s, 0, b), x) == pytest.approx(s * s / 12, rel=0.05)


def test_distortion_nonincreasing_in_bits():
    x = np.random.default_rng(3).normal(size=20_000)
    lo, hi = -4.0, 4.0
    ds = []
    for b in range(2, 9):
        n = 2**b - 1
        s = (hi - lo) / n
        ds.append(distortion(uniform_grid(s, -lo / s, b), x))
    assert all(a >= c for a, c in zip(ds, ds[1:]))


# -- spec serialization ---------------------------------------------------------

def test_spec_and_grid_round_trip(rng):
    spec = QuantizerSpec(kind="companded", calibration="mean-sigma", kappa=3.0, mu=100.0)
    assert QuantizerSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    g = spec.build(rng.normal(size=100), 4)
    g2 = QuantGrid.from_dict(json.loads(json.dumps(g.to_dict())))
    w = rng.normal(size=200)
    np.testing.assert_array_equal(g(w), g2(w))


@pytest.mark.parametrize("kind", ["uniform", "uniform-symmetric", "pot", "apot", "companded"])
def test_spec_build_kinds_contain(kind, rng):
    w = rng.normal(size=300)
    g = QuantizerSpec(kind=kind).build(w, 4)
    assert g(w) in g


def test_symmetric_zero_point_is_zero():
    g = symmetric_signed_grid(0.5, 3)
    assert g.zero_point == 0
    assert g.quantize(-2.0) == (-2.0, 0) and g.quantize(9.0) == (1.5, 7)


# -- property suite (hypothesis) ----------------------------------------------------

def grids():
    uni = st.builds(uniform_grid, st.floats(1e-3, 10), st.integers(-8, 8), st.integers(1, 8))
    sym = st.builds(symmetric_signed_grid, st.floats(1e-3, 10), st.integers(1, 8))
    pot = st.builds(pot_grid, st.floats(1e-3, 10), st.integers(1, 3), st.integers(1, 5))
    apot = st.builds(lambda s, b0, n, sh: apot_grid(s, b0 * n, b0, sh), st.floats(1e-3, 10), st.integers(1, 3),
                     st.integers(1, 3), st.floats(-2, 2))
    comp = st.builds(lambda mu, b, lo, w: companded_grid(mu, b, ClippingRange(lo, lo + w)),
                     st.floats(1e-3, 1e3), st.integers(1, 8), st.floats(-5, 5), st.floats(0.1, 10))
    return st.one_of(uni, sym, pot, apot, comp)


reals = st.floats(allow_nan=False, allow_infinity=True, width=64)


@settings(max_examples=300, deadline=None)
@given(g=grids(), w=reals)
def test_idempotence_and_containment(g, w):
    q = g(w)
    assert q in g
    assert g(q) == q


@settings(max_examples=300, deadline=None)
@given(g=grids(), a=reals, b=reals)
def test_monotone(g, a, b):
    lo, hi = min(a, b), max(a, b)
    assert g(lo) <= g(hi)


@settings(max_examples=100, deadline=None)
@given(s=st.floats(1e-3, 10), z=st.integers(-8, 8), b=st.integers(1, 10))
def test_uniform_cardinality_spacing(s, z, b):
    g = uniform_grid(s, z, b)
    assert len(g) == 2**b
    assert np.max(np.abs(np.diff(g.symbols) - s)) <= 1e-12 * max(1.0, s * 2**b)
    h = symmetric_signed_grid(s, b)
    assert len(h) == 2**b and 0.0 in h.symbols


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(1e-3, 1e4), w=st.floats(-1, 1))
def test_compress_odd(mu, w):
    assert mu_compress(-w, mu) == -mu_compress(w, mu)
    assert abs(mu_expand(mu_compress(w, mu), mu) - w) <= 1e-12
