"""Quantizer laws are checked exhaustively on the 0..255 integer grid and on
dense non-grid sweeps; the reference behavior is exact rational arithmetic of
round-half-away-from-zero on y/step."""

from fractions import Fraction

import numpy as np
import pytest

from trocab.quantize import (
    BitDepthReducer,
    BitDepthSchedule,
    QuantDomain,
    bit_depth,
    bit_depth_batch,
    non_sensitivity_radius,
    quantize,
    quantize_batch_adaptive,
    ste_backward,
)

ALL_BITS = (4, 6, 8)


def exact_quantize_scaled(y: Fraction, bits: int) -> Fraction:
    """Rational-arithmetic reference: round-half-away(y / step) * step."""
    step = Fraction(2 ** (8 - bits))
    ratio = y / step
    floor = ratio.numerator // ratio.denominator
    frac = ratio - floor
    if frac > Fraction(1, 2):
        rounded = floor + 1
    elif frac < Fraction(1, 2):
        rounded = floor
    else:
        rounded = floor + 1 if ratio >= 0 else floor  # away from zero
    out = rounded * step
    return min(max(out, Fraction(0)), Fraction(255))


class TestBitDepth:
    def test_band_values(self):
        s = BitDepthSchedule()
        assert bit_depth(0.05, s) == 8
        assert bit_depth(0.10, s) == 6  # boundary belongs to the mid band
        assert bit_depth(0.25, s) == 6
        assert bit_depth(0.30, s) == 4  # boundary belongs to the coarse band
        assert bit_depth(0.35, s) == 4

    def test_batch_matches_scalar(self):
        s = BitDepthSchedule()
        u = np.array([0.0, 0.0999, 0.1, 0.2999, 0.3, 1.0])
        assert list(bit_depth_batch(u, s)) == [bit_depth(v, s) for v in u]

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            BitDepthSchedule(tau_low=0.3, tau_high=0.1)
        with pytest.raises(ValueError):
            BitDepthSchedule(bits_low_u=7)


class TestQuantizeExhaustive:
    def test_integer_sweep_matches_exact_reference(self):
        for bits in ALL_BITS:
            x = np.arange(256) / 255.0
            got = quantize(x, bits)
            want = [float(exact_quantize_scaled(Fraction(k), bits)) / 255.0 for k in range(256)]
            assert np.array_equal(got, np.array(want)), f"bits={bits}"

    def test_idempotence_exact(self):
        for bits in ALL_BITS:
            x = np.arange(256) / 255.0
            once = quantize(x, bits)
            twice = quantize(once, bits)
            assert np.array_equal(once, twice)
        # also on dense non-grid input
        x = np.linspace(0, 1, 4097)
        for bits in ALL_BITS:
            once = quantize(x, bits)
            assert np.array_equal(once, quantize(once, bits))

    def test_monotonicity_exact(self):
        x = np.sort(np.concatenate([np.arange(256) / 255.0, np.linspace(0, 1, 2111)]))
        for bits in ALL_BITS:
            q = quantize(x, bits)
            assert np.all(np.diff(q) >= 0.0)

    def test_piecewise_constant_inside_open_cells(self):
        for bits in ALL_BITS:
            step = 2 ** (8 - bits)
            for m in range(0, 256 // step):
                center = m * step
                deltas = np.linspace(-step / 2 + 1e-6, step / 2 - 1e-6, 9)
                ys = center + deltas
                ys = ys[(ys >= 0) & (ys <= 255)]
                q = quantize(ys / 255.0, bits)
                assert np.all(q == q[0]), f"bits={bits} cell={m}"

    def test_eight_bit_identity_on_grid(self):
        x = np.arange(256) / 255.0
        assert np.array_equal(quantize(x, 8), x)

    def test_hand_case_four_bits(self):
        # y=100: round(100/16)=6, 6*16=96
        assert quantize(100 / 255.0, 4) == 96 / 255.0

    def test_zero_maps_to_zero(self):
        for bits in ALL_BITS:
            assert quantize(0.0, bits) == 0.0

    def test_coarser_bits_never_more_levels(self):
        rng = np.random.default_rng(0)
        x = rng.random(4000)
        levels = [len(np.unique(quantize(x, b))) for b in (8, 6, 4)]
        assert levels[0] >= levels[1] >= levels[2]


class TestCellCenterRadius:
    def test_radius_values(self):
        assert non_sensitivity_radius(4).scaled == 8.0
        assert non_sensitivity_radius(6).scaled == 2.0
        assert non_sensitivity_radius(8).scaled == 0.5
        assert non_sensitivity_radius(4).feature == 8.0 / 255.0

    def test_invalid_bits(self):
        with pytest.raises(ValueError):
            non_sensitivity_radius(5)

    def test_center_probe_exhaustive(self):
        # every perturbation strictly inside the radius leaves the output at
        # the cell center, for every center on the integer grid
        for bits in ALL_BITS:
            step = 2 ** (8 - bits)
            r = non_sensitivity_radius(bits).scaled
            deltas = np.linspace(-r + 1e-6, r - 1e-6, 17)
            for center in range(0, 256, step):
                ys = center + deltas
                ys = ys[(ys >= 0) & (ys <= 255)]
                q = quantize(ys / 255.0, bits)
                assert np.all(q == center / 255.0), f"bits={bits} center={center}"

    def test_hand_probe_96(self):
        for delta in np.linspace(-7.999, 7.999, 33):
            assert quantize((96 + delta) / 255.0, 4) == 96 / 255.0


class TestAdaptiveBatch:
    def test_low_uncertainty_integer_grid_unchanged(self):
        rng = np.random.default_rng(1)
        X = rng.integers(0, 256, size=(6, 10)) / 255.0
        out = quantize_batch_adaptive(X, np.zeros(6))
        assert np.array_equal(out, X)

    def test_mixed_bands(self):
        X = np.full((2, 4), 100 / 255.0)
        out = quantize_batch_adaptive(X, np.array([0.05, 0.35]))
        assert np.array_equal(out[0], X[0])          # 8-bit on grid: identity
        assert np.all(out[1] == 96 / 255.0)          # 4-bit: snapped

    def test_idempotent_at_same_uncertainty(self):
        rng = np.random.default_rng(2)
        X = rng.random((5, 8))
        u = np.array([0.0, 0.12, 0.2, 0.31, 0.5])
        once = quantize_batch_adaptive(X, u)
        assert np.array_equal(once, quantize_batch_adaptive(once, u))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            quantize_batch_adaptive(np.zeros((3, 2)), np.zeros(2))


class TestSte:
    def test_identity_inside_box(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=(4, 5))
        x = rng.random((4, 5))
        assert np.array_equal(ste_backward(g, x, 4), g)

    def test_zero_outside_box(self):
        g = np.ones((1, 3))
        x = np.array([[1.2, -0.1, 0.5]])
        assert np.array_equal(ste_backward(g, x, 6), np.array([[0.0, 0.0, 1.0]]))

    def test_boundaries_pass(self):
        g = np.ones((1, 2))
        x = np.array([[0.0, 1.0]])
        assert np.array_equal(ste_backward(g, x, 8), g)

    def test_composed_gradient_equals_model_gradient_at_quantized_point(self):
        from conftest import random_smooth_net
        from trocab.nn import input_gradient

        params, X, y = random_smooth_net(30, rows=4)
        Xq = quantize(np.clip(X, 0, 1), 6)
        g_model = input_gradient(params, Xq, y, mode="eval")
        g_through = ste_backward(g_model, np.clip(X, 0, 1), 6)
        assert np.array_equal(g_through, g_model)


class TestReducerEstimator:
    def test_transform_quantizes(self):
        red = BitDepthReducer(bits=4).fit(None)
        assert red.transform(np.array([[100 / 255.0]]))[0, 0] == 96 / 255.0

    def test_bad_bits_rejected_at_fit(self):
        with pytest.raises(ValueError):
            BitDepthReducer(bits=3).fit(None)

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            QuantDomain(scale=0.0)
