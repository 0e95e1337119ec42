import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeperi import safe
from safeperi.errors import ExtractionError, IncompatibleDescriptorError, ParameterError, UndefinedScoreError
from safeperi.imgproc import kernel_grid, orientation_field, rotate_image

from conftest import annotation, textured

R_MIN = 39.16


def random_descriptor(rng, n_scales=4, n_rings=4, hash_="h"):
    c = rng.standard_normal((n_scales, 9, n_rings)) + 1j * rng.standard_normal((n_scales, 9, n_rings))
    return safe.SafeDescriptor(tuple(range(1, n_scales + 1)), c, hash_)


def radial_peak(taps):
    """Radius of the tap with the largest modulus."""
    x, y = kernel_grid(taps.shape[0])
    i = np.argmax(np.abs(taps))
    return float(np.hypot(x.ravel()[i], y.ravel()[i]))


class TestRingFilter:
    @pytest.mark.parametrize("n", [-4, -1, 0, 2, 4])
    @pytest.mark.parametrize("r_peak,sigma_r", [(10.0, 2.0), (45.0, 6.5), (120.0, 17.0)])
    def test_unit_norm_and_peak(self, n, r_peak, sigma_r):
        k = safe.ring_filter(n, r_peak, sigma_r)
        assert np.sqrt(np.sum(np.abs(k.taps) ** 2)) == pytest.approx(1.0, abs=1e-6)
        assert abs(radial_peak(k.taps) - r_peak) <= 1.0
        assert k.ring["mu"] == pytest.approx((r_peak / sigma_r) ** 2)

    def test_order_zero_real_nonnegative(self):
        k = safe.ring_filter(0, 20.0, 4.0)
        assert np.all(k.taps.imag == 0)
        assert np.all(k.taps.real >= 0)

    def test_harmonic_phase(self):
        k = safe.ring_filter(3, 15.0, 3.0)
        x, y = kernel_grid(k.side)
        phi = np.arctan2(y, x)
        mask = np.abs(k.taps) > 1e-6
        np.testing.assert_allclose(np.angle(k.taps[mask] * np.exp(-3j * phi[mask])), 0, atol=1e-9)

    def test_side_too_small(self):
        with pytest.raises(ParameterError):
            safe.ring_filter(0, 20.0, 4.0, side=41)

    @pytest.mark.parametrize("r_peak,sigma_r", [(0.0, 1.0), (5.0, 0.0)])
    def test_bad_radii(self, r_peak, sigma_r):
        with pytest.raises(ParameterError):
            safe.ring_filter(0, r_peak, sigma_r)


class TestFilterBank:
    def test_single_ring_peak(self):
        bank = safe.build_filter_bank(10.0, 40.0, 1)
        assert bank.rings[0].peak == pytest.approx(20.0)
        assert bank.rings[0].sigma == pytest.approx(15.0)

    def test_band_edge_formula(self):
        bank = safe.build_filter_bank(R_MIN, 3.8 * R_MIN, 4)
        ratio = 3.8 ** 0.25
        for k, ring in enumerate(bank.rings, start=1):
            lo, hi = R_MIN * ratio ** (k - 1), R_MIN * ratio**k
            assert ring.peak == pytest.approx(math.sqrt(lo * hi), rel=1e-12)
            assert ring.sigma == pytest.approx((hi - lo) / 2, rel=1e-12)
            assert ring.mu == pytest.approx((ring.peak / ring.sigma) ** 2, rel=1e-12)

    @pytest.mark.parametrize("nf", [1, 2, 3, 4, 5])
    def test_kernel_count_and_order(self, nf):
        bank = safe.build_filter_bank(R_MIN, 3.8 * R_MIN, nf)
        assert bank.taps.shape[:2] == (9, nf)
        peaks = [r.peak for r in bank.rings]
        assert all(a < b for a, b in zip(peaks, peaks[1:]))

    def test_every_kernel_unit_norm_and_peak(self):
        bank = safe.build_filter_bank(R_MIN, 3.8 * R_MIN, 5)
        for n in bank.orders:
            for k in range(1, 6):
                ker = bank.kernel(n, k)
                assert np.sqrt(np.sum(np.abs(ker.taps) ** 2)) == pytest.approx(1.0, abs=1e-6)
                assert abs(radial_peak(ker.taps) - bank.rings[k - 1].peak) <= 1.0

    @pytest.mark.parametrize("args", [(0.0, 10.0, 2), (10.0, 10.0, 2), (10.0, 5.0, 2), (10.0, 20.0, 0)])
    def test_bad_parameters(self, args):
        with pytest.raises(ParameterError):
            safe.build_filter_bank(*args)

    def test_empty_orders(self):
        with pytest.raises(ParameterError):
            safe.build_filter_bank(10.0, 20.0, 2, orders=())


@pytest.fixture(scope="module")
def roi():
    """Square textured ROI with the sclera centre at the middle pixel."""
    return textured((257, 257), seed=11, smooth=2.0)


@pytest.fixture(scope="module")
def roi_ann():
    return annotation(128, 128, 33.0)


class TestExtract:
    def test_constant_image_gives_zero(self, roi_ann):
        d = safe.extract(np.full((257, 257), 0.4), roi_ann)
        assert np.max(np.abs(d.coeffs)) < 1e-10

    @pytest.mark.parametrize("nf,size", [(2, 72), (3, 108), (4, 144), (5, 180)])
    def test_descriptor_size(self, roi, roi_ann, nf, size):
        d = safe.extract(roi, roi_ann, config=safe.SafeConfig(n_rings=nf))
        assert d.size == size
        assert d.coeffs.shape == (4, 9, nf)
        assert np.all(np.isfinite(d.coeffs))

    @pytest.mark.parametrize("n0,k0", [(-4, 1), (-2, 2), (0, 3), (1, 4), (3, 2), (4, 1)])
    def test_phase_pattern_selects_its_order(self, n0, k0):
        rs = 20.0
        cfg = safe.SafeConfig()
        bank = safe.build_filter_bank(rs, 3.8 * rs, 4)
        side = bank.side + 2
        c = side // 2
        x, y = kernel_grid(side)
        r, phi = np.hypot(x, y), np.arctan2(y, x)
        edges = safe.ring_edges(rs, 3.8 * rs, 4)
        field = np.where((r >= edges[k0 - 1]) & (r < edges[k0]), np.exp(1j * n0 * phi), 0)
        d = safe.extract_from_fields([field], (c, c), rs, cfg)
        mags = np.abs(d.coeffs[0, :, k0 - 1])
        assert bank.orders[int(np.argmax(mags))] == n0

    def test_contrast_scales_coefficients(self, roi, roi_ann):
        sig = safe.scale_sigmas((1, 2, 3, 4), 33.0)
        a = safe.extract(roi * 0.5, roi_ann, sig, preprocess=False)
        b = safe.extract(roi, roi_ann, sig, preprocess=False)
        np.testing.assert_allclose(a.coeffs, 0.25 * b.coeffs, atol=1e-12)

    def test_from_fields_matches_extract(self, roi, roi_ann):
        sig = safe.scale_sigmas((1, 2, 3, 4), 33.0)
        a = safe.extract(roi, roi_ann, sig, preprocess=False)
        b = safe.extract_from_fields([orientation_field(roi, s) for s in sig], (128, 128), 33.0, scales=sig)
        np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-12)

    def test_centre_outside(self, roi):
        with pytest.raises(ExtractionError):
            safe.extract(roi, annotation(300, 128, 20.0))

    def test_ring_beyond_margin(self, roi):
        with pytest.raises(ExtractionError):
            safe.extract(roi, annotation(128, 128, 45.0))

    def test_wrong_sigma_count(self, roi, roi_ann):
        with pytest.raises(ParameterError):
            safe.extract(roi, roi_ann, sigmas=(1.0, 2.0))

    def test_sigma_scaling(self):
        assert safe.scale_sigmas((1, 2, 3, 4), 2 * 39.16) == pytest.approx((2, 4, 6, 8))


class TestMatch:
    def test_random_pairs_in_range(self, rng):
        for _ in range(1000):
            a, b = random_descriptor(rng), random_descriptor(rng)
            m = safe.complex_match(a, b)
            assert abs(m) <= 1 + 1e-12
            assert -1 <= safe.match(a, b) <= 1

    def test_self_and_negation(self, rng):
        d = random_descriptor(rng)
        assert safe.match(d, d) == pytest.approx(1.0, abs=1e-12)
        assert safe.match(d, d.with_coeffs(-d.coeffs)) == pytest.approx(-1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 10_000))
    def test_positive_scale_invariance(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        a, b = random_descriptor(rng), random_descriptor(rng)
        scaled = safe.match(a.with_coeffs(alpha * a.coeffs), b.with_coeffs(beta * b.coeffs))
        assert scaled == pytest.approx(safe.match(a, b), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_descriptor(rng), random_descriptor(rng)
        assert safe.match(a, b) == pytest.approx(safe.match(b, a), abs=1e-12)
        assert safe.complex_match(a, b) == pytest.approx(safe.complex_match(b, a).conjugate(), abs=1e-12)

    def test_ms_is_modulus_times_cosine(self, rng):
        a, b = random_descriptor(rng), random_descriptor(rng)
        m = safe.complex_match(a, b)
        assert safe.match(a, b) == pytest.approx(abs(m) * math.cos(np.angle(m)), abs=1e-12)

    def test_zero_descriptor_undefined(self, rng):
        d = random_descriptor(rng)
        with pytest.raises(UndefinedScoreError):
            safe.match(d, d.with_coeffs(np.zeros_like(d.coeffs)))

    def test_incompatible(self, rng):
        with pytest.raises(IncompatibleDescriptorError):
            safe.match(random_descriptor(rng), random_descriptor(rng, n_rings=3))
        with pytest.raises(IncompatibleDescriptorError):
            safe.match(random_descriptor(rng, hash_="a"), random_descriptor(rng, hash_="b"))


class TestRotation:
    def test_zero_is_identity(self, rng):
        d = random_descriptor(rng)
        np.testing.assert_array_equal(safe.rotate_descriptor(d, 0.0).coeffs, d.coeffs)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2 * np.pi, 2 * np.pi), st.integers(0, 10_000))
    def test_order_minus_two_fixed_and_moduli_kept(self, phi, seed):
        d = random_descriptor(np.random.default_rng(seed))
        r = safe.rotate_descriptor(d, phi)
        row = d.orders.index(-2)
        np.testing.assert_array_equal(r.coeffs[:, row], d.coeffs[:, row])
        np.testing.assert_allclose(np.abs(r.coeffs), np.abs(d.coeffs), rtol=1e-12)

    def test_rotations_compose(self, rng):
        d = random_descriptor(rng)
        a = safe.rotate_descriptor(safe.rotate_descriptor(d, 0.3), -0.1)
        np.testing.assert_allclose(a.coeffs, safe.rotate_descriptor(d, 0.2).coeffs, atol=1e-12)

    def test_range_zero_is_plain_match(self, rng):
        a, b = random_descriptor(rng), random_descriptor(rng)
        assert safe.match_with_rotation(a, b, 0.0, 1.0) == pytest.approx(safe.match(a, b), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 30), st.floats(0.5, 5))
    def test_never_below_plain_match(self, seed, rng_deg, step):
        r = np.random.default_rng(seed)
        a, b = random_descriptor(r), random_descriptor(r)
        assert safe.match_with_rotation(a, b, rng_deg, step) >= safe.match(a, b) - 1e-12

    def test_recovers_grid_rotation(self, rng):
        d = random_descriptor(rng)
        t = safe.rotate_descriptor(d, math.radians(10))
        score, angle = safe.match_with_rotation(d, t, 15, 1, return_angle=True)
        assert score == pytest.approx(1.0, abs=1e-9)
        assert angle == pytest.approx(math.radians(-10))

    def test_grid_contains_zero(self):
        g = safe.rotation_grid(15, 1)
        assert len(g) == 31 and 0.0 in g
        with pytest.raises(ParameterError):
            safe.rotation_grid(15, 0)

    def test_image_rotation_consistency(self, roi, roi_ann):
        phi = math.radians(10)
        rotated = rotate_image(roi, phi, center=(128, 128))
        d = safe.extract(roi, roi_ann)
        d_img = safe.extract(rotated, roi_ann)
        d_feat = safe.rotate_descriptor(d, phi)
        rel = np.linalg.norm(d_img.flat() - d_feat.flat()) / np.linalg.norm(d_feat.flat())
        assert rel < 0.10
        assert safe.match(d_img, d_feat) > 0.9
        # the opposite sense must not match as well
        assert safe.match(d_img, safe.rotate_descriptor(d, -phi)) < safe.match(d_img, d_feat)


class TestSerialisation:
    def test_json_round_trip(self, rng):
        d = random_descriptor(rng)
        back = safe.SafeDescriptor.from_json(json.loads(json.dumps(d.to_json())))
        np.testing.assert_array_equal(back.coeffs, d.coeffs)
        assert back.params_hash == d.params_hash and back.scales == d.scales

    def test_coefficient_order(self, rng):
        d = random_descriptor(rng, n_scales=2, n_rings=3)
        obj = d.to_json()
        # scale-major, then order n = -4..4, then ring k
        s, n_idx, k = 1, 6, 2
        re, im = obj["coeffs"][s][n_idx * 3 + k]
        assert complex(re, im) == d.coeffs[s, n_idx, k]
        assert obj["matcher"] == "safe"

    def test_params_hash_tracks_config(self):
        assert safe.SafeConfig().params_hash() == safe.SafeConfig().params_hash()
        assert safe.SafeConfig(n_rings=3).params_hash() != safe.SafeConfig().params_hash()
