import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from safeperi import sift
from safeperi.imgproc import rotate_image

from conftest import textured


def blob(size, s, contrast=0.6):
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2
    return 0.2 + contrast * np.exp(-((rows - c) ** 2 + (cols - c) ** 2) / (2 * s * s))


def dog_oracle_scale(img, k=2 ** (1 / 3)):
    """Scale sigma maximising |G(k sigma) * img - G(sigma) * img| at the image centre (dense sweep)."""
    c = img.shape[0] // 2
    best, best_sigma = -1.0, None
    for sigma in np.arange(1.0, 16.0, 0.01):
        lo = ndimage.gaussian_filter(img, sigma, mode="nearest")[c, c]
        hi = ndimage.gaussian_filter(img, k * sigma, mode="nearest")[c, c]
        if abs(hi - lo) > best:
            best, best_sigma = abs(hi - lo), sigma
    return best_sigma


def kp(x, y, desc):
    return sift.SiftKeypoint(float(x), float(y), 2.0, 0.0, np.asarray(desc, dtype=float))


@pytest.fixture(scope="module")
def texture_kps():
    img = textured((160, 160), seed=5)
    return img, sift.describe(img)


class TestDetection:
    def test_constant_image(self):
        assert sift.detect_keypoints(np.full((96, 96), 0.5)) == []

    def test_too_small(self):
        assert sift.describe(np.random.default_rng(0).random((20, 40))) == []

    @pytest.mark.parametrize("s", [3.0, 4.0, 6.0, 9.0])
    def test_blob_scale_recovery(self, s):
        img = blob(128, s)
        kps = sift.detect_keypoints(img)
        c = 63.5
        near = [k for k in kps if math.hypot(k.x - c, k.y - c) <= 2.0]
        assert near, "no keypoint at the blob centre"
        locations = {(round(k.x, 6), round(k.y, 6), round(k.scale, 6)) for k in near}
        assert len(locations) == 1
        oracle = dog_oracle_scale(img)
        assert abs(near[0].scale - oracle) <= 0.25 * oracle

    def test_quarter_turn_count(self, texture_kps):
        img, kps = texture_kps
        rot = sift.describe(np.rot90(img))
        assert abs(len(rot) - len(kps)) <= 0.1 * len(kps)

    def test_deterministic(self, texture_kps):
        img, kps = texture_kps
        again = sift.describe(img)
        assert len(again) == len(kps)
        for a, b in zip(kps, again):
            assert (a.x, a.y, a.scale, a.orientation) == (b.x, b.y, b.scale, b.orientation)
            np.testing.assert_array_equal(a.descriptor, b.descriptor)


class TestDescriptors:
    def test_norm_and_clamp(self, texture_kps):
        _, kps = texture_kps
        assert kps
        for k in kps:
            assert k.descriptor.shape == (128,)
            assert np.linalg.norm(k.descriptor) == pytest.approx(1.0, abs=1e-6)
            assert k.descriptor.max() <= 0.2 + 1e-6
            assert k.descriptor.min() >= 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1.0, 40.0))
    def test_clamp_unit(self, seed, power):
        v = np.random.default_rng(seed).random(128) ** power
        w = sift.clamp_unit(v)
        assert np.linalg.norm(w) == pytest.approx(1.0, abs=1e-9)
        assert w.max() <= 0.2 + 1e-9
        # order of the entries is preserved
        assert np.all(np.diff(w[np.argsort(v)]) >= -1e-15)

    def test_rotated_patch_similarity(self):
        img = textured((161, 161), seed=8, smooth=2.5)
        base = sift.SiftKeypoint(80.0, 80.0, 3.2, 0.0, octave=0, layer=2, octave_sigma=3.2)
        phi = math.radians(30)
        rot = rotate_image(img, phi, center=(80, 80))
        # same physical patch: rotate_image turns content by +phi in the array frame
        turned = sift.SiftKeypoint(80.0, 80.0, 3.2, phi, octave=0, layer=2, octave_sigma=3.2)
        a = sift.compute_descriptors(img, [base])[0].descriptor
        b = sift.compute_descriptors(rot, [turned])[0].descriptor
        assert float(a @ b) > 0.9

    def test_window_outside_dropped(self):
        img = textured((64, 64), seed=1)
        edge = sift.SiftKeypoint(2.0, 2.0, 3.2, 0.0, octave=0, layer=2, octave_sigma=3.2)
        assert sift.compute_descriptors(img, [edge]) == []

    def test_json_round_trip(self, texture_kps):
        _, kps = texture_kps
        back = sift.SiftKeypoint.from_json(json.loads(json.dumps(kps[0].to_json())))
        np.testing.assert_array_equal(back.descriptor, kps[0].descriptor)
        assert (back.x, back.y, back.scale, back.orientation) == (kps[0].x, kps[0].y, kps[0].scale,
                                                                  kps[0].orientation)


class TestMatching:
    def test_empty(self, texture_kps):
        _, kps = texture_kps
        assert sift.match_keypoints([], kps) == []
        assert sift.match_keypoints(kps, []) == []

    def test_self_match(self, texture_kps):
        _, kps = texture_kps
        pairs = sift.match_keypoints(kps, kps)
        assert len(pairs) == len(kps)
        assert all(i == j and d == 0 for i, j, d in pairs)

    def test_planted_neighbours(self, rng):
        n = 30
        a = rng.random((n, 128))
        perm = rng.permutation(n)
        b = np.empty_like(a)
        b[perm] = a + 1e-3 * rng.standard_normal(a.shape)
        pairs = sift.match_keypoints([kp(0, 0, v) for v in a], [kp(0, 0, v) for v in b])
        assert sorted((i, j) for i, j, _ in pairs) == sorted((i, int(perm[i])) for i in range(n))

    def test_ratio_rejects_ambiguous(self):
        a = [kp(0, 0, [1.0, 0.0])]
        b = [kp(0, 0, [0.0, 1.0]), kp(0, 0, [0.0, 1.01])]
        assert sift.match_keypoints(a, b) == []

    def test_one_to_one(self):
        a = [kp(0, 0, [1.0, 0.0]), kp(0, 0, [1.0, 0.01])]
        b = [kp(0, 0, [1.0, 0.005]), kp(0, 0, [5.0, 5.0])]
        pairs = sift.match_keypoints(a, b)
        assert len({j for _, j, _ in pairs}) == len(pairs)


def shifted_pairs(offsets, dims=(100, 100)):
    """Keypoint lists in which pair n moves by offsets[n] (pixels)."""
    a, b, pairs = [], [], []
    for n, (dx, dy) in enumerate(offsets):
        x, y = 20 + 3 * n, 30 + 2 * n
        a.append(kp(x, y, [1.0]))
        b.append(kp(x + dx, y + dy, [1.0]))
        pairs.append((n, n, 0.0))
    return pairs, a, b, dims


class TestGeometricFilter:
    def test_translation_kept(self):
        pairs, a, b, dims = shifted_pairs([(10, 5)] * 8)
        assert sift.geometric_filter(pairs, a, b, dims, dims) == pairs

    def test_orthogonal_outlier_removed(self):
        diag = math.hypot(100, 100)
        pairs, a, b, dims = shifted_pairs([(10, 0)] * 9 + [(0, diag / 2)])
        kept = sift.geometric_filter(pairs, a, b, dims, dims)
        assert [p[0] for p in kept] == list(range(9))

    def test_single_pair_passes(self):
        pairs, a, b, dims = shifted_pairs([(50, 50)])
        assert sift.geometric_filter(pairs, a, b, dims, dims) == pairs

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(-40, 40), st.floats(-40, 40)), min_size=1, max_size=25))
    def test_random_cloud(self, offsets):
        pairs, a, b, dims = shifted_pairs(offsets)
        p = sift.SiftParams()
        kept = sift.geometric_filter(pairs, a, b, dims, dims, p)
        assert len(kept) <= len(pairs)
        assert set(kept) <= set(pairs)
        assert sift.geometric_filter(kept, a, b, dims, dims, p) == kept
        if len(kept) > 1:
            # independent recheck of both gates on the survivors
            diag = math.hypot(*dims)
            d = np.array([(b[j].x - a[i].x, b[j].y - a[i].y) for i, j, _ in kept]) / diag
            length = np.hypot(d[:, 0], d[:, 1])
            assert np.all(np.abs(length - np.median(length)) <= p.gate_length + 1e-12)
            moving = length > p.gate_min_shift
            if moving.sum() > 0:
                ang = np.degrees(np.arctan2(d[moving, 1], d[moving, 0]))
                spread = (ang[:, None] - ang[None, :] + 180) % 360 - 180
                assert np.max(np.abs(spread)) <= 2 * p.gate_angle_deg + 1e-9


class TestScore:
    def test_examples(self):
        assert sift.sift_score(10, 20, 40, "min") == (0.5, False)
        score, flag = sift.sift_score(10, 20, 40, "avg")
        assert score == pytest.approx(1 / 3) and not flag
        assert sift.sift_score(0, 0, 40, "min") == (0.0, True)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 500), st.integers(1, 500), st.integers(1, 500))
    def test_min_at_least_avg(self, m, na, nb):
        assert sift.sift_score(m, na, nb, "min")[0] >= sift.sift_score(m, na, nb, "avg")[0]

    def test_self_compare_is_one(self, texture_kps):
        img, kps = texture_kps
        assert sift.compare(kps, kps, img.shape, img.shape) == (1.0, False)
