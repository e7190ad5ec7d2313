import numpy as np
import pytest

from dped import align, imageio, sift
from dped.errors import DegenerateConfiguration, EmptyIntersection, ImageTooSmall, SchemaError, ShapeError

from conftest import skimage_rgb


def make_keypoints(descs):
    return [
        sift.Keypoint(x=float(i), y=0.0, scale=1.0, orientation=0.0, descriptor=d)
        for i, d in enumerate(descs)
    ]


def random_unit_descriptors(n, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, 128))
    return list(d / np.linalg.norm(d, axis=1, keepdims=True))


class TestMatchDescriptors:
    def test_self_match_identity(self):
        kps = make_keypoints(random_unit_descriptors(30))
        matches = align.match_descriptors(kps, kps, ratio=1.0)
        assert matches == [(i, i) for i in range(30)]

    def test_disjoint_random_near_empty(self):
        a = make_keypoints(random_unit_descriptors(100, seed=1))
        b = make_keypoints(random_unit_descriptors(100, seed=2))
        matches = align.match_descriptors(a, b, ratio=0.8)
        assert len(matches) <= 5

    def test_empty_inputs(self):
        kps = make_keypoints(random_unit_descriptors(3))
        assert align.match_descriptors([], kps) == []
        assert align.match_descriptors(kps, []) == []

    def test_invalid_ratio(self):
        kps = make_keypoints(random_unit_descriptors(2))
        with pytest.raises(ValueError):
            align.match_descriptors(kps, kps, ratio=0.0)


def render_warped(phone, h_true):
    """Render a fake DSLR frame: pixel p shows the phone content at h_true(p)."""
    from scipy import ndimage

    _, h, w = phone.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    src = align._project(h_true, pts)
    coords = np.stack([src[:, 1], src[:, 0]])
    out = np.stack(
        [
            ndimage.map_coordinates(phone[c].astype(np.float64), coords, order=3, mode="nearest").reshape(h, w)
            for c in range(3)
        ]
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synthetic_matches(n, h_true, outlier_frac, noise, seed):
    """Point correspondences under h_true with uniform outliers mixed in."""
    rng = np.random.default_rng(seed)
    src = rng.uniform(20, 380, size=(n, 2))
    dst = align._project(h_true, src) + rng.normal(0, noise, size=(n, 2))
    n_out = int(outlier_frac * n)
    out_idx = rng.choice(n, size=n_out, replace=False)
    dst[out_idx] = rng.uniform(0, 400, size=(n_out, 2))
    inlier_mask = np.ones(n, dtype=bool)
    inlier_mask[out_idx] = False
    return np.hstack([src, dst]), inlier_mask


class TestRansac:
    def test_identity_recovery(self):
        rng = np.random.default_rng(0)
        src = rng.uniform(0, 100, size=(20, 2))
        matches = np.hstack([src, src])
        H, mask = align.estimate_homography_ransac(matches)
        np.testing.assert_allclose(H, np.eye(3), atol=1e-6)
        assert mask.all()

    def test_synthetic_recovery_with_outliers(self):
        h_true = np.array([[1.02, 0.01, 5.0], [-0.008, 0.99, -3.0], [1e-5, -2e-5, 1.0]])
        matches, inliers = synthetic_matches(200, h_true, 0.3, 0.5, seed=4)
        H, _ = align.estimate_homography_ransac(matches, seed=0)
        proj = align._project(H, matches[inliers, :2])
        err = np.sqrt(((proj - align._project(h_true, matches[inliers, :2])) ** 2).sum(axis=1))
        assert err.max() < 1.0

    def test_three_matches_rejected(self):
        with pytest.raises(DegenerateConfiguration):
            align.estimate_homography_ransac(np.zeros((3, 4)))

    def test_deterministic(self):
        matches, _ = synthetic_matches(100, np.eye(3), 0.3, 0.5, seed=9)
        h1, m1 = align.estimate_homography_ransac(matches, seed=5)
        h2, m2 = align.estimate_homography_ransac(matches, seed=5)
        np.testing.assert_array_equal(h1, h2)
        np.testing.assert_array_equal(m1, m2)

    def test_normalized_output(self):
        matches, _ = synthetic_matches(50, np.eye(3), 0.0, 0.1, seed=2)
        H, _ = align.estimate_homography_ransac(matches)
        assert H[2, 2] == pytest.approx(1.0)
        assert abs(np.linalg.det(H)) > 1e-12


class TestWarpAndCrop:
    def test_identity_full_overlap(self):
        img = skimage_rgb("astronaut")[:, :200, :200]
        phone, dslr = align.warp_and_crop(img, img, np.eye(3))
        assert phone.shape == dslr.shape == img.shape
        np.testing.assert_allclose(dslr, img, atol=1e-6)

    def test_pure_translation(self):
        base = skimage_rgb("astronaut")[:, :200, :210]
        phone = np.ascontiguousarray(base[:, :, 10:210])
        dslr = np.ascontiguousarray(base[:, :, 0:200])
        # dslr column x shows the same content as phone column x - 10
        H = np.array([[1.0, 0, -10.0], [0, 1.0, 0], [0, 0, 1.0]])
        phone_crop, dslr_crop = align.warp_and_crop(phone, dslr, H)
        assert phone_crop.shape == dslr_crop.shape == (3, 200, 190)
        assert np.abs(phone_crop.astype(np.float64) - dslr_crop).max() < 1e-6

    def test_no_overlap(self):
        img = skimage_rgb("astronaut")[:, :128, :128]
        H = np.array([[1.0, 0, 500.0], [0, 1.0, 0], [0, 0, 1.0]])
        with pytest.raises(EmptyIntersection):
            align.warp_and_crop(img, img, H)

    def test_recovered_homography_registers(self):
        phone = skimage_rgb("astronaut")[:, :300, :300]
        h_true = np.array([[1.004, 0.002, 3.0], [-0.001, 0.998, -2.0], [0, 0, 1.0]])
        dslr = render_warped(phone, h_true)
        rng = np.random.default_rng(1)
        pts_d = rng.uniform(20, 280, size=(150, 2))
        matches = np.hstack([pts_d, align._project(h_true, pts_d) + rng.normal(0, 0.5, (150, 2))])
        n_out = 45
        matches[:n_out, 2:] = rng.uniform(0, 300, size=(n_out, 2))
        H, _ = align.estimate_homography_ransac(matches)
        phone_crop, dslr_crop = align.warp_and_crop(phone, dslr, H)
        # mean per-pixel difference over the valid region stays sub-resampling
        assert np.abs(phone_crop.astype(np.float64) - dslr_crop).mean() < 0.02


class TestCrossCorrelation:
    def test_self_correlation(self):
        a = np.random.default_rng(0).random((50, 50))
        assert align.cross_correlation(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_anti_correlation(self):
        a = np.random.default_rng(1).random((50, 50))
        assert align.cross_correlation(a, 1.0 - a) == pytest.approx(-1.0, abs=1e-9)

    def test_constant_patch_flagged(self):
        a = np.full((10, 10), 0.5)
        b = np.random.default_rng(0).random((10, 10))
        score, flat = align.cross_correlation(a, b, return_flag=True)
        assert score == 0.0 and flat is True

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            align.cross_correlation(np.zeros((5, 5)), np.zeros((6, 6)))

    def test_noise_monte_carlo(self):
        rng = np.random.default_rng(42)
        small = sum(
            abs(align.cross_correlation(rng.random((100, 100)), rng.random((100, 100)))) < 0.1
            for _ in range(1000)
        )
        assert small >= 990


class TestExtractPatchPairs:
    def test_identical_images(self):
        img = skimage_rgb("astronaut")[:, :300, :300]
        pairs = align.extract_patch_pairs(img, img, image_id="a")
        assert len(pairs) == 9
        for p in pairs:
            assert p.cc > 0.999
            assert (p.shift_x, p.shift_y, p.rotation) == (0, 0, 0.0)
            assert p.source.shape == p.target.shape == (3, 100, 100)

    def test_known_shift_recovered(self):
        img = skimage_rgb("astronaut")[:, :300, :300]
        shifted = np.roll(img, (3, -2), axis=(1, 2))
        pairs = align.extract_patch_pairs(shifted, img, image_id="a")
        # restrict to windows where the true (3, -2) candidate stays in
        # bounds: bottom-row windows cannot move down 3, left-column
        # windows cannot move left 2
        interior = [p for p in pairs if p.origin[1] <= 100 and p.origin[2] >= 100]
        assert interior
        for p in interior:
            assert (p.shift_y, p.shift_x) == (3, -2)
            assert p.cc > 0.99

    def test_noise_rejected(self):
        rng = np.random.default_rng(0)
        a = rng.random((3, 200, 200)).astype(np.float32)
        b = rng.random((3, 200, 200)).astype(np.float32)
        assert align.extract_patch_pairs(a, b) == []

    def test_windows_never_overlap(self):
        img = skimage_rgb("astronaut")[:, :300, :300]
        pairs = align.extract_patch_pairs(img, img)
        origins = [(p.origin[1], p.origin[2]) for p in pairs]
        assert len(set(origins)) == len(origins)
        for r, c in origins:
            assert r % 100 == 0 and c % 100 == 0

    def test_emitted_invariants_under_random_shifts(self):
        img = skimage_rgb("coffee")[:, :300, :300]
        rng = np.random.default_rng(3)
        dy, dx = rng.integers(-4, 5, size=2)
        shifted = np.roll(img, (dy, dx), axis=(1, 2))
        cfg = align.AlignConfig()
        for p in align.extract_patch_pairs(shifted, img, cfg):
            assert p.cc > cfg.cc_threshold
            assert abs(p.shift_x) <= cfg.max_shift and abs(p.shift_y) <= cfg.max_shift

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            align.extract_patch_pairs(np.zeros((3, 80, 80)), np.zeros((3, 80, 80)))


class TestAlignPair:
    def test_synthetic_homography_end_to_end(self):
        phone = skimage_rgb("astronaut")[:, :320, :320]
        h_true = np.array([[1.004, 0.002, 2.0], [-0.001, 0.998, -1.5], [0, 0, 1.0]])
        dslr = render_warped(phone, h_true)
        pairs = align.align_pair(phone, dslr, image_id="synthetic")
        assert pairs
        for p in pairs:
            assert p.cc > 0.9
            assert abs(p.shift_x) <= 5 and abs(p.shift_y) <= 5


class TestSplitImages:
    def test_small_sets_all_train(self):
        assert align.split_images(["a", "b"]) == {"train": ["a", "b"], "val": [], "test": []}

    def test_disjoint_cover(self):
        ids = [f"img{i:02d}" for i in range(20)]
        split = align.split_images(ids, seed=1)
        everything = split["train"] + split["val"] + split["test"]
        assert sorted(everything) == ids
        assert split["test"] and split["val"]

    def test_deterministic(self):
        ids = [f"img{i}" for i in range(10)]
        assert align.split_images(ids, seed=3) == align.split_images(ids, seed=3)


class TestPatchPack:
    def test_write_and_read(self, tmp_path, toy_pairs):
        pairs = [
            align.PatchPair(
                source=src, target=dst, cc=0.95, shift_x=1, shift_y=-1, rotation=0.5,
                origin=(f"img{i % 3}", 0, i * 100),
            )
            for i, (src, dst) in enumerate(toy_pairs)
        ]
        summary = align.write_patch_pack(pairs, tmp_path, seed=0)
        assert summary["n_pairs"] == 8
        assert sum(summary["cc_histogram"]["counts"]) == 8

        pack = align.PatchPack(tmp_path)
        assert pack.pair_ids("all") == [f"{i:06d}" for i in range(8)]
        src, dst = pack.load_pair("000003")
        assert src.shape == dst.shape == (3, 100, 100)
        assert np.abs(src - pairs[3].source).max() <= 1 / 255

    def test_index_columns(self, tmp_path, toy_pairs):
        src, dst = toy_pairs[0]
        pair = align.PatchPair(src, dst, 0.99, 0, 0, 0.0, ("a", 0, 0))
        align.write_patch_pack([pair], tmp_path)
        header = (tmp_path / "index.csv").read_text().splitlines()[0]
        assert header.split(",") == align.INDEX_COLUMNS

    def test_split_ids_partition_rows(self, tmp_path, toy_pairs):
        pairs = [
            align.PatchPair(src, dst, 0.95, 0, 0, 0.0, (f"img{i}", 0, 0))
            for i, (src, dst) in enumerate(toy_pairs)
        ]
        align.write_patch_pack(pairs, tmp_path, seed=2)
        pack = align.PatchPack(tmp_path)
        ids = [pack.pair_ids(s) for s in ("train", "val", "test")]
        assert sorted(sum(ids, [])) == pack.pair_ids("all")

    def test_bad_schema_rejected(self, tmp_path, toy_pairs):
        src, dst = toy_pairs[0]
        align.write_patch_pack([align.PatchPair(src, dst, 0.95, 0, 0, 0.0, ("a", 0, 0))], tmp_path)
        index = tmp_path / "index.csv"
        index.write_text(index.read_text().replace("pair_id", "id"))
        with pytest.raises(SchemaError):
            align.PatchPack(tmp_path)
