import numpy as np
import pytest

from ranktide.dynimg import (DynamicImage, RankPoolConfig, SequenceTooShort, arp_coefficients,
                             dynamic_image, effective_frame_weights, export_display, make_plan,
                             rank_pool_exact, ranking_scores, read_dimg, segment_dynamic_images,
                             standardize, to_display_u8, write_dimg)


class TestPlan:
    def test_t9_forced_choice(self):
        for seed in (0, 1, 99):
            plan = make_plan(9, seed)
            assert plan.snippet_indices[0] == (0, 4, 8)
            assert plan.snippet_indices[1] == (0, 1, 2)
            assert plan.snippet_indices[2] == (3, 4, 5)
            assert plan.snippet_indices[3] == (6, 7, 8)

    def test_t10_segment_bounds(self):
        plan = make_plan(10, 0)
        assert plan.segment_bounds == ((0, 3), (3, 6), (6, 10))

    def test_too_short(self):
        with pytest.raises(SequenceTooShort):
            make_plan(8, 0)

    def test_deterministic(self):
        assert make_plan(30, 17) == make_plan(30, 17)
        assert make_plan(30, 17) != make_plan(30, 18)

    def test_segments_never_share_indices(self):
        for seed in range(50):
            plan = make_plan(23, seed)
            seen = set()
            for triple in plan.snippet_indices[1:]:
                assert len(set(triple)) == 3
                assert not seen & set(triple)
                seen |= set(triple)
                assert triple == tuple(sorted(triple))

    def test_indices_inside_their_subsegments(self):
        for seed in range(50):
            plan = make_plan(31, seed)
            for (lo, hi), triple in zip(plan.segment_bounds, plan.snippet_indices[1:]):
                n = hi - lo
                subs = [(lo + k * n // 3, lo + (k + 1) * n // 3) for k in range(3)]
                for (a, b), idx in zip(subs, triple):
                    assert a <= idx < b

    def test_draws_uniform_within_3_sigma(self):
        # frozen-seed chi-square style bound: every admissible index at T=30
        trials = 10_000
        counts = {}
        for seed in range(trials):
            plan = make_plan(30, seed)
            for triple in plan.snippet_indices[1:]:
                for idx in triple:
                    counts[idx] = counts.get(idx, 0) + 1
        plan = make_plan(30, 0)
        for (lo, hi) in plan.segment_bounds:
            n = hi - lo
            subs = [(lo + k * n // 3, lo + (k + 1) * n // 3) for k in range(3)]
            for a, b in subs:
                p = 1.0 / (b - a)
                sigma = np.sqrt(trials * p * (1 - p))
                for idx in range(a, b):
                    assert abs(counts.get(idx, 0) - trials * p) <= 3 * sigma


class TestCoefficients:
    @pytest.mark.parametrize("n,expected", [
        (2, [-1.0, 1.0]),
        (3, [-2.0, 0.0, 2.0]),
        (5, [-4.0, -2.0, 0.0, 2.0, 4.0]),
    ])
    def test_values(self, n, expected):
        beta = arp_coefficients(n)
        assert beta.tolist() == expected
        assert beta.sum() == 0.0

    def test_n1_rejected(self):
        with pytest.raises(ValueError):
            arp_coefficients(1)

    def test_time_average_weights_match_brute_force(self):
        # expand V_t = (1/t) sum_{tau<=t} R_tau explicitly and collect weights
        for n in (2, 3, 4, 7):
            beta = arp_coefficients(n)
            brute = np.zeros(n)
            for t in range(1, n + 1):
                for tau in range(1, t + 1):
                    brute[tau - 1] += beta[t - 1] / t
            assert np.allclose(effective_frame_weights(n, "time_average"), brute, atol=1e-12)

    def test_time_average_n3_pinned(self):
        w = effective_frame_weights(3, "time_average")
        assert np.allclose(w, [-4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0], atol=1e-12)


class TestDynamicImage:
    def test_constant_sequence_is_zero(self):
        frames = np.full((6, 1, 5, 5), 0.37)
        for variant in ("time_average", "direct_frame"):
            img = dynamic_image(frames, RankPoolConfig(variant=variant))
            assert np.abs(img.pixels).max() < 1e-12

    def test_direct_n3_is_2r3_minus_2r1(self):
        rng = np.random.default_rng(5)
        frames = rng.uniform(0, 1, (3, 2, 4, 4))
        img = dynamic_image(frames, RankPoolConfig(variant="direct_frame"))
        assert np.array_equal(img.pixels, 2.0 * (frames[2] - frames[0]))

    def test_time_reversal_negates_direct(self):
        rng = np.random.default_rng(6)
        frames = rng.uniform(0, 1, (5, 1, 3, 3))
        cfg = RankPoolConfig(variant="direct_frame")
        fwd = dynamic_image(frames, cfg).pixels
        rev = dynamic_image(frames[::-1], cfg).pixels
        assert np.allclose(fwd, -rev, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, (4, 1, 3, 3))
        y = rng.uniform(0, 1, (4, 1, 3, 3))
        for variant in ("time_average", "direct_frame"):
            cfg = RankPoolConfig(variant=variant)
            lhs = dynamic_image(2.5 * x - 0.7 * y, cfg).pixels
            rhs = 2.5 * dynamic_image(x, cfg).pixels - 0.7 * dynamic_image(y, cfg).pixels
            assert np.allclose(lhs, rhs, atol=1e-12)

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError):
            dynamic_image(np.zeros((1, 1, 2, 2)))


class TestExactOracle:
    def test_monotone_sequence_scores_increase(self):
        vals = np.linspace(0.1, 0.9, 6)
        frames = np.stack([np.array([[[v, 0.5 * v]]]) for v in vals])
        d = rank_pool_exact(frames).pixels
        scores = ranking_scores(frames, d)
        assert np.all(np.diff(scores) > 0)

    def test_n2_first_step_collinear_with_closed_form(self):
        rng = np.random.default_rng(3)
        frames = rng.uniform(0, 1, (2, 1, 2, 2))
        cfg = RankPoolConfig(oracle_steps=1, oracle_lr=0.1)
        step = rank_pool_exact(frames, cfg).pixels.reshape(-1)
        closed = dynamic_image(frames).pixels.reshape(-1)
        cos = step @ closed / (np.linalg.norm(step) * np.linalg.norm(closed))
        assert cos > 1.0 - 1e-12

    def test_cosine_positive_in_95_pct_of_200_trials(self):
        positive = 0
        for trial in range(200):
            rng = np.random.default_rng(1000 + trial)
            frames = rng.uniform(0, 1, (5, 1, 2, 4))
            closed = dynamic_image(frames).pixels.reshape(-1)
            exact = rank_pool_exact(frames).pixels.reshape(-1)
            denom = np.linalg.norm(closed) * np.linalg.norm(exact)
            if denom > 0 and (closed @ exact) / denom > 0:
                positive += 1
        assert positive >= 190


class TestSegmentImages:
    def test_static_sequence_gives_four_zero_images(self):
        frames = np.full((12, 1, 6, 6), 0.2)
        _, images = segment_dynamic_images(frames, 0)
        assert len(images) == 4
        for img in images:
            assert np.abs(img.pixels).max() < 1e-12

    def test_moving_blob_images_pairwise_distinct(self):
        T, e = 18, 16
        xs = np.arange(e)[None, :]
        ys = np.arange(e)[:, None]
        frames = np.stack([
            np.exp(-((xs - 5 - 4 * t / (T - 1)) ** 2 + (ys - 8) ** 2) / 8.0)[None]
            for t in range(T)])
        _, images = segment_dynamic_images(frames, 3)
        for i in range(1, 4):
            for j in range(i + 1, 4):
                dist = np.linalg.norm(images[i].pixels - images[j].pixels)
                assert dist > 0

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        frames = rng.uniform(0, 1, (15, 1, 4, 4))
        plan_a, imgs_a = segment_dynamic_images(frames, 5)
        plan_b, imgs_b = segment_dynamic_images(frames, 5)
        assert plan_a == plan_b
        for a, b in zip(imgs_a, imgs_b):
            assert np.array_equal(a.pixels, b.pixels)

    def test_standardize(self):
        rng = np.random.default_rng(9)
        img = standardize(rng.uniform(0, 1, (1, 8, 8)))
        assert abs(img.mean()) < 1e-12
        assert abs(img.std() - 1.0) < 1e-6


class TestExport:
    def test_zero_image_mid_gray(self, tmp_path):
        img = DynamicImage(pixels=np.zeros((1, 4, 4)), segment_id=0)
        path = tmp_path / "zero.png"
        export_display(img, path)
        from PIL import Image
        arr = np.asarray(Image.open(path))
        assert (arr == 128).all()

    def test_three_level_quantization(self):
        u8 = to_display_u8(np.array([[[-1.0, 0.0, 1.0]]]))
        assert u8.reshape(-1).tolist() == [0, 128, 255]

    def test_dimg_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        img = DynamicImage(pixels=rng.standard_normal((2, 3, 5)), segment_id=1)
        path = tmp_path / "x.dimg"
        write_dimg(img, path)
        back = read_dimg(path)
        assert np.array_equal(back, img.pixels)

    def test_png_round_trip_reproduces_quantized(self, tmp_path):
        rng = np.random.default_rng(11)
        img = DynamicImage(pixels=rng.standard_normal((1, 6, 6)), segment_id=2)
        path = tmp_path / "q.png"
        export_display(img, path)
        from PIL import Image
        arr = np.asarray(Image.open(path))
        assert np.array_equal(arr, to_display_u8(img.pixels)[0])
