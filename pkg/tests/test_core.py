import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segadapt.core import (
    BinMask,
    Image2D,
    LabeledSample,
    ProbMask,
    SampleError,
    SeededRng,
    UnlabeledSample,
    binarize,
    largest_remainder_sizes,
    list_sample_ids,
    load_sample,
    make_splits,
    save_sample,
)


def _img(shape=(16, 16), domain=0, fill=0.3):
    return Image2D(np.full(shape, fill), (1.0, 1.0), domain)


class TestValueTypes:
    def test_image_rejects_small_and_nonfinite(self):
        with pytest.raises(SampleError):
            Image2D(np.zeros((4, 16)))
        bad = np.zeros((16, 16))
        bad[3, 3] = np.nan
        with pytest.raises(SampleError):
            Image2D(bad)
        with pytest.raises(SampleError):
            Image2D(np.zeros((16, 16)), spacing=(0.0, 1.0))

    def test_image_pixels_are_readonly_float64(self):
        im = Image2D(np.zeros((16, 16), dtype=np.float32))
        assert im.pixels.dtype == np.float64
        with pytest.raises(ValueError):
            im.pixels[0, 0] = 1.0

    def test_probmask_bounds(self):
        ProbMask(np.full((8, 8), 0.5))
        with pytest.raises(SampleError):
            ProbMask(np.full((8, 8), 1.5))
        with pytest.raises(SampleError):
            ProbMask(np.full((8, 8), np.nan))

    def test_binmask_values(self):
        m = BinMask(np.eye(8, dtype=int))
        assert m.labels.dtype == np.uint8
        assert m.foreground_count() == 8
        with pytest.raises(SampleError):
            BinMask(np.full((8, 8), 2))

    def test_labeled_sample_shape_check(self):
        with pytest.raises(SampleError):
            LabeledSample(_img((16, 16)), BinMask(np.zeros((8, 8), dtype=np.uint8)))

    def test_paired_sample_constraints(self):
        a = _img(domain=0)
        UnlabeledSample(a, partner=_img(domain=1))
        with pytest.raises(SampleError):
            UnlabeledSample(a, partner=_img(domain=0))
        with pytest.raises(SampleError):
            UnlabeledSample(a, partner=_img(shape=(32, 32), domain=1))


class TestBinarize:
    def test_tie_goes_to_foreground(self):
        out = binarize(ProbMask(np.full((8, 8), 0.5)), 0.5)
        assert out.labels.all()

    def test_below_threshold_background(self):
        out = binarize(ProbMask(np.full((8, 8), 0.49)), 0.5)
        assert not out.labels.any()

    def test_threshold_domain(self):
        p = ProbMask(np.zeros((8, 8)))
        for t in (0.0, 1.0, -0.1, 1.1):
            with pytest.raises(ValueError):
                binarize(p, t)

    @given(st.floats(min_value=0.01, max_value=0.99),
           st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, threshold, seed):
        probs = SeededRng(seed).uniform(size=(8, 8))
        once = binarize(ProbMask(probs), threshold)
        twice = binarize(ProbMask(once.labels.astype(float)), threshold)
        assert np.array_equal(once.labels, twice.labels)


class TestSplits:
    def test_source_protocol_sizes(self):
        rng = SeededRng(0)
        split = make_splits(list(range(20)), (0.5, 0.25, 0.25), rng)
        assert (len(split.train), len(split.val), len(split.test)) == (10, 5, 5)

    def test_target_protocol_sizes(self):
        split = make_splits(list(range(20)), (0.5, 0.0, 0.5), SeededRng(0))
        assert (len(split.train), len(split.val), len(split.test)) == (10, 0, 10)

    def test_largest_remainder_handles_awkward_counts(self):
        assert largest_remainder_sizes(7, (0.5, 0.25, 0.25)) == [3, 2, 2]
        assert largest_remainder_sizes(9, (0.5, 0.25, 0.25)) == [5, 2, 2]
        assert largest_remainder_sizes(3, (1 / 3, 1 / 3, 1 / 3)) == [1, 1, 1]

    def test_same_seed_same_assignment(self):
        items = [f"s{i}" for i in range(20)]
        a = make_splits(items, (0.5, 0.25, 0.25), SeededRng(7))
        b = make_splits(items, (0.5, 0.25, 0.25), SeededRng(7))
        assert a.train == b.train and a.val == b.val and a.test == b.test

    def test_different_seed_differs(self):
        items = list(range(50))
        a = make_splits(items, (0.5, 0.25, 0.25), SeededRng(1))
        b = make_splits(items, (0.5, 0.25, 0.25), SeededRng(2))
        assert a.train != b.train

    @given(st.integers(min_value=1, max_value=200),
           st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, n, seed):
        items = list(range(n))
        split = make_splits(items, (0.5, 0.25, 0.25), SeededRng(seed))
        combined = sorted(split.train + split.val + split.test)
        assert combined == items
        assert len(split) == n

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            make_splits([1, 2], (0.5, 0.5, 0.5), SeededRng(0))
        with pytest.raises(ValueError):
            make_splits([], (0.5, 0.25, 0.25), SeededRng(0))


class TestSeededRng:
    def test_reproducible_stream(self):
        assert SeededRng(42).uniform() == SeededRng(42).uniform()

    def test_children_are_independent_of_parent_draws(self):
        a = SeededRng(5)
        a.uniform(size=100)
        b = SeededRng(5)
        assert a.child("aug").uniform() == b.child("aug").uniform()

    def test_distinct_keys_distinct_streams(self):
        r = SeededRng(5)
        assert r.child("aug").uniform() != r.child("data").uniform()
        assert r.child(1).uniform() != r.child(2).uniform()


class TestSampleIO:
    def test_roundtrip_labeled(self, tmp_path):
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:8, 4:8] = 1
        s = LabeledSample(_img(domain=2), BinMask(mask), sample_id="caseA")
        save_sample(tmp_path, s)
        back = load_sample(tmp_path, "caseA")
        assert isinstance(back, LabeledSample)
        assert np.array_equal(back.image.pixels, s.image.pixels)
        assert np.array_equal(back.mask.labels, mask)
        assert back.image.domain_id == 2

    def test_roundtrip_paired_unlabeled(self, tmp_path):
        s = UnlabeledSample(_img(domain=0), partner=_img(domain=1, fill=0.6),
                            sample_id="caseB")
        save_sample(tmp_path, s)
        back = load_sample(tmp_path, "caseB")
        assert isinstance(back, UnlabeledSample)
        assert back.partner is not None
        assert back.partner.domain_id == 1
        assert np.allclose(back.partner.pixels, 0.6)

    def test_listing_is_sorted(self, tmp_path):
        for sid in ("b", "a", "c"):
            save_sample(tmp_path, UnlabeledSample(_img(), sample_id=sid))
        assert list_sample_ids(tmp_path) == ["a", "b", "c"]
