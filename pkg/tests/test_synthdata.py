import numpy as np
import pytest

from segadapt.core import SampleError
from segadapt.synthdata import (
    Benchmark,
    DomainSpec,
    GenerationError,
    LESION_FRACTION_BOUNDS,
    LesionBlob,
    SubjectPhantom,
    build_benchmark,
    build_paired_set,
    clinic_presets,
    load_benchmark,
    make_subject,
    mean_intensity_split_accuracy,
    render,
    render_paired,
    save_benchmark,
)

CLEAN = DomainSpec("clean", gamma=1.0, noise_sigma=0.0, blur_width=0.0,
                   bias_strength=0.0, lesion_contrast=1.7)


class TestSubjects:
    def test_same_seed_same_phantom(self):
        assert make_subject(42) == make_subject(42)

    def test_fraction_bounds_hold(self):
        lo, hi = LESION_FRACTION_BOUNDS
        for s in range(100):
            assert lo <= make_subject(1000 + s).lesion_fraction() <= hi

    def test_lesions_inside_anatomy(self):
        for s in range(20):
            subj = make_subject(s)
            assert not (subj.lesion_mask() & ~subj.anatomy_mask()).any()

    def test_invalid_phantom_rejected(self):
        subj = make_subject(0)
        outside = LesionBlob(center=(2.0, 2.0), axes=(2.0, 2.0), angle=0.0)
        with pytest.raises(GenerationError):
            SubjectPhantom(subj.size, subj.center, subj.semi_axes,
                           (outside,), subj.seed)
        huge = LesionBlob(center=subj.center, axes=(20.0, 20.0), angle=0.0)
        with pytest.raises(GenerationError):
            SubjectPhantom(subj.size, subj.center, subj.semi_axes, (huge,), subj.seed)


class TestRender:
    def test_deterministic(self):
        subj = make_subject(7)
        spec = clinic_presets()["B"]
        a = render(subj, spec)
        b = render(subj, spec)
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert np.array_equal(a.mask.labels, b.mask.labels)

    def test_canonical_contrast_exact(self):
        subj = make_subject(7)
        sample = render(subj, CLEAN)
        img = sample.image.pixels
        lesion = sample.mask.labels.astype(bool)
        background = subj.anatomy_mask() & ~lesion
        assert img[background].mean() == pytest.approx(0.5, abs=1e-12)
        assert np.all(img[lesion] == 0.5 * CLEAN.lesion_contrast)
        assert img[lesion].mean() / img[background].mean() == pytest.approx(
            CLEAN.lesion_contrast, abs=1e-9)

    def test_mask_is_exact_lesion_raster(self):
        subj = make_subject(9)
        sample = render(subj, clinic_presets()["extreme"])
        assert np.array_equal(sample.mask.labels.astype(bool), subj.lesion_mask())

    def test_spacing_and_domain_id_forwarded(self):
        subj = make_subject(3)
        spec = clinic_presets()["B"]
        sample = render(subj, spec, domain_id=2)
        assert sample.image.spacing == spec.spacing
        assert sample.image.domain_id == 2

    def test_domain_shift_detectable(self):
        presets = clinic_presets()
        a = [render(make_subject(2000 + i), presets["A"]).image for i in range(100)]
        b = [render(make_subject(3000 + i), presets["B"]).image for i in range(100)]
        assert mean_intensity_split_accuracy(a, b) > 0.9

    def test_detectability_monotone_in_gamma_gap(self):
        base = [render(make_subject(5000 + i), DomainSpec("g0")).image for i in range(60)]
        accs = []
        for g in (1.05, 1.2, 1.5, 2.0):
            shifted = [render(make_subject(4000 + i), DomainSpec(f"g{g}", gamma=g)).image
                       for i in range(60)]
            accs.append(mean_intensity_split_accuracy(base, shifted))
        assert all(x <= y + 1e-9 for x, y in zip(accs, accs[1:]))

    def test_fraction_stable_across_clinics(self):
        m1 = np.mean([make_subject(2000 + i).lesion_fraction() for i in range(100)])
        m2 = np.mean([make_subject(3000 + i).lesion_fraction() for i in range(100)])
        assert abs(m1 - m2) / m1 < 0.10

    def test_spec_validation(self):
        with pytest.raises(GenerationError):
            DomainSpec("bad", gamma=0.0)
        with pytest.raises(GenerationError):
            DomainSpec("bad", noise_sigma=-0.1)
        with pytest.raises(GenerationError):
            DomainSpec("bad", lesion_contrast=1.0)
        with pytest.raises(GenerationError):
            DomainSpec("bad", spacing=(0.0, 1.0))


class TestPaired:
    def test_masks_bitwise_equal_images_differ(self):
        presets = clinic_presets()
        subj = make_subject(11)
        a, b = render_paired(subj, presets["A"], presets["B"])
        assert np.array_equal(a.mask.labels, b.mask.labels)
        assert np.abs(a.image.pixels - b.image.pixels).max() > 0.01
        assert a.image.domain_id != b.image.domain_id

    def test_same_seed_same_pair(self):
        presets = clinic_presets()
        a1, b1 = render_paired(make_subject(12), presets["A"], presets["B"])
        a2, b2 = render_paired(make_subject(12), presets["A"], presets["B"])
        assert np.array_equal(a1.image.pixels, a2.image.pixels)
        assert np.array_equal(b1.image.pixels, b2.image.pixels)

    def test_identical_specs_rejected(self):
        with pytest.raises(GenerationError):
            render_paired(make_subject(1), CLEAN, CLEAN)

    def test_build_paired_set(self):
        presets = clinic_presets()
        pairs = build_paired_set(5, presets["A"], presets["B"], seed=1)
        assert len(pairs) == 5
        for a, b in pairs:
            assert a.sample_id == b.sample_id
            assert np.array_equal(a.mask.labels, b.mask.labels)


class TestBenchmark:
    def _bench(self, seed=0):
        presets = clinic_presets()
        return build_benchmark(20, [presets["A"], presets["B"], presets["C"]], seed=seed)

    def test_three_clinics_sixty_subjects(self):
        bench = self._bench()
        assert sum(len(c.split) for c in bench.clinics.values()) == 60

    def test_split_protocols(self):
        bench = self._bench()
        a = bench.clinics["A"].split
        assert (len(a.train), len(a.val), len(a.test)) == (10, 5, 5)
        for name in ("B", "C"):
            s = bench.clinics[name].split
            assert (len(s.train), len(s.val), len(s.test)) == (10, 0, 10)

    def test_split_disjointness(self):
        bench = self._bench()
        for clinic in bench.clinics.values():
            ids = [s.sample_id for part in ("train", "val", "test")
                   for s in getattr(clinic.split, part)]
            assert len(ids) == len(set(ids))

    def test_deterministic_manifest(self):
        assert self._bench(seed=5).manifest() == self._bench(seed=5).manifest()

    def test_minimums_enforced(self):
        presets = clinic_presets()
        with pytest.raises(GenerationError):
            build_benchmark(20, [presets["A"]])
        with pytest.raises(GenerationError):
            build_benchmark(3, [presets["A"], presets["B"]])

    def test_save_load_roundtrip(self, tmp_path):
        presets = clinic_presets()
        bench = build_benchmark(4, [presets["A"], presets["B"]], seed=2)
        save_benchmark(bench, tmp_path)
        back = load_benchmark(tmp_path)
        assert back.manifest() == bench.manifest()
        orig = bench.clinics["A"].split.train[0]
        loaded = next(s for s in back.clinics["A"].split.train
                      if s.sample_id == orig.sample_id)
        assert np.array_equal(loaded.image.pixels, orig.image.pixels)
        assert np.array_equal(loaded.mask.labels, orig.mask.labels)
