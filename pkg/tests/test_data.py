import numpy as np
import pytest

from spinegrade.data import (AugmentPolicy, FINE_SCHEME, GENERAL_SCHEME,
                             IDENTITY_POLICY, Sample, SynthConfig, augment,
                             bilinear_resize, build_corpus, crop_bbox,
                             fine_level, fine_to_general, general_level,
                             generate_corpus, load_corpus, read_synth_config,
                             scheme_by_name, synth_back, write_synth_config)


class TestGeneralLevel:
    def test_table_average_angles(self):
        assert general_level(6.48) == 1    # normal-level average
        assert general_level(75.71) == 4   # severe-level average
        assert general_level(17.91) == 2
        assert general_level(27.13) == 3

    def test_boundary_semantics(self):
        assert general_level(10.0) == 1
        assert general_level(10.3) == 2
        assert general_level(45.0) == 3
        assert general_level(45.1) == 4
        assert general_level(0.0) == 1
        assert general_level(20.0) == 2

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            general_level(-0.1)


class TestFineLevel:
    def test_examples(self):
        assert fine_level(0.0) == 1
        assert fine_level(7.0) == 2
        assert fine_level(45.0) == 9
        assert fine_level(46.0) == 10
        assert fine_level(173.0) == 10  # largest angle the schemes must cover

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            fine_level(-1.0)

    def test_grouping_consistency_all_tenths(self):
        for i in range(1801):
            angle = i / 10.0
            assert fine_to_general(fine_level(angle)) == general_level(angle), angle

    def test_monotone(self):
        angles = [i / 10.0 for i in range(1801)]
        fine = [fine_level(a) for a in angles]
        general = [general_level(a) for a in angles]
        assert all(a <= b for a, b in zip(fine, fine[1:]))
        assert all(a <= b for a, b in zip(general, general[1:]))

    def test_fine_to_general_range(self):
        with pytest.raises(ValueError):
            fine_to_general(0)
        with pytest.raises(ValueError):
            fine_to_general(11)

    def test_scheme_lookup(self):
        assert scheme_by_name("general") is GENERAL_SCHEME
        assert scheme_by_name("fine") is FINE_SCHEME
        with pytest.raises(ValueError):
            scheme_by_name("coarse")
        assert GENERAL_SCHEME.level_of(30.0) == 3
        assert FINE_SCHEME.level_of(30.0) == 6


class TestSynthBack:
    def test_zero_angle_mirror_exact(self):
        cfg = SynthConfig(noise_std=0.0)
        for seed in (0, 3, 9):
            s = synth_back(0.0, cfg, sample_seed=seed)
            assert np.array_equal(s.image, s.image[:, :, ::-1])

    def test_angle_sixty_labels(self):
        s = synth_back(60.0, SynthConfig(), sample_seed=1)
        assert s.general_level == 4
        assert s.fine_level == 10

    def test_deterministic(self):
        cfg = SynthConfig(seed=5)
        a = synth_back(23.0, cfg, sample_seed=2)
        b = synth_back(23.0, cfg, sample_seed=2)
        assert np.array_equal(a.image, b.image)
        assert a.bbox == b.bbox

    def test_out_of_range_angle(self):
        with pytest.raises(ValueError):
            synth_back(-1.0, SynthConfig())
        with pytest.raises(ValueError):
            synth_back(180.0, SynthConfig())

    def test_asymmetry_energy_strictly_increasing(self):
        cfg = SynthConfig(noise_std=0.0)
        energies = []
        for angle in (0.0, 15.0, 30.0, 60.0):
            img = synth_back(angle, cfg, sample_seed=4).image
            energies.append(float(np.abs(img - img[:, :, ::-1]).sum()))
        assert energies[0] == 0.0
        assert all(a < b for a, b in zip(energies, energies[1:]))

    def test_pixels_on_8bit_grid(self):
        s = synth_back(12.0, SynthConfig(), sample_seed=0)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert np.array_equal(s.image, np.round(s.image * 255) / 255)

    def test_bbox_inside_image(self):
        s = synth_back(70.0, SynthConfig(), sample_seed=0)
        x, y, w, h = s.bbox
        assert 0 <= x and 0 <= y
        assert x + w <= s.image.shape[2] and y + h <= s.image.shape[1]


class TestCorpus:
    def test_counts_exact(self):
        samples = build_corpus(SynthConfig(), 3, GENERAL_SCHEME)
        assert len(samples) == 12
        per_level = np.bincount([s.general_level for s in samples], minlength=5)
        assert np.array_equal(per_level[1:], [3, 3, 3, 3])

    def test_custom_counts_match_reference_proportions(self):
        # the reference corpus shape: 453/571/504/370 across the four levels
        counts = [45, 57, 50, 37]
        samples = build_corpus(SynthConfig(), counts, GENERAL_SCHEME)
        per_level = np.bincount([s.general_level for s in samples], minlength=5)
        assert np.array_equal(per_level[1:], counts)

    def test_levels_match_rebinned_angles(self):
        for s in build_corpus(SynthConfig(), 4, FINE_SCHEME):
            assert s.fine_level == fine_level(s.angle_deg)
            assert s.general_level == general_level(s.angle_deg)

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            build_corpus(SynthConfig(), 0, GENERAL_SCHEME)
        with pytest.raises(ValueError):
            build_corpus(SynthConfig(), [1, 2], GENERAL_SCHEME)

    def test_generate_and_reload_round_trip(self, tmp_path):
        manifest = generate_corpus(SynthConfig(seed=9), 3, GENERAL_SCHEME, tmp_path)
        assert manifest.exists()
        lines = manifest.read_text().splitlines()
        assert len(lines) == 13  # header + 12 rows
        originals = build_corpus(SynthConfig(seed=9), 3, GENERAL_SCHEME)
        reloaded = load_corpus(manifest)
        assert len(reloaded) == len(originals)
        for a, b in zip(originals, reloaded):
            assert a.angle_deg == b.angle_deg  # bit-exact via repr round-trip
            assert np.array_equal(a.image, b.image)
            assert a.bbox == b.bbox

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "manifest.csv")

    def test_identical_seeds_identical_corpora(self, tmp_path):
        m1 = generate_corpus(SynthConfig(seed=3), 2, GENERAL_SCHEME, tmp_path / "a")
        m2 = generate_corpus(SynthConfig(seed=3), 2, GENERAL_SCHEME, tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        for p1, p2 in zip(sorted((tmp_path / "a" / "images").iterdir()),
                          sorted((tmp_path / "b" / "images").iterdir())):
            assert p1.read_bytes() == p2.read_bytes()


class TestCropResize:
    def test_full_bbox_identity(self, rng):
        img = rng.random((1, 8, 8))
        s = Sample(img, 5.0, (0, 0, 8, 8), 1, 1)
        assert np.array_equal(crop_bbox(s), img)

    def test_left_half(self, rng):
        img = rng.random((1, 8, 8))
        s = Sample(img, 5.0, (0, 0, 4, 8), 1, 1)
        out = crop_bbox(s, (8, 4))
        assert np.array_equal(out, img[:, :, :4])

    def test_constant_resize_constant(self):
        img = np.full((1, 5, 7), 0.3)
        s = Sample(img, 5.0, (1, 1, 5, 3), 1, 1)
        out = crop_bbox(s, (9, 9))
        assert np.allclose(out, 0.3)

    def test_out_of_bounds_bbox(self, rng):
        s = Sample(rng.random((1, 8, 8)), 5.0, (4, 4, 8, 2), 1, 1)
        with pytest.raises(ValueError, match="bbox"):
            crop_bbox(s)

    def test_bilinear_identity_same_size(self, rng):
        img = rng.random((2, 6, 6))
        assert np.array_equal(bilinear_resize(img, 6, 6), img)


class TestAugment:
    def _sample(self, rng):
        return synth_back(25.0, SynthConfig(), sample_seed=int(rng.integers(100)))

    def test_identity_policy(self, rng):
        s = self._sample(rng)
        out = augment(s, np.random.default_rng(0), IDENTITY_POLICY)
        assert np.array_equal(out.image, s.image)
        assert out.bbox == s.bbox

    def test_labels_preserved(self, rng):
        s = self._sample(rng)
        for seed in range(10):
            out = augment(s, np.random.default_rng(seed), AugmentPolicy())
            assert out.angle_deg == s.angle_deg
            assert out.general_level == s.general_level
            assert out.fine_level == s.fine_level

    def test_flip_only_preserves_labels_and_mirrors(self, rng):
        s = self._sample(rng)
        policy = AugmentPolicy(flip_prob=1.0, crop_frac=0.0, scale_range=0.0,
                               brightness=0.0, contrast=0.0)
        out = augment(s, np.random.default_rng(1), policy)
        assert np.array_equal(out.image, s.image[:, :, ::-1])
        assert out.general_level == s.general_level

    def test_jitter_clamps_to_unit_interval(self, rng):
        s = self._sample(rng)
        policy = AugmentPolicy(flip_prob=0.0, crop_frac=0.0, scale_range=0.0,
                               brightness=0.9, contrast=0.9)
        for seed in range(5):
            out = augment(s, np.random.default_rng(seed), policy)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0

    def test_bbox_stays_inside(self, rng):
        s = self._sample(rng)
        for seed in range(20):
            out = augment(s, np.random.default_rng(seed), AugmentPolicy())
            x, y, w, h = out.bbox
            _, ih, iw = out.image.shape
            assert 0 <= x < iw and 0 <= y < ih
            assert x + w <= iw and y + h <= ih
            crop_bbox(out, (8, 8))  # must not raise

    def test_invalid_policy(self):
        with pytest.raises(ValueError):
            AugmentPolicy(flip_prob=1.5)
        with pytest.raises(ValueError):
            AugmentPolicy(crop_frac=0.6)


class TestSynthConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = SynthConfig(height=32, width=48, noise_std=0.05, seed=4)
        path = tmp_path / "synth.txt"
        write_synth_config(cfg, path)
        assert read_synth_config(path) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "synth.txt"
        path.write_text("height=32\nbogus=1\n")
        with pytest.raises(ValueError, match="bogus"):
            read_synth_config(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "synth.txt"
        path.write_text("height 32\n")
        with pytest.raises(ValueError, match="key=value"):
            read_synth_config(path)
