import numpy as np
import pytest

from ssgnet.data import (GROUND_TRUTH, REAL, ImageSample, LabeledDataset,
                         ToyCorpusSpec, datasets_equal, load_dataset,
                         make_toy_corpus, patchify, quantize, save_dataset,
                         split_dataset, toy_blob_params)
from ssgnet.errors import ConfigError, ContractError, DatasetLoadError
from ssgnet.util import load_json, dump_json


SPEC = ToyCorpusSpec(image_size=32, samples_per_class=10, radius_range=(3.0, 7.0), seed=7)


def brute_force_ellipse(blob, size):
    """Independent per-pixel rasterizer (pure python loops)."""
    mask = np.zeros((size, size), dtype=np.uint8)
    for y in range(size):
        for x in range(size):
            if ((y - blob.center_y) / blob.radius_y) ** 2 + ((x - blob.center_x) / blob.radius_x) ** 2 <= 1.0:
                mask[y, x] = 1
    return mask


class TestToyCorpus:
    def test_deterministic_under_seed(self):
        assert datasets_equal(make_toy_corpus(SPEC), make_toy_corpus(SPEC))

    def test_counts(self):
        d = make_toy_corpus(ToyCorpusSpec(image_size=32, samples_per_class=50,
                                          radius_range=(3, 7), seed=1))
        assert len(d) == 100
        assert d.class_counts() == [50, 50]

    def test_class0_background_only(self):
        d = make_toy_corpus(SPEC)
        for s in d.of_class(0):
            assert s.mask.sum() == 0
            assert s.class_label == 0

    def test_mask_matches_independent_rasterizer(self):
        d = make_toy_corpus(SPEC)
        for index, s in enumerate(d.of_class(1)):
            blob = toy_blob_params(SPEC, 1, index)
            expected = brute_force_ellipse(blob, SPEC.image_size)
            assert np.array_equal(s.mask, expected)
            assert s.mask.sum() == expected.sum() > 0

    def test_label_mask_consistency(self):
        d = make_toy_corpus(SPEC)
        for s in d.samples:
            assert (s.class_label == 1) == bool(s.mask.any())

    def test_pixels_quantized_in_range(self):
        d = make_toy_corpus(SPEC)
        for s in d.samples:
            assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
            assert np.array_equal(s.pixels, quantize(s.pixels))

    def test_noise_does_not_move_mask(self):
        noisy = ToyCorpusSpec(image_size=32, samples_per_class=5,
                              radius_range=(3, 7), noise_level=0.4, seed=9)
        clean = ToyCorpusSpec(image_size=32, samples_per_class=5,
                              radius_range=(3, 7), noise_level=0.0, seed=9)
        for a, b in zip(make_toy_corpus(noisy), make_toy_corpus(clean)):
            assert np.array_equal(a.mask, b.mask)

    @pytest.mark.parametrize("bad", [
        dict(image_size=4),
        dict(samples_per_class=0),
        dict(class_count=3),
        dict(radius_range=(10.0, 20.0), image_size=16),
        dict(noise_level=-0.1),
    ])
    def test_invalid_specs_rejected(self, bad):
        spec = ToyCorpusSpec(**{**dict(image_size=32, samples_per_class=4,
                                       radius_range=(3, 7), seed=0), **bad})
        with pytest.raises(ConfigError):
            make_toy_corpus(spec)


class TestSplit:
    def test_sizes_80_10_10(self):
        d = make_toy_corpus(ToyCorpusSpec(image_size=32, samples_per_class=50,
                                          radius_range=(3, 7), seed=2))
        train, val, test = split_dataset(d, (0.8, 0.1, 0.1), seed=0)
        assert (len(train), len(val), len(test)) == (80, 10, 10)

    def test_stratified_counts(self):
        # 60/40 class split, half to train -> 30/20 (exhaustive count check)
        d = make_toy_corpus(ToyCorpusSpec(image_size=32, samples_per_class=(60, 40),
                                          radius_range=(3, 7), seed=3))
        train, val, test = split_dataset(d, (0.5, 0.25, 0.25), seed=1)
        assert train.class_counts() == [30, 20]
        assert val.class_counts() == [15, 10]
        assert test.class_counts() == [15, 10]

    def test_partition_disjoint_and_complete(self):
        d = make_toy_corpus(SPEC)
        parts = split_dataset(d, (0.6, 0.2, 0.2), seed=4)
        ids = [s.id for part in parts for s in part.samples]
        assert len(ids) == len(set(ids)) == len(d)
        assert set(ids) == {s.id for s in d.samples}

    def test_same_seed_same_partition(self):
        d = make_toy_corpus(SPEC)
        a = split_dataset(d, (0.6, 0.2, 0.2), seed=5)
        b = split_dataset(d, (0.6, 0.2, 0.2), seed=5)
        for pa, pb in zip(a, b):
            assert [s.id for s in pa.samples] == [s.id for s in pb.samples]

    def test_bad_ratios(self):
        d = make_toy_corpus(SPEC)
        with pytest.raises(ConfigError):
            split_dataset(d, (0.5, 0.2, 0.2), seed=0)

    def test_empty_split_warns_not_raises(self):
        d = make_toy_corpus(ToyCorpusSpec(image_size=32, samples_per_class=2,
                                          radius_range=(3, 7), seed=0))
        with pytest.warns(UserWarning):
            split_dataset(d, (0.5, 0.5, 0.0), seed=0)


class TestPatchify:
    def test_nonoverlapping_tiling(self):
        d = make_toy_corpus(ToyCorpusSpec(image_size=64, samples_per_class=2, seed=0))
        patches = patchify(d, 32, 32)
        assert len(patches) == len(d) * 4

    def test_all_zero_mask_all_patches_negative(self):
        d = make_toy_corpus(SPEC)
        class0 = LabeledDataset(d.of_class(0), d.class_count, d.task)
        patches = patchify(class0, 16, 16)
        assert all(p.class_label == 0 for p in patches)

    def test_blob_in_one_quadrant(self):
        # Construct a sample whose blob sits fully inside one 16x16 quadrant,
        # then check against the parent mask crop directly.
        d = make_toy_corpus(SPEC)
        found = False
        for s in d.of_class(1):
            ys, xs = np.nonzero(s.mask)
            if ys.max() < 16 and xs.max() < 16:
                found = True
                one = LabeledDataset([s], d.class_count, d.task)
                patches = patchify(one, 16, 16)
                labels = [p.class_label for p in patches]
                assert sum(labels) == 1
                for p in patches:
                    y = int(p.id.split("-y")[1].split("-x")[0])
                    x = int(p.id.split("-x")[1])
                    assert np.array_equal(p.mask, s.mask[y:y + 16, x:x + 16])
        assert found, "no quadrant-contained blob in corpus; adjust spec"

    def test_coverage_multiset(self):
        d = make_toy_corpus(ToyCorpusSpec(image_size=32, samples_per_class=3,
                                          radius_range=(3, 7), seed=11))
        patches = patchify(d, 16, 16)
        parent_sum = sum(float(s.pixels.sum()) for s in d.samples)
        patch_sum = sum(float(p.pixels.sum()) for p in patches.samples)
        assert patch_sum == pytest.approx(parent_sum, rel=1e-6)

    def test_bad_stride(self):
        d = make_toy_corpus(SPEC)
        with pytest.raises(ConfigError):
            patchify(d, 16, 0)


class TestRoundTrip:
    def test_save_load_lossless(self, tmp_path):
        d = make_toy_corpus(SPEC)
        save_dataset(d, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert datasets_equal(d, loaded)

    def test_synthetic_provenance_survives(self, tmp_path):
        s = ImageSample(pixels=quantize(np.random.default_rng(0).random((16, 16))),
                        id="syn-x", provenance="synthetic", class_label=1)
        d = LabeledDataset([s], 2, "classification")
        save_dataset(d, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.samples[0].provenance == "synthetic"
        assert loaded.samples[0].mask is None

    def test_mask_origin_survives(self, tmp_path):
        d = make_toy_corpus(SPEC)
        save_dataset(d, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert all(s.mask_origin == GROUND_TRUTH for s in loaded.samples)

    def test_missing_image_names_offender(self, tmp_path):
        d = make_toy_corpus(SPEC)
        save_dataset(d, tmp_path / "ds")
        victim = d.samples[3].id
        (tmp_path / "ds" / "images" / f"{victim}.png").unlink()
        with pytest.raises(DatasetLoadError, match=victim):
            load_dataset(tmp_path / "ds")

    def test_corrupt_manifest(self, tmp_path):
        d = make_toy_corpus(SPEC)
        save_dataset(d, tmp_path / "ds")
        (tmp_path / "ds" / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetLoadError):
            load_dataset(tmp_path / "ds")

    def test_manifest_entry_missing_key(self, tmp_path):
        d = make_toy_corpus(SPEC)
        save_dataset(d, tmp_path / "ds")
        manifest = load_json(tmp_path / "ds" / "manifest.json")
        del manifest["samples"][0]["image"]
        dump_json(tmp_path / "ds" / "manifest.json", manifest)
        with pytest.raises(DatasetLoadError, match=manifest["samples"][0]["id"]):
            load_dataset(tmp_path / "ds")


class TestInvariants:
    def test_duplicate_ids_rejected(self):
        s = make_toy_corpus(SPEC).samples[0]
        with pytest.raises(ContractError):
            LabeledDataset([s, s], 2, "segmentation")

    def test_segmentation_requires_masks(self):
        s = ImageSample(pixels=np.zeros((8, 8), np.float32), id="a",
                        provenance=REAL, class_label=0)
        with pytest.raises(ContractError):
            LabeledDataset([s], 2, "segmentation")

    def test_mask_shape_checked(self):
        with pytest.raises(ContractError):
            ImageSample(pixels=np.zeros((8, 8), np.float32), id="a",
                        class_label=0, mask=np.zeros((4, 4), np.uint8))

    def test_label_range_checked(self):
        s = ImageSample(pixels=np.zeros((8, 8), np.float32), id="a", class_label=5)
        with pytest.raises(ContractError):
            LabeledDataset([s], 2, "classification")
