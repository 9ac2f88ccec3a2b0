"""
Tests for the synthetic phantom generator and dataset I/O
"""

import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import ks_2samp

from src.exceptions import ConfigurationError, ErrorCode, FileError, FormatError
from src.file_writer import FileWriter
from src.models import BinaryMask, Image, ViewStyle
from src.phantom import (
    MANIFEST_NAME, TAG_LEVEL, default_profiles, generate_dataset,
    noisy_dense_labels, read_dataset, read_pgm, split_by_subject,
    write_dataset, write_pgm
)
from src.utils import make_rng


def _small_profile(name="A", n_subjects=4, image_size=32):
    return replace(default_profiles(image_size)[name], n_subjects=n_subjects)


class TestDefaultProfiles:
    """Test the two default institutions"""

    def test_sites_differ_in_view_and_gain(self):
        """Test A is CC at full gain and B is MLO at reduced gain"""
        profiles = default_profiles()
        assert profiles["A"].view_style is ViewStyle.CC
        assert profiles["B"].view_style is ViewStyle.MLO
        assert profiles["B"].intensity_gain < profiles["A"].intensity_gain
        assert profiles["A"].n_subjects * profiles["A"].images_per_subject == 250

    def test_sites_are_heterogeneous(self):
        """Test mean image intensity distributions of A and B are far apart"""
        means = {}
        for name, profile in default_profiles(32).items():
            samples = generate_dataset(replace(profile, n_subjects=100), seed=11)
            means[name] = [sample.image.pixels.mean() for sample in samples]
        assert len(means["A"]) == len(means["B"]) == 200
        assert ks_2samp(means["A"], means["B"]).statistic > 0.3

    def test_zero_subjects_rejected(self):
        """Test degenerate profiles raise ConfigurationError"""
        with pytest.raises(ConfigurationError):
            generate_dataset(_small_profile(n_subjects=0), seed=1)

    def test_empty_breast_range_rejected(self):
        """Test an inverted size range is rejected"""
        profile = replace(_small_profile(), breast_size_range=(0.7, 0.5))
        with pytest.raises(ConfigurationError) as exc_info:
            generate_dataset(profile, seed=1)
        assert exc_info.value.error_code == ErrorCode.INVALID_CONFIG

    def test_sub_pixel_breast_range_rejected(self):
        """Test a size range too small to cover any pixel centre is rejected"""
        profile = replace(
            _small_profile(n_subjects=1), breast_size_range=(0.005, 0.005),
            images_per_subject=1, dense_blob_range=(0, 0),
        )
        with pytest.raises(ConfigurationError) as exc_info:
            generate_dataset(profile, seed=1)
        assert exc_info.value.error_code == ErrorCode.INVALID_CONFIG

    def test_smallest_accepted_breast_renders(self):
        """Test every image at the smallest accepted size has a breast"""
        profile = replace(_small_profile(n_subjects=6, image_size=32), breast_size_range=(2 / 32, 2 / 32))
        samples = generate_dataset(profile, seed=3)
        assert all(sample.breast_truth.area > 0 for sample in samples)


class TestGenerateDataset:
    """Test phantom generation"""

    def test_same_seed_same_arrays(self):
        """Test (profile, seed) determines every array bit-for-bit"""
        first = generate_dataset(_small_profile(), seed=5)
        second = generate_dataset(_small_profile(), seed=5)
        assert len(first) == len(second) == 8
        for a, b in zip(first, second):
            assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
            assert np.array_equal(a.dense_truth.bits, b.dense_truth.bits)
            assert a.pd_truth == b.pd_truth

    def test_different_seed_differs(self):
        """Test the seed changes the images"""
        first = generate_dataset(_small_profile(), seed=5)
        second = generate_dataset(_small_profile(), seed=6)
        assert any(a.image.pixels.tobytes() != b.image.pixels.tobytes() for a, b in zip(first, second))

    def test_identifiers(self):
        """Test subject and image ids"""
        samples = generate_dataset(_small_profile(n_subjects=2), seed=0)
        assert [(s.subject_id, s.image_id) for s in samples] == [
            ("A-0000", "0"), ("A-0000", "1"), ("A-0001", "0"), ("A-0001", "1"),
        ]

    def test_ground_truth_consistency(self):
        """Test dense within breast, non-empty breast and exact PD"""
        for sample in generate_dataset(_small_profile("B", n_subjects=6, image_size=64), seed=2):
            assert sample.breast_truth.area > 0
            assert sample.dense_truth.is_subset_of(sample.breast_truth)
            assert sample.pd_truth == 100.0 * sample.dense_truth.area / sample.breast_truth.area
            assert sample.image.pixels.shape == (64, 64)

    def test_tag_box_is_bright(self):
        """Test tagged images carry the tag at the recorded box"""
        profile = replace(_small_profile(image_size=64), tag_probability=1.0, noise_sigma=0.0)
        for sample in generate_dataset(profile, seed=3):
            assert sample.tag_box is not None
            row0, col0, rows, cols = sample.tag_box
            np.testing.assert_allclose(sample.image.pixels[row0:row0 + rows, col0:col0 + cols], TAG_LEVEL)
            assert not sample.breast_truth.bits[row0:row0 + rows, col0:col0 + cols].any()

    def test_no_tags_when_probability_zero(self):
        """Test tag_probability 0 never draws a tag"""
        profile = replace(_small_profile(), tag_probability=0.0)
        assert all(sample.tag_box is None for sample in generate_dataset(profile, seed=3))

    def test_density_spans_fatty_to_dense(self):
        """Test 200 default images cover low and high percent density"""
        profile = replace(default_profiles()["A"], n_subjects=100)
        pds = [sample.pd_truth for sample in generate_dataset(profile, seed=7)]
        assert len(pds) == 200
        assert min(pds) < 5.0
        assert max(pds) > 50.0


class TestSplitBySubject:
    """Test subject-level splitting"""

    def setup_method(self):
        self.samples = generate_dataset(_small_profile(n_subjects=10, image_size=16), seed=1)

    def test_disjoint_and_complete(self):
        """Test no subject appears in both partitions"""
        kept, held = split_by_subject(self.samples, 0.2, make_rng(1, "test-split", "A"))
        kept_ids = {s.subject_id for s in kept}
        held_ids = {s.subject_id for s in held}
        assert not kept_ids & held_ids
        assert len(held_ids) == 2
        assert len(kept) + len(held) == len(self.samples)

    def test_same_stream_same_split(self):
        """Test the split is a function of the stream"""
        a = split_by_subject(self.samples, 0.3, make_rng(4, "split"))
        b = split_by_subject(self.samples, 0.3, make_rng(4, "split"))
        assert [s.subject_id for s in a[1]] == [s.subject_id for s in b[1]]

    def test_small_fraction_keeps_one_subject_each_side(self):
        """Test a tiny positive fraction still holds out one subject"""
        kept, held = split_by_subject(self.samples, 0.01, make_rng(0, "split"))
        assert len({s.subject_id for s in held}) == 1
        assert kept

    def test_zero_fraction(self):
        """Test fraction 0 holds nothing out"""
        kept, held = split_by_subject(self.samples, 0.0, make_rng(0, "split"))
        assert held == []
        assert len(kept) == len(self.samples)

    def test_invalid_fraction(self):
        """Test fraction 1 is rejected"""
        with pytest.raises(ConfigurationError):
            split_by_subject(self.samples, 1.0, make_rng(0, "split"))


class TestNoisyLabels:
    """Test automated-label perturbation"""

    def test_zero_strength_is_identity(self):
        """Test strength 0 returns the samples unchanged"""
        samples = generate_dataset(_small_profile(), seed=1)
        noisy = noisy_dense_labels(samples, 0.0, make_rng(0, "label-noise"))
        assert all(a is b for a, b in zip(samples, noisy))

    def test_perturbed_labels_stay_in_breast(self):
        """Test perturbed masks are clipped and PD follows them"""
        samples = generate_dataset(_small_profile(image_size=64), seed=1)
        noisy = noisy_dense_labels(samples, 1.0, make_rng(0, "label-noise"))
        assert len(noisy) == len(samples)
        for original, sample in zip(samples, noisy):
            assert sample.dense_truth.is_subset_of(sample.breast_truth)
            assert sample.pd_truth == 100.0 * sample.dense_truth.area / sample.breast_truth.area
            assert sample.image is original.image

    def test_empty_breast_gets_zero_pd(self):
        """Test a sample with an empty breast mask does not divide by zero"""
        sample = replace(
            generate_dataset(_small_profile(n_subjects=1), seed=1)[0],
            breast_truth=BinaryMask.empty(32, 32),
        )
        noisy = noisy_dense_labels([sample], 1.0, make_rng(0, "label-noise"))
        assert noisy[0].pd_truth == 0.0
        assert noisy[0].dense_truth.area == 0


class TestPGM:
    """Test binary PGM encoding"""

    def test_round_trip_16_bit(self):
        """Test 16-bit quantisation error is at most half a step"""
        pixels = np.random.default_rng(0).random((5, 7))
        decoded = read_pgm(write_pgm(Image.ingest(pixels)))
        assert decoded.pixels.shape == (5, 7)
        assert np.abs(decoded.pixels - pixels).max() <= 0.5 / 65535 + 1e-12

    def test_round_trip_8_bit_masks(self):
        """Test binary rasters survive 8-bit encoding exactly"""
        pixels = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(read_pgm(write_pgm(Image.ingest(pixels), maxval=255)).pixels, pixels)

    def test_values_are_clipped(self):
        """Test out-of-range pixels are clipped to [0, 1]"""
        decoded = read_pgm(write_pgm(Image.ingest(np.array([[-0.5, 1.5]]))))
        np.testing.assert_array_equal(decoded.pixels, [[0.0, 1.0]])

    def test_header_comments(self):
        """Test comments inside the header are skipped"""
        data = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
        np.testing.assert_array_equal(read_pgm(data).pixels, [[0.0, 1.0]])

    def test_ascii_variant_rejected(self):
        """Test P2 files are refused"""
        with pytest.raises(FormatError) as exc_info:
            read_pgm(b"P2\n1 1\n255\n0\n")
        assert exc_info.value.error_code == ErrorCode.UNSUPPORTED_FORMAT

    def test_truncated_payload(self):
        """Test a short payload is reported"""
        with pytest.raises(FormatError) as exc_info:
            read_pgm(b"P5\n4 4\n255\n\x00\x00")
        assert exc_info.value.error_code == ErrorCode.TRUNCATED_PAYLOAD

    def test_unsupported_maxval(self):
        """Test maxval other than 255 or 65535"""
        with pytest.raises(FormatError) as exc_info:
            read_pgm(b"P5\n1 1\n1023\n\x00\x00")
        assert exc_info.value.error_code == ErrorCode.UNSUPPORTED_FORMAT


class TestDatasetIO:
    """Test dataset directories"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_write_then_read(self):
        """Test masks and PD survive exactly, pixels to 16-bit precision"""
        samples = generate_dataset(_small_profile(n_subjects=3), seed=4)
        split_of = {"A-0000": "test", "A-0001": "train", "A-0002": "train"}
        manifest = write_dataset(self.temp_dir, "A", samples, split_of=split_of)
        assert manifest == Path(self.temp_dir) / "A" / MANIFEST_NAME

        train = read_dataset(self.temp_dir, "A", split="train")
        assert [s.subject_id for s in train] == ["A-0001", "A-0001", "A-0002", "A-0002"]
        for original, loaded in zip(samples[2:], train):
            assert loaded.pd_truth == original.pd_truth
            assert loaded.tag_box == original.tag_box
            np.testing.assert_array_equal(loaded.breast_truth.bits, original.breast_truth.bits)
            np.testing.assert_array_equal(loaded.dense_truth.bits, original.dense_truth.bits)
            expected = np.clip(original.image.pixels, 0.0, 1.0)
            assert np.abs(loaded.image.pixels - expected).max() <= 0.5 / 65535 + 1e-12
        assert len(read_dataset(self.temp_dir, "A")) == 6

    def test_same_seed_same_manifest(self):
        """Test two writes of the same seed give byte-identical manifests"""
        for name in ("one", "two"):
            write_dataset(Path(self.temp_dir) / name, "A", generate_dataset(_small_profile(), seed=9))
        first = (Path(self.temp_dir) / "one" / "A" / MANIFEST_NAME).read_bytes()
        second = (Path(self.temp_dir) / "two" / "A" / MANIFEST_NAME).read_bytes()
        assert first == second

    def test_existing_files_need_force(self):
        """Test a non-forcing writer refuses to overwrite"""
        samples = generate_dataset(_small_profile(n_subjects=1), seed=0)
        write_dataset(self.temp_dir, "A", samples)
        with pytest.raises(FileError) as exc_info:
            write_dataset(self.temp_dir, "A", samples, writer=FileWriter(self.temp_dir))
        assert exc_info.value.error_code == ErrorCode.FILE_EXISTS

    def test_missing_manifest(self):
        """Test reading an unknown institution"""
        with pytest.raises(FileError) as exc_info:
            read_dataset(self.temp_dir, "Z")
        assert exc_info.value.error_code == ErrorCode.FILE_NOT_FOUND

    def test_malformed_manifest(self):
        """Test a manifest line with the wrong field count"""
        base = Path(self.temp_dir) / "A"
        base.mkdir()
        (base / MANIFEST_NAME).write_text("train\tA-0000\n")
        with pytest.raises(FormatError):
            read_dataset(self.temp_dir, "A")
