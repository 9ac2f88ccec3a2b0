"""
Deterministic synthetic mammograms with exact ground-truth masks

Each institution profile yields subjects with two (by default) views that
share breast geometry and density level. Images are left-anchored
half-ellipses of fatty tissue with Gaussian-profile dense blobs, an
optional pectoral wedge (MLO-like profiles) and an optional bright tag in
a right-hand corner. Everything is drawn from named Philox streams, so a
(profile, seed) pair always produces the same arrays.
"""

import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError, ErrorCode, FileError, FormatError, create_file_not_found_error
from .file_writer import FileWriter
from .models import BinaryMask, Image, InstitutionProfile, PhantomSample, ViewStyle
from .utils import make_rng, sanitize_name

logger = logging.getLogger(__name__)

# Intensities before the institution gain
BACKGROUND_LEVEL = 0.05
FATTY_LEVEL = 0.92
DENSE_CONTRAST = 0.08
PECTORAL_LEVEL = 0.6
TAG_LEVEL = 0.97

TAG_SHAPE = (5, 8)
TAG_MARGIN = 2

# smallest breast semi-axis, in pixels, a profile may ask for
MIN_BREAST_EXTENT = 2.0

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "# split\tsubject_id\timage_id\timage\tbreast\tdense\tpd_truth\ttag"

# area of the {profile >= 0.5} disc of a unit-sigma Gaussian blob
_BLOB_AREA_PER_SIGMA2 = 2.0 * math.pi * math.log(2.0)


def default_profiles(image_size: int = 64) -> Dict[str, InstitutionProfile]:
    """The two default institutions: a CC-like site A and an MLO-like site B"""
    return {
        "A": InstitutionProfile(
            name="A", view_style=ViewStyle.CC, intensity_gain=1.0, noise_sigma=0.01,
            breast_size_range=(0.5, 0.75), image_size=image_size,
        ),
        "B": InstitutionProfile(
            name="B", view_style=ViewStyle.MLO, intensity_gain=0.7, noise_sigma=0.01,
            breast_size_range=(0.4, 0.6), image_size=image_size,
        ),
    }


def validate_profile(profile: InstitutionProfile) -> None:
    """
    Check an institution profile

    Raises:
        ConfigurationError: Empty ranges, bad probabilities or zero counts
    """
    problems = []
    if profile.n_subjects < 1:
        problems.append("n_subjects must be >= 1")
    if profile.images_per_subject < 1:
        problems.append("images_per_subject must be >= 1")
    low, high = profile.breast_size_range
    if not 0 < low <= high <= 1:
        problems.append(f"breast_size_range {profile.breast_size_range} must satisfy 0 < low <= high <= 1")
    elif low * profile.image_size < MIN_BREAST_EXTENT:
        problems.append(f"breast_size_range low end {low} gives under {MIN_BREAST_EXTENT} px of breast at image_size {profile.image_size}")
    blob_low, blob_high = profile.dense_blob_range
    if not 0 <= blob_low <= blob_high:
        problems.append(f"dense_blob_range {profile.dense_blob_range} must satisfy 0 <= low <= high")
    if not 0.0 <= profile.tag_probability <= 1.0:
        problems.append("tag_probability must be in [0, 1]")
    if profile.noise_sigma < 0 or profile.intensity_gain <= 0:
        problems.append("noise_sigma must be >= 0 and intensity_gain > 0")
    if profile.image_size < TAG_SHAPE[1] + 2 * TAG_MARGIN:
        problems.append(f"image_size must be >= {TAG_SHAPE[1] + 2 * TAG_MARGIN}")
    if problems:
        raise ConfigurationError(
            f"Invalid institution profile '{profile.name}': " + "; ".join(problems),
            config_key=f"institution.{profile.name}",
        )


@dataclass(frozen=True)
class _SubjectGeometry:
    width_fraction: float
    height_fraction: float
    centre_fraction: float
    density_level: float
    blob_polar: np.ndarray  # k x 2: radial fraction, angle
    blob_scale: np.ndarray  # k relative sigma factors
    wedge_fractions: Tuple[float, float]


def _draw_subject(profile: InstitutionProfile, rng: np.random.Generator) -> _SubjectGeometry:
    width_fraction = rng.uniform(*profile.breast_size_range)
    height_fraction = rng.uniform(0.3, 0.45)
    centre_fraction = rng.uniform(0.45, 0.55)
    density_level = rng.uniform(0.02, 0.9)
    blob_low, blob_high = profile.dense_blob_range
    count = int(rng.integers(blob_low, blob_high + 1))
    radial = rng.uniform(0.0, 0.75, size=count)
    angle = rng.uniform(-0.45 * math.pi, 0.45 * math.pi, size=count)
    scale = rng.uniform(0.7, 1.3, size=count)
    wedge = (rng.uniform(0.25, 0.4), rng.uniform(0.45, 0.65))
    return _SubjectGeometry(
        width_fraction, height_fraction, centre_fraction, density_level,
        np.stack([radial, angle], axis=1), scale, wedge,
    )


def _render_image(profile: InstitutionProfile, subject: _SubjectGeometry,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Optional[Tuple[int, int, int, int]]]:
    size = profile.image_size
    semi_x = subject.width_fraction * size * (1 + rng.uniform(-0.03, 0.03))
    semi_y = subject.height_fraction * size * (1 + rng.uniform(-0.03, 0.03))
    centre_y = subject.centre_fraction * size + rng.uniform(-1.0, 1.0)
    jitter = rng.uniform(-1.5, 1.5, size=subject.blob_polar.shape)
    wedge_x = subject.wedge_fractions[0] * size * (1 + rng.uniform(-0.05, 0.05))
    wedge_y = subject.wedge_fractions[1] * size * (1 + rng.uniform(-0.05, 0.05))
    has_tag = rng.random() < profile.tag_probability
    bottom_corner = bool(rng.integers(0, 2))
    noise = rng.normal(0.0, profile.noise_sigma, size=(size, size)) if profile.noise_sigma > 0 \
        else np.zeros((size, size))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    breast = (xx / semi_x) ** 2 + ((yy - centre_y) / semi_y) ** 2 <= 1.0
    wedge = np.zeros_like(breast)
    if profile.view_style is ViewStyle.MLO:
        wedge = xx / wedge_x + yy / wedge_y < 1.0
        breast &= ~wedge

    profile_map = np.zeros((size, size))
    blob_count = len(subject.blob_polar)
    if blob_count:
        breast_area_estimate = math.pi * semi_x * semi_y / 2.0
        base_sigma = math.sqrt(subject.density_level * breast_area_estimate / (blob_count * _BLOB_AREA_PER_SIGMA2))
        for (radial, angle), (dx, dy), scale in zip(subject.blob_polar, jitter, subject.blob_scale):
            blob_x = semi_x * radial * math.cos(angle) + dx
            blob_y = centre_y + semi_y * radial * math.sin(angle) + dy
            sigma = max(base_sigma * scale, 0.3)
            distance2 = (xx - blob_x) ** 2 + (yy - blob_y) ** 2
            profile_map = np.maximum(profile_map, np.exp(-distance2 / (2.0 * sigma * sigma)))
    dense = (profile_map >= 0.5) & breast

    pixels = np.full((size, size), BACKGROUND_LEVEL)
    pixels[wedge] = PECTORAL_LEVEL
    pixels[breast] = FATTY_LEVEL + DENSE_CONTRAST * profile_map[breast]

    tag_box = None
    if has_tag:
        rows, cols = TAG_SHAPE
        row0 = size - TAG_MARGIN - rows if bottom_corner else TAG_MARGIN
        col0 = size - TAG_MARGIN - cols
        pixels[row0:row0 + rows, col0:col0 + cols] = TAG_LEVEL
        tag_box = (row0, col0, rows, cols)

    pixels = profile.intensity_gain * (pixels + noise)
    return pixels, breast, dense, tag_box


def generate_dataset(profile: InstitutionProfile, seed: int) -> List[PhantomSample]:
    """
    Generate every image of an institution

    Args:
        profile: Institution appearance and cohort parameters
        seed: Run seed; each subject draws from its own derived stream

    Returns:
        Samples ordered by subject, then image index

    Raises:
        ConfigurationError: Degenerate profile (e.g. zero subjects)
    """
    validate_profile(profile)
    samples: List[PhantomSample] = []
    for subject_index in range(profile.n_subjects):
        subject_id = f"{sanitize_name(profile.name)}-{subject_index:04d}"
        rng = make_rng(seed, "phantom", profile.name, str(subject_index))
        geometry = _draw_subject(profile, rng)
        for image_index in range(profile.images_per_subject):
            pixels, breast, dense, tag_box = _render_image(profile, geometry, rng)
            breast_mask = BinaryMask(breast)
            dense_mask = BinaryMask(dense)
            if breast_mask.area == 0:
                raise ConfigurationError(
                    f"Institution {profile.name} rendered an empty breast for subject {subject_id}",
                    config_key=f"institution.{profile.name}.breast_size_range",
                )
            samples.append(PhantomSample(
                subject_id=subject_id,
                image_id=str(image_index),
                image=Image.ingest(pixels),
                breast_truth=breast_mask,
                dense_truth=dense_mask,
                pd_truth=100.0 * dense_mask.area / breast_mask.area,
                tag_box=tag_box,
            ))
    logger.info(f"Generated {len(samples)} phantom images for institution {profile.name}")
    return samples


def split_by_subject(samples: Sequence[PhantomSample], fraction: float,
                     rng: np.random.Generator) -> Tuple[List[PhantomSample], List[PhantomSample]]:
    """
    Subject-level random split

    Args:
        samples: Samples to partition
        fraction: Share of subjects moved to the held-out partition
        rng: Seeded generator

    Returns:
        (kept, held_out), each in the input order; no subject spans both.
        With two or more subjects and a positive fraction, each side gets
        at least one subject.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"Split fraction must be in [0, 1), got {fraction}", config_key="fraction")
    subjects = sorted({sample.subject_id for sample in samples})
    if not subjects:
        return [], []
    held_count = int(round(fraction * len(subjects)))
    if fraction > 0 and len(subjects) >= 2:
        held_count = min(max(held_count, 1), len(subjects) - 1)
    order = rng.permutation(len(subjects))
    held = {subjects[i] for i in order[:held_count]}
    kept = [sample for sample in samples if sample.subject_id not in held]
    held_out = [sample for sample in samples if sample.subject_id in held]
    return kept, held_out


def noisy_dense_labels(samples: Sequence[PhantomSample], strength: float,
                       rng: np.random.Generator) -> List[PhantomSample]:
    """
    Perturb dense-tissue labels the way an automated labeller would

    Each dense mask is dilated or eroded (coin flip) by 0..ceil(3 * strength)
    iterations and clipped to the breast. pd_truth of the returned samples
    describes the perturbed label.
    """
    if strength <= 0:
        return list(samples)
    max_iterations = int(math.ceil(3 * strength))
    noisy = []
    for sample in samples:
        iterations = int(rng.integers(0, max_iterations + 1))
        grow = bool(rng.random() < 0.5)
        breast_area = sample.breast_truth.area
        bits = sample.dense_truth.bits
        if iterations > 0 and bits.any():
            operation = ndimage.binary_dilation if grow else ndimage.binary_erosion
            bits = operation(bits, iterations=iterations)
        dense = BinaryMask(bits).intersect(sample.breast_truth)
        noisy.append(replace(
            sample, dense_truth=dense,
            pd_truth=100.0 * dense.area / breast_area if breast_area else 0.0,
        ))
    return noisy


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def write_pgm(img: Image, maxval: int = 65535) -> bytes:
    """
    Encode an image as binary PGM (P5)

    Pixels are clipped to [0, 1] and quantised to maxval steps; 16-bit
    samples are big-endian.
    """
    if maxval not in (255, 65535):
        raise FormatError(f"Unsupported PGM maxval {maxval}", ErrorCode.UNSUPPORTED_FORMAT, format_name="PGM")
    levels = np.rint(np.clip(img.pixels, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    return header + levels.astype(dtype).tobytes()


def read_pgm(data: bytes) -> Image:
    """
    Decode a binary PGM (P5) image with maxval 255 or 65535

    Raises:
        FormatError: Other magic numbers (including ASCII "P2"), malformed
            header, unsupported maxval, truncated payload
    """
    if data[:2] != b"P5":
        raise FormatError(
            f"Unsupported PGM variant {data[:2]!r}; only binary P5 is read",
            ErrorCode.UNSUPPORTED_FORMAT, format_name="PGM",
        )
    pos = 2
    fields = []
    for _ in range(3):
        match = _PGM_TOKEN.match(data, pos)
        if match is None:
            raise FormatError("Malformed PGM header", ErrorCode.MALFORMED_HEADER, format_name="PGM")
        fields.append(match.group(1))
        pos = match.end()
    try:
        width, height, maxval = (int(value) for value in fields)
    except ValueError:
        raise FormatError(f"Non-numeric PGM header fields {fields}", ErrorCode.MALFORMED_HEADER, format_name="PGM")
    if width <= 0 or height <= 0:
        raise FormatError(f"Invalid PGM extent {width}x{height}", ErrorCode.MALFORMED_HEADER, format_name="PGM")
    if maxval not in (255, 65535):
        raise FormatError(f"Unsupported PGM maxval {maxval}", ErrorCode.UNSUPPORTED_FORMAT, format_name="PGM")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("Missing whitespace after PGM header", ErrorCode.MALFORMED_HEADER, format_name="PGM")
    pos += 1

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    needed = width * height * dtype.itemsize
    if len(data) - pos < needed:
        raise FormatError(
            f"PGM payload truncated: expected {needed} bytes, found {len(data) - pos}",
            ErrorCode.TRUNCATED_PAYLOAD, format_name="PGM",
        )
    levels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return Image.ingest(levels.astype(np.float64) / maxval)


def _mask_image(mask: BinaryMask) -> Image:
    return Image.ingest(mask.bits.astype(np.float64))


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def write_dataset(root: Union[str, Path], institution: str, samples: Sequence[PhantomSample],
                  split_of: Optional[Mapping[str, str]] = None,
                  writer: Optional[FileWriter] = None) -> Path:
    """
    Write images, masks and a manifest below <root>/<institution>/

    Layout: <subject_id>/<image_id>.pgm with <image_id>_breast.pgm and
    <image_id>_dense.pgm sidecars, plus manifest.txt (tab-separated, one
    line per sample, pd_truth at full precision).

    Args:
        root: Dataset root directory
        institution: Institution name
        samples: Samples to write
        split_of: subject_id -> split label ("train", "test"); default "all"
        writer: FileWriter rooted at ``root``; a forcing one is created when omitted

    Returns:
        Path of the manifest
    """
    writer = writer or FileWriter(root, force=True)
    base = Path(sanitize_name(institution))
    lines = [MANIFEST_HEADER]
    for sample in samples:
        subject_dir = base / sample.subject_id
        image_path = subject_dir / f"{sample.image_id}.pgm"
        breast_path = subject_dir / f"{sample.image_id}_breast.pgm"
        dense_path = subject_dir / f"{sample.image_id}_dense.pgm"
        writer.write_bytes(image_path, write_pgm(sample.image, maxval=65535))
        writer.write_bytes(breast_path, write_pgm(_mask_image(sample.breast_truth), maxval=255))
        writer.write_bytes(dense_path, write_pgm(_mask_image(sample.dense_truth), maxval=255))
        tag = ",".join(str(v) for v in sample.tag_box) if sample.tag_box else "-"
        split = (split_of or {}).get(sample.subject_id, "all")
        lines.append("\t".join([
            split, sample.subject_id, sample.image_id,
            image_path.relative_to(base).as_posix(),
            breast_path.relative_to(base).as_posix(),
            dense_path.relative_to(base).as_posix(),
            repr(float(sample.pd_truth)), tag,
        ]))
    manifest = writer.write_text(base / MANIFEST_NAME, "\n".join(lines) + "\n")
    logger.info(f"Wrote {len(samples)} samples for {institution} to {manifest.parent}")
    return manifest


def read_dataset(root: Union[str, Path], institution: str,
                 split: Optional[str] = None) -> List[PhantomSample]:
    """
    Load an institution written by write_dataset

    Args:
        root: Dataset root directory
        institution: Institution name
        split: Keep only this split label when given

    Raises:
        FileError: Missing manifest or image file
        FormatError: Malformed manifest line or image
    """
    base = Path(root) / sanitize_name(institution)
    manifest = base / MANIFEST_NAME
    if not manifest.exists():
        raise create_file_not_found_error(str(manifest))
    samples = []
    for line_number, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 8:
            raise FormatError(
                f"{manifest}:{line_number}: expected 8 fields, found {len(fields)}",
                ErrorCode.MALFORMED_HEADER, format_name="manifest",
            )
        label, subject_id, image_id, image_rel, breast_rel, dense_rel, pd_text, tag_text = fields
        if split is not None and label != split:
            continue

        def load(relative: str) -> Image:
            path = base / relative
            try:
                return read_pgm(path.read_bytes())
            except FileNotFoundError:
                raise create_file_not_found_error(str(path))
            except OSError as e:
                raise FileError(f"Error reading {path}: {e}", ErrorCode.FILE_ERROR, file_path=str(path))

        tag_box = None if tag_text == "-" else tuple(int(v) for v in tag_text.split(","))
        samples.append(PhantomSample(
            subject_id=subject_id,
            image_id=image_id,
            image=load(image_rel),
            breast_truth=BinaryMask(load(breast_rel).pixels > 0.5),
            dense_truth=BinaryMask(load(dense_rel).pixels > 0.5),
            pd_truth=float(pd_text),
            tag_box=tag_box,
        ))
    logger.debug(f"Read {len(samples)} samples from {manifest}")
    return samples
