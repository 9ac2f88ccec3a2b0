"""
Image pre-processing: metal-tag removal, resizing, min-max scaling and
the between-stage breast masking
"""

import logging
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import create_shape_mismatch_error, ValidationError
from .models import BinaryMask, Image

logger = logging.getLogger(__name__)

Extent = Union[int, Tuple[int, int]]

DEFAULT_TAG_THRESHOLD = 0.85

# 8-connectivity
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _as_extent(target: Extent) -> Tuple[int, int]:
    if isinstance(target, (int, np.integer)):
        height = width = int(target)
    else:
        height, width = (int(v) for v in target)
    if height <= 0 or width <= 0:
        raise ValidationError(f"Target extent must be positive, got {(height, width)}", field_name="target")
    return height, width


def remove_metal_tag(img: Image, intensity_threshold: float = DEFAULT_TAG_THRESHOLD) -> Image:
    """
    Suppress bright objects that are not the breast

    Pixels above ``intensity_threshold * max`` are grouped into 8-connected
    components. Every component except the largest is set to the image
    minimum; the largest one (the breast) is left untouched. Ties go to
    the component found first in raster order.

    Args:
        img: Raw, pre-normalisation image
        intensity_threshold: Fraction of the image maximum

    Returns:
        Image with the tag pixels replaced by background
    """
    pixels = img.pixels
    if pixels.size == 0:
        return img
    peak = float(pixels.max())
    suprathreshold = pixels > intensity_threshold * peak
    labels, count = ndimage.label(suprathreshold, structure=_EIGHT_CONNECTED)
    if count <= 1:
        return img

    sizes = np.bincount(labels.ravel())[1:]
    largest = int(np.argmax(sizes)) + 1
    removed = (labels > 0) & (labels != largest)
    cleaned = pixels.copy()
    cleaned[removed] = pixels.min()
    logger.debug(f"Removed {count - 1} bright component(s), {int(removed.sum())} px")
    return img.with_pixels(cleaned)


def resize(img: Image, target: Extent) -> Image:
    """
    Bilinear resize with aligned corners

    Output index i maps to source coordinate i * (in - 1) / (out - 1), so
    the four corner pixels are preserved and the output stays within the
    source's [min, max].
    """
    height, width = _as_extent(target)
    if (height, width) == img.pixels.shape:
        return img.with_pixels(img.pixels.copy())

    def axis(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1:
            return np.zeros(1)
        return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))

    rows, cols = np.meshgrid(axis(img.height, height), axis(img.width, width), indexing="ij")
    resized = ndimage.map_coordinates(img.pixels, [rows, cols], order=1, mode="nearest")
    return img.with_pixels(resized)


def minmax_normalize(img: Image) -> Image:
    """(p - min) / (max - min); a constant image becomes all zeros"""
    pixels = img.pixels
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi == lo:
        return img.with_pixels(np.zeros_like(pixels))
    return img.with_pixels((pixels - lo) / (hi - lo))


def apply_breast_mask(img: Image, mask: BinaryMask) -> Image:
    """
    Zero everything outside the breast and re-normalise inside it

    The min and max are taken over the masked region only, so a
    non-constant region spans exactly [0, 1]. An empty mask yields an
    all-zero image; callers flag that case instead of failing.
    """
    if mask.bits.shape != img.pixels.shape:
        raise create_shape_mismatch_error("mask dims", img.pixels.shape, mask.bits.shape)
    out = np.zeros_like(img.pixels)
    if mask.area == 0:
        return img.with_pixels(out)
    region = img.pixels[mask.bits]
    lo, hi = float(region.min()), float(region.max())
    if hi > lo:
        out[mask.bits] = (region - lo) / (hi - lo)
    return img.with_pixels(out)


def resample_mask(mask: BinaryMask, target: Extent) -> BinaryMask:
    """
    Nearest-neighbour resampling that keeps masks binary

    Output index i reads source index floor(i * in / out), which expands
    blocks exactly for integer upsampling factors and inverts them on the
    way back down.
    """
    height, width = _as_extent(target)
    if (height, width) == mask.bits.shape:
        return BinaryMask(mask.bits.copy())
    rows = (np.arange(height) * mask.height) // height
    cols = (np.arange(width) * mask.width) // width
    return BinaryMask(mask.bits[np.ix_(rows, cols)])


def preprocess_for_network(raw: Image, input_size: int,
                           tag_threshold: float = DEFAULT_TAG_THRESHOLD) -> Image:
    """
    Full network-input pipeline for a raw mammogram

    Tag removal, bilinear resize to ``input_size`` and min-max scaling.
    No contrast adjustment is applied. The returned image keeps the raw
    image's original_size for resampling predictions back.
    """
    cleaned = remove_metal_tag(raw, tag_threshold)
    return minmax_normalize(resize(cleaned, input_size))
