"""Opacity-mask extraction and morphological refinement.

The mask convention is True = under-observed, i.e. the region a generator
should fill. Structuring elements are full n x n squares. For even n the
anchor sits at index (n/2 - 1, n/2 - 1), the top-left of the two center
candidates, so a dilation of a single pixel by K20 extends 9 pixels up/left
and 10 down/right. Pixels outside the image read as the `pad` argument
(False by default) for dilation and erosion alike.

refine_mask default follows the closing + hole-fill + dilation recipe with
kernels (5, 20); `literal_complement=True` switches to the alternative that
complements the closed mask before dilating (no hole fill), which inverts
the generated region.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .scene import check_mask

DEFAULT_CLOSE_KERNEL = 5
DEFAULT_DILATE_KERNEL = 20
DEFAULT_ETA_MASK = 0.5


def opacity_mask(transmittance: np.ndarray, eta_mask: float = DEFAULT_ETA_MASK) -> np.ndarray:
    """Threshold the accumulated-weight map: True where coverage < eta_mask."""
    if not 0.0 < eta_mask < 1.0:
        raise ValueError(f"eta_mask must lie in (0, 1), got {eta_mask}")
    o = np.asarray(transmittance)
    if o.ndim != 2:
        raise ValueError(f"expected (H, W) transmittance map, got shape {o.shape}")
    return o < eta_mask


def _check_kernel(n: int) -> int:
    if int(n) != n or n < 1:
        raise ValueError(f"kernel size must be a positive integer, got {n}")
    return int(n)


def dilate(mask: np.ndarray, n: int, pad: bool = False) -> np.ndarray:
    mask = check_mask(mask)
    n = _check_kernel(n)
    return ndimage.maximum_filter(mask, size=n, mode="constant", cval=pad)


def erode(mask: np.ndarray, n: int, pad: bool = False) -> np.ndarray:
    mask = check_mask(mask)
    n = _check_kernel(n)
    if n % 2 == 0:
        # shift by one to land the anchor on the top-left center candidate
        padded = np.pad(mask, ((0, 1), (0, 1)), constant_values=pad)
        return ndimage.minimum_filter(padded, size=n, mode="constant", cval=pad)[1:, 1:]
    return ndimage.minimum_filter(mask, size=n, mode="constant", cval=pad)


def close(mask: np.ndarray, n: int, pad: bool = False) -> np.ndarray:
    """Morphological closing: dilation followed by erosion with the same kernel."""
    return erode(dilate(mask, n, pad), n, pad)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Set every False region that is not 4-connected to the border to True."""
    mask = check_mask(mask)
    structure = ndimage.generate_binary_structure(2, 1)
    return ndimage.binary_fill_holes(mask, structure=structure)


def refine_mask(
    mask: np.ndarray,
    k_close: int = DEFAULT_CLOSE_KERNEL,
    k_dilate: int = DEFAULT_DILATE_KERNEL,
    literal_complement: bool = False,
) -> np.ndarray:
    """Refine an opacity mask for generation: close, fill holes, then expand."""
    mask = check_mask(mask)
    closed = close(mask, k_close)
    if literal_complement:
        return dilate(~closed, k_dilate)
    return dilate(fill_holes(closed), k_dilate)
