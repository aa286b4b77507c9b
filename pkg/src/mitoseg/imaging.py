"""Optical density, Macenko stain estimation and the classical nuclei pseudo-mask.

Images are ``uint8`` arrays of shape ``(H, W, 3)``. OD images are ``float64``
arrays of the same shape. Stain matrices are ``(3, 2)`` arrays whose first
column is hematoxylin and second column is eosin.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

# Reference H&E basis, used when an image is too bland to estimate its own.
REFERENCE_STAINS = np.array(
    [[0.650, 0.072],
     [0.704, 0.990],
     [0.286, 0.105]]
)
REFERENCE_STAINS = REFERENCE_STAINS / np.linalg.norm(REFERENCE_STAINS, axis=0)

MIN_TISSUE_PIXELS = 100
MIN_STAIN_ANGLE_DEG = 5.0


class InsufficientTissue(ValueError):
    """Fewer than ``MIN_TISSUE_PIXELS`` pixels exceed the OD threshold."""


class StainDegenerate(ValueError):
    """The tissue OD cloud does not span a plane."""


class DegenerateHistogram(ValueError):
    """All pixels fall into a single histogram bin."""


@dataclass(frozen=True)
class PseudoMaskParams:
    blur_sigma: float = 2.0
    open_radius: int = 2
    od_beta: float = 0.15
    alpha_percentile: float = 1.0
    min_object_area: int = 20
    tile_size: int = 512

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.open_radius < 0:
            raise ValueError("open_radius must be >= 0")
        if not 0 < self.alpha_percentile < 50:
            raise ValueError("alpha_percentile must lie in (0, 50)")


@dataclass
class PseudoMaskResult:
    mask: np.ndarray
    warning: str | None = None
    threshold: float | None = None
    stains: np.ndarray | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.warning is None


def rgb_to_od(image: np.ndarray) -> np.ndarray:
    """``-log10(max(I, 1) / 255)`` per channel."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    clamped = np.maximum(img.astype(np.float64), 1.0)
    od = -np.log10(clamped / 255.0)
    # -log10(1) is -0.0; keep the invariant od >= 0 bit-clean
    return np.maximum(od, 0.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    rgb = 255.0 * np.power(10.0, -np.asarray(od, dtype=np.float64))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _unit_nonneg(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    n = np.linalg.norm(v)
    if n == 0:
        raise StainDegenerate("stain direction collapsed to zero after clipping")
    return v / n


def estimate_stain_matrix(od: np.ndarray, params: PseudoMaskParams | None = None) -> np.ndarray:
    """Macenko estimate of the two-stain basis of an OD image.

    Tissue pixels (``||od|| > od_beta``) are projected onto the plane of the
    two leading right singular vectors; the ``alpha`` and ``100 - alpha``
    percentile angles in that plane give the stain directions.
    """
    params = params or PseudoMaskParams()
    pix = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    tissue = pix[np.linalg.norm(pix, axis=1) > params.od_beta]
    if len(tissue) < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(
            f"{len(tissue)} tissue pixels above OD {params.od_beta}, need {MIN_TISSUE_PIXELS}"
        )

    _, s, vt = np.linalg.svd(tissue, full_matrices=False)
    if s[1] < 1e-6 * s[0]:
        raise StainDegenerate(f"second singular value {s[1]:.3g} vs first {s[0]:.3g}")

    plane = vt[:2].T.copy()
    # orient both axes into the positive octant so angles are comparable
    for k in range(2):
        if plane[:, k].sum() < 0:
            plane[:, k] *= -1
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [params.alpha_percentile, 100 - params.alpha_percentile])

    v_lo = _unit_nonneg(plane @ np.array([math.cos(lo), math.sin(lo)]))
    v_hi = _unit_nonneg(plane @ np.array([math.cos(hi), math.sin(hi)]))

    angle = math.degrees(math.acos(float(np.clip(v_lo @ v_hi, -1.0, 1.0))))
    if angle <= MIN_STAIN_ANGLE_DEG:
        raise StainDegenerate(f"stain directions only {angle:.2f} deg apart")

    # hematoxylin is the column with the larger blue OD component
    if v_lo[2] >= v_hi[2]:
        return np.stack([v_lo, v_hi], axis=1)
    return np.stack([v_hi, v_lo], axis=1)


def stain_concentrations(od: np.ndarray, stains: np.ndarray) -> np.ndarray:
    """Per-pixel non-negative least squares for a two-column basis.

    Returns an array of shape ``od.shape[:-1] + (2,)``.
    """
    od = np.asarray(od, dtype=np.float64)
    flat = od.reshape(-1, 3)
    S = np.asarray(stains, dtype=np.float64)

    # unconstrained solution, then the two single-stain boundary faces
    c = flat @ np.linalg.pinv(S).T
    norms = np.sum(S * S, axis=0)
    c_h = np.clip(flat @ S[:, 0] / norms[0], 0.0, None)
    c_e = np.clip(flat @ S[:, 1] / norms[1], 0.0, None)

    cands = np.stack(
        [
            c,
            np.stack([c_h, np.zeros_like(c_h)], axis=1),
            np.stack([np.zeros_like(c_e), c_e], axis=1),
            np.zeros_like(c),
        ],
        axis=0,
    )
    feasible = np.all(cands >= 0, axis=2)
    resid = np.linalg.norm(cands @ S.T - flat[None], axis=2)
    resid = np.where(feasible, resid, np.inf)
    best = np.argmin(resid, axis=0)
    out = cands[best, np.arange(len(flat))]
    return out.reshape(od.shape[:-1] + (2,))


def h_channel(od: np.ndarray, stains: np.ndarray) -> np.ndarray:
    return stain_concentrations(od, stains)[..., 0]


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.ones(1)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at ``ceil(3 sigma)``, reflected edges.

    Channels (a trailing third axis) are blurred independently.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return out.copy()
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(out, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return out


def otsu_candidates(img: np.ndarray) -> np.ndarray:
    """Centres of 256 equal-width bins spanning ``[min, max]``."""
    lo, hi = float(np.min(img)), float(np.max(img))
    if not hi - lo > 1e-12 * max(1.0, abs(hi), abs(lo)):
        raise DegenerateHistogram("image has a single intensity level")
    width = (hi - lo) / 256
    return lo + width * (np.arange(256) + 0.5)


def between_class_variance(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Otsu objective for each threshold; class 0 is ``value <= t``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    csum = np.concatenate([[0.0], np.cumsum(v)])
    n0 = np.searchsorted(v, thresholds, side="right")
    n1 = n - n0
    s0 = csum[n0]
    s1 = csum[-1] - s0
    with np.errstate(invalid="ignore", divide="ignore"):
        m0 = s0 / n0
        m1 = s1 / n1
        var = n0 * n1 * (m0 - m1) ** 2 / float(n) ** 2
    return np.where((n0 > 0) & (n1 > 0), var, 0.0)


def otsu_threshold(img: np.ndarray) -> float:
    """Threshold among the 256 bin centres maximising between-class variance.

    Foreground is ``img > threshold``. Ties (within 1e-9 relative) go to the
    lowest threshold.
    """
    cands = otsu_candidates(img)
    var = between_class_variance(img, cands)
    best = var.max()
    if best <= 0:
        raise DegenerateHistogram("no threshold separates the histogram")
    k = int(np.flatnonzero(var >= best * (1 - 1e-9))[0])
    return float(cands[k])


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def morphological_open(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erode then dilate with a disk.

    Erosion treats pixels outside the image as foreground so objects touching
    the border are not eaten; dilation treats them as background.
    """
    m = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or not m.any():
        return m.copy()
    se = disk(radius)
    eroded = ndimage.binary_erosion(m, structure=se, border_value=1)
    return ndimage.binary_dilation(eroded, structure=se, border_value=0)


def remove_small_objects(mask: np.ndarray, min_area: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if min_area <= 1 or not m.any():
        return m.copy()
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def _tile_slices(h: int, w: int, size: int):
    for y in range(0, h, size):
        for x in range(0, w, size):
            yield slice(y, min(y + size, h)), slice(x, min(x + size, w))


def classical_pseudomask(image: np.ndarray, params: PseudoMaskParams | None = None) -> PseudoMaskResult:
    """H channel -> blur -> per-tile Otsu -> opening -> small-object removal.

    Failures never produce a full-frame mask: an empty mask with a warning is
    returned instead.
    """
    params = params or PseudoMaskParams()
    img = np.asarray(image)
    empty = np.zeros(img.shape[:2], dtype=bool)
    od = rgb_to_od(img)
    try:
        stains = estimate_stain_matrix(od, params)
    except (InsufficientTissue, StainDegenerate) as exc:
        logger.warning("pseudo-mask skipped: %s", exc)
        return PseudoMaskResult(empty, warning=f"{type(exc).__name__}: {exc}")

    h = gaussian_blur(h_channel(od, stains), params.blur_sigma)
    fg = np.zeros_like(empty)
    thresholds = []
    for sy, sx in _tile_slices(*h.shape, params.tile_size):
        tile = h[sy, sx]
        try:
            t = otsu_threshold(tile)
        except DegenerateHistogram as exc:
            logger.warning("pseudo-mask skipped: %s", exc)
            return PseudoMaskResult(empty, warning=f"DegenerateHistogram: {exc}", stains=stains)
        thresholds.append(t)
        fg[sy, sx] = tile > t

    fg = morphological_open(fg, params.open_radius)
    fg = remove_small_objects(fg, params.min_object_area)
    return PseudoMaskResult(fg, threshold=float(np.mean(thresholds)), stains=stains)


def stains_to_json(stains: np.ndarray) -> str:
    """Six numbers, column-major (H column first)."""
    return json.dumps([float(v) for v in np.asarray(stains).T.ravel()])


def stains_from_json(text: str) -> np.ndarray:
    vals = np.asarray(json.loads(text), dtype=np.float64)
    if vals.shape != (6,):
        raise ValueError("stain matrix JSON must hold exactly 6 numbers")
    return vals.reshape(2, 3).T.copy()
