import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mitoseg.datapipe import SynthConfig, render_case
from mitoseg.imaging import (
    REFERENCE_STAINS,
    DegenerateHistogram,
    InsufficientTissue,
    PseudoMaskParams,
    StainDegenerate,
    classical_pseudomask,
    disk,
    estimate_stain_matrix,
    gaussian_blur,
    gaussian_kernel1d,
    h_channel,
    morphological_open,
    od_to_rgb,
    otsu_threshold,
    remove_small_objects,
    rgb_to_od,
    stain_concentrations,
    stains_from_json,
    stains_to_json,
)
from oracles import angle_deg, nnls_grid, open_naive, otsu_bruteforce


def two_stain_od(rng, basis, n=4000, noise=0.01):
    c = rng.uniform(0.0, 1.5, size=(n, 2))
    od = c @ basis.T + rng.normal(0.0, noise, size=(n, 3))
    return np.clip(od, 0.0, None).reshape(40, n // 40, 3)


def random_basis(rng):
    while True:
        S = np.abs(REFERENCE_STAINS + rng.normal(0, 0.12, size=(3, 2)))
        S /= np.linalg.norm(S, axis=0)
        if S[2, 0] > S[2, 1] and angle_deg(S[:, 0], S[:, 1]) > 20:
            return S


# --------------------------------------------------------------------------- optical density

def test_od_white_is_zero():
    od = rgb_to_od(np.full((1, 1, 3), 255, dtype=np.uint8))
    assert np.array_equal(od, np.zeros((1, 1, 3)))
    assert not np.signbit(od).any()


def test_od_known_values():
    od = rgb_to_od(np.array([[[51, 0, 255]]], dtype=np.uint8))
    assert od[0, 0, 0] == pytest.approx(0.69897, abs=1e-5)
    assert od[0, 0, 1] == pytest.approx(math.log10(255), abs=1e-12)
    assert od[0, 0, 1] == pytest.approx(2.40654, abs=1e-5)


def test_od_rejects_non_rgb():
    with pytest.raises(ValueError):
        rgb_to_od(np.zeros((4, 4), dtype=np.uint8))


@given(arrays(np.uint8, (2, 3)))
def test_od_monotone(pix):
    lo = np.minimum(pix[0], pix[1])
    hi = np.maximum(pix[0], pix[1])
    od = rgb_to_od(np.stack([lo, hi])[None])
    assert np.all(od[0, 0] >= od[0, 1])
    assert np.all(np.isfinite(od)) and np.all(od >= 0)


def test_od_roundtrip():
    img = np.random.default_rng(0).integers(1, 256, size=(8, 8, 3)).astype(np.uint8)
    assert np.array_equal(od_to_rgb(rgb_to_od(img)), img)


# --------------------------------------------------------------------------- stain estimation

def test_stain_recovery_known_basis():
    rng = np.random.default_rng(1)
    S = random_basis(rng)
    est = estimate_stain_matrix(two_stain_od(rng, S))
    assert angle_deg(est[:, 0], S[:, 0]) < 2.0
    assert angle_deg(est[:, 1], S[:, 1]) < 2.0


def test_stain_matrix_invariants():
    rng = np.random.default_rng(2)
    est = estimate_stain_matrix(two_stain_od(rng, random_basis(rng)))
    assert est.shape == (3, 2)
    assert np.allclose(np.linalg.norm(est, axis=0), 1.0)
    assert np.all(est >= 0)
    assert angle_deg(est[:, 0], est[:, 1]) > 5
    assert est[2, 0] >= est[2, 1]  # H column has the larger blue component


def test_stain_single_stain_degenerate():
    rng = np.random.default_rng(3)
    c = rng.uniform(0.2, 1.5, size=(500, 1))
    od = (c * REFERENCE_STAINS[:, 0]).reshape(10, 50, 3)
    with pytest.raises(StainDegenerate):
        estimate_stain_matrix(od)


def test_stain_blank_insufficient():
    with pytest.raises(InsufficientTissue):
        estimate_stain_matrix(rgb_to_od(np.full((32, 32, 3), 255, dtype=np.uint8)))


def test_stain_permutation_invariant():
    rng = np.random.default_rng(4)
    od = two_stain_od(rng, random_basis(rng))
    flat = od.reshape(-1, 3)
    shuffled = flat[rng.permutation(len(flat))].reshape(od.shape)
    a, b = estimate_stain_matrix(od), estimate_stain_matrix(shuffled)
    for k in range(2):
        assert angle_deg(a[:, k], b[:, k]) < 2.0


def test_stains_json_roundtrip_column_major():
    text = stains_to_json(REFERENCE_STAINS)
    vals = json.loads(text)
    assert len(vals) == 6
    assert vals[:3] == pytest.approx(list(REFERENCE_STAINS[:, 0]))
    assert np.allclose(stains_from_json(text), REFERENCE_STAINS)
    with pytest.raises(ValueError):
        stains_from_json("[1, 2, 3]")


# --------------------------------------------------------------------------- H channel

def test_h_channel_pure_h_pixel():
    od = (1.3 * REFERENCE_STAINS[:, 0]).reshape(1, 1, 3)
    c = stain_concentrations(od, REFERENCE_STAINS)
    assert c[0, 0, 0] == pytest.approx(1.3, abs=1e-12)
    assert c[0, 0, 1] == pytest.approx(0.0, abs=1e-12)


def test_h_channel_zero_pixel():
    assert h_channel(np.zeros((2, 2, 3)), REFERENCE_STAINS).tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_nnls_matches_grid_search():
    rng = np.random.default_rng(5)
    for _ in range(25):
        # mix of interior mixtures and pixels that push one concentration negative
        od = rng.uniform(0, 1.2, size=3)
        c = stain_concentrations(od.reshape(1, 1, 3), REFERENCE_STAINS)[0, 0]
        assert np.all(c >= 0)
        _, grid_resid = nnls_grid(od, REFERENCE_STAINS)
        resid = np.linalg.norm(REFERENCE_STAINS @ c - od)
        assert resid <= grid_resid + 1e-9
        assert abs(resid - grid_resid) < 1e-3


# --------------------------------------------------------------------------- blur

@pytest.mark.parametrize("sigma", [0.0, 0.7, 2.0, 3.5])
def test_blur_constant_unchanged(sigma):
    img = np.full((20, 17), 3.25)
    assert np.allclose(gaussian_blur(img, sigma), img, atol=1e-12)


def test_blur_sigma_zero_identity():
    img = np.random.default_rng(0).random((9, 9))
    assert np.array_equal(gaussian_blur(img, 0.0), img)


def test_blur_impulse_equals_kernel():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = gaussian_blur(img, 1.0)
    x = np.arange(-3, 4)
    k1 = np.exp(-0.5 * x ** 2)
    k1 /= k1.sum()
    expected = np.zeros_like(img)
    expected[7:14, 7:14] = np.outer(k1, k1)
    assert np.max(np.abs(out - expected)) < 1e-6
    assert len(gaussian_kernel1d(1.0)) == 7


def test_blur_rgb_per_channel():
    rng = np.random.default_rng(1)
    img = rng.random((12, 12, 3))
    out = gaussian_blur(img, 1.2)
    for ch in range(3):
        assert np.allclose(out[..., ch], gaussian_blur(img[..., ch], 1.2))


def test_blur_negative_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((3, 3)), -1)


# --------------------------------------------------------------------------- Otsu

def test_otsu_bimodal():
    img = np.array([0.0] * 100 + [200.0] * 100).reshape(10, 20)
    t = otsu_threshold(img)
    assert 0 < t < 200
    assert np.array_equal(img > t, img == 200)


def test_otsu_constant_degenerate():
    with pytest.raises(DegenerateHistogram):
        otsu_threshold(np.full((5, 5), 7.0))


def test_otsu_random_bytes_vs_bruteforce():
    rng = np.random.default_rng(6)
    for _ in range(5):
        img = rng.integers(0, 256, size=1000).astype(np.float64)
        assert otsu_threshold(img) == otsu_bruteforce(img)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(5, 200), elements=st.floats(-50, 50, allow_nan=False, width=32)))
def test_otsu_property_vs_bruteforce(v):
    if v.max() - v.min() < 1e-6:
        return
    assert otsu_threshold(v) == otsu_bruteforce(v)


# --------------------------------------------------------------------------- morphology

def test_open_isolated_pixel_removed():
    m = np.zeros((9, 9), dtype=bool)
    m[4, 4] = True
    assert not morphological_open(m, 1).any()


def test_open_empty():
    assert not morphological_open(np.zeros((8, 8), dtype=bool), 3).any()


def test_open_disk_vs_naive():
    yy, xx = np.mgrid[0:64, 0:64]
    m = (yy - 31.5) ** 2 + (xx - 30.5) ** 2 <= 100
    assert np.array_equal(morphological_open(m, 3), open_naive(m, 3))


@settings(max_examples=15, deadline=None)
@given(arrays(np.bool_, (20, 20)), st.integers(0, 3))
def test_open_random_vs_naive_and_idempotent(m, r):
    once = morphological_open(m, r)
    assert np.array_equal(once, open_naive(m, r) if r else m)
    assert np.array_equal(morphological_open(once, r), once)


def test_disk_shape():
    d = disk(2)
    assert d.shape == (5, 5) and d.sum() == 13


def test_remove_small_objects():
    m = np.zeros((10, 10), dtype=bool)
    m[0:2, 0:2] = True  # area 4
    m[5:9, 5:9] = True  # area 16
    out = remove_small_objects(m, 5)
    assert not out[0:2, 0:2].any() and out[5:9, 5:9].all()


# --------------------------------------------------------------------------- pipeline

def test_pseudomask_iou_on_synthetic():
    region = render_case(SynthConfig(n_cases=1, seed=11), 0)
    res = classical_pseudomask(region.image)
    assert res.ok
    gt = region.mask > 0
    iou = np.logical_and(res.mask, gt).sum() / np.logical_or(res.mask, gt).sum()
    assert iou >= 0.7


def test_pseudomask_blank_warns():
    res = classical_pseudomask(np.full((64, 64, 3), 255, dtype=np.uint8))
    assert not res.mask.any() and res.warning is not None and not res.ok


def test_pseudomask_single_blob_never_full_frame():
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    img[:] = (70, 30, 120)
    res = classical_pseudomask(img)
    assert not res.mask.any() and res.warning


def test_pseudomask_deterministic():
    region = render_case(SynthConfig(n_cases=1, image_size=384, seed=5), 0)
    a = classical_pseudomask(region.image).mask
    b = classical_pseudomask(region.image.copy()).mask
    assert np.array_equal(a, b)


def test_params_validation():
    with pytest.raises(ValueError):
        PseudoMaskParams(alpha_percentile=50)
    with pytest.raises(ValueError):
        PseudoMaskParams(blur_sigma=-0.1)
    with pytest.raises(ValueError):
        PseudoMaskParams(open_radius=-1)
