import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from advtrack.metrics import (
    C1,
    PerturbDiagnostics,
    count_super_perturbed,
    diagnose,
    l1_norm,
    ssim,
)
from advtrack.attacks import PerturbationMap


def reference_ssim(a, b):
    return structural_similarity(a, b, channel_axis=-1 if a.ndim == 3 else None, gaussian_weights=True,
                                 sigma=1.5, use_sample_covariance=False, data_range=255)


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(0, 255, (20, 24, 3))
    assert ssim(x, x) == 1.0


@pytest.mark.parametrize("shape", [(32, 32), (40, 27, 3), (11, 11, 2)])
def test_ssim_matches_skimage(shape):
    r = np.random.default_rng(1)
    a = r.uniform(0, 255, shape)
    b = np.clip(a + r.normal(0, 30, shape), 0, 255)
    c = r.uniform(0, 255, shape)
    assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-9)
    assert ssim(a, c) == pytest.approx(reference_ssim(a, c), abs=1e-9)


def test_ssim_constant_images_closed_form():
    a = np.full((16, 16), 100.0)
    b = a + 10
    expected = (2 * 100 * 110 + C1) / (100**2 + 110**2 + C1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 13), elements=st.floats(0, 255)), arrays(np.float64, (12, 13), elements=st.floats(0, 255)))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-12
    assert -1 - 1e-12 <= s <= 1 + 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 255)), st.integers(0, 143), st.floats(1, 100))
def test_ssim_below_one_when_images_differ(a, idx, delta):
    b = a.copy()
    b.flat[idx] = b.flat[idx] + delta if b.flat[idx] < 128 else b.flat[idx] - delta
    assert ssim(a, b) < 1.0


def test_l1_examples():
    assert l1_norm(np.zeros((3, 3))) == 0.0
    assert l1_norm(np.full(7, -2.5)) == 17.5
    r = np.random.default_rng(2).normal(size=(4, 5, 3))
    assert l1_norm(PerturbationMap(r)) == pytest.approx(sum(abs(v) for v in r.ravel()), rel=1e-13)


@given(arrays(np.float64, 10, elements=st.floats(-1e3, 1e3)), st.floats(-100, 100))
def test_l1_absolutely_homogeneous(p, c):
    assert l1_norm(c * p) == pytest.approx(abs(c) * l1_norm(p), rel=1e-12, abs=1e-9)


def test_super_perturbed_counting():
    assert count_super_perturbed([PerturbDiagnostics(1.0, 0.0)] * 4) == 0
    assert count_super_perturbed([0.49, 0.51]) == 1
    assert count_super_perturbed([0.5]) == 0
    assert PerturbDiagnostics(0.3, 1.0).super_perturbed


def test_diagnose_pairs_ssim_and_l1():
    a = np.random.default_rng(3).uniform(0, 255, (16, 16, 3))
    b = a + 1.0
    d = diagnose(a, b)
    assert d.l1 == pytest.approx(a.size) and d.ssim == pytest.approx(ssim(a, b))
