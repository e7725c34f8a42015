import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import smooth_map
from tfce_grf.enhance import (TfceParams, cluster_mass, enhance_many, generalized_statistic,
                              tfce_exact, tfce_riemann)
from tfce_grf.errors import MissingAntiderivative, NonPositiveStep


def _iso(h, shape=(5, 5, 5)):
    z = np.zeros(shape)
    z[2, 2, 2] = h
    return z


def test_all_zero():
    assert not tfce_riemann(np.zeros((4, 4, 4))).any()
    assert not tfce_exact(np.zeros((4, 4, 4))).any()


def test_isolated_voxel_closed_form():
    assert tfce_exact(_iso(2.0))[2, 2, 2] == pytest.approx(8 / 3, rel=1e-14)
    r = tfce_riemann(_iso(2.0), params=TfceParams(dh=1e-4))[2, 2, 2]
    assert r == pytest.approx(8 / 3, rel=2e-4)


@pytest.mark.parametrize("k,h", [(8, 1.3), (27, 2.0), (12, 0.7)])
def test_plateau(k, h):
    z = np.zeros((3, 3, 4))
    z.ravel()[:k] = h
    s = tfce_exact(z)
    np.testing.assert_allclose(s.ravel()[:k], k ** 0.5 * h ** 3 / 3, rtol=1e-13)
    np.testing.assert_allclose(cluster_mass(z).ravel()[:k], k * h, rtol=1e-13)


def test_line_hand_value(line):
    expected = (124 + math.sqrt(5)) / 3
    assert tfce_exact(line)[0, 0, 0] == pytest.approx(expected, rel=1e-14)
    assert tfce_riemann(line, params=TfceParams(dh=1e-4))[0, 0, 0] == pytest.approx(expected, rel=1e-3)


def test_ccl_and_tree_riemann_agree(rng):
    z = smooth_map(rng, (10, 10, 10))
    p = TfceParams(dh=0.05)
    np.testing.assert_allclose(tfce_riemann(z, params=p, method="tree"),
                               tfce_riemann(z, params=p, method="ccl"), rtol=1e-12)


def test_cluster_mass_isolated():
    assert cluster_mass(_iso(1.75))[2, 2, 2] == pytest.approx(1.75)


def test_generalized_matches_tfce(rng):
    z = smooth_map(rng, (8, 8, 8))
    f = lambda h: h ** 2  # noqa: E731
    f.antiderivative = lambda h: h ** 3 / 3
    np.testing.assert_allclose(generalized_statistic(z, None, lambda x: x ** 0.5, f), tfce_exact(z),
                               rtol=1e-13)
    with pytest.raises(MissingAntiderivative):
        generalized_statistic(z, None, lambda x: x, lambda h: h)


def test_params_validation():
    with pytest.raises(NonPositiveStep):
        TfceParams(dh=0.0)
    with pytest.raises(ValueError):
        TfceParams(E=-1.0)


def test_bug_mode_ratio(rng):
    z = smooth_map(rng, (10, 10, 10))
    for dh in (0.1, 0.05, 1e-3):
        good = tfce_riemann(z, params=TfceParams(dh=dh))
        bug = tfce_riemann(z, params=TfceParams(dh=dh, fsl_bug_compat=True))
        # the compat score omits the step factor and nothing else
        np.testing.assert_array_equal(bug * dh, good)
        sel = good > 0
        np.testing.assert_allclose(good[sel] / bug[sel], dh, rtol=4e-16)


def test_first_order_convergence(rng):
    z = np.abs(smooth_map(rng, (16, 16, 16))) + 0.1
    exact = tfce_exact(z)
    errs = [np.abs(tfce_riemann(z, params=TfceParams(dh=dh)) - exact).max()
            for dh in (0.02, 0.01, 0.005)]
    for a, b in zip(errs, errs[1:]):
        assert 1.6 <= a / b <= 2.4


def test_h0_clips(rng):
    z = smooth_map(rng, (8, 8, 8))
    s = tfce_exact(z, params=TfceParams(h0=1.0))
    assert (s[z <= 1.0] == 0).all()
    full = tfce_exact(z)
    assert (s <= full + 1e-12).all()


def test_enhance_many_single_pass(rng):
    z = smooth_map(rng, (9, 9, 9))
    out = enhance_many(z)
    np.testing.assert_allclose(out["tfce"], tfce_exact(z), rtol=1e-14)
    np.testing.assert_allclose(out["cluster_mass"], cluster_mass(z), rtol=1e-14)


def test_mask_respected(rng):
    z = smooth_map(rng, (6, 6, 6))
    mask = np.ones(z.shape, bool)
    mask[:, :, 3] = False
    s = tfce_exact(z, mask)
    assert (s[~mask] == 0).all()
    np.testing.assert_allclose(s[:, :, :3], tfce_exact(z[:, :, :3])[:, :, :3], rtol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 2.0))
def test_monotone_dominance(seed, bump):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, 5, 5))
    v = tuple(rng.integers(0, 5, 3))
    z2 = z.copy()
    z2[v] += bump
    assert (tfce_exact(z2) >= tfce_exact(z) - 1e-12).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_exact_matches_fine_riemann(seed):
    z = np.random.default_rng(seed).standard_normal((6, 6, 6))
    exact = tfce_exact(z)
    fine = tfce_riemann(z, params=TfceParams(dh=1e-4))
    assert np.abs(exact - fine).max() <= 2e-3 * exact.max()
