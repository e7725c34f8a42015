import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from tfce_grf import sim
from tfce_grf.errors import DataError
from tfce_grf.sim import (Ellipsoid, PhantomSpec, dice, gaussian_kernel, gaussian_smooth,
                          generate_phantom, one_sample_t_to_z, pearson_r, t_to_z, wilson_interval)
from tfce_grf.volio import Volume3D


def test_kernel_and_impulse():
    w = gaussian_kernel(1.5)
    assert w.sum() == pytest.approx(1.0, rel=1e-15)
    imp = np.zeros((21, 21, 21))
    imp[10, 10, 10] = 1.0
    out = gaussian_smooth(Volume3D(imp), 1.5)
    assert isinstance(out, Volume3D)
    assert out.data.sum() == pytest.approx(1.0, rel=1e-12)
    assert out.data[10, 10, 10] == pytest.approx(w[len(w) // 2] ** 3, rel=1e-12)
    np.testing.assert_allclose(out.data[10, 10, 10 - 6:10 + 7], w * w[len(w) // 2] ** 2, rtol=1e-12)


def test_constant_interior_unchanged():
    out = gaussian_smooth(np.full((30, 30, 30), 2.5), 1.5)
    np.testing.assert_allclose(out[10:20, 10:20, 10:20], 2.5, rtol=1e-14)


def test_noise_variance_reduction(rng):
    w = gaussian_kernel(1.5)
    x = gaussian_smooth(rng.standard_normal((80, 80, 80)), 1.5)
    inner = x[8:-8, 8:-8, 8:-8]
    assert inner.var() == pytest.approx(np.sum(w ** 2) ** 3, rel=0.02)


def test_ellipsoid_lattice_count():
    e = Ellipsoid((20.0, 20.0, 20.0), (6.0, 5.0, 4.0), 1.0)
    count = sum(1 for x in range(-6, 7) for y in range(-5, 6) for z in range(-4, 5)
                if x * x / 36 + y * y / 25 + z * z / 16 <= 1)
    assert e.voxels((40, 40, 40)).sum() == count


def test_reference_layout():
    spec = PhantomSpec()
    assert spec.mask().sum() == 91125
    truth = spec.truth()
    assert truth.sum() == 1559
    assert (truth <= spec.mask()).all()
    # bounding boxes at least 6 voxels apart and from the mask edge
    inc = np.argwhere(spec.mask())
    lo, hi = inc.min(0), inc.max(0)
    boxes = []
    for e in spec.ellipsoid_list():
        v = np.argwhere(e.voxels(spec.dims))
        boxes.append((v.min(0), v.max(0)))
        assert (v.min(0) - lo >= 6).all() and (hi - v.max(0) >= 6).all()
    for i in range(3):
        for j in range(i + 1, 3):
            gap = np.maximum(boxes[j][0] - boxes[i][1], boxes[i][0] - boxes[j][1])
            assert gap.max() >= 6


def test_overlap_rejected():
    with pytest.raises(DataError):
        PhantomSpec(dims=(20, 20, 20), ellipsoids=[((10, 10, 10), (3, 3, 3)), ((12, 10, 10), (3, 3, 3))])


def test_phantom_determinism_and_signal():
    spec = PhantomSpec(dims=(16, 16, 16), n_subjects=6, amplitude=1.0, seed=3)
    a, truth = generate_phantom(spec)
    b, _ = generate_phantom(spec)
    assert a.data.tobytes() == b.data.tobytes()
    null, _ = generate_phantom(PhantomSpec(dims=(16, 16, 16), n_subjects=6, amplitude=0.0, seed=3))
    diff = a.data - null.data
    # the signal is added after smoothing: a sharp step of the amplitude
    np.testing.assert_allclose(diff[:, truth.included], 1.0, rtol=1e-12)
    assert (diff[:, ~truth.included] == 0).all()
    other, _ = generate_phantom(PhantomSpec(dims=(16, 16, 16), n_subjects=6, amplitude=1.0, seed=4))
    assert not np.array_equal(other.data, a.data)


def test_null_grand_mean():
    stack, _ = generate_phantom(PhantomSpec(dims=(24, 24, 24), n_subjects=40, amplitude=0.0))
    sd = stack.data.std()
    gm = stack.data.mean(axis=0)
    assert abs(gm.mean()) < 4 * sd / math.sqrt(40)
    assert gm.std() == pytest.approx(sd / math.sqrt(40), rel=0.1)


def test_t_to_z():
    df, t = 79, 2.0
    cdf = 1.0 - 0.5 * special.betainc(df / 2, 0.5, df / (df + t * t))
    assert t_to_z(t, df) == pytest.approx(stats.norm.ppf(cdf), rel=1e-10)
    assert t_to_z(t, df) == pytest.approx(1.969, abs=1e-3)
    assert t_to_z(0.0, 5) == 0.0
    assert t_to_z(-2.0, 79) == -t_to_z(2.0, 79)
    assert t_to_z(1e200, 79) == 38.0 and t_to_z(-1e200, 79) == -38.0


def test_one_sample_edge_cases():
    X = np.zeros((5, 3, 3, 3))
    X[:, 0, 0, 0] = 1.0
    z = one_sample_t_to_z(X).data
    assert z[0, 0, 0] == 38.0 and z[1, 1, 1] == 0.0
    X[:, 0, 0, 0] = -1.0
    assert one_sample_t_to_z(X).data[0, 0, 0] == -38.0


def test_one_sample_matches_scipy(rng):
    X = rng.standard_normal((12, 4, 4, 4)) + 0.4
    t = stats.ttest_1samp(X, 0.0, axis=0).statistic
    z = stats.norm.isf(stats.t.sf(t, 11))
    np.testing.assert_allclose(one_sample_t_to_z(X).data, z, rtol=1e-9)


def test_dice():
    a = np.zeros(200, bool)
    b = np.zeros(200, bool)
    a[:100] = True
    b[:50] = True
    assert dice(a, b) == pytest.approx(2 / 3)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    assert dice(a, np.zeros(200, bool)) == 0.0


def test_pearson(rng):
    x = rng.standard_normal((5, 5, 5))
    assert pearson_r(x, x) == pytest.approx(1.0)
    assert pearson_r(x, -x) == pytest.approx(-1.0)
    assert pearson_r(x, 2 * x + 3) == pytest.approx(1.0)
    y = rng.standard_normal((5, 5, 5))
    assert pearson_r(x, y) == pytest.approx(stats.pearsonr(x.ravel(), y.ravel())[0], rel=1e-12)
    with pytest.raises(DataError):
        pearson_r(x, np.ones_like(x))


def test_wilson():
    lo, hi = wilson_interval(0, 200)
    assert lo == 0.0 and hi == pytest.approx(0.0188, abs=5e-5)
    assert wilson_interval(200, 200)[1] == 1.0
    n = 10_000
    z = stats.norm.isf(0.025)
    lo, hi = wilson_interval(n // 2, n)
    centre = (0.5 + z * z / (2 * n)) / (1 + z * z / n)
    half = z * math.sqrt(0.25 / n + z * z / (4 * n * n)) / (1 + z * z / n)
    assert (lo, hi) == pytest.approx((centre - half, centre + half), rel=1e-12)
    assert hi - lo == pytest.approx(2 * z / (2 * math.sqrt(n)), rel=1e-3)


@settings(max_examples=60)
@given(st.integers(1, 500), st.data())
def test_wilson_contains_estimate(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson_interval(k, n)
    assert 0 <= lo <= k / n <= hi <= 1
    # swapping successes and failures mirrors the interval
    lo2, hi2 = wilson_interval(n - k, n)
    assert (lo, hi) == pytest.approx((1 - hi2, 1 - lo2), abs=1e-12)
