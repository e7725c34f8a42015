"""Synthetic phantoms, one-sample t to Z conversion and validation metrics.

A phantom realisation is ``M`` subjects of unit Gaussian noise smoothed by a
truncated Gaussian kernel, with a constant amplitude added inside three
ellipsoids.  Noise for subject ``m`` is drawn from PCG64 seeded by
``SeedSequence([seed, m])``, so a subject's noise does not depend on how
many other subjects are drawn or in what order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, special

from ._validation import check_mask, check_scalar, check_stack
from .errors import ConstantInput, DataError
from .volio import Mask3D, SubjectStack, Volume3D

Z_CLAMP = 38.0
REFERENCE_DIMS = (64, 64, 64)
MASK_SIDE_FRACTION = 45.0 / 64.0
# (center, semi-axes) at the 64^3 reference size, in voxels
DEFAULT_ELLIPSOIDS = (
    ((21.0, 21.0, 31.0), (6.0, 5.0, 4.0)),
    ((41.0, 22.0, 31.0), (5.0, 6.0, 4.0)),
    ((31.0, 42.0, 31.0), (7.0, 4.0, 5.0)),
)
AMPLITUDE_LADDER = (0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.07, 0.1, 0.2, 0.5)
GENERATOR = "numpy.random.PCG64"


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    amplitude: float

    def voxels(self, dims) -> np.ndarray:
        """Lattice points with ``sum(((x - c) / r)^2) <= 1``."""
        grids = np.ogrid[tuple(slice(0, d) for d in dims)]
        q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.semi_axes))
        return q <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, noise and signal settings of a phantom realisation.

    With ``ellipsoids=None`` the three default ellipsoids are scaled from
    the 64^3 layout to ``dims`` and all carry ``amplitude``.  The mask is a
    centred box with side ``round(dim * 45/64)`` (91,125 voxels at 64^3).
    """

    dims: tuple[int, int, int] = REFERENCE_DIMS
    n_subjects: int = 80
    noise_sigma: float = 1.5
    amplitude: float = 0.5
    ellipsoids: tuple | None = None
    seed: int = 0
    smooth_signal: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in np.broadcast_to(np.asarray(self.dims), (3,)))
        object.__setattr__(self, "dims", dims)
        if min(dims) < 4:
            raise DataError(f"phantom dims must be >= 4, got {dims}")
        check_scalar(self.n_subjects, "n_subjects", lo=2, integer=True)
        check_scalar(self.noise_sigma, "noise_sigma", lo=0, lo_open=True)
        check_scalar(self.amplitude, "amplitude")
        ells = self.ellipsoid_list()
        masks = [e.voxels(dims) for e in ells]
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                if np.any(masks[i] & masks[j]):
                    raise DataError(f"ellipsoids {i} and {j} overlap")

    def ellipsoid_list(self) -> list[Ellipsoid]:
        if self.ellipsoids is not None:
            out = []
            for e in self.ellipsoids:
                if isinstance(e, Ellipsoid):
                    out.append(e)
                else:
                    c, r, *a = e
                    out.append(Ellipsoid(tuple(map(float, c)), tuple(map(float, r)),
                                         float(a[0]) if a else float(self.amplitude)))
            return out
        scale = np.asarray(self.dims, float) / np.asarray(REFERENCE_DIMS, float)
        return [Ellipsoid(tuple((np.asarray(c) * scale).tolist()),
                          tuple(np.maximum(np.asarray(r) * scale, 2.0).tolist()),
                          float(self.amplitude))
                for c, r in DEFAULT_ELLIPSOIDS]

    def mask(self) -> np.ndarray:
        inc = np.zeros(self.dims, bool)
        sl = []
        for d in self.dims:
            side = max(1, int(round(d * MASK_SIDE_FRACTION)))
            lo = (d - side) // 2
            sl.append(slice(lo, lo + side))
        inc[tuple(sl)] = True
        return inc

    def truth(self) -> np.ndarray:
        out = np.zeros(self.dims, bool)
        for e in self.ellipsoid_list():
            out |= e.voxels(self.dims)
        return out

    def signal(self) -> np.ndarray:
        out = np.zeros(self.dims)
        for e in self.ellipsoid_list():
            out[e.voxels(self.dims)] += e.amplitude
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ellipsoids"] = [asdict(e) for e in self.ellipsoid_list()]
        d["mask_rule"] = f"centred box, side round(dim*45/64), {int(self.mask().sum())} voxels"
        d["signal_added"] = "before smoothing" if self.smooth_signal else "after smoothing"
        d["generator"] = GENERATOR
        return d


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum discrete Gaussian truncated at radius ``ceil(4 sigma)``."""
    check_scalar(sigma, "sigma", lo=0, lo_open=True)
    r = math.ceil(4.0 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth(vol, sigma: float):
    """Separable Gaussian smoothing with zero padding; returns the input's type."""
    w = gaussian_kernel(sigma)
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float64)
    out = data
    for axis in range(out.ndim - 3, out.ndim):
        out = ndimage.correlate1d(out, w, axis=axis, mode="constant", cval=0.0)
    if isinstance(vol, Volume3D):
        return Volume3D(out, vol.voxel_size_mm)
    return out


def subject_rng(seed: int, subject: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(subject)])))


def subject_volume(spec: PhantomSpec, subject: int) -> np.ndarray:
    noise = subject_rng(spec.seed, subject).standard_normal(spec.dims)
    if spec.smooth_signal:
        return gaussian_smooth(noise + spec.signal(), spec.noise_sigma)
    return gaussian_smooth(noise, spec.noise_sigma) + spec.signal()


def generate_phantom(spec: PhantomSpec) -> tuple[SubjectStack, Mask3D]:
    """Subject stack and the truth mask (union of ellipsoids)."""
    data = np.empty((spec.n_subjects,) + spec.dims)
    for m in range(spec.n_subjects):
        data[m] = subject_volume(spec, m)
    return SubjectStack(data), Mask3D(spec.truth())


# ---------------------------------------------------------------------------
# statistics

def t_to_z(t, df):
    """Z with the same Student-t tail probability, ``|Z| <= 38``."""
    t = np.asarray(t, dtype=np.float64)
    p = special.stdtr(df, -np.abs(t))
    with np.errstate(divide="ignore"):
        z = -special.ndtri(p)
    z = np.where(p <= 0, Z_CLAMP, np.minimum(z, Z_CLAMP))
    z = np.where(t == 0, 0.0, z)
    return np.copysign(z, t) * (t != 0)


def moments_to_z(mean, sd, n_subjects):
    """One-sample Z from per-voxel mean and unbiased SD."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = mean / (sd / math.sqrt(n_subjects))
    z = t_to_z(np.where(sd > 0, t, 0.0), n_subjects - 1)
    return np.where(sd > 0, z, np.sign(mean) * Z_CLAMP)


def one_sample_t_to_z(stack, mask=None) -> Volume3D:
    """Voxel-wise one-sample t converted to Z; 0 outside the mask."""
    data = check_stack(stack)
    inc = check_mask(mask, data.shape[1:])
    M = data.shape[0]
    mean = data.mean(axis=0)
    sd = data.std(axis=0, ddof=1)
    z = moments_to_z(mean, sd, M)
    z[~inc] = 0.0
    vs = stack.voxel_size_mm if isinstance(stack, SubjectStack) else (1.0, 1.0, 1.0)
    return Volume3D(z, vs)


# ---------------------------------------------------------------------------
# metrics

def _bool(a):
    return a.included if isinstance(a, Mask3D) else np.asarray(a, dtype=bool)


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty sets score 1."""
    a, b = _bool(a), _bool(b)
    if a.shape != b.shape:
        raise DataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


def pearson_r(x, y, mask=None) -> float:
    x = x.data if isinstance(x, Volume3D) else np.asarray(x, dtype=np.float64)
    y = y.data if isinstance(y, Volume3D) else np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"map shapes differ: {x.shape} vs {y.shape}")
    inc = np.ones(x.shape, bool) if mask is None else _bool(mask)
    a, b = x[inc], y[inc]
    if a.size < 2:
        raise DataError("need at least two in-mask voxels")
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = math.sqrt(np.dot(a, a)), math.sqrt(np.dot(b, b))
    if sa == 0 or sb == 0:
        raise ConstantInput("correlation is undefined for a constant map")
    return float(np.clip(np.dot(a, b) / (sa * sb), -1.0, 1.0))


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    check_scalar(n, "n", lo=1, integer=True)
    check_scalar(k, "k", lo=0, hi=n, integer=True)
    check_scalar(confidence, "confidence", lo=0, hi=1, lo_open=True, hi_open=True)
    z = float(special.ndtri(1.0 - (1.0 - confidence) / 2.0))
    p = k / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo, hi = centre - half, centre + half
    if k == 0:
        lo = 0.0
    if k == n:
        hi = 1.0
    return max(0.0, lo), min(1.0, hi)


def run_experiment(config):
    """Run one of the Monte Carlo protocols; see :mod:`tfce_grf.experiments`."""
    from .experiments import run_experiment as _run
    return _run(config)


__all__ = ["Ellipsoid", "PhantomSpec", "gaussian_kernel", "gaussian_smooth", "generate_phantom",
           "subject_rng", "t_to_z", "moments_to_z", "one_sample_t_to_z", "dice", "pearson_r",
           "wilson_interval", "run_experiment", "AMPLITUDE_LADDER"]
