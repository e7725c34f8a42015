"""Analytical enhancement: accumulate GRF cluster evidence over a threshold grid.

For every in-mask voxel ``v`` and grid level ``tau_i <= Z_v`` the evidence
``-log P(Z_v >= tau_i | c_v(tau_i))`` is summed into ``A(v)`` and mapped to a
single-test scale by ``S(v) = Q(A(v), delta)``.  The baseline pipeline gets
``c_v(tau_i)`` by connected-component labelling at each level; the hybrid
pipeline reads it from one merge tree.  Both share the same table lookup and
summation order, so at matched grids they agree to the last bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import grf
from ._validation import check_scalar, check_volume_and_mask
from .cluster import _size_at, build_merge_tree, ccl_cluster_sizes
from .errors import DataError, NonPositiveMap
from .grf import GrfParams, _neglogp, _neglogp_many

Z_ENH_MIN = -8.2
Z_ENH_MAX = 38.0
S_MAX = -math.log(1e-308)


@dataclass(frozen=True, eq=False)
class EnhancedMap:
    """Enhanced evidence ``S``, its p-value ``exp(-S)`` and Z equivalent.

    ``sign`` is +1/-1 for the tail each voxel was taken from in a two-sided
    run (ties go to the sign of the voxel's Z, 0 when Z is 0) and ``None``
    otherwise.
    Outside the mask ``S = 0``, ``p_enh = 1`` and ``z_enh = 0``.
    """

    S: np.ndarray
    p_enh: np.ndarray
    z_enh: np.ndarray
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)
    sign: np.ndarray | None = None

    @property
    def n_mask(self) -> int:
        return int(self.mask.sum())

    @property
    def signed_z(self) -> np.ndarray:
        """``z_enh`` with the tail sign restored (two-sided runs only)."""
        if self.sign is None:
            return self.z_enh
        return np.where(self.sign < 0, -self.z_enh, self.z_enh)

    def significant(self, alpha: float = 0.05) -> np.ndarray:
        """Voxels with ``p_enh < alpha / n_mask`` (Bonferroni over the mask)."""
        return self.mask & (self.p_enh < alpha / self.n_mask)


def _finish(A, inc, delta, provenance, sign=None) -> EnhancedMap:
    S = np.minimum(grf.q_function(A, delta), S_MAX)
    S[~inc] = 0.0
    return _from_S(S, inc, provenance, sign)


def _from_S(S, inc, provenance, sign=None) -> EnhancedMap:
    p = np.exp(-S)
    z = np.clip(grf.norm_isf_log(-S), Z_ENH_MIN, Z_ENH_MAX)
    z[~inc] = 0.0
    for a in (S, p, z):
        a.setflags(write=False)
    return EnhancedMap(S, p, z, inc, provenance, sign)


def _prepare(zmap, mask, params, n_levels, table, cache_dir):
    arr, inc = check_volume_and_mask(zmap, mask)
    check_scalar(n_levels, "n_levels", lo=1, integer=True)
    if not isinstance(params, GrfParams):
        raise DataError("params must be a GrfParams instance")
    z_max = float(arr[inc].max())
    if not z_max > 0:
        raise NonPositiveMap("map has no positive values inside the mask")
    grid = grf.make_threshold_grid(z_max, n_levels)
    if table is None:
        # pipelines only read grid rows, so the off-grid lattice is skipped
        table = grf.build_exceedance_table(params, grid, cache_dir=cache_dir, tau_step=0.0)
    elif table.n_levels != grid.n_levels or not np.array_equal(table.taus[table.level_rows], grid.taus):
        raise DataError("the supplied exceedance table was built for a different threshold grid")
    h_lo = table.support[0]
    first = int(np.searchsorted(grid.taus, h_lo, side="right"))
    return arr, inc, grid, table, first


def _provenance(name, grid, table):
    return {"pipeline": name, "n_levels": grid.n_levels, "delta": grid.delta,
            "z_max": grid.z_max, "support": list(table.support)}


def _shrink(box, sel):
    out = []
    for axis, sl in enumerate(box):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(sel.any(axis=other))
        out.append(slice(sl.start + hit[0], sl.start + hit[-1] + 1))
    return tuple(out)


def ptfce_baseline(zmap, mask, params: GrfParams, n_levels: int = 100, *,
                   table=None, cache_dir=None) -> EnhancedMap:
    """Analytical enhancement with cluster sizes from labelling at every level."""
    arr, inc, grid, table, first = _prepare(zmap, mask, params, n_levels, table, cache_dir)
    lk0, dlk = table._log_knots
    zl = table.level_probit
    A = np.zeros(arr.shape)
    box = tuple(slice(0, d) for d in arr.shape)
    for i in range(first, grid.n_levels):
        # superlevel sets shrink with tau: label inside their bounding box only
        sub_arr, sub_inc = arr[box], inc[box]
        supra_full = sub_inc & (sub_arr >= grid.taus[i])
        if not supra_full.any():
            break
        box = _shrink(box, supra_full)
        sizes = ccl_cluster_sizes(arr[box], inc[box], grid.taus[i])
        supra = sizes > 0
        uniq, inv = np.unique(sizes[supra], return_inverse=True)
        vals = _neglogp_many(zl, i, uniq.astype(np.float64), lk0, dlk)
        A[box][supra] += vals[inv]
    return _finish(A, inc, grid.delta, _provenance("baseline", grid, table))


@njit(cache=True)
def _hybrid_kernel(link_parent, link_height, off, eh, es, values, order, taus, first,
                   zl, lk0, dlk):
    out = np.zeros(order.size)
    n = taus.size
    for k in range(order.size):
        v = order[k]
        hv = values[v]
        acc = 0.0
        i = first
        while i < n and taus[i] <= hv:
            c = _size_at(link_parent, link_height, off, eh, es, v, taus[i])
            acc += _neglogp(zl, i, float(c), lk0, dlk)
            i += 1
        out[k] = acc
    return out


def ptfce_hybrid(zmap, mask, params: GrfParams, n_levels: int = 500, *,
                 table=None, cache_dir=None, tree=None) -> EnhancedMap:
    """Analytical enhancement with cluster sizes read from a single merge tree."""
    arr, inc, grid, table, first = _prepare(zmap, mask, params, n_levels, table, cache_dir)
    if tree is None:
        tree = build_merge_tree(arr, inc)
    lk0, dlk = table._log_knots
    acc = _hybrid_kernel(tree.link_parent, tree.link_height, tree.event_offsets,
                         tree.event_height, tree.event_size, tree.value, tree.order,
                         np.ascontiguousarray(grid.taus), first, table.level_probit, lk0, dlk)
    flat = np.zeros(tree.value.size)
    flat[tree.order] = acc
    A = flat.reshape(arr.shape, order="F")
    return _finish(A, inc, grid.delta, _provenance("hybrid", grid, table))


PIPELINES = {"baseline": ptfce_baseline, "hybrid": ptfce_hybrid}


def _pipeline(selector):
    if callable(selector):
        return selector
    try:
        return PIPELINES[selector]
    except KeyError:
        raise DataError(f"unknown pipeline {selector!r}; expected one of {sorted(PIPELINES)}") from None


def two_sided_enhance(zmap, mask, params: GrfParams, pipeline="hybrid", **kwargs) -> EnhancedMap:
    """Enhance both tails and keep, per voxel, the tail with more evidence.

    A tail with no positive values contributes nothing.  The result's
    ``sign`` marks the tail kept; ``signed_z`` restores it on ``z_enh``.
    """
    arr, inc = check_volume_and_mask(zmap, mask)
    run = _pipeline(pipeline)
    tails = []
    for s in (1.0, -1.0):
        x = s * arr
        tails.append(run(x, inc, params, **kwargs) if x[inc].max() > 0 else None)
    zero = np.zeros(arr.shape)
    S_pos = tails[0].S if tails[0] is not None else zero
    S_neg = tails[1].S if tails[1] is not None else zero
    # S orders voxels the same way as z_enh; unlike |z_enh| it is not fooled
    # by the negative floor of z_enh where a tail carries no evidence
    # ties (including no evidence in either tail) follow the sign of the map
    sign = np.where(S_neg > S_pos, -1, np.where(S_pos > S_neg, 1, np.sign(arr))).astype(np.int8)
    S = np.where(sign < 0, S_neg, S_pos)
    sign[~inc] = 0
    sign.setflags(write=False)
    prov = {"pipeline": "two_sided",
            "positive": tails[0].provenance if tails[0] is not None else None,
            "negative": tails[1].provenance if tails[1] is not None else None}
    return _from_S(S.copy(), inc, prov, sign)


def bonferroni_z_threshold(alpha: float, n_voxels: int) -> float:
    """``Phi^{-1}(1 - alpha / n_voxels)``."""
    check_scalar(alpha, "alpha", lo=0, hi=1, lo_open=True, hi_open=True)
    check_scalar(n_voxels, "n_voxels", lo=1, integer=True)
    return float(grf.norm_isf(alpha / n_voxels))


def bh_fdr_select(p_values, alpha: float = 0.05, mask=None) -> np.ndarray:
    """Benjamini-Hochberg step-up selection at level ``alpha``.

    ``p_values`` may be any shape; with ``mask`` only masked entries take
    part and the returned boolean array has the input's shape.
    """
    check_scalar(alpha, "alpha", lo=0, hi=1, lo_open=True, hi_open=True)
    p = np.asarray(p_values, dtype=np.float64)
    inc = np.ones(p.shape, bool) if mask is None else np.asarray(mask, bool)
    vals = p[inc]
    if np.any(~((vals > 0) & (vals <= 1))):
        raise DataError("p-values must lie in (0, 1]")
    out = np.zeros(p.shape, bool)
    m = vals.size
    if m == 0:
        return out
    srt = np.sort(vals)
    ok = np.flatnonzero(srt <= alpha * np.arange(1, m + 1) / m)
    if ok.size:
        out[inc] = vals <= srt[ok[-1]]
    return out
