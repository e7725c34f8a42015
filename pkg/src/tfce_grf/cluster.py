"""Superlevel-set merge tree over a voxel lattice (26-connectivity).

Voxels are inserted in order of decreasing value (ties broken by linear index)
and merged with already-inserted neighbours using union-by-rank with path
compression.  Two parent arrays are kept:

* ``parent`` -- the compressed union-find forest used during construction;
* ``link_parent`` / ``link_height`` -- the same unions without compression,
  i.e. the merge history.  Union-by-rank bounds its depth by ``log2(N)``.

Every union records ``(height, new size)`` on the surviving root, so the size
of any component at any height can be recovered by walking the history forest
root-ward and bisecting the events of the node reached.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from ._validation import check_volume_and_mask
from .errors import DataError, EmptyMask, IndexOutOfBounds, VoxelBelowThreshold

STRUCTURE26 = np.ones((3, 3, 3), dtype=bool)


@njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit(cache=True)
def _build_kernel(values, order, nx, ny, nz):
    n = values.size
    m = order.size
    parent = np.arange(n)
    link_parent = np.arange(n)
    link_height = np.full(n, -np.inf)
    rank = np.zeros(n, np.int32)
    size = np.zeros(n, np.int64)
    done = np.zeros(n, np.bool_)
    ev_node = np.empty(2 * m, np.int64)
    ev_h = np.empty(2 * m, np.float64)
    ev_s = np.empty(2 * m, np.int64)
    ne = 0
    nxy = nx * ny
    for k in range(m):
        v = order[k]
        h = values[v]
        done[v] = True
        size[v] = 1
        ev_node[ne] = v
        ev_h[ne] = h
        ev_s[ne] = 1
        ne += 1
        x = v % nx
        y = (v // nx) % ny
        z = v // nxy
        for dz in range(-1, 2):
            zz = z + dz
            if zz < 0 or zz >= nz:
                continue
            for dy in range(-1, 2):
                yy = y + dy
                if yy < 0 or yy >= ny:
                    continue
                for dx in range(-1, 2):
                    xx = x + dx
                    if xx < 0 or xx >= nx or (dx == 0 and dy == 0 and dz == 0):
                        continue
                    u = xx + nx * (yy + ny * zz)
                    if not done[u]:
                        continue
                    ru = _find(parent, u)
                    rv = _find(parent, v)
                    if ru == rv:
                        continue
                    if rank[ru] > rank[rv]:
                        root, child = ru, rv
                    else:
                        root, child = rv, ru
                        if rank[ru] == rank[rv]:
                            rank[rv] += 1
                    parent[child] = root
                    link_parent[child] = root
                    link_height[child] = h
                    size[root] += size[child]
                    ev_node[ne] = root
                    ev_h[ne] = h
                    ev_s[ne] = size[root]
                    ne += 1
    # finalise compression so the forest is read-only from here on
    for k in range(m):
        _find(parent, order[k])

    # per-node event lists (chronological, so heights non-increasing); keep
    # only the last size recorded at each height
    counts = np.zeros(n + 1, np.int64)
    for j in range(ne):
        counts[ev_node[j] + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    eh = np.empty(ne, np.float64)
    es = np.empty(ne, np.int64)
    for j in range(ne):
        node = ev_node[j]
        p = fill[node]
        if p > offsets[node] and eh[p - 1] == ev_h[j]:
            es[p - 1] = ev_s[j]
        else:
            eh[p] = ev_h[j]
            es[p] = ev_s[j]
            fill[node] = p + 1
    # compact away the slots freed by de-duplication
    new_off = np.zeros(n + 1, np.int64)
    for i in range(n):
        new_off[i + 1] = new_off[i] + (fill[i] - offsets[i])
    eh2 = np.empty(new_off[n], np.float64)
    es2 = np.empty(new_off[n], np.int64)
    for i in range(n):
        c = fill[i] - offsets[i]
        for t in range(c):
            eh2[new_off[i] + t] = eh[offsets[i] + t]
            es2[new_off[i] + t] = es[offsets[i] + t]
    return parent, rank, size, link_parent, link_height, new_off, eh2, es2


@njit(cache=True)
def _count_ge(eh, lo, hi, tau):
    # events in eh[lo:hi] are descending; number with height >= tau
    a, b = lo, hi
    while a < b:
        mid = (a + b) // 2
        if eh[mid] >= tau:
            a = mid + 1
        else:
            b = mid
    return a - lo


@njit(cache=True)
def _size_at(link_parent, link_height, off, eh, es, v, tau):
    node = v
    while link_parent[node] != node and link_height[node] >= tau:
        node = link_parent[node]
    c = _count_ge(eh, off[node], off[node + 1], tau)
    return es[off[node] + c - 1]


@njit(cache=True)
def _sizes_at_kernel(link_parent, link_height, off, eh, es, values, voxels, tau):
    out = np.zeros(voxels.size, np.int64)
    for k in range(voxels.size):
        v = voxels[k]
        if values[v] >= tau:
            out[k] = _size_at(link_parent, link_height, off, eh, es, v, tau)
    return out


@njit(cache=True)
def _change_points_kernel(link_parent, link_height, off, eh, es, v):
    taus = []
    sizes = []
    node = v
    hi = eh[off[v]]  # the voxel's own value
    while True:
        is_root = link_parent[node] == node
        lo = -np.inf if is_root else link_height[node]
        for j in range(off[node], off[node + 1]):
            t = eh[j]
            if lo < t <= hi:
                taus.append(t)
                sizes.append(es[j])
        if is_root:
            break
        hi = lo
        node = link_parent[node]
    return taus, sizes


@njit(cache=True)
def _cumulative(off, gev, Fev):
    # C[j] = integral of the node's size curve from its first event down to event j
    C = np.zeros(gev.size, np.float64)
    for i in range(off.size - 1):
        acc = 0.0
        for j in range(off[i], off[i + 1]):
            C[j] = acc
            if j + 1 < off[i + 1]:
                acc += gev[j] * (Fev[j] - Fev[j + 1])
    return C


@njit(cache=True)
def _G(off, eh, gev, Fev, C, node, t, Ft):
    # integral over (t, first event of node] of g(size) dF
    base = off[node]
    m = base + _count_ge(eh, base, off[node + 1], t) - 1
    return C[m] + gev[m] * (Fev[m] - Ft)


@njit(cache=True)
def _integrate_kernel(link_parent, link_height, off, eh, gev, Fev, Flink, C,
                      values, voxels, h0, Fh0):
    out = np.zeros(voxels.size, np.float64)
    for k in range(voxels.size):
        v = voxels[k]
        if not values[v] > h0:
            continue
        total = 0.0
        node = v
        hi_t = eh[off[v]]
        hi_F = Fev[off[v]]
        while True:
            is_root = link_parent[node] == node
            if is_root or link_height[node] <= h0:
                lo_t = h0
                lo_F = Fh0
                last = True
            else:
                lo_t = link_height[node]
                lo_F = Flink[node]
                last = False
            if hi_t > lo_t:
                total += (_G(off, eh, gev, Fev, C, node, lo_t, lo_F)
                          - _G(off, eh, gev, Fev, C, node, hi_t, hi_F))
            if last:
                break
            hi_t = lo_t
            hi_F = lo_F
            node = link_parent[node]
        out[k] = total
    return out


@dataclass(frozen=True, eq=False)
class MergeTree:
    """Disjoint-set forest encoding the superlevel-set merge tree of a map.

    Arrays are indexed by flat (x-fastest) voxel index over the whole grid;
    entries for voxels outside the mask are unused.
    """

    dims: tuple
    value: np.ndarray
    mask: np.ndarray
    order: np.ndarray
    parent: np.ndarray
    rank: np.ndarray
    size: np.ndarray
    link_parent: np.ndarray
    link_height: np.ndarray
    event_offsets: np.ndarray
    event_height: np.ndarray
    event_size: np.ndarray

    @property
    def n_voxels(self) -> int:
        return int(self.order.size)

    @property
    def merge_height(self):
        """Height at which each voxel's history link was created (``-inf`` for roots)."""
        return self.link_height

    @property
    def size_at_insert(self):
        return self.event_size

    def find(self, v: int) -> int:
        return int(self.parent[v])

    def size_at(self, voxel: int, tau: float) -> int:
        return cluster_size_at(self, voxel, tau)

    def sizes_at(self, tau: float) -> np.ndarray:
        """Component size of every voxel at threshold ``tau`` (0 below it), flat order."""
        out = np.zeros(self.value.size, np.int64)
        out[self.order] = _sizes_at_kernel(
            self.link_parent, self.link_height, self.event_offsets, self.event_height,
            self.event_size, self.value, self.order, float(tau))
        return out

    def integrate(self, g_events: np.ndarray, F, h0: float = 0.0) -> np.ndarray:
        """Evaluate ``sum_i g(e_v) (F(t_i) - F(t_{i+1}))`` over each voxel's change points.

        ``g_events`` holds ``g`` evaluated at every recorded event size and
        ``F`` is a vectorised antiderivative of the height weight.  Heights
        below ``h0`` are clipped to ``h0`` so they contribute nothing.
        """
        eh = np.maximum(self.event_height, h0)
        lh = np.maximum(self.link_height, h0)
        Fev = np.asarray(F(eh), dtype=np.float64)
        Flink = np.asarray(F(lh), dtype=np.float64)
        Fh0 = float(np.asarray(F(np.array([h0], dtype=np.float64)))[0])
        g_events = np.asarray(g_events, dtype=np.float64)
        C = _cumulative(self.event_offsets, g_events, Fev)
        scores = _integrate_kernel(
            self.link_parent, self.link_height, self.event_offsets, self.event_height,
            g_events, Fev, Flink, C, self.value, self.order, float(h0), Fh0)
        out = np.zeros(self.value.size, np.float64)
        out[self.order] = scores
        return out.reshape(self.dims, order="F")


def build_merge_tree(zmap, mask=None) -> MergeTree:
    """Insert in-mask voxels in decreasing order and record every merge."""
    arr, inc = check_volume_and_mask(zmap, mask, allow_empty=True)
    if not inc.any():
        raise EmptyMask("cannot build a merge tree over an empty mask")
    values = np.ascontiguousarray(arr.ravel(order="F"))
    flat_mask = inc.ravel(order="F")
    idx = np.flatnonzero(flat_mask)
    # value descending, index ascending
    order = idx[np.lexsort((idx, -values[idx]))]
    nx, ny, nz = arr.shape
    parent, rank, size, lp, lh, off, eh, es = _build_kernel(values, order, nx, ny, nz)
    tree = MergeTree(tuple(arr.shape), values, flat_mask, order, parent, rank, size,
                     lp, lh, off, eh, es)
    for a in (values, flat_mask, order, parent, rank, size, lp, lh, off, eh, es):
        a.setflags(write=False)
    return tree


def _check_voxel(tree, voxel):
    voxel = int(voxel)
    if not 0 <= voxel < tree.value.size:
        raise IndexOutOfBounds(f"voxel index {voxel} outside grid of {tree.value.size} voxels")
    if not tree.mask[voxel]:
        raise DataError(f"voxel {voxel} is not an in-mask voxel")
    return voxel


def cluster_size_at(tree: MergeTree, voxel: int, tau: float) -> int:
    """Size of the component of ``{u : h_u >= tau}`` that contains ``voxel``."""
    voxel = _check_voxel(tree, voxel)
    if not tree.value[voxel] >= tau:
        raise VoxelBelowThreshold(
            f"voxel {voxel} has value {tree.value[voxel]} < threshold {tau}")
    return int(_size_at(tree.link_parent, tree.link_height, tree.event_offsets,
                        tree.event_height, tree.event_size, voxel, float(tau)))


def change_points(tree: MergeTree, voxel: int) -> list[tuple[float, int]]:
    """Heights at which the voxel's cluster size changes, descending.

    Each entry ``(t, s)`` means the cluster has size ``s`` for thresholds in
    ``(t_next, t]``.  The first entry is the voxel's own value.  Only
    strictly positive heights are reported.
    """
    voxel = _check_voxel(tree, voxel)
    if not tree.value[voxel] > 0:
        raise VoxelBelowThreshold(f"voxel {voxel} has non-positive value {tree.value[voxel]}")
    taus, sizes = _change_points_kernel(tree.link_parent, tree.link_height,
                                        tree.event_offsets, tree.event_height,
                                        tree.event_size, voxel)
    return [(float(t), int(s)) for t, s in zip(taus, sizes) if t > 0]


def ccl_cluster_sizes(zmap, mask, tau: float) -> np.ndarray:
    """Connected-component labelling of ``{h >= tau}``; voxels carry their component size."""
    arr, inc = check_volume_and_mask(zmap, mask, allow_empty=True)
    supra = inc & (arr >= tau)
    labels, n = ndimage.label(supra, structure=STRUCTURE26)
    if n == 0:
        return np.zeros(arr.shape, dtype=np.int64)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return counts[labels]
