"""Shared helpers: independent oracles and small random maps."""
from collections import deque
from itertools import product

import numpy as np
import pytest


def bfs_component_sizes(values, mask, tau):
    """Per-voxel component size of ``{v : value >= tau}`` by breadth-first flood fill.

    Deliberately naive (pure Python, explicit offsets) so it shares no code
    with the package.
    """
    values = np.asarray(values)
    supra = np.asarray(mask, bool) & (values >= tau)
    out = np.zeros(values.shape, np.int64)
    seen = np.zeros(values.shape, bool)
    offs = [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    for start in zip(*np.nonzero(supra)):
        if seen[start]:
            continue
        comp = [start]
        seen[start] = True
        queue = deque([start])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in offs:
                u = (x + dx, y + dy, z + dz)
                if all(0 <= u[i] < values.shape[i] for i in range(3)) and supra[u] and not seen[u]:
                    seen[u] = True
                    comp.append(u)
                    queue.append(u)
        for c in comp:
            out[c] = len(comp)
    return out


def step_up_oracle(p, alpha):
    """Benjamini-Hochberg by the textbook loop over sorted p-values."""
    p = list(p)
    m = len(p)
    ranked = sorted(range(m), key=lambda i: p[i])
    k_max = 0
    for k in range(1, m + 1):
        if p[ranked[k - 1]] <= alpha * k / m:
            k_max = k
    chosen = set(ranked[:k_max])
    return np.array([i in chosen for i in range(m)])


def smooth_map(rng, shape, sigma=1.0):
    from scipy.ndimage import gaussian_filter
    x = gaussian_filter(rng.standard_normal(shape), sigma)
    return x / x.std()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def line():
    return np.array([5.0, 1, 4, 2, 3]).reshape(1, 1, 5)


# ---------------------------------------------------------------------------
# acceptance summary

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
