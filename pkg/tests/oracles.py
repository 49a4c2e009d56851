"""Brute-force reference implementations used only by the test suite.

Everything here is written as explicit Python loops so it stays independent of
the vectorised code paths it checks.
"""

from collections import deque
from itertools import product

import numpy as np


def elementwise(op, a, b):
    out = np.zeros(a.shape, dtype=np.uint8)
    for idx in product(*(range(n) for n in a.shape)):
        out[idx] = op(int(a[idx]), int(b[idx]))
    return out


def dice_loop(a, b):
    inter = sa = sb = 0
    for idx in product(*(range(n) for n in a.shape)):
        inter += int(a[idx]) * int(b[idx])
        sa += int(a[idx])
        sb += int(b[idx])
    return 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)


def neighbour_offsets(connectivity):
    offs = []
    for d in product((-1, 0, 1), repeat=3):
        nz = sum(1 for v in d if v != 0)
        if nz == 0:
            continue
        if connectivity == 6 and nz > 1:
            continue
        if connectivity == 18 and nz > 2:
            continue
        offs.append(d)
    return offs


def flood_fill_components(g, connectivity=26):
    """Breadth-first labelling; returns a list of voxel-index sets."""
    offs = neighbour_offsets(connectivity)
    seen = np.zeros(g.shape, dtype=bool)
    comps = []
    for start in product(*(range(n) for n in g.shape)):
        if not g[start] or seen[start]:
            continue
        comp = set()
        queue = deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            comp.add(v)
            for o in offs:
                w = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
                if all(0 <= w[i] < g.shape[i] for i in range(3)) and g[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        comps.append(frozenset(comp))
    return comps


def labels_to_sets(labels):
    sets = {}
    for idx in zip(*np.nonzero(labels)):
        sets.setdefault(int(labels[idx]), set()).add(tuple(int(i) for i in idx))
    return [frozenset(s) for s in sets.values()]


def remove_small_oracle(g, min_voxels, connectivity=26):
    out = np.zeros_like(g)
    for comp in flood_fill_components(g, connectivity):
        if len(comp) >= min_voxels:
            for v in comp:
                out[v] = 1
    return out


def nearest_resample_loop(g, new_dims):
    """For each output voxel centre, pick the nearest source centre (ties upward)."""
    out = np.zeros(new_dims, dtype=np.uint8)
    src = []
    for n_in, n_out in zip(g.shape, new_dims):
        idx = []
        for i in range(n_out):
            centre = (i + 0.5) * n_in / n_out - 0.5
            idx.append(min(int(np.floor(centre + 0.5)), n_in - 1))
        src.append(idx)
    for i, j, k in product(*(range(n) for n in new_dims)):
        out[i, j, k] = g[src[0][i], src[1][j], src[2][k]]
    return out


def central_differences(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad
