"""Lookup tables for 3x3x3 topology tests, shared by both thinning backends.

Neighbourhood index ``k = 9*(dz+1) + 3*(dy+1) + (dx+1)``; the centre is 13.

Euler invariance treats each voxel as a closed unit cube (26-connected
foreground). Deleting the centre cube ``p`` leaves the Euler characteristic
unchanged iff the part of ``p``'s boundary covered by foreground neighbours
has characteristic 1. That boundary patch splits over the eight octants:
each octant owns one corner vertex of ``p``, half of each of its three
edges and a quarter of each of its three faces, so the per-octant term is
``4*v - 2*e + f`` and invariance means the octant terms sum to 4.
"""

from __future__ import annotations

import itertools

import numpy as np

CENTER = 13
OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.intp)


def nbr_index(dz: int, dy: int, dx: int) -> int:
    return 9 * (dz + 1) + 3 * (dy + 1) + (dx + 1)


def _octants():
    """(8, 7) neighbourhood indices; octant voxel order is product({0,1}^3) minus the origin."""
    rows, local = [], [o for o in itertools.product((0, 1), repeat=3) if o != (0, 0, 0)]
    for signs in itertools.product((-1, 1), repeat=3):
        rows.append([nbr_index(*(a * s for a, s in zip(o, signs))) for o in local])
    return np.array(rows, dtype=np.intp), local


OCTANTS, _LOCAL = _octants()


def _euler_lut() -> np.ndarray:
    lut = np.zeros(128, dtype=np.int8)
    for bits in range(128):
        on = {_LOCAL[i] for i in range(7) if bits >> i & 1}
        v = 1 if on else 0
        e = 0
        f = 0
        for axis in range(3):
            # edge parallel to `axis` through this octant's corner
            sharers = [o for o in _LOCAL if o[axis] == 0]
            e += any(o in on for o in sharers)
            face = tuple(1 if k == axis else 0 for k in range(3))
            f += face in on
        lut[bits] = 4 * v - 2 * e + f
    return lut


EULER_LUT = _euler_lut()
EULER_INVARIANT_SUM = 4


def _adjacency():
    """26-adjacency among the 26 non-centre neighbourhood cells, padded with -1."""
    adj = np.full((27, 26), -1, dtype=np.intp)
    count = np.zeros(27, dtype=np.intp)
    for a in range(27):
        if a == CENTER:
            continue
        for b in range(27):
            if b in (a, CENTER):
                continue
            if np.abs(OFFSETS[a] - OFFSETS[b]).max() == 1:
                adj[a, count[a]] = b
                count[a] += 1
    return adj, count


ADJ, ADJ_COUNT = _adjacency()

# face directions, one thinning sub-iteration each: -y, +y, +x, -x, +z, -z
# (the order used by scikit-image's Lee thinning, so skeletons coincide)
BORDERS = np.array(
    [nbr_index(0, -1, 0), nbr_index(0, 1, 0), nbr_index(0, 0, 1),
     nbr_index(0, 0, -1), nbr_index(1, 0, 0), nbr_index(-1, 0, 0)],
    dtype=np.intp,
)
