# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled topology-preserving 3D thinning kernel.

Same algorithm and visiting order as ``_thin_py``; the lookup tables are
passed in from ``_tables`` so both backends share one definition.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, int8_t

cnp.import_array()


cdef inline void _gather(uint8_t[:, :, ::1] img, Py_ssize_t z, Py_ssize_t y, Py_ssize_t x,
                         uint8_t* nb) noexcept nogil:
    cdef int dz, dy, dx, k = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                nb[k] = img[z + dz, y + dy, x + dx]
                k += 1


cdef inline bint _euler_invariant(uint8_t* nb, Py_ssize_t[:, ::1] octants,
                                  int8_t[::1] lut, int target) noexcept nogil:
    cdef int o, i, idx, total = 0
    for o in range(8):
        idx = 0
        for i in range(7):
            if nb[octants[o, i]]:
                idx |= 1 << i
        total += lut[idx]
    return total == target


cdef inline bint _one_component(uint8_t* nb, Py_ssize_t[:, ::1] adj,
                                Py_ssize_t[::1] adj_count) noexcept nogil:
    cdef uint8_t seen[27]
    cdef int stack[27]
    cdef int top = 0, n_on = 0, n_seen = 0, k, a, b, j, first = -1
    for k in range(27):
        seen[k] = 0
        if k != 13 and nb[k]:
            n_on += 1
            if first < 0:
                first = k
    if n_on == 0:
        return False
    seen[first] = 1
    n_seen = 1
    stack[0] = first
    top = 1
    while top > 0:
        top -= 1
        a = stack[top]
        for j in range(adj_count[a]):
            b = adj[a, j]
            if nb[b] and not seen[b]:
                seen[b] = 1
                n_seen += 1
                stack[top] = b
                top += 1
    return n_seen == n_on


def thin_padded(cnp.ndarray img_arr, Py_ssize_t[:, ::1] offsets, Py_ssize_t[:, ::1] octants,
                int8_t[::1] lut, int target, Py_ssize_t[:, ::1] adj,
                Py_ssize_t[::1] adj_count, Py_ssize_t[::1] borders):
    """Thin a C-contiguous uint8 array in place; the outer one-voxel shell must be zero."""
    cdef uint8_t[:, :, ::1] img = img_arr
    cdef Py_ssize_t D = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef Py_ssize_t z, y, x, i, n_cand, cap
    cdef Py_ssize_t bz, by, bx
    cdef int b, k, count, unchanged
    cdef bint changed
    cdef uint8_t nb[27]
    cdef Py_ssize_t[:, ::1] cand

    cap = 1024
    cand = np.empty((cap, 3), dtype=np.intp)
    unchanged = 0
    while unchanged < 6:
        unchanged = 0
        for b in range(6):
            bz = offsets[borders[b], 0]
            by = offsets[borders[b], 1]
            bx = offsets[borders[b], 2]
            n_cand = 0
            for z in range(1, D - 1):
                for y in range(1, H - 1):
                    for x in range(1, W - 1):
                        if not img[z, y, x] or img[z + bz, y + by, x + bx]:
                            continue
                        _gather(img, z, y, x, nb)
                        count = 0
                        for k in range(27):
                            count += nb[k]
                        if count == 2:  # endpoint: exactly one neighbour
                            continue
                        if not _euler_invariant(nb, octants, lut, target):
                            continue
                        if not _one_component(nb, adj, adj_count):
                            continue
                        if n_cand == cap:
                            cap *= 2
                            grown = np.empty((cap, 3), dtype=np.intp)
                            grown[:n_cand] = np.asarray(cand)[:n_cand]
                            cand = grown
                        cand[n_cand, 0] = z
                        cand[n_cand, 1] = y
                        cand[n_cand, 2] = x
                        n_cand += 1
            changed = False
            for i in range(n_cand):
                z = cand[i, 0]
                y = cand[i, 1]
                x = cand[i, 2]
                _gather(img, z, y, x, nb)
                if _euler_invariant(nb, octants, lut, target) and _one_component(nb, adj, adj_count):
                    img[z, y, x] = 0
                    changed = True
            if not changed:
                unchanged += 1
