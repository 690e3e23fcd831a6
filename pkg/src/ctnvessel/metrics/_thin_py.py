"""Pure-Python/NumPy topology-preserving 3D thinning (fallback backend).

Candidate detection for each sub-iteration is vectorised; the sequential
re-check, which must see the partially thinned image, runs voxel by voxel.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ._tables import ADJ, ADJ_COUNT, BORDERS, CENTER, EULER_INVARIANT_SUM, EULER_LUT, OCTANTS, OFFSETS


def _pattern(nb) -> int:
    bits = 0
    for k in range(27):
        if nb[k]:
            bits |= 1 << k
    return bits


@lru_cache(maxsize=1 << 16)
def _deletable(pattern: int) -> bool:
    """Euler-invariant and 26-neighbours form exactly one 26-component."""
    total = 0
    for row in OCTANTS:
        idx = 0
        for i, k in enumerate(row):
            if pattern >> k & 1:
                idx |= 1 << i
        total += EULER_LUT[idx]
    if total != EULER_INVARIANT_SUM:
        return False
    return _one_component(pattern)


def _one_component(pattern: int) -> bool:
    on = [k for k in range(27) if k != CENTER and pattern >> k & 1]
    if not on:
        return False
    seen = {on[0]}
    stack = [on[0]]
    while stack:
        a = stack.pop()
        for j in range(ADJ_COUNT[a]):
            b = int(ADJ[a, j])
            if b not in seen and pattern >> b & 1:
                seen.add(b)
                stack.append(b)
    return len(seen) == len(on)


def _shifted(img: np.ndarray, k: int) -> np.ndarray:
    """View of ``img[z+dz, y+dy, x+dx]`` over the interior (padded input)."""
    dz, dy, dx = OFFSETS[k]
    D, H, W = img.shape
    return img[1 + dz:D - 1 + dz, 1 + dy:H - 1 + dy, 1 + dx:W - 1 + dx]


def _candidates(img: np.ndarray, border: int) -> np.ndarray:
    core = _shifted(img, CENTER).astype(bool)
    cand = core & ~_shifted(img, border).astype(bool)
    if not cand.any():
        return np.empty((0, 3), dtype=np.intp)
    count = np.zeros(core.shape, dtype=np.int16)
    for k in range(27):
        if k != CENTER:
            count += _shifted(img, k)
    cand &= count != 1
    euler = np.zeros(core.shape, dtype=np.int16)
    for row in OCTANTS:
        idx = np.zeros(core.shape, dtype=np.intp)
        for i, k in enumerate(row):
            idx |= _shifted(img, k).astype(np.intp) << i
        euler += EULER_LUT[idx]
    cand &= euler == EULER_INVARIANT_SUM
    pts = np.argwhere(cand) + 1
    keep = [i for i, (z, y, x) in enumerate(pts) if _deletable(_pattern(img[z - 1:z + 2, y - 1:y + 2, x - 1:x + 2].ravel()))]
    return pts[keep]


def thin_padded(img: np.ndarray) -> None:
    """Thin a C-contiguous uint8 array in place; the outer one-voxel shell must be zero."""
    unchanged = 0
    while unchanged < 6:
        unchanged = 0
        for border in BORDERS:
            changed = False
            for z, y, x in _candidates(img, int(border)):
                if _deletable(_pattern(img[z - 1:z + 2, y - 1:y + 2, x - 1:x + 2].ravel())):
                    img[z, y, x] = 0
                    changed = True
            if not changed:
                unchanged += 1
