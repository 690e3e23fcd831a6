"""Volume/label I/O, resizing and synthetic aorta + coronary phantoms.

Files are stored as a JSON header (``<name>.hdr.json``) next to a raw
little-endian C-order payload (``<name>.raw``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

BACKGROUND, AORTA, CORONARY = 0, 1, 2
LABELS = (BACKGROUND, AORTA, CORONARY)

HEADER_SUFFIX = ".hdr.json"
PAYLOAD_SUFFIX = ".raw"
LABEL_TAG = "_label"
_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}
SPLITS = ("train", "val", "test")


class VolumeFormatError(ValueError):
    """Header/payload disagreement or invalid content in a volume file."""


def _vec3(values, name: str) -> Tuple[float, float, float]:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    return out


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be rank 3, got shape {self.data.shape}")
        self.spacing = _vec3(self.spacing, "spacing")
        self.origin = _vec3(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains NaN or Inf")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelMask:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label mask must be rank 3, got shape {data.shape}")
        bad = ~np.isin(data, LABELS)
        if bad.any():
            raise VolumeFormatError(f"label values outside {{0,1,2}}: {np.unique(data[bad])[:5].tolist()}")
        self.data = np.ascontiguousarray(data, dtype=np.uint8)
        self.spacing = _vec3(self.spacing, "spacing")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


# ---------------------------------------------------------------------------
# file format


def _base(path) -> Path:
    """Strip a header or payload suffix so both spellings name the same pair."""
    p = Path(path)
    name = p.name
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def header_path(path) -> Path:
    b = _base(path)
    return b.with_name(b.name + HEADER_SUFFIX)


def payload_path(path) -> Path:
    b = _base(path)
    return b.with_name(b.name + PAYLOAD_SUFFIX)


def label_path_for(path) -> Path:
    """Header path of the label file stored alongside an image."""
    b = _base(path)
    return header_path(b.with_name(b.name + LABEL_TAG))


def write_array(array: np.ndarray, path, spacing, origin=(0.0, 0.0, 0.0)) -> Path:
    """Write a rank-3 float32/uint8 array as header + payload; returns the header path."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        dtype_name = "uint8"
    elif array.dtype == np.float32:
        dtype_name = "float32"
    else:
        raise TypeError(f"unsupported dtype {array.dtype}; expected float32 or uint8")
    hdr = header_path(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": [int(s) for s in array.shape],
        "dtype": dtype_name,
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "byte_order": "little",
    }
    hdr.write_text(json.dumps(header, indent=2) + "\n")
    payload_path(path).write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[dtype_name]).tobytes(order="C"))
    return hdr


def read_array(path) -> Tuple[np.ndarray, dict]:
    """Read an array written by :func:`write_array`; returns (array, header)."""
    hdr = header_path(path)
    raw = payload_path(path)
    if not hdr.is_file():
        raise FileNotFoundError(f"missing header {hdr}")
    if not raw.is_file():
        raise FileNotFoundError(f"missing payload {raw}")
    header = json.loads(hdr.read_text())
    try:
        shape = tuple(int(s) for s in header["shape"])
        dtype = _DTYPES[header["dtype"]]
    except KeyError as exc:
        raise VolumeFormatError(f"{hdr}: bad or missing header field {exc}") from None
    if header.get("byte_order", "little") != "little":
        raise VolumeFormatError(f"{hdr}: only little-endian payloads are supported")
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"{hdr}: shape must be 3 positive ints, got {list(shape)}")
    payload = raw.read_bytes()
    expected = math.prod(shape) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw}: payload is {len(payload)} bytes but header {list(shape)} {header['dtype']} needs {expected}"
        )
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return array, header


def write_volume(volume: Volume, mask: Optional[LabelMask], path) -> Path:
    hdr = write_array(volume.data, path, volume.spacing, volume.origin)
    if mask is not None:
        if mask.shape != volume.shape:
            raise ValueError(f"mask shape {mask.shape} != volume shape {volume.shape}")
        write_array(mask.data, label_path_for(path), mask.spacing, volume.origin)
    return hdr


def read_volume(path) -> Tuple[Volume, Optional[LabelMask]]:
    """Read an image and, if present, the label file stored alongside it."""
    data, header = read_array(path)
    volume = Volume(data.astype(np.float32, copy=False), header["spacing"], header.get("origin", (0, 0, 0)))
    lbl = label_path_for(path)
    mask = read_mask(lbl) if lbl.is_file() else None
    if mask is not None and mask.shape != volume.shape:
        raise VolumeFormatError(f"label shape {mask.shape} != image shape {volume.shape}")
    return volume, mask


def read_mask(path) -> LabelMask:
    data, header = read_array(path)
    return LabelMask(data, header["spacing"])


def write_mask(mask: LabelMask, path, origin=(0.0, 0.0, 0.0)) -> Path:
    return write_array(mask.data, path, mask.spacing, origin)


# ---------------------------------------------------------------------------
# dataset manifest (JSON lines)


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    label: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


def write_manifest(records: Iterable[ManifestRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps({"image": r.image, "label": r.label, "split": r.split}) + "\n")
    return path


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest; relative paths are resolved against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            img, lbl, split = obj["image"], obj["label"], obj["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise VolumeFormatError(f"{path}:{lineno}: bad manifest record ({exc})") from None
        records.append(ManifestRecord(str(root / img), str(root / lbl), split))
    return records


def select_split(records: Sequence[ManifestRecord], split: str) -> list[ManifestRecord]:
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# resizing


def _check_target(target) -> Tuple[int, int, int]:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target dims must be 3 positive ints, got {target}")
    return target


def _linear_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    # voxel-centre alignment, clamped at the borders
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    w = x - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def _resized_geometry(shape, spacing, origin, target):
    new_spacing = tuple(s * n / t for s, n, t in zip(spacing, shape, target))
    # keep the physical extent: first-voxel centre shifts by half the spacing change
    new_origin = tuple(o - s / 2 + ns / 2 for o, s, ns in zip(origin, spacing, new_spacing))
    return new_spacing, new_origin


def resize_volume(volume: Volume, target) -> Volume:
    """Trilinear resize to ``target`` voxels, preserving physical extent."""
    target = _check_target(target)
    if target == volume.shape:
        return Volume(volume.data.copy(), volume.spacing, volume.origin)
    a = volume.data.astype(np.float64)
    for axis in range(3):
        a = _linear_axis(a, axis, target[axis])
    spacing, origin = _resized_geometry(volume.shape, volume.spacing, volume.origin, target)
    return Volume(a.astype(np.float32), spacing, origin)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index of each output voxel under centre-aligned nearest-neighbour sampling."""
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.minimum(idx, n_in - 1)


def resize_labels(data: np.ndarray, target) -> np.ndarray:
    target = _check_target(target)
    d, h, w = (nearest_indices(n, t) for n, t in zip(data.shape, target))
    return data[np.ix_(d, h, w)]


def resize_mask(mask: LabelMask, target) -> LabelMask:
    """Nearest-neighbour resize; label values are preserved."""
    target = _check_target(target)
    spacing, _ = _resized_geometry(mask.shape, mask.spacing, (0, 0, 0), target)
    return LabelMask(resize_labels(mask.data, target), spacing)


# ---------------------------------------------------------------------------
# synthetic phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic aorta + coronary-tree volume.

    Radii are in voxels. ``branch_depth`` counts bifurcation levels below
    each of the two coronary roots.
    """

    seed: int = 0
    grid_size: int = 64
    aorta_radius_range: Tuple[float, float] = (5.0, 7.0)
    coronary_radius_range: Tuple[float, float] = (1.0, 2.5)
    branch_depth: int = 3
    noise_sigma: float = 0.1
    foreground_intensity: float = 1.0
    background_intensity: float = 0.0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if int(self.seed) < 0:
            raise ValueError("seed must be nonnegative")
        if self.grid_size < 16:
            raise ValueError(f"grid_size must be >= 16, got {self.grid_size}")
        a_lo, a_hi = self.aorta_radius_range
        c_lo, c_hi = self.coronary_radius_range
        if a_lo < 3 or a_hi < a_lo:
            raise ValueError(f"aorta_radius_range must satisfy 3 <= min <= max, got {self.aorta_radius_range}")
        if c_lo < 1 or c_hi < c_lo:
            raise ValueError(f"coronary_radius_range must satisfy 1 <= min <= max, got {self.coronary_radius_range}")
        if not 0 <= self.branch_depth <= 6:
            raise ValueError(f"branch_depth must be in [0, 6], got {self.branch_depth}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        # the aorta may occupy at most half the grid and each coronary tube a quarter
        if 2 * (a_hi + 1) > self.grid_size // 2:
            raise ValueError(f"aorta radius {a_hi} too large for grid {self.grid_size}")
        if 2 * (c_hi + 1) > self.grid_size // 4:
            raise ValueError(f"coronary radius {c_hi} too large for grid {self.grid_size}")


def _bezier(p0, p1, p2, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _sample_tube(p0, p1, p2, step: float = 0.25) -> np.ndarray:
    approx_len = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    return _bezier(p0, p1, p2, max(2, int(math.ceil(approx_len / step)) + 1))


def _stamp(mask: np.ndarray, centres: np.ndarray, radius: float) -> None:
    """Mark every voxel whose centre lies within ``radius`` of any of ``centres``."""
    reach = int(math.ceil(radius)) + 1
    ax = np.arange(-reach, reach + 1)
    offsets = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    n = mask.shape[0]
    for chunk in np.array_split(centres, max(1, len(centres) // 256)):
        base = np.floor(chunk).astype(np.int64)
        vox = base[:, None, :] + offsets[None, :, :]
        d2 = ((vox - chunk[:, None, :]) ** 2).sum(-1)
        vox = vox[(d2 <= radius * radius) & ((vox >= 0) & (vox < n)).all(-1)]
        mask[vox[:, 0], vox[:, 1], vox[:, 2]] = True


def _unit(v):
    return v / np.linalg.norm(v)


def _rotate(v, axis, angle):
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    return (v * math.cos(angle) + np.cross(axis, v) * math.sin(angle)
            + axis * np.dot(axis, v) * (1 - math.cos(angle)))


def _perpendicular(v, rng) -> np.ndarray:
    while True:
        u = np.cross(v, rng.normal(size=3))
        if np.linalg.norm(u) > 1e-6:
            return _unit(u)


@dataclass
class _Segment:
    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    radius: float
    children: list = field(default_factory=list)


def _coronary_tree(rng, spec: PhantomSpec, start, heading, length, aorta_pts, aorta_r):
    n = spec.grid_size
    c_lo, c_hi = spec.coronary_radius_range
    depth = spec.branch_depth

    def radius_at(gen):
        return c_hi * (c_lo / c_hi) ** (gen / depth) if depth else c_hi

    def clamp(p, r):
        return np.clip(p, r + 1, n - r - 2)

    def clear_of_aorta(pts, r):
        d = np.linalg.norm(pts[:, None, :] - aorta_pts[None, ::4, :], axis=-1).min(axis=1)
        return bool((d > aorta_r + r + 1.5).all())

    def grow(p0, direction, length, gen, check_aorta):
        r = radius_at(gen)
        seg = None
        # up to four deterministic attempts to keep clear of the aorta
        for attempt in range(4):
            d = direction if attempt == 0 else _unit(_rotate(direction, _perpendicular(direction, rng), rng.uniform(0.3, 0.9)))
            p2 = clamp(p0 + d * length, r)
            if np.linalg.norm(p2 - p0) < 2.0:
                continue
            bend = _perpendicular(d, rng) * rng.uniform(-0.2, 0.2) * length
            p1 = clamp((p0 + p2) / 2 + bend, r)
            cand = _Segment(p0, p1, p2, r)
            if not check_aorta or clear_of_aorta(_sample_tube(p0, p1, p2, 1.0)[1:], r):
                seg = cand
                break
        if seg is None:
            return None
        if gen < depth:
            tangent = _unit(seg.p2 - seg.p1) if np.linalg.norm(seg.p2 - seg.p1) > 1e-6 else d
            plane_axis = _perpendicular(tangent, rng)
            for sign in (-1.0, 1.0):
                angle = sign * rng.uniform(math.radians(25), math.radians(45))
                child = grow(seg.p2, _unit(_rotate(tangent, plane_axis, angle)), length * 0.7, gen + 1, True)
                if child is not None:
                    seg.children.append(child)
        return seg

    return grow(start, heading, length, 0, False)


def _walk(seg):
    if seg is None:
        return
    yield seg
    for c in seg.children:
        yield from _walk(c)


def generate_phantom(spec: PhantomSpec) -> Tuple[Volume, LabelMask]:
    """Render one phantom: a thick curved aorta (label 1) with two bifurcating
    coronary trees (label 2) rooted on its wall.

    Geometry, then noise, are drawn from one PCG64 stream seeded by
    ``spec.seed`` so output is bit-reproducible.
    """
    rng = np.random.default_rng(int(spec.seed))
    n = spec.grid_size
    R = rng.uniform(*spec.aorta_radius_range)
    lo, hi = R + 1, n - R - 2

    # aorta: quadratic Bezier running the length of the depth axis with a lateral arc
    centre = rng.uniform(0.4 * n, 0.6 * n, size=2)
    a0 = np.array([lo, *centre])
    a2 = np.array([hi, *(centre + rng.uniform(-n / 10, n / 10, size=2))])
    a1 = (a0 + a2) / 2 + np.array([0.0, *rng.uniform(-n / 8, n / 8, size=2)])
    a0, a1, a2 = (np.clip(p, lo, hi) for p in (a0, a1, a2))
    aorta_pts = _sample_tube(a0, a1, a2)
    aorta = np.zeros((n, n, n), dtype=bool)
    _stamp(aorta, aorta_pts, R)

    coronary = np.zeros_like(aorta)
    phi = rng.uniform(0, 2 * math.pi)
    for k in range(2):
        t0 = rng.uniform(0.25, 0.45)
        i = int(round(t0 * (len(aorta_pts) - 1)))
        c = aorta_pts[i]
        tangent = _unit(aorta_pts[min(i + 1, len(aorta_pts) - 1)] - aorta_pts[max(i - 1, 0)])
        if k == 0:
            ref = _perpendicular(tangent, rng)
        out = _unit(_rotate(ref, tangent, phi + k * math.pi + rng.uniform(-0.5, 0.5)))
        heading = _unit(out + tangent * rng.uniform(0.2, 0.6))
        r0 = spec.coronary_radius_range[1]
        start = c + out * (R - 0.5 * r0)
        root = _coronary_tree(rng, spec, start, heading, rng.uniform(0.25, 0.35) * n, aorta_pts, R)
        for seg in _walk(root):
            _stamp(coronary, _sample_tube(seg.p0, seg.p1, seg.p2), seg.radius)

    labels = np.zeros((n, n, n), dtype=np.uint8)
    labels[coronary] = CORONARY
    labels[aorta] = AORTA
    _keep_largest_coronary(labels)

    image = np.where(labels > 0, spec.foreground_intensity, spec.background_intensity)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    origin = (0.0, 0.0, 0.0)
    return Volume(image.astype(np.float32), spec.spacing, origin), LabelMask(labels, spec.spacing)


def _keep_largest_coronary(labels: np.ndarray) -> None:
    from scipy import ndimage

    comp, count = ndimage.label(labels == CORONARY, structure=np.ones((3, 3, 3), bool))
    if count <= 1:
        return
    sizes = np.bincount(comp.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    labels[(comp > 0) & (comp != keep)] = BACKGROUND


def iter_phantom_specs(base: PhantomSpec, count: int) -> Iterator[PhantomSpec]:
    """Per-case specs with consecutive seeds starting at ``base.seed``."""
    from dataclasses import replace

    for i in range(count):
        yield replace(base, seed=int(base.seed) + i)
