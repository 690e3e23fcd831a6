from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import bfs_components
from ctnvessel.volio import (
    AORTA,
    CORONARY,
    LabelMask,
    ManifestRecord,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    generate_phantom,
    header_path,
    label_path_for,
    payload_path,
    read_manifest,
    read_volume,
    resize_mask,
    resize_volume,
    write_manifest,
    write_volume,
)


# -- file format -------------------------------------------------------------


def _write_raw(tmp_path, shape, nbytes, dtype="float32"):
    base = tmp_path / "v"
    header_path(base).write_text(json.dumps(
        {"shape": shape, "dtype": dtype, "spacing": [1, 1, 1], "origin": [0, 0, 0], "byte_order": "little"}))
    payload_path(base).write_bytes(b"\0" * nbytes)
    return header_path(base)


def test_header_and_payload_sizes_agree(tmp_path):
    vol, mask = read_volume(_write_raw(tmp_path, [4, 4, 4], 256))
    assert vol.shape == (4, 4, 4) and mask is None


def test_short_payload_is_a_shape_mismatch(tmp_path):
    with pytest.raises(VolumeFormatError, match="256"):
        read_volume(_write_raw(tmp_path, [4, 4, 4], 128))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "nothing.hdr.json")


def test_label_values_are_validated(tmp_path):
    base = tmp_path / "v"
    write_volume(Volume(np.zeros((2, 2, 2))), None, base)
    lbl = label_path_for(base)
    header_path(lbl).write_text(json.dumps({"shape": [2, 2, 2], "dtype": "uint8", "spacing": [1, 1, 1],
                                            "origin": [0, 0, 0], "byte_order": "little"}))
    payload_path(lbl).write_bytes(bytes([0, 1, 2, 3, 0, 0, 0, 0]))
    with pytest.raises(VolumeFormatError, match="outside"):
        read_volume(base)


def test_zero_volume_payload(tmp_path):
    hdr = write_volume(Volume(np.zeros((8, 8, 8))), None, tmp_path / "z")
    raw = payload_path(hdr).read_bytes()
    assert len(raw) == 8 * 8 * 8 * 4 and set(raw) == {0}


def test_spacing_is_recorded_exactly(tmp_path):
    hdr = write_volume(Volume(np.zeros((2, 2, 2)), spacing=(0.5, 0.5, 0.5)), None, tmp_path / "s")
    header = json.loads(hdr.read_text())
    assert header["spacing"] == [0.5, 0.5, 0.5]
    assert header["byte_order"] == "little" and header["dtype"] == "float32"


def test_random_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.normal(size=(8, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 3, size=(8, 8, 8)).astype(np.uint8)
    v = Volume(data, spacing=(0.7, 0.8, 1.9), origin=(-3.0, 2.5, 11.0))
    write_volume(v, LabelMask(labels, v.spacing), tmp_path / "r")
    v2, m2 = read_volume(tmp_path / "r.hdr.json")
    assert v2.data.tobytes() == data.tobytes()
    assert np.array_equal(m2.data, labels)
    assert v2.spacing == v.spacing and v2.origin == v.origin


def test_phantom_round_trip(tmp_path):
    v, m = generate_phantom(PhantomSpec(seed=7, grid_size=32, aorta_radius_range=(3, 4), coronary_radius_range=(1, 1.5)))
    write_volume(v, m, tmp_path / "p")
    v2, m2 = read_volume(tmp_path / "p")
    assert np.array_equal(v.data, v2.data) and np.array_equal(m.data, m2.data)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "x"
    write_volume(Volume(data), None, path)
    assert read_volume(path)[0].data.tobytes() == data.tobytes()


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))


def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord("a.hdr.json", "a_label.hdr.json", "train"),
            ManifestRecord("b.hdr.json", "b_label.hdr.json", "test")]
    write_manifest(recs, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert [r.split for r in back] == ["train", "test"]
    assert back[0].image == str(tmp_path / "a.hdr.json")
    with pytest.raises(ValueError):
        ManifestRecord("a", "b", "holdout")


# -- resizing ------------------------------------------------------------------


def test_identity_resize(rng):
    v = Volume(rng.normal(size=(64, 64, 64)))
    assert np.array_equal(resize_volume(v, (64, 64, 64)).data, v.data)


@pytest.mark.parametrize("target", [(3, 5, 7), (16, 1, 9), (20, 20, 20)])
def test_constant_resize(target):
    out = resize_volume(Volume(np.full((6, 8, 10), 2.5)), target)
    assert out.shape == target and np.all(out.data == np.float32(2.5))


def test_ramp_upsample_matches_analytic():
    n = 8
    ramp = np.broadcast_to(np.arange(n, dtype=np.float32)[:, None, None], (n, 4, 4))
    out = resize_volume(Volume(ramp), (2 * n, 4, 4))
    # output voxel j sits at input coordinate (j + 1/2)/2 - 1/2, clamped to the sampled range
    expected = np.clip((np.arange(2 * n) + 0.5) / 2 - 0.5, 0, n - 1)
    assert np.abs(out.data[:, 2, 1] - expected).max() < 1e-5
    assert np.allclose(out.spacing, (0.5, 1, 1))
    # physical extent is preserved
    assert np.isclose(out.origin[0] - out.spacing[0] / 2, -0.5)


@given(hnp.arrays(np.float32, (5, 4, 6), elements=st.floats(-100, 100, width=32)),
       st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)))
def test_resize_stays_within_bounds(data, target):
    out = resize_volume(Volume(data), target).data
    assert out.min() >= data.min() - 1e-6 and out.max() <= data.max() + 1e-6


def test_resize_rejects_bad_target():
    with pytest.raises(ValueError):
        resize_volume(Volume(np.zeros((2, 2, 2))), (0, 2, 2))
    with pytest.raises(ValueError):
        resize_mask(LabelMask(np.zeros((2, 2, 2))), (2, -1, 2))


def _nearest_oracle(data, target):
    out = np.empty(target, dtype=data.dtype)
    for z in range(target[0]):
        for y in range(target[1]):
            for x in range(target[2]):
                # the source voxel whose extent contains the output voxel centre
                src = [min(int((j + 0.5) * n / t), n - 1) for j, n, t in zip((z, y, x), data.shape, target)]
                out[z, y, x] = data[tuple(src)]
    return out


def test_checkerboard_downsample_matches_oracle():
    idx = np.indices((8, 8, 8)).sum(0)
    board = np.where(idx % 2 == 0, 1, 2).astype(np.uint8)
    out = resize_mask(LabelMask(board), (4, 4, 4))
    assert np.array_equal(out.data, _nearest_oracle(board, (4, 4, 4)))


@given(hnp.arrays(np.uint8, (5, 3, 4), elements=st.integers(0, 2)),
       st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8)))
def test_nearest_property(data, target):
    out = resize_mask(LabelMask(data), target)
    assert np.array_equal(out.data, _nearest_oracle(data, target))
    assert set(np.unique(out.data)) <= {0, 1, 2}


def test_mask_identity_and_single_label():
    m = LabelMask(np.random.default_rng(0).integers(0, 3, (6, 6, 6)))
    assert np.array_equal(resize_mask(m, (6, 6, 6)).data, m.data)
    assert np.all(resize_mask(LabelMask(np.full((5, 5, 5), 2)), (9, 3, 7)).data == 2)


# -- phantoms --------------------------------------------------------------------


def test_phantom_determinism():
    spec = PhantomSpec(seed=3)
    (v1, m1), (v2, m2) = generate_phantom(spec), generate_phantom(spec)
    assert v1.data.tobytes() == v2.data.tobytes() and m1.data.tobytes() == m2.data.tobytes()
    v3, _ = generate_phantom(PhantomSpec(seed=4))
    assert not np.array_equal(v1.data, v3.data)


def test_zero_noise_intensities_equal_class_means():
    v, m = generate_phantom(PhantomSpec(seed=2, noise_sigma=0.0, foreground_intensity=3.0, background_intensity=-1.0))
    assert np.all(v.data[m.data > 0] == 3.0) and np.all(v.data[m.data == 0] == -1.0)


def test_coronary_is_one_component_by_flood_fill():
    _, m = generate_phantom(PhantomSpec(seed=1, grid_size=64, branch_depth=3))
    assert bfs_components(m.data == CORONARY) == 1


@pytest.mark.parametrize("seed", range(4))
def test_phantom_structure(seed):
    _, m = generate_phantom(PhantomSpec(seed=seed))
    aorta, cor = m.data == AORTA, m.data == CORONARY
    assert aorta.mean() > cor.mean() > 0
    # the coronary tree touches the aorta
    grown = np.zeros_like(aorta)
    for axis in range(3):
        for shift in (-1, 1):
            grown |= np.roll(aorta, shift, axis)
    assert (grown & cor).any()


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(aorta_radius_range=(2, 4))
    with pytest.raises(ValueError):
        PhantomSpec(coronary_radius_range=(0.5, 1))
    with pytest.raises(ValueError, match="too large"):
        PhantomSpec(grid_size=32, aorta_radius_range=(6, 8))
