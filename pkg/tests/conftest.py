from __future__ import annotations

import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, os.cpu_count() or 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def bfs_components(mask: np.ndarray) -> int:
    """Count 26-connected components with an explicit flood fill."""
    seen = np.zeros(mask.shape, dtype=bool)
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        stack = [start]
        while stack:
            z, y, x = stack.pop()
            for dz, dy, dx in offsets:
                p = (z + dz, y + dy, x + dx)
                if all(0 <= p[i] < mask.shape[i] for i in range(3)) and mask[p] and not seen[p]:
                    seen[p] = True
                    stack.append(p)
    return count


def toy_model_config(size=32, **fusion):
    """Smallest CTN that still has four stages on both branches."""
    from ctnvessel.fusion import CtnConfig, FusionConfig
    from ctnvessel.swin3d import SwinConfig
    from ctnvessel.unet3d import UnetConfig

    return CtnConfig(
        unet=UnetConfig(stage_channels=(4, 8, 12, 16)),
        swin=SwinConfig(stage_channels=(4, 8, 16, 32), stage_depths=(2, 2, 2, 2), num_heads=(1, 1, 2, 4)),
        fusion=FusionConfig(**fusion),
        input_size=(size, size, size),
    )


SMALL_PHANTOM = dict(grid_size=32, aorta_radius_range=(3.0, 4.0), coronary_radius_range=(1.0, 1.5))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four 32^3 phantoms: two train, one val, one test."""
    from ctnvessel.volio import ManifestRecord, PhantomSpec, generate_phantom, label_path_for, write_manifest, write_volume

    root = tmp_path_factory.mktemp("phantoms")
    records = []
    for i, split in enumerate(["train", "train", "val", "test"]):
        v, m = generate_phantom(PhantomSpec(seed=i, **SMALL_PHANTOM))
        base = root / f"case_{i}"
        write_volume(v, m, base)
        records.append(ManifestRecord(f"case_{i}.hdr.json", label_path_for(base).name, split))
    return write_manifest(records, root / "manifest.jsonl")


# -- acceptance summary ----------------------------------------------------------------------

ACCEPTANCE_RESULTS: list = []


class Criterion:
    """Context manager that records one acceptance line, pass or fail, with a detail string."""

    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def __enter__(self):
        import time

        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        took = time.perf_counter() - self._t0
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{status}  {self.name}  [{took:.1f}s]"
        if self.detail:
            line += f"  {self.detail}"
        if exc_type is not None:
            line += f"  ({exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
