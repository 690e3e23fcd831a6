"""Acceptance criteria, one test each; results are summarised at the end of the run."""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
import torch

import gradcheck
import oracles
from attention_oracle import dense_block
from conftest import bfs_components
from ctnvessel import cli
from ctnvessel.config import to_dict
from ctnvessel.fusion import CTN, CtnConfig, FusionConfig
from ctnvessel.metrics import BinaryMask, assd, dice, evaluate, skeleton_metrics, write_cohort_report
from ctnvessel.metrics.skeleton import skeletonize
from ctnvessel.swin3d import SwinBlock3D, SwinConfig, SwinTransformer3D
from ctnvessel.train import TrainConfig, init_state, lr_at, predict_labels, prepare_pair, train_step
from ctnvessel.unet3d import UnetConfig, UNet3D
from ctnvessel.volio import PhantomSpec, generate_phantom

ONE_SIXTY_FOUR = (64, 64, 64)


def toy_ctn_config(patch=4, size=64, **fusion) -> CtnConfig:
    return CtnConfig(
        unet=UnetConfig(stage_channels=(8, 16, 32, 64)),
        swin=SwinConfig(patch_size=(patch,) * 3, stage_channels=(8, 16, 32, 64),
                        stage_depths=(2, 2, 2, 2), num_heads=(1, 2, 4, 8)),
        fusion=FusionConfig(**fusion),
        input_size=(size,) * 3,
    )


def test_attention_matches_dense_oracle(criterion):
    with criterion("attention oracle: 8^3 tokens, window 4^3, W-MSA and SW-MSA within 1e-5, < 10 s") as c:
        t0 = time.perf_counter()
        errs = []
        for shifted in (False, True):
            torch.manual_seed(int(shifted))
            block = SwinBlock3D(16, 2, (4, 4, 4), shifted=shifted).double()
            with torch.no_grad():
                for p in block.parameters():
                    p.copy_(torch.randn_like(p) * 0.3)
                x = torch.randn(1, 8, 8, 8, 16, dtype=torch.float64)
                ref = dense_block(block, x, (2, 2, 2) if shifted else (0, 0, 0))
                errs.append((block(x) - ref).abs().max().item())
        took = time.perf_counter() - t0
        c.detail = f"max-abs W={errs[0]:.2e} SW={errs[1]:.2e}"
        assert max(errs) < 1e-5
        assert took < 10


def test_shape_laws(criterion):
    with criterion("shape laws: tiny Swin channels/depths and the /4../32 law at 256^3 and 64^3") as c:
        cfg = SwinConfig()
        assert cfg.stage_channels == (48, 96, 192, 384)
        assert cfg.stage_depths == (2, 2, 6, 2)
        swin = SwinTransformer3D(cfg)
        assert [len(s.blocks) for s in swin.stages] == [2, 2, 6, 2]
        assert swin.stage_shapes((256, 256, 256)) == [(48, 64, 64, 64), (96, 32, 32, 32), (192, 16, 16, 16), (384, 8, 8, 8)]
        with torch.no_grad():
            outs = swin(torch.randn(1, 1, 64, 64, 64))
        got = [tuple(o.shape[1:]) for o in outs]
        assert got == [(48, 16, 16, 16), (96, 8, 8, 8), (192, 4, 4, 4), (384, 2, 2, 2)]
        assert got == swin.stage_shapes((64, 64, 64))
        c.detail = f"64^3 -> {got}"


def test_reduction_invariants(criterion):
    with criterion("reductions: no fusion and a zeroed Swin branch bit-equal the plain U-Net"):
        torch.manual_seed(0)
        x = torch.randn(1, 1, 64, 64, 64)
        for zero_swin, stages in ((False, ()), (True, (1, 2, 3, 4))):
            ctn = CTN(toy_ctn_config(enabled_stages=stages)).eval()
            unet = UNet3D(ctn.cfg.unet).eval()
            unet.load_state_dict(ctn.unet.state_dict())
            with torch.no_grad():
                if zero_swin:
                    for p in ctn.swin.parameters():
                        p.zero_()
                assert torch.equal(ctn(x), unet(x))


def test_gradient_check(criterion):
    with criterion("gradient check: toy CTN at 16^3, >= 200 sampled parameters, rtol 1e-3 / atol 1e-5, < 5 min") as c:
        t0 = time.perf_counter()
        torch.manual_seed(0)
        # patch 2 so the fourth Swin stage still exists at 16^3
        model = CTN(toy_ctn_config(patch=2, size=16)).double().train()
        x = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
        w = torch.randn(1, 3, 16, 16, 16, dtype=torch.float64)
        entries = gradcheck.sample_entries(model, 240, np.random.default_rng(0))
        res = gradcheck.check(model, gradcheck.weighted_sum_loss(x, w), entries, rtol=1e-3, atol=1e-5)
        took = time.perf_counter() - t0
        c.detail = f"{res.checked} params, {len(res.failures)} failures, max rel {res.max_rel:.1e}"
        assert res.checked >= 200
        assert not res.failures, res.failures[:5]
        assert took < 300


def test_metric_oracles(criterion):
    with criterion("metric oracles: 1000 random 16^3 pairs, DICE/SR/SP exact, ASSD 1e-6, < 2 min") as c:
        rng = np.random.default_rng(2024)
        impl_time = 0.0
        n_assd = 0
        for _ in range(1000):
            s, g = oracles.random_mask(rng), oracles.random_mask(rng)
            spacing = tuple(rng.uniform(0.3, 1.5, 3))
            t0 = time.perf_counter()
            d = dice(s, g)
            sk = skeleton_metrics(s, g)
            a = assd(BinaryMask(s, spacing), BinaryMask(g, spacing)) if s.any() and g.any() else None
            impl_time += time.perf_counter() - t0
            assert d == oracles.dice_oracle(s, g)
            assert (sk.sr, sk.sp) == oracles.skeleton_rates_oracle(s, g, skeletonize(s), skeletonize(g))
            if a is not None:
                n_assd += 1
                assert abs(a - oracles.assd_oracle(s, g, spacing)) < 1e-6
        c.detail = f"metrics {impl_time:.1f}s, {n_assd} ASSD pairs"
        assert impl_time < 120


def test_skeleton_fidelity(criterion):
    with criterion("skeleton fidelity: 50 random tubes r 1-3, 26-connected, within 2 voxels, components kept") as c:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            tube, curve, _ = oracles.random_tube(rng)
            skel = skeletonize(tube)
            assert skel.any()
            assert bfs_components(skel) == bfs_components(tube) == 1
            worst = max(worst, float(oracles.distance_to_curve(np.argwhere(skel), curve).max()))
            assert worst <= 2.0
        c.detail = f"worst distance to centerline {worst:.2f} voxels"


@pytest.mark.slow
def test_overfit_and_comparison(criterion, tmp_path):
    train_data = [generate_phantom(PhantomSpec(seed=s)) for s in range(4)]
    pairs = [prepare_pair(v, m, ONE_SIXTY_FOUR) for v, m in train_data]
    tcfg = TrainConfig(base_lr=3e-3, lr_decay_every=1000, flip_prob=(0, 0, 0), val_fraction=0, seed=0)

    def coronary_dice(model):
        return min(dice((predict_labels(model, x)[0] == 2).numpy(), (y[0] == 2).numpy()) for x, y in pairs)

    def train(model_cfg, steps, stop_at=None):
        torch.manual_seed(0)
        state = init_state(model_cfg, tcfg)
        trace = []
        for step in range(steps):
            x, y = pairs[step % 4]
            train_step(state, x, y, tcfg)
            if (step + 1) % 20 == 0:
                trace.append((step + 1, coronary_dice(state.model)))
                if stop_at is not None and trace[-1][1] >= stop_at:
                    break
        return state.model, trace

    with criterion("overfit: toy CTN on 4 phantoms at 64^3 reaches coronary DICE >= 0.90 within 200 steps") as c:
        ctn, trace = train(toy_ctn_config(), 200, stop_at=0.90)
        c.detail = "trace " + " ".join(f"{s}:{d:.3f}" for s, d in trace)
        assert trace[-1][1] >= 0.90

    with criterion("comparison: baseline vs CTN on 20 test phantoms, all six columns reported") as c:
        baseline, _ = train(toy_ctn_config(enabled_stages=()), trace[-1][0])
        test = [generate_phantom(PhantomSpec(seed=1000 + s)) for s in range(20)]
        summaries = {}
        for name, model in (("baseline", baseline), ("ctn", ctn)):
            rows = []
            for i, (vol, mask) in enumerate(test):
                x, _ = prepare_pair(vol, None, ONE_SIXTY_FOUR)
                pred = predict_labels(model, x)[0].numpy().astype(np.uint8)
                rows.append((f"case_{i:04d}", evaluate(type(mask)(pred, mask.spacing), mask)))
            _, js = write_cohort_report(rows, tmp_path / name)
            summaries[name] = json.loads(js.read_text())["mean"]
        columns = ["DICE(%)", "DICE_A(%)", "DICE_C(%)", "ASSD(mm)", "SP(%)", "SR(%)"]
        c.detail = "; ".join(f"{n} " + " ".join(f"{k}={v:.2f}" for k, v in s.items()) for n, s in summaries.items())
        for s in summaries.values():
            assert list(s) == columns
            assert all(math.isfinite(v) for v in s.values())


def test_ablation_plumbing(criterion, tmp_path, capsys):
    with criterion("ablation plumbing: ablate writes the six-row stage table and the two-row mode table") as c:
        from conftest import SMALL_PHANTOM, toy_model_config

        config = tmp_path / "toy.json"
        config.write_text(json.dumps({
            "phantom": {k: list(v) if isinstance(v, tuple) else v for k, v in SMALL_PHANTOM.items()},
            "data": {"count": 2, "split_fractions": [0.5, 0.0, 0.5]},
            "model": to_dict(toy_model_config()),
            "train": {"epochs": 1, "max_steps": 1, "val_fraction": 0.0},
        }))
        assert cli.main(["gen-data", "-c", str(config), "-o", str(tmp_path / "data")]) == 0
        assert cli.main(["ablate", "-c", str(config), "-o", str(tmp_path / "ab"),
                         "-m", str(tmp_path / "data" / "manifest.jsonl")]) == 0
        capsys.readouterr()
        stages = (tmp_path / "ab" / "ablation_stages.tsv").read_text().splitlines()
        modes = (tmp_path / "ab" / "ablation_modes.tsv").read_text().splitlines()
        marks = [r.split("\t")[1:5] for r in stages[1:]]
        assert len(stages) == 7 and len(modes) == 3
        assert marks == [["-"] * 4, ["x", "x", "x", "-"], ["x", "x", "-", "x"], ["x", "-", "x", "x"],
                         ["-", "x", "x", "x"], ["x"] * 4]
        assert [r.split("\t")[1] for r in modes[1:]] == ["concat", "add"]
        c.detail = f"{len(stages) - 1} stage rows, {len(modes) - 1} mode rows"


def test_schedule_trace(criterion):
    with criterion("schedule: lr_at over 200 epochs is 1e-4/1e-5/1e-6/1e-7 per 50-epoch block, exactly"):
        cfg = TrainConfig()
        trace = [lr_at(e, cfg) for e in range(200)]
        assert trace == [1e-4] * 50 + [1e-5] * 50 + [1e-6] * 50 + [1e-7] * 50
