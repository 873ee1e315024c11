"""Acceptance criteria, one test (or group of tests) per criterion.

Every test records a PASS/FAIL line that ``conftest.pytest_terminal_summary``
prints at the end of the run. Criterion 6 trains the full desk-scale protocol
(about ten minutes on one CPU core).
"""
import itertools
import json
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
import torch

from contseg import cli
from contseg import report as rp
from contseg import strategies as st
from contseg.arch import ArchConfig, build_model, fuse_v1, fuse_v2, group_of, patch_vectors, vit_forward
from contseg.config import build_config, default_config_dict
from contseg.datamodel import Case, SegMask, TaskDataset, Volume
from contseg.errors import UndefinedMetric
from contseg.metrics import DiceMatrix, bwt, dice, fwt, summarize
from contseg.tensorio import read_tensors
from contseg.trainer import ExperimentRecord, FreezeSpec, TrainConfig, run_sequence
from conftest import TINY_UNET, TINY_VIT
from gradcheck import finite_difference_check

RESULTS = []


@contextmanager
def criterion(cid, title):
    entry = {"id": cid, "title": title, "ok": False, "detail": "raised before completion"}
    RESULTS.append(entry)
    entry["detail"] = ""
    try:
        yield entry
    except BaseException as exc:
        entry["detail"] = (entry["detail"] + f" | {type(exc).__name__}: {exc}").strip(" |")[:300]
        raise
    entry["ok"] = True


# ------------------------------------------------------------------ 1


def test_c1_gradient_suite():
    with criterion("1", "loss gradients match central differences (rel err < 1e-4, <= 500 params, < 1 min)") as c:
        t0 = time.perf_counter()
        model = build_model(TINY_UNET, (8, 8), 0).double()
        prev = st.freeze_copy(build_model(TINY_UNET, (8, 8), 7).double())
        n_params = sum(p.numel() for p in model.parameters())
        g = torch.Generator().manual_seed(0)
        x = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
        y = (torch.rand(2, 8, 8, generator=g) > 0.6).long()
        anchor = {n: p.detach() + 0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype) for n, p in model.named_parameters()}
        weights = {n: torch.rand(p.shape, generator=g, dtype=p.dtype) for n, p in model.named_parameters()}
        state = st.StrategyState(anchors=[anchor], fishers=[weights], online_fisher=weights, rwalk_scores=weights)
        errors = {}
        for kind in ("sequential", "ewc", "rwalk", "mib", "pod", "plop"):
            cfg = st.StrategyConfig(kind=kind, lam=0.7, tau=0.5)

            def loss():
                trace, prev_trace = model.trace(x), prev.trace(x)
                target = st.training_targets(cfg, y, prev_trace)
                return st.total_loss(st.seg_loss(trace.logits, target), cfg, model, state, trace, prev_trace)

            errors["seg" if kind == "sequential" else kind] = finite_difference_check(model, loss)[0]
        elapsed = time.perf_counter() - t0
        c["detail"] = f"{n_params} params, max rel err {max(errors.values()):.2e}, {elapsed:.1f}s"
        assert n_params <= 500
        assert all(e < 1e-4 for e in errors.values()), errors
        assert elapsed < 60


# ------------------------------------------------------------------ 2


def brute_force_summary(values, baselines):
    n = len(values)
    bw = [values[n - 1][i] - values[i][i] for i in range(n - 1)]
    fw = [values[i - 1][i] - baselines[i] for i in range(1, n)]
    mean = lambda xs: sum(xs) / len(xs) if xs else None
    return {
        "dice_mean": sum(values[n - 1]) / n,
        "dice_first": values[n - 1][0],
        "dice_last": values[n - 1][n - 1],
        "bwt": bw, "fwt": fw, "mean_bwt": mean(bw), "mean_fwt": mean(fw),
    }


def pixel_dice(a, b):
    inter = size_a = size_b = 0
    for idx in np.ndindex(a.shape):
        size_a += int(a[idx])
        size_b += int(b[idx])
        inter += int(a[idx] and b[idx])
    return 1.0 if size_a + size_b == 0 else 2 * inter / (size_a + size_b)


def test_c2_metric_oracle():
    with criterion("2", "bwt/fwt/summarize and dice match brute-force oracles") as c:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(20):
            n = int(rng.integers(1, 6))
            values = rng.random((n, n)).tolist()
            baselines = rng.random(n).tolist()
            m = DiceMatrix(np.array(values), None)
            ref = brute_force_summary(values, baselines)
            got = summarize(m, baselines).to_dict()
            for key in ("dice_mean", "dice_first", "dice_last"):
                worst = max(worst, abs(got[key] - ref[key]))
            for key in ("bwt", "fwt"):
                assert len(got[key]) == len(ref[key])
                worst = max([worst] + [abs(a - b) for a, b in zip(got[key], ref[key])])
            for key in ("mean_bwt", "mean_fwt"):
                assert (got[key] is None) == (ref[key] is None)
                if ref[key] is not None:
                    worst = max(worst, abs(got[key] - ref[key]))
            for i in range(1, n):
                worst = max(worst, abs(bwt(m, i) - (values[n - 1][i - 1] - values[i - 1][i - 1])))
            for i in range(2, n + 1):
                worst = max(worst, abs(fwt(m, baselines, i) - (values[i - 2][i - 1] - baselines[i - 1])))
        dice_worst = 0.0
        for _ in range(100):
            shape = tuple(int(s) for s in rng.integers(1, 7, size=int(rng.integers(2, 4))))
            a = rng.random(shape) < rng.random()
            b = rng.random(shape) < rng.random()
            dice_worst = max(dice_worst, abs(dice(a, b) - pixel_dice(a, b)))
        c["detail"] = f"max metric diff {worst:.1e}, max dice diff {dice_worst:.1e}"
        assert worst < 1e-12 and dice_worst < 1e-12


# ------------------------------------------------------------------ 3


def test_c3_undefined_endpoints():
    with criterion("3", "bwt(n) and fwt(1) raise UndefinedMetric") as c:
        raised = []
        for n in (1, 2, 3):
            m = DiceMatrix(np.full((n, n), 0.5), None)
            for fn in (lambda: bwt(m, n), lambda: fwt(m, [0.5] * n, 1)):
                try:
                    fn()
                    raised.append(False)
                except UndefinedMetric:
                    raised.append(True)
        c["detail"] = f"{sum(raised)}/{len(raised)} undefined cases raised"
        assert all(raised)


# ------------------------------------------------------------------ 4


def _default_config(tmp_path, **overrides):
    raw = default_config_dict()
    raw["output_dir"] = str(tmp_path)
    for path, value in overrides.items():
        section, key = path.split("__")
        raw[section][key] = value
    return build_config(raw)


@pytest.mark.parametrize("groups", [("vit",), ("unet.encoder", "unet.decoder", "unet.other")], ids=["vit", "unet"])
def test_c4_freeze_contract(tmp_path, groups):
    cid = "4" + ("a" if groups == ("vit",) else "b")
    with criterion(cid, f"freeze {{{','.join(groups)}}}: frozen parameters bit-identical on tasks 2..3") as c:
        cfg = _default_config(tmp_path, train__epochs_per_task=2, freeze__groups=list(groups))
        cli.cmd_train(cfg)
        ckpts = [read_tensors(tmp_path / f"task_{i}" / "model.ckpt")[1] for i in (1, 2, 3)]
        frozen = [n for n in ckpts[0] if group_of(n) in groups]
        trainable = [n for n in ckpts[0] if group_of(n) not in groups]
        same = all(torch.equal(ckpts[0][n], ckpts[k][n]) for n in frozen for k in (1, 2))
        moved = sum(not torch.equal(ckpts[1][n], ckpts[2][n]) for n in trainable)
        c["detail"] = f"{len(frozen)} frozen tensors identical={same}; {moved}/{len(trainable)} trainable tensors moved on task 3"
        assert frozen and same and moved > 0


# ------------------------------------------------------------------ 5


def test_c5_targeted_regularisation():
    with criterion("5", "EWC target=vit/unet gives exactly zero gradients on the other group") as c:
        model = build_model(TINY_VIT, (8, 8), 0).double()
        g = torch.Generator().manual_seed(5)
        state = st.StrategyState(
            anchors=[{n: p.detach() + torch.randn(p.shape, generator=g, dtype=p.dtype) for n, p in model.named_parameters()}],
            fishers=[{n: torch.rand(p.shape, generator=g, dtype=p.dtype) + 0.1 for n, p in model.named_parameters()}],
        )
        leaks = {}
        for target, other in (("vit", "unet"), ("unet", "vit")):
            model.zero_grad(set_to_none=True)
            st.ewc_penalty(model, state, 1.0, target).backward()
            leak = sum(
                float(p.grad.abs().sum()) for n, p in model.named_parameters() if n.startswith(other + ".") and p.grad is not None
            )
            active = sum(
                float(p.grad.abs().sum()) for n, p in model.named_parameters() if n.startswith(target + ".") and p.grad is not None
            )
            leaks[target] = (leak, active)
        c["detail"] = ", ".join(f"target={t}: other-group |grad| {l}, own {a:.3g}" for t, (l, a) in leaks.items())
        assert all(l == 0.0 and a > 0 for l, a in leaks.values())


# ------------------------------------------------------------------ 6

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def trend_runs():
    """Sequential, rehearsal, tuned EWC and plain U-Net runs over three seeds (desk scale, 20 epochs/task)."""
    t0 = time.perf_counter()
    base = build_config(default_config_dict())
    tasks = base.load_tasks()
    arch, train = base.arch, base.train
    plain_arch = ArchConfig(variant="plain-unet", levels=arch.levels, base_channels=arch.base_channels)
    cache = {}
    runs = {"sequential": [], "rehearsal": [], "ewc": [], "plain-unet sequential": []}
    grids = []
    for seed in SEEDS:
        cfg = replace(train, seed=seed)
        # each seed replicates the whole protocol: tune lambda on the inner split, then train
        grid = rp.run_grid(rp.TUNING_GRIDS["ewc"], tasks, arch, cfg)
        ewc_params = rp.select_best(grid)
        grids.append((ewc_params["lambda"], [(p["lambda"], *rp.selection_score(r)) for p, r in grid]))
        runs["sequential"].append(run_sequence(tasks, arch, st.StrategyConfig("sequential"), cfg, baseline_cache=cache))
        runs["rehearsal"].append(run_sequence(tasks, arch, st.StrategyConfig("rehearsal"), cfg, baseline_cache=cache))
        runs["ewc"].append(run_sequence(tasks, arch, st.StrategyConfig.from_dict(ewc_params), cfg, baseline_cache=cache))
        runs["plain-unet sequential"].append(run_sequence(tasks, plain_arch, st.StrategyConfig("sequential"), cfg, baseline_cache=cache))
    means = {
        name: {k: float(np.mean([r.summary[k] for r in recs])) for k in ("mean_bwt", "mean_fwt", "dice_mean", "dice_first", "dice_last")}
        for name, recs in runs.items()
    }
    return {"runs": runs, "means": means, "grids": grids, "elapsed": time.perf_counter() - t0}


def test_c6a_rehearsal_beats_sequential(trend_runs):
    with criterion("6a", "rehearsal mean BWT > sequential mean BWT (3 seeds)") as c:
        m = trend_runs["means"]
        c["detail"] = f"rehearsal {m['rehearsal']['mean_bwt']:+.3f} vs sequential {m['sequential']['mean_bwt']:+.3f}"
        assert m["rehearsal"]["mean_bwt"] > m["sequential"]["mean_bwt"]


def test_c6b_ewc_rigidity(trend_runs):
    with criterion("6b", "tuned EWC: BWT > sequential and dice_last < rehearsal") as c:
        m = trend_runs["means"]
        for seed, (lam, cells) in zip(SEEDS, trend_runs["grids"]):
            print(f"seed {seed} EWC grid (lambda, mean Dice, sigma): {[tuple(round(v, 3) for v in cell) for cell in cells]} -> {lam}")
        c["detail"] = (
            f"selected lambda per seed {[lam for lam, _ in trend_runs['grids']]}; "
            f"BWT {m['ewc']['mean_bwt']:+.3f} vs sequential {m['sequential']['mean_bwt']:+.3f}; "
            f"dice_last {m['ewc']['dice_last']:.3f} vs rehearsal {m['rehearsal']['dice_last']:.3f}"
        )
        assert m["ewc"]["mean_bwt"] > m["sequential"]["mean_bwt"]
        assert m["ewc"]["dice_last"] < m["rehearsal"]["dice_last"]


def test_c6c_radar_side_by_side(trend_runs):
    with criterion("6c", "plain U-Net vs ViT U-Net sequential radar data (gap reported, not asserted)") as c:
        radars = {}
        for name in ("sequential", "plain-unet sequential"):
            per_seed = [rp.emit_radar(r) for r in trend_runs["runs"][name]]
            radars[name] = rp.RadarData(*[float(np.mean([getattr(r, f) for r in per_seed])) for f in rp.RadarData.__dataclass_fields__])
        table = rp.render_radar({"vit-v2 sequential" if k == "sequential" else k: v for k, v in radars.items()})
        print("\n" + table)
        gap = radars["sequential"].dice_mean - radars["plain-unet sequential"].dice_mean
        c["detail"] = (
            f"dice_mean ViT-UNet {radars['sequential'].dice_mean:.3f} vs U-Net {radars['plain-unet sequential'].dice_mean:.3f} "
            f"(gap {gap:+.3f}); protocol time {trend_runs['elapsed'] / 60:.1f} min"
        )
        for r in radars.values():
            assert all(0 <= getattr(r, f) <= 1 for f in ("dice_mean", "dice_first", "dice_last"))
            assert 0 <= r.bwt <= 2 and 0 <= r.fwt <= 2
        assert trend_runs["elapsed"] < 30 * 60


# ------------------------------------------------------------------ 7


def test_c7_architecture_identities():
    with criterion("7", "zero-injection, fuse_v2 zero path, SPT x5, LSA diagonal/rows") as c:
        torch.manual_seed(0)
        cfg = ArchConfig(variant="vit-v2", levels=3, base_channels=4, vit_depth=2, vit_heads=2, vit_dim=16, patch_size=4, lsa=True, spt=True)
        vit_model = build_model(cfg, (16, 16), 1)
        plain = build_model(ArchConfig(variant="plain-unet", levels=3, base_channels=4), (16, 16), 2)
        plain.unet.load_state_dict(vit_model.unet.state_dict())
        x = torch.rand(3, 1, 16, 16)
        inj = (vit_model(x) - plain(x)).abs().max().item()
        with torch.no_grad():
            for p in vit_model.vit.fusion.parameters():
                p.zero_()
        skips = vit_model.unet.encode(x)[0]
        fuse_equal = torch.equal(fuse_v2(skips, vit_model.vit.fusion), fuse_v1(skips))
        fmap = torch.rand(1, 32, 64, 64)
        ratio = patch_vectors(fmap, 8, True).shape[-1] / patch_vectors(fmap, 8, False).shape[-1]
        _, attn = vit_forward(torch.rand(2, 16, 16), vit_model.vit.encoder)
        diag = max(torch.diagonal(a, dim1=-2, dim2=-1).abs().max().item() for a in attn)
        rows = max((a.sum(-1) - 1).abs().max().item() for a in attn)
        c["detail"] = f"injection diff {inj:.1e}, fuse equal {fuse_equal}, SPT ratio {ratio}, LSA diag {diag}, row err {rows:.1e}"
        assert inj < 1e-6 and fuse_equal and ratio == 5 and diag == 0 and rows <= 1e-5


# ------------------------------------------------------------------ 8


def test_c8_determinism(tmp_path):
    with criterion("8", "two identical cmd_train runs: byte-identical checkpoints and record.json") as c:
        outs = []
        for name in ("first", "second"):
            cfg = _default_config(tmp_path / name, train__epochs_per_task=2, strategy__kind="ewc", strategy__lambda=0.2)
            cli.cmd_train(cfg)
            outs.append(tmp_path / name)
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file() and p.name != "config.json")
        differing = []
        for rel in files:
            a, b = (o / rel for o in outs)
            if rel.name == "record.json":
                ra, rb = (json.loads(p.read_text()) for p in (a, b))
                ra.pop("wall_clock_s"), rb.pop("wall_clock_s")
                if ra != rb:
                    differing.append(str(rel))
            elif a.read_bytes() != b.read_bytes():
                differing.append(str(rel))
        c["detail"] = f"{len(files)} files compared, differing: {differing or 'none'}"
        assert len([f for f in files if f.suffix == ".ckpt"]) == 9
        assert not differing


# ------------------------------------------------------------------ 9


def test_c9_rehearsal_arithmetic():
    with criterion("9", "replay 25% of 216 and 40 previous train cases: 208 + 54 + 10") as c:
        vol, mask = Volume(np.zeros((1, 2, 2), np.float32)), SegMask(np.zeros((1, 2, 2)))
        ds = lambda name, n: TaskDataset(name, tuple(Case(f"{name}{i}", vol, mask) for i in range(n)))
        mixed = st.rehearsal_mix(ds("cur", 208), [("first", ds("h", 216)), ("second", ds("d", 40))], 0.25, seed=0)
        c["detail"] = f"mixed size {len(mixed)}"
        assert len(mixed) == 208 + 54 + 10


# ------------------------------------------------------------------ 10


def _fixture(mean, sigma):
    return ExperimentRecord({}, ["a", "b"], {}, [[mean] * 2] * 2, [[sigma] * 2] * 2, [], None, None, {})


def test_c10_grid_protocol(tmp_path):
    with criterion("10", "cmd_grid runs the tuning value lists; select_best argmax with lowest-sigma ties") as c:
        raw = {
            "arch": {"variant": "vit-v2", "levels": 3, "base_channels": 4, "vit_depth": 1, "vit_heads": 2, "vit_dim": 8, "patch_size": 4},
            "train": {"batch_size": 4},
            "tasks": [
                {"name": "a", "n_cases": 4, "shape": [8, 8, 8], "seed": 1},
                {"name": "b", "n_cases": 4, "shape": [8, 8, 8], "seed": 2, "shift": {"contrast_gamma": 1.5}},
            ],
            "output_dir": str(tmp_path),
        }
        cfg = build_config(raw)
        ran = {}
        for method, spec in rp.TUNING_GRIDS.items():
            best = cli.cmd_grid(cfg, spec)
            cells = [cell["params"] for cell in best["cells"]]
            ran[method] = [p["lambda"] for p in cells]
            assert ran[method] == list(spec.values)
            assert all(all(p[k] == v for k, v in spec.fixed.items()) for p in cells)
            assert all(p["kind"] == method for p in cells)
            assert best["best"] == cells[best["best_index"]]
        ties = [_fixture(0.8, 0.05), _fixture(0.8, 0.02), _fixture(0.7, 0.0)]
        tie_ok = rp.best_index(ties) == 1
        perm_ok = all(
            rp.select_best([({"k": k}, ties[k]) for k in order])["k"] == 1 for order in itertools.permutations(range(3))
        )
        argmax_ok = rp.best_index([_fixture(m, 0.0) for m in (0.7, 0.8, 0.75)]) == 1
        c["detail"] = f"values run {ran}; tie-break ok={tie_ok}, order-invariant={perm_ok}, argmax ok={argmax_ok}"
        assert tie_ok and perm_ok and argmax_ok
