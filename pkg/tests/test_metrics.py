import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as hst

from contseg.arch import ArchConfig, build_model
from contseg.errors import NoViTComponent, OutOfRange, ShapeMismatch, UndefinedMetric
from contseg.metrics import (
    DiceMatrix,
    bwt,
    dice,
    extract_attention,
    fwt,
    normalize_for_plot,
    read_dice_csv,
    read_pgm,
    summarize,
    write_dice_csv,
    write_pgm,
)


def test_dice_hand_value():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, :4] = True
    b[0, 1:3] = True
    inter = sum(1 for p in itertools.product(range(4), range(4)) if a[p] and b[p])
    assert inter == 2
    assert dice(a, b) == pytest.approx(4 / 6)


def test_dice_trivial_cases():
    a = np.eye(3, dtype=bool)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(3), np.zeros(3)) == 1.0
    with pytest.raises(ShapeMismatch):
        dice(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(seed=hst.integers(0, 2**32 - 1))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 6)) > 0.5, rng.random((5, 6)) > 0.3
    assert dice(a, b) == dice(b, a)
    if a.any():
        assert dice(a, a) == 1.0


def test_bwt_fwt_examples():
    m = DiceMatrix(np.array([[0.9, 0.3], [0.8, 0.95]]), None)
    assert bwt(m, 1) == pytest.approx(-0.10)
    assert fwt(m, [0.9, 0.9], 2) == pytest.approx(-0.60)
    same = DiceMatrix(np.array([[0.9, 0.5], [0.9, 0.7]]), None)
    assert bwt(same, 1) == 0.0
    assert fwt(same, [0.9, 0.5], 2) == 0.0


@pytest.mark.parametrize("n", [1, 2, 3])
def test_undefined_endpoints(n):
    m = DiceMatrix(np.full((n, n), 0.5), None)
    with pytest.raises(UndefinedMetric):
        bwt(m, n)
    with pytest.raises(UndefinedMetric):
        fwt(m, [0.5] * n, 1)


def test_summarize_final_row():
    v = np.array([[0.9, 0.1, 0.1], [0.5, 0.9, 0.2], [0.2, 0.5, 0.8]])
    s = summarize(DiceMatrix(v, None), [1.0, 0.5, 0.5])
    assert (s.dice_mean, s.dice_first, s.dice_last) == pytest.approx((0.5, 0.2, 0.8))
    # hand computation: bwt = (0.2-0.9, 0.5-0.9); fwt = (0.1-0.5, 0.2-0.5)
    assert s.bwt == pytest.approx([-0.7, -0.4])
    assert s.fwt == pytest.approx([-0.4, -0.3])
    assert s.mean_bwt == pytest.approx(-0.55) and s.mean_fwt == pytest.approx(-0.35)


def test_summarize_single_task():
    s = summarize(DiceMatrix(np.array([[0.7]]), None), [0.7])
    assert s.dice_mean == s.dice_first == s.dice_last == 0.7
    assert s.bwt == [] and s.fwt == [] and s.mean_bwt is None


def test_normalize_for_plot():
    assert normalize_for_plot(-0.2) == pytest.approx(0.8)
    assert normalize_for_plot(0) == 1.0 and normalize_for_plot(1) == 2.0
    with pytest.raises(OutOfRange):
        normalize_for_plot(1.5)


@given(hst.floats(-1, 1))
def test_normalize_bijection(v):
    assert normalize_for_plot(v) - 1.0 == pytest.approx(v, abs=1e-15)


def test_dice_csv_round_trip(tmp_path, rng):
    m = DiceMatrix(rng.random((3, 3)), rng.random((3, 3)), ["a", "b", "c"])
    back = read_dice_csv(write_dice_csv(tmp_path / "d.csv", m))
    assert np.array_equal(back.values, m.values) and np.array_equal(back.std, m.std)
    assert back.task_names == ["a", "b", "c"]


def test_pgm_round_trip(tmp_path):
    grid = np.linspace(0, 1, 12).reshape(3, 4)
    pixels = read_pgm(write_pgm(tmp_path / "a.pgm", grid))
    assert pixels.shape == (3, 4) and pixels[0, 0] == 0 and pixels[-1, -1] == 255


def test_attention_shape_and_defaults(tiny_vit):
    before = {n: p.clone() for n, p in tiny_vit.state_dict().items()}
    amap = extract_attention(tiny_vit, np.random.default_rng(0).random((8, 8)))
    assert amap.grid.shape == (8, 8)
    assert amap.layer == 0 and amap.head == 1
    assert np.isfinite(amap.grid).all() and amap.grid.min() >= 0 and amap.grid.max() <= 1
    assert all(torch.equal(before[n], p) for n, p in tiny_vit.state_dict().items())


def test_attention_on_64_pixel_grid():
    cfg = ArchConfig(variant="vit-v1", levels=2, base_channels=2, vit_depth=1, vit_heads=1, vit_dim=4, patch_size=8)
    model = build_model(cfg, (64, 64), seed=0)
    assert model.vit.grid == (8, 8)
    assert extract_attention(model, np.zeros((64, 64))).grid.shape == (64, 64)


def test_uniform_attention_gives_half(tiny_vit):
    with torch.no_grad():
        for blk in tiny_vit.vit.encoder.blocks:
            blk.attn.qkv.weight.zero_()
            blk.attn.qkv.bias.zero_()
    amap = extract_attention(tiny_vit, np.random.default_rng(0).random((8, 8)))
    assert np.all(amap.grid == 0.5)


def test_attention_needs_vit():
    model = build_model(ArchConfig(variant="plain-unet", levels=2, base_channels=2), (8, 8), 0)
    with pytest.raises(NoViTComponent):
        extract_attention(model, np.zeros((8, 8)))
