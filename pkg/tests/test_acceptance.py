"""Acceptance suite: one group of tests per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; a plain ``pytest`` run repeats them in an "acceptance criteria"
section of the terminal summary.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from ddpnet import cli
from ddpnet.analysis import benchmark_fps, count_flops, count_macs, count_params, shape_infer
from ddpnet.checkpoint import encode, load_checkpoint, save_checkpoint
from ddpnet.data import ConfusionMatrix, dataset_mean
from ddpnet.gradcheck import TOLERANCE, check_model, run_suite
from ddpnet.layers import Context
from ddpnet.model import build_ddpnet, preset_spec, with_dpm_form
from ddpnet.tensor import Tensor
from ddpnet.training import (
    AugmentConfig,
    ScheduleConfig,
    TrainConfig,
    evaluate,
    fit,
    lr_at,
)

TARGET_PARAMS = 2.52e6
TARGET_PARAMS_CAMVID = 1.1e6
TARGET_FLOPS = {(768, 1536): 13.2e9, (1024, 2048): 23.5e9}

# Backbone output shapes at 1024x2048, hand-derived from the stem (stride 4, 64 maps),
# growth 32 with 2/4/8/8 layers, and a 2x2 pool after every transition but the last.
BACKBONE_ROWS = [
    ("initial", (1, 64, 256, 512)),
    ("stage1.block", (1, 128, 256, 512)),
    ("stage1.transition", (1, 128, 128, 256)),
    ("stage2.block", (1, 256, 128, 256)),
    ("stage2.transition", (1, 256, 64, 128)),
    ("stage3.block", (1, 512, 64, 128)),
    ("stage3.transition", (1, 512, 32, 64)),
    ("stage4.block", (1, 768, 32, 64)),
    ("stage4.transition", (1, 768, 32, 64)),
]


def report(n: int, ok: bool, detail: str) -> None:
    """Fold one check into criterion ``n`` and print its running status."""
    prev_ok, prev_detail = ACCEPTANCE.get(n, (True, ""))
    ok = prev_ok and ok
    detail = f"{prev_detail}; {detail}" if prev_detail else detail
    ACCEPTANCE[n] = (ok, detail)
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def rel(a: float, b: float) -> float:
    return (a - b) / b


def parse_totals(text: str) -> tuple[int, int]:
    """(params, flops) from the 'total' row of a describe report."""
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] == "total":
            return int(parts[1].replace(",", "")), int(parts[2].replace(",", ""))
    raise AssertionError(f"no total row in:\n{text}")


# ------------------------------------------------------------ 1. shape fidelity


def test_criterion_1_static_shapes():
    model = build_ddpnet(preset_spec("cityscapes"), rng=0)
    t0 = time.perf_counter()
    rows = model.backbone.row_shapes((1, 3, 1024, 2048))
    logits = shape_infer(model, (1, 3, 1024, 2048))[-1][1]
    elapsed = time.perf_counter() - t0
    got = [(name, tuple(s)) for name, s in rows]
    ok = got == BACKBONE_ROWS and tuple(logits) == (1, 19, 1024, 2048) and elapsed < 1.0
    report(1, ok, f"static: {len(got)} backbone rows match, logits {tuple(logits)}, {elapsed * 1e3:.0f} ms")
    assert got == BACKBONE_ROWS
    assert tuple(logits) == (1, 19, 1024, 2048)
    assert elapsed < 1.0


def test_criterion_1_executed_shapes():
    model = build_ddpnet(preset_spec("cityscapes"), rng=0)
    model.set_mode("eval")
    x = Tensor.wrap(np.random.default_rng(0).random((1, 3, 1024, 2048), dtype=np.float32))
    t0 = time.perf_counter()
    rows = model.backbone.rows(x, Context())
    elapsed = time.perf_counter() - t0
    got = [(name, t.shape) for name, t in rows]
    del rows
    t0 = time.perf_counter()
    logits = model.forward(x, "eval")
    full = time.perf_counter() - t0
    ok = got == BACKBONE_ROWS and logits.shape == (1, 19, 1024, 2048) and full < 120
    report(1, ok, f"executed: backbone {elapsed:.1f} s, full forward {full:.1f} s, logits {logits.shape}")
    assert got == BACKBONE_ROWS
    assert logits.shape == (1, 19, 1024, 2048)
    assert full < 120


# ------------------------------------------------------------ 2. parameter count


@pytest.mark.parametrize("preset, target, band", [
    ("cityscapes", TARGET_PARAMS, 0.15),
    ("calibrated", TARGET_PARAMS, 0.05),
    ("camvid", TARGET_PARAMS_CAMVID, 0.15),
])
def test_criterion_2_params(preset, target, band, capsys):
    assert cli.main(["describe", "--preset", preset]) == 0
    params, _ = parse_totals(capsys.readouterr().out)
    assert params == count_params(build_ddpnet(preset_spec(preset), rng=0))
    err = rel(params, target)
    ok = abs(err) <= band
    with capsys.disabled():
        report(2, ok, f"{preset} {params:,} ({err:+.1%}, band ±{band:.0%})")
    assert ok


# ---------------------------------------------------------------- 3. FLOPs


def test_criterion_3_area_linearity():
    model = build_ddpnet(preset_spec("cityscapes"), rng=0)
    ratio = count_flops(model, (1, 3, 1024, 2048)) / count_flops(model, (1, 3, 768, 1536))
    err = abs(ratio / (16 / 9) - 1)
    report(3, err < 1e-9, f"area ratio {ratio:.12f} vs 16/9 (rel err {err:.1e})")
    assert err < 1e-9


@pytest.mark.xfail(strict=True, reason="2xMAC totals are about twice the reported figures; see the decisions ledger")
@pytest.mark.parametrize("preset", ["cityscapes", "calibrated"])
def test_criterion_3_flops_band(preset):
    model = build_ddpnet(preset_spec(preset), rng=0)
    parts, ok = [], True
    for hw, target in TARGET_FLOPS.items():
        flops = count_flops(model, (1, 3, *hw))
        macs = count_macs(model, (1, 3, *hw))
        ok = ok and abs(rel(flops, target)) <= 0.15
        parts.append(f"{hw[0]}x{hw[1]} {flops / 1e9:.2f}G ({rel(flops, target):+.0%}; MACs {macs / 1e9:.2f}G, "
                     f"{rel(macs, target):+.1%})")
    report(3, ok, f"{preset} 2xMAC " + ", ".join(parts))
    assert ok


# --------------------------------------------------------- 4. DPM equivalence


def test_criterion_4_dpm_forms_agree(tiny_spec):
    model_c = build_ddpnet(tiny_spec, rng=3)
    model_b = with_dpm_form(model_c, "b")
    assert model_c.spec.dpm_form == "c" and model_b.spec.dpm_form == "b"
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        x = Tensor.wrap(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        yc = model_c.forward(x, "eval").data
        yb = model_b.forward(x, "eval").data
        worst = max(worst, float(np.abs(yc - yb).max() / np.abs(yc).max()))
    report(4, worst <= 1e-5, f"100 inputs, worst relative difference {worst:.2e}")
    assert worst <= 1e-5


# ------------------------------------------------------ 5. gradient certification


def test_criterion_5_gradients():
    t0 = time.perf_counter()
    ops_err = run_suite(seed=0, trials=20)
    model_err = check_model(seed=0)
    elapsed = time.perf_counter() - t0
    worst_op = max(ops_err, key=ops_err.get)
    worst_model = max(model_err.values())
    ok = max(ops_err.values()) < TOLERANCE and worst_model < TOLERANCE and elapsed < 300
    report(5, ok, f"{len(ops_err)} operators (worst {worst_op} {ops_err[worst_op]:.1e}), "
                  f"tiny network {len(model_err)} tensors (worst {worst_model:.1e}), {elapsed:.0f} s")
    assert max(ops_err.values()) < TOLERANCE
    assert worst_model < TOLERANCE


# ----------------------------------------------------------------- 6. schedule


def test_criterion_6_schedule():
    cfg = ScheduleConfig(base_lr=5e-4, epochs=350, warmup=0)
    points = (lr_at(0, cfg), lr_at(175, cfg), lr_at(350, cfg))
    warm = ScheduleConfig(base_lr=5e-4, epochs=350, warmup=5)
    after = [lr_at(i, warm) for i in range(warm.warmup, warm.epochs + 1)]
    plain = [lr_at(i, cfg) for i in range(cfg.epochs + 1)]
    monotone = all(a >= b for a, b in zip(after, after[1:])) and all(a >= b for a, b in zip(plain, plain[1:]))
    ok = points == (5e-4, 2.5e-4, 0.0) and monotone
    report(6, ok, f"lr(0, 175, 350) = {points}, non-increasing after warmup: {monotone}")
    assert points == (5e-4, 2.5e-4, 0.0)
    assert monotone


# -------------------------------------------------------- 7. desk-scale learning


def test_criterion_7a_overfit_four_images(tiny_spec, synth_samples):
    samples = synth_samples[:4]
    mean = dataset_mean(samples)
    model = build_ddpnet(tiny_spec, rng=0)
    accuracy = []
    cfg = TrainConfig(schedule=ScheduleConfig(base_lr=5e-3, epochs=200, warmup=0), batch_size=4, augment=None)
    fit(model, samples, cfg, mean=mean,
        hooks=[lambda rec: accuracy.append(evaluate(model, samples, mean).pixel_accuracy())])
    first = next((i + 1 for i, a in enumerate(accuracy) if a > 0.99), None)
    ok = first is not None
    report(7, ok, f"(a) 4-image batch: pixel accuracy {accuracy[-1]:.4f} after 200 steps, first > 99% at step {first}")
    assert ok


def test_criterion_7b_thirty_epochs(tiny_spec, synth_samples):
    mean = dataset_mean(synth_samples)
    model = build_ddpnet(tiny_spec, rng=0)
    cfg = TrainConfig(schedule=ScheduleConfig(base_lr=1e-2, epochs=30, warmup=5), batch_size=4,
                      augment=AugmentConfig(flip_prob=0.5, scale_range=(1.0, 1.0)))
    t0 = time.perf_counter()
    fit(model, synth_samples, cfg, mean=mean)
    elapsed = time.perf_counter() - t0
    miou = evaluate(model, synth_samples, mean).miou()
    report(7, miou > 0.9, f"(b) 30 epochs on 16 images: train mIoU {miou:.4f} ({elapsed:.0f} s)")
    assert miou > 0.9


def independent_miou(cm: ConfusionMatrix) -> float:
    """Expected mIoU of a predictor that ignores the image but keeps ``cm``'s class frequencies.

    With truth frequencies p and prediction frequencies q drawn independently,
    class c expects intersection p_c q_c and union p_c + q_c - p_c q_c.
    """
    p = cm.counts.sum(axis=1) / cm.total
    q = cm.counts.sum(axis=0) / cm.total
    union = p + q - p * q
    defined = union > 0
    return float(np.mean(p[defined] * q[defined] / union[defined]))


def test_criterion_7c_untrained_is_chance(tiny_spec, synth_samples):
    mean = dataset_mean(synth_samples)
    chance = 1 / tiny_spec.num_classes
    parts, ok = [], True
    for seed in range(3):
        cm = evaluate(build_ddpnet(tiny_spec, rng=seed), synth_samples, mean)
        miou, oracle = cm.miou(), independent_miou(cm)
        ok = ok and abs(miou - oracle) <= 0.1 and miou <= chance + 0.25
        parts.append(f"{miou:.3f} (independent-guess {oracle:.3f})")
    report(7, ok, f"(c) untrained mIoU {', '.join(parts)}; 1/C = {chance:.3f}")
    assert ok


# ------------------------------------------------- 8. determinism and persistence


def _short_run(spec, samples, log_path):
    mean = dataset_mean(samples)
    model = build_ddpnet(spec, rng=0)
    cfg = TrainConfig(schedule=ScheduleConfig(base_lr=5e-3, epochs=3, warmup=1), batch_size=4, seed=11,
                      augment=AugmentConfig(crop=(64, 64)))
    log, opt = fit(model, samples, cfg, mean=mean, log_path=log_path)
    return model, opt, mean, log


def test_criterion_8_identical_runs(tiny_spec, synth_samples, tmp_path):
    m1, _, _, log1 = _short_run(tiny_spec, synth_samples[:8], tmp_path / "a.tsv")
    m2, _, _, log2 = _short_run(tiny_spec, synth_samples[:8], tmp_path / "b.tsv")
    same_log = log1.to_text() == log2.to_text() == (tmp_path / "a.tsv").read_text() == (tmp_path / "b.tsv").read_text()
    p1, p2 = m1.parameters(), m2.parameters()
    same_params = all(np.array_equal(p1[k].data, p2[k].data) for k in p1)
    report(8, same_log and same_params, f"two seeded runs: identical logs {same_log}, identical weights {same_params}")
    assert same_log and same_params


def test_criterion_8_checkpoint_round_trip(tiny_spec, synth_samples, tmp_path):
    model, opt, mean, _ = _short_run(tiny_spec, synth_samples[:8], None)
    path = tmp_path / "model.ddpck"
    save_checkpoint(path, model, opt, mean)
    loaded, opt2, mean2 = load_checkpoint(path)
    bitwise = path.read_bytes() == encode(loaded, opt2, mean2)
    x = Tensor.wrap(np.random.default_rng(5).standard_normal((2, 3, 64, 64)).astype(np.float32))
    same_out = np.array_equal(model.forward(x, "eval").data, loaded.forward(x, "eval").data)
    ok = bitwise and same_out and np.array_equal(mean, mean2) and opt2.step == opt.step
    report(8, ok, f"checkpoint re-encodes bitwise {bitwise}, eval outputs identical {same_out}")
    assert ok


# ------------------------------------------------------- 9. metric correctness


def test_criterion_9_metrics():
    half = np.array([[0, 0], [1, 1]])
    cm = ConfusionMatrix(2).accumulate(half, np.zeros_like(half))
    two_class = cm.iou().tolist() == [0.5, 0.0] and cm.miou() == 0.25
    perfect = ConfusionMatrix(3).accumulate(np.array([0, 1, 2, 2]), np.array([0, 1, 2, 2]))
    exact = perfect.miou() == 1.0 and perfect.iou().tolist() == [1.0, 1.0, 1.0]
    # three classes hand-counted: truth 0,0,1,1,2 vs prediction 0,1,1,2,2
    # IoU0 = 1/2, IoU1 = 1/3, IoU2 = 1/2
    three = ConfusionMatrix(3).accumulate(np.array([0, 0, 1, 1, 2]), np.array([0, 1, 1, 2, 2]))
    hand = three.iou().tolist() == [1 / 2, 1 / 3, 1 / 2] and three.miou() == (1 / 2 + 1 / 3 + 1 / 2) / 3
    before = cm.counts.copy()
    cm.accumulate(np.full((3, 3), 255), np.ones((3, 3), dtype=int))
    ignored = np.array_equal(before, cm.counts)
    ok = two_class and exact and hand and ignored
    report(9, ok, f"two-class 0.25 case {two_class}, perfect {exact}, three-class hand count {hand}, "
                  f"ignore pixels leave counts unchanged {ignored}")
    assert ok


# ------------------------------------------------------------ 10. FPS harness


def test_criterion_10_fps_harness(tiny_spec, capsys):
    stats = benchmark_fps(build_ddpnet(tiny_spec, rng=0), (1, 3, 64, 64), frames=100, warmup=5)
    protocol = len(stats.latencies_ms) == 100 and math.isclose(stats.fps, 1000 / np.mean(stats.latencies_ms))
    assert cli.main(["bench", "--preset", "tiny", "--frames", "100", "--warmup", "5"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    fps = float(line.split("FPS")[1])
    ok = protocol and fps > 0
    with capsys.disabled():
        report(10, ok, f"mean over 100 frames: {stats.mean_ms:.2f} ms ({stats.fps:.1f} FPS); CLI printed FPS {fps:.1f}")
    assert ok
