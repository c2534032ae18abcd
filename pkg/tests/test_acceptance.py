"""Acceptance suite: one test per release criterion, at pinned tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion. The benchmark-scale criteria (5 and 6) train real models and
dominate the runtime; everything else is fast.
"""

import math
import time

import numpy as np
import pytest

import spycer.autodiff as ad
from spycer.evaluation import (
    DEFAULT_EVAL_EPOCHS,
    ablation_ordering,
    make_folds,
    run_ablation,
    run_experiment,
)
from spycer.gradcheck import TOLERANCE, format_report, report_passes, run_gradcheck
from spycer.grids import GridMeta, load_scene, load_sensors, save_scene
from spycer.network import AttentionModule, SpycerNet, pack_model, unpack_model
from spycer.autodiff import load_checkpoint, save_checkpoint
from spycer.physics import PhysicsConfig, grid_residual_series, temporal_derivative
from spycer.simulate import (
    SimConfig,
    gen_landcover,
    gen_lst_forcing,
    integrate_adr,
    simulate_scene,
)
from spycer.training import TrainConfig

from helpers_dual import dual_time_derivative
from test_physics import make_patch


def benchmark_meta():
    return GridMeta(width=128, height=128, resolution_m=10.0,
                    origin_x=500000.0, origin_y=4800000.0)


@pytest.fixture(scope="module")
def benchmark():
    """The default desk-scale benchmark: 128x128, 12 dates, 33 sensors, seed 7."""
    bundle = simulate_scene(SimConfig(grid=benchmark_meta(), seed=7))
    return bundle.scene, bundle.sensors


@pytest.fixture(scope="module")
def benchmark_table(benchmark):
    """Criterion 5 experiment, shared with criterion 8."""
    scene, sensors = benchmark
    phys = PhysicsConfig(h=scene.meta.resolution_m)
    plan = make_folds(sensors.ids, 10, 7)
    start = time.perf_counter()
    table, records = run_experiment(
        scene, sensors, ["spycer", "mlp", "lr"], plan, phys,
        TrainConfig(epochs=DEFAULT_EVAL_EPOCHS), threads=1,
    )
    elapsed = time.perf_counter() - start
    return table, records, elapsed


def test_criterion_01_paper_numbers_not_reproduced():
    # The source dataset is private; absolute table values (average RMSE
    # 2.27 +- 0.07, MAE 1.83 +- 0.07) are deliberately NOT asserted
    # anywhere. Criteria 2-10 substitute property-based and relative
    # acceptance on the synthetic oracle benchmark.
    print("ACCEPTANCE 1: PASS - absolute paper metrics excluded by design; "
          "synthetic-oracle criteria substitute")


def test_criterion_02_gradient_correctness():
    start = time.perf_counter()
    report = run_gradcheck(n_seeds=10)
    elapsed = time.perf_counter() - start
    assert report_passes(report), format_report(report)
    worst = max(report.values())
    assert worst < TOLERANCE
    assert elapsed < 120.0
    print(f"ACCEPTANCE 2: PASS - gradcheck max rel err {worst:.2e} < 1e-6 "
          f"in {elapsed:.1f}s (< 2 min)")


def test_criterion_03_physics_oracle_consistency():
    start = time.perf_counter()
    meta = GridMeta(width=64, height=64, resolution_m=10.0,
                    origin_x=500000.0, origin_y=4800000.0)
    span = 2.0
    means = []
    for dt in (0.2, 0.1, 0.05):
        cfg = SimConfig(grid=meta, seed=13, n_dates=int(round(span / dt)) + 1,
                        date_spacing_days=dt, noise_lst_std=0.0,
                        noise_sensor_std=0.0, n_sensors=5, dt_days=dt)
        class_grid, _ = gen_landcover(cfg)
        dates = cfg.timestamps()
        lst = gen_lst_forcing(class_grid, dates, cfg)
        series = [lst[t.date_label] for t in dates]
        truth = integrate_adr(series, cfg, dt_days=dt)
        phys = PhysicsConfig(K=cfg.K_true, alpha=cfg.alpha_true,
                             h=meta.resolution_m)
        residuals = grid_residual_series(truth, series, dt, phys)
        means.append(float(np.mean([np.abs(r).mean() for r in residuals])))
    elapsed = time.perf_counter() - start
    ratio_1 = means[0] / means[1]
    ratio_2 = means[1] / means[2]
    assert ratio_1 >= 2.0, f"first halving ratio {ratio_1:.3f} < 2"
    assert ratio_2 >= 2.0, f"second halving ratio {ratio_2:.3f} < 2"
    assert elapsed < 60.0
    print(f"ACCEPTANCE 3: PASS - residual decay ratios {ratio_1:.2f}, "
          f"{ratio_2:.2f} (>= 2) in {elapsed:.1f}s (< 1 min)")


def test_criterion_04_attention_contract():
    rng = np.random.default_rng(17)
    att = AttentionModule(np.random.default_rng(0), dtype=np.float64)
    for _, conv2 in att.heads:
        conv2.weight.data = rng.normal(0.0, 0.5, conv2.weight.shape)
    weights = att.weights(rng.uniform(-1.0, 1.0, size=(1000, 3, 7, 7))).data
    assert np.all(weights >= 0.0)
    assert np.all(weights[:, 3, 3] == 0.0)
    sums = weights.sum(axis=(1, 2))
    assert np.all(np.abs(sums - 1.0) <= 1e-6)

    equal = AttentionModule(np.random.default_rng(0), dtype=np.float64)
    for conv1, conv2 in equal.heads:
        conv1.weight.data[:] = 0.0
        conv1.bias.data[:] = 0.0
        conv2.weight.data[:] = 0.0
        conv2.bias.data[:] = 0.0
    w = equal.weights(np.zeros((1, 3, 7, 7))).data[0]
    ratio = w[4, 3] / w[6, 6]
    expected = math.exp(17.0 / 4.5)
    assert abs(ratio - expected) < 1e-9
    print(f"ACCEPTANCE 4: PASS - 1000-input simplex holds; equal-logit ratio "
          f"{ratio:.6f} = exp(17/4.5) +- 1e-9")


def test_criterion_05_relative_ordering(benchmark_table):
    table, _, elapsed = benchmark_table
    spycer_rmse = table.cell("spycer")["rmse_mean"]
    mlp_rmse = table.cell("mlp")["rmse_mean"]
    lr_rmse = table.cell("lr")["rmse_mean"]
    assert spycer_rmse <= mlp_rmse, (
        f"spycer {spycer_rmse:.3f} > mlp {mlp_rmse:.3f}")
    assert spycer_rmse <= 0.85 * lr_rmse, (
        f"spycer {spycer_rmse:.3f} > 0.85 * lr {lr_rmse:.3f}")
    assert elapsed < 1800.0
    print(f"ACCEPTANCE 5: PASS - held-out RMSE spycer {spycer_rmse:.3f} <= "
          f"mlp {mlp_rmse:.3f} and <= 0.85*lr ({0.85 * lr_rmse:.3f}); "
          f"10 folds in {elapsed / 60:.1f} min (< 30)")


def test_criterion_06_ablation_ordering(benchmark):
    scene, sensors = benchmark
    phys = PhysicsConfig(h=scene.meta.resolution_m)
    rows = run_ablation(scene, sensors, [7, 8, 9, 10, 11], phys,
                        TrainConfig(epochs=DEFAULT_EVAL_EPOCHS))
    ordering = ablation_ordering(rows)
    hits = sum(ordering.values())
    by_seed = {}
    for seed, label, r, _ in rows:
        by_seed.setdefault(seed, {})[label] = r
    detail = "; ".join(
        f"seed {s}: full {v['full']:.2f} cfg2 {v['config2']:.2f} "
        f"cfg1 {v['config1']:.2f}" for s, v in sorted(by_seed.items())
    )
    assert hits >= 3, f"ordering held on {hits}/5 seeds only ({detail})"
    print(f"ACCEPTANCE 6: PASS - full <= cfg2 <= cfg1 (2% ties) on "
          f"{hits}/5 seeds ({detail})")


def test_criterion_07_determinism(tmp_path):
    from test_cli import TINY_CONFIG, read_tree
    from spycer.cli import main

    cfg = tmp_path / "config.ini"
    cfg.write_text(TINY_CONFIG)

    def run_all(tag):
        root = tmp_path / tag
        root.mkdir()
        scene = root / "scene"
        assert main(["simulate", "--config", str(cfg), "--out", str(scene)]) == 0
        ckpt = root / "model.spyc"
        assert main(["train", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(ckpt), "--seed", "4"]) == 0
        import json
        date = json.loads((scene / "manifest.json").read_text())["dates"][1]["label"]
        assert main(["predict", "--scene", str(scene), "--checkpoint", str(ckpt),
                     "--date", date, "--out", str(root / "pred")]) == 0
        assert main(["curves", "--scene", str(scene), "--checkpoint", str(ckpt),
                     "--ids", "s001", "--out", str(root / "curves.csv")]) == 0
        assert main(["residual", "--scene", str(scene), "--checkpoint", str(ckpt),
                     "--date", date, "--out", str(root / "residual.f32")]) == 0
        assert main(["attn", "--scene", str(scene), "--checkpoint", str(ckpt),
                     "--sensor", "s001", "--date", date,
                     "--out", str(root / "attn.csv")]) == 0
        assert main(["baseline", "--method", "lr", "--scene", str(scene),
                     "--out", str(root / "preds.csv")]) == 0
        assert main(["eval", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(root / "eval"), "--threads", "1"]) == 0
        assert main(["ablate", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(root / "abl"), "--seeds", "1",
                     "--epochs", "1"]) == 0
        return read_tree(root)

    first = run_all("one")
    second = run_all("two")
    assert first == second

    # fold-level metrics identical for any worker count
    scene = tmp_path / "one" / "scene"
    from spycer.cli import main as cli_main
    assert cli_main(["eval", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(tmp_path / "mt"), "--threads", "2"]) == 0
    single = (tmp_path / "one" / "eval" / "fold_records.csv").read_bytes()
    multi = (tmp_path / "mt" / "fold_records.csv").read_bytes()
    assert single == multi
    print("ACCEPTANCE 7: PASS - every subcommand byte-identical across reruns; "
          "fold records identical for 1 and 2 workers")


def test_criterion_08_metric_identities(benchmark_table, benchmark):
    table, _, _ = benchmark_table
    table.check_metric_identity()
    for (method, month), cell in table.cells.items():
        assert cell["rmse_mean"] + 1e-12 >= cell["mae_mean"]

    scene, sensors = benchmark
    phys = PhysicsConfig(h=scene.meta.resolution_m)
    plan = make_folds(sensors.ids, 3, 21)
    oracle_table, _ = run_experiment(scene, sensors, ["oracle"], plan, phys,
                                     TrainConfig(epochs=1))
    for month in oracle_table.months() + ["overall"]:
        cell = oracle_table.cell("oracle", month)
        assert cell["rmse_mean"] == 0.0
        assert cell["mae_mean"] == 0.0
    print("ACCEPTANCE 8: PASS - RMSE >= MAE on every cell; perfect oracle "
          "scores exactly 0/0 through the full harness")


def test_criterion_09_temporal_derivative_accuracy():
    start = time.perf_counter()
    checked = 0
    worst = 0.0
    seed = 0
    while checked < 20 and seed < 200:
        seed += 1
        rng = np.random.default_rng([300, seed])
        net = SpycerNet(rng, width=6, n_blocks=1, target_mean=12.0,
                        target_std=2.5, dtype=np.float64)
        net.head.weight.data = rng.normal(0.0, 0.5, net.head.weight.shape)
        theta = rng.uniform(0, 2 * np.pi)
        patch = make_patch(sin_t=np.sin(theta), cos_t=np.cos(theta), seed=seed)
        margins = []
        ad.RELU_MARGIN_TRACKER = margins
        try:
            net.forward(patch[None])
        finally:
            ad.RELU_MARGIN_TRACKER = None
        if min(margins) <= 2e-3:
            continue
        fd = temporal_derivative(net, patch, 1e-3)
        exact = dual_time_derivative(net, patch)
        scale = np.maximum(np.abs(fd), np.abs(exact))
        mask = scale > 1e-8
        if mask.any():
            rel = (np.abs(fd - exact)[mask] / scale[mask]).max()
            assert rel < 1e-4, f"seed {seed}: rel err {rel:.2e}"
            worst = max(worst, rel)
        checked += 1
    elapsed = time.perf_counter() - start
    assert checked == 20
    assert elapsed < 60.0
    print(f"ACCEPTANCE 9: PASS - 20 networks, worst rel err {worst:.2e} < 1e-4 "
          f"in {elapsed:.1f}s (< 1 min)")


def test_criterion_10_format_round_trips(tmp_path):
    # scene bundle: write -> read -> write, byte compare
    bundle = simulate_scene(
        SimConfig(grid=GridMeta(width=24, height=24, resolution_m=10.0,
                                origin_x=500000.0, origin_y=4800000.0),
                  seed=5, n_sensors=5, n_dates=3)
    )
    first = tmp_path / "scene_a"
    save_scene(bundle.scene, first)
    second = tmp_path / "scene_b"
    save_scene(load_scene(first), second)
    files_a = {p.name: p.read_bytes() for p in sorted(first.iterdir())}
    files_b = {p.name: p.read_bytes() for p in sorted(second.iterdir())}
    assert files_a == files_b

    # checkpoint: write -> read -> write, byte compare
    from spycer.grids import ChannelStats

    rng = np.random.default_rng(6)
    net = SpycerNet(rng)
    att = AttentionModule(rng)
    stats = ChannelStats(np.zeros(8), np.ones(8), 12.0, 2.0)
    ckpt_a = tmp_path / "a.spyc"
    save_checkpoint(ckpt_a, pack_model(net, att, stats))
    net2, att2, stats2 = unpack_model(load_checkpoint(ckpt_a))
    ckpt_b = tmp_path / "b.spyc"
    save_checkpoint(ckpt_b, pack_model(net2, att2, stats2))
    assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
    print("ACCEPTANCE 10: PASS - scene bundle and checkpoint round-trip "
          "byte-exactly")
