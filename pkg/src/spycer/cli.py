"""Command-line entry point.

Subcommands: simulate, train, predict, curves, eval, ablate, baseline,
residual, attn, gradcheck. Configuration comes from an INI-style file
(sections [simulate], [physics], [train], [eval]) with flag overrides;
unknown sections or keys are hard errors, and the fully resolved
configuration is echoed next to every output for provenance.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import evaluation as ev
from . import gradcheck as gc
from .autodiff import load_checkpoint, save_checkpoint
from .errors import DataError, NumericError, SpycerError
from .grids import GridMeta, load_scene, load_sensors, save_scene, Scene, VariableGrid
from .network import pack_model, unpack_model
from .physics import PhysicsConfig
from .simulate import SimConfig, simulate_scene, save_synthetic
from .training import ModelState, TrainConfig, save_history, train, predict_center

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------

_GRID_KEYS = {
    "width": int, "height": int, "resolution_m": float,
    "origin_x": float, "origin_y": float, "crs_label": str,
}
_SIM_KEYS = {
    **_GRID_KEYS,
    "n_dates": int, "date_spacing_days": float, "start_day_of_year": float,
    "k_true": float, "alpha_true": float, "wind_u": float, "wind_v": float,
    "noise_lst_std": float, "noise_sensor_std": float, "n_sensors": int,
    "seed": int, "class_fractions": str, "lst_spatial_amp_c": float,
    "dt_days": float,
}
_PHYSICS_KEYS = {"k": float, "alpha": float, "lambda": float, "sigma": float,
                 "eps_t": float}
_TRAIN_KEYS = {"epochs": int, "lr_model": float, "lr_attention": float,
               "batch_size": int, "seed": int, "ablation": str}
_EVAL_KEYS = {"folds": int, "seed": int, "methods": str, "epochs": int,
              "threads": int}
_SECTIONS = {
    "simulate": _SIM_KEYS,
    "physics": _PHYSICS_KEYS,
    "train": _TRAIN_KEYS,
    "eval": _EVAL_KEYS,
}


def load_config_file(path: str | None) -> dict:
    """Parse and validate the INI config; returns {section: {key: value}}."""
    out: dict = {name: {} for name in _SECTIONS}
    if path is None:
        return out
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataError(f"config file {path} not found or unreadable")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
        keys = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise UsageError(f"unknown config key {key!r} in section [{section}]")
            caster = keys[key]
            try:
                out[section][key] = caster(raw) if caster is not str else raw
            except ValueError:
                raise UsageError(
                    f"config key {section}.{key} expects {caster.__name__}, got {raw!r}"
                ) from None
    return out


def _sim_config_from(cfg: dict, seed: int | None) -> SimConfig:
    sim = dict(cfg.get("simulate", {}))
    if seed is not None:
        sim["seed"] = seed
    grid = GridMeta(
        width=sim.pop("width", 128),
        height=sim.pop("height", 128),
        resolution_m=sim.pop("resolution_m", 10.0),
        origin_x=sim.pop("origin_x", 500000.0),
        origin_y=sim.pop("origin_y", 4800000.0),
        crs_label=sim.pop("crs_label", "UTM"),
    )
    if "class_fractions" in sim:
        parts = [float(p) for p in str(sim["class_fractions"]).split(",")]
        sim["class_fractions"] = tuple(parts)
    return SimConfig(grid=grid, **sim)


def _physics_from(cfg: dict, h: float) -> PhysicsConfig:
    phys = cfg.get("physics", {})
    return PhysicsConfig(
        K=phys.get("k", 0.8),
        alpha=phys.get("alpha", 0.5),
        lam=phys.get("lambda", 0.9),
        sigma=phys.get("sigma", 1.5),
        eps_t=phys.get("eps_t", 1e-3),
        h=h,
    )


def _train_config_from(cfg: dict, seed: int | None, epochs: int | None) -> TrainConfig:
    tr = dict(cfg.get("train", {}))
    if seed is not None:
        tr["seed"] = seed
    if epochs is not None:
        tr["epochs"] = epochs
    return TrainConfig(**tr)


def _eval_options_from(cfg: dict, args) -> dict:
    section = cfg.get("eval", {})
    methods_raw = args.methods or section.get("methods", "spycer,mlp,lr")
    return {
        "folds": args.folds if args.folds is not None else section.get("folds", 10),
        "seed": args.seed if args.seed is not None else section.get("seed", 7),
        "epochs": args.epochs if args.epochs is not None
                  else section.get("epochs", ev.DEFAULT_EVAL_EPOCHS),
        "threads": _resolve_threads(args, section),
        "methods": [m.strip() for m in methods_raw.split(",") if m.strip()],
    }


def _resolve_threads(args, section: dict | None = None) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    if section and "threads" in section:
        return section["threads"]
    env = os.environ.get("SPYCER_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SPYCER_THREADS must be an integer, got {env!r}") from None
    return 1


def _echo_config(path: Path, sections: dict) -> None:
    """Write the fully resolved configuration for provenance."""
    parser = configparser.ConfigParser()
    for name, values in sections.items():
        parser[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def _prepare_out_dir(path_str: str, force: bool) -> Path:
    out = Path(path_str)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_out_file(path_str: str, force: bool) -> Path:
    out = Path(path_str)
    if out.exists() and not force:
        raise DataError(f"output file {out} exists (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene_and_sensors(scene_dir: str, sensors_path: str | None):
    scene = load_scene(scene_dir)
    path = sensors_path or str(Path(scene_dir) / "sensors.csv")
    sensors = load_sensors(path, scene.meta)
    return scene, sensors


def _load_model(checkpoint: str, phys: PhysicsConfig) -> ModelState:
    arrays = load_checkpoint(checkpoint)
    net, att, stats = unpack_model(arrays)
    return ModelState(net, att, stats, phys)


def _write_f32_grid(path: Path, grid: VariableGrid) -> None:
    values = grid.values.astype("<f4").copy()
    values[grid.nodata_mask] = np.float32(np.nan)
    path.write_bytes(values.tobytes())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    cfg = load_config_file(args.config)
    sim_cfg = _sim_config_from(cfg, args.seed)
    out = _prepare_out_dir(args.out, args.force)
    bundle = simulate_scene(sim_cfg)
    save_synthetic(bundle, out, force=True)
    _echo_config(out / "resolved_config.ini", {"simulate": _flatten_sim(sim_cfg)})
    print(f"scene written to {out} ({sim_cfg.grid.width}x{sim_cfg.grid.height}, "
          f"{sim_cfg.n_dates} dates, {len(bundle.sensors)} sensors)")
    return EXIT_OK


def _flatten_sim(sim_cfg: SimConfig) -> dict:
    d = sim_cfg.as_dict()
    grid = d.pop("grid")
    d.update(grid)
    d["class_fractions"] = ",".join(repr(f) for f in sim_cfg.class_fractions)
    if d["dt_days"] is None:
        d.pop("dt_days")
    return d


def _cmd_train(args) -> int:
    cfg = load_config_file(args.config)
    scene, sensors = _load_scene_and_sensors(args.scene, args.sensors)
    phys = _physics_from(cfg, scene.meta.resolution_m)
    train_cfg = _train_config_from(cfg, args.seed, args.epochs)
    out = _check_out_file(args.out, args.force)

    state, history = train(scene, sensors, train_cfg, phys)
    save_checkpoint(out, pack_model(state.net, state.att, state.stats))
    save_history(history, out.with_suffix(out.suffix + ".history.csv"))
    _echo_config(
        out.with_suffix(out.suffix + ".config.ini"),
        {"train": _dataclass_dict(train_cfg), "physics": _physics_dict(phys)},
    )
    final = history[-1]
    print(f"checkpoint written to {out} "
          f"(final sup={final['sup_loss']:.4f}, phys={final['phys_loss']:.4f})")
    return EXIT_OK


def _dataclass_dict(obj) -> dict:
    import dataclasses

    return dataclasses.asdict(obj)


def _physics_dict(phys: PhysicsConfig) -> dict:
    return {"k": phys.K, "alpha": phys.alpha, "lambda": phys.lam,
            "sigma": phys.sigma, "eps_t": phys.eps_t, "h": phys.h}


def _cmd_predict(args) -> int:
    cfg = load_config_file(args.config)
    scene, _ = _load_scene_and_sensors(args.scene, args.sensors)
    phys = _physics_from(cfg, scene.meta.resolution_m)
    state = _load_model(args.checkpoint, phys)
    out = _prepare_out_dir(args.out, args.force)

    grid = ev.export_map(state, scene, args.date)
    name = f"nsat_pred_{args.date}.f32"
    _write_f32_grid(out / name, grid)
    (out / "prediction_manifest.json").write_text(
        json.dumps(
            {"grid": scene.meta.as_dict(), "date": args.date, "file": name},
            indent=2, sort_keys=True,
        )
        + "\n"
    )
    _echo_config(out / "resolved_config.ini", {"physics": _physics_dict(phys)})
    print(f"prediction map written to {out / name}")
    return EXIT_OK


def _cmd_curves(args) -> int:
    cfg = load_config_file(args.config)
    scene, sensors = _load_scene_and_sensors(args.scene, args.sensors)
    phys = _physics_from(cfg, scene.meta.resolution_m)
    state = _load_model(args.checkpoint, phys)
    out = _check_out_file(args.out, args.force)

    ids = [s.strip() for s in args.ids.split(",") if s.strip()] if args.ids else sensors.ids
    rows = ev.temporal_curves(lambda samples: predict_center(state, samples),
                              scene, sensors, ids)
    ev.save_curves(rows, out)
    print(f"temporal curves for {len(ids)} sensors written to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = load_config_file(args.config)
    scene, sensors = _load_scene_and_sensors(args.scene, args.sensors)
    phys = _physics_from(cfg, scene.meta.resolution_m)
    opts = _eval_options_from(cfg, args)
    train_cfg = _train_config_from(cfg, None, opts["epochs"])
    out = _prepare_out_dir(args.out, args.force)

    plan = ev.make_folds(sensors.ids, opts["folds"], opts["seed"])
    table, records = ev.run_experiment(
        scene, sensors, opts["methods"], plan, phys, train_cfg,
        threads=opts["threads"],
    )
    table.check_metric_identity()
    table.to_csv(out / "table.csv")
    with open(out / "fold_records.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "method", "sensor_id", "date", "month", "prediction", "truth"])
        for row in records:
            writer.writerow([row[0], row[1], row[2], row[3], row[4], repr(row[5]), repr(row[6])])
    _echo_config(
        out / "resolved_config.ini",
        {
            "eval": {**{k: opts[k] for k in ("folds", "seed", "epochs", "threads")},
                     "methods": ",".join(opts["methods"])},
            "train": _dataclass_dict(train_cfg),
            "physics": _physics_dict(phys),
        },
    )
    for method in table.methods():
        cell = table.cell(method)
        print(f"{method:12s} rmse={cell['rmse_mean']:.3f}+-{cell['rmse_std']:.3f} "
              f"mae={cell['mae_mean']:.3f}+-{cell['mae_std']:.3f}")
    print(f"metrics written to {out / 'table.csv'}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = load_config_file(args.config)
    scene, sensors = _load_scene_and_sensors(args.scene, args.sensors)
    phys = _physics_from(cfg, scene.meta.resolution_m)
    opts = _eval_options_from(cfg, args)
    train_cfg = _train_config_from(cfg, None, opts["epochs"])
    out = _prepare_out_dir(args.out, args.force)

    seeds = [opts["seed"] + i for i in range(args.seeds)]
    rows = ev.run_ablation(scene, sensors, seeds, phys, train_cfg,
                           threads=opts["threads"])
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "config", "rmse", "mae"])
        for seed, variant, r, m in rows:
            writer.writerow([seed, variant, repr(r), repr(m)])
    _echo_config(
        out / "resolved_config.ini",
        {"eval": {"seed": opts["seed"], "epochs": opts["epochs"]},
         "train": _dataclass_dict(train_cfg), "physics": _physics_dict(phys)},
    )
    ordered = ev.ablation_ordering(rows)
    for seed, ok in ordered.items():
        print(f"seed {seed}: full <= cfg2 <= cfg1 (2% ties): {'yes' if ok else 'no'}")
    print(f"ablation table written to {out / 'ablation.csv'}")
    return EXIT_OK


def _cmd_baseline(args) -> int:
    cfg = load_config_file(args.config)
    scene, sensors = _load_scene_and_sensors(args.scene, args.sensors)
    out = _check_out_file(args.out, args.force)

    if args.method == "idw":
        if not args.date:
            raise UsageError("baseline idw needs --date to build a map")
        grid = bl.idw_map(sensors, args.date, scene.meta)
        _write_f32_grid(out, grid)
        print(f"IDW map for {args.date} written to {out}")
        return EXIT_OK

    from .grids import ChannelStats
    from .training import collect_samples

    samples = collect_samples(scene, sensors)
    stats = ChannelStats.from_samples(samples)
    x, y, keys = bl.build_feature_rows(scene, sensors, stats)
    seed = args.seed if args.seed is not None else 0
    if args.method == "lr":
        preds = bl.predict_lr(bl.fit_lr(x, y), x)
    elif args.method == "rf":
        preds = bl.RandomForest(bl.ForestConfig(seed=seed)).fit(x, y).predict(x)
    elif args.method == "gb":
        preds = bl.GradientBoosting().fit(x, y).predict(x)
    else:
        preds = bl.MLPRegressor(bl.MLPConfig(seed=seed)).fit(x, y).predict(x)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "date", "prediction", "truth"])
        for (sid, label), pred, truth in zip(keys, preds, y):
            writer.writerow([sid, label, repr(float(pred)), repr(float(truth))])
    print(f"{args.method} predictions written to {out}")
    return EXIT_OK


def _cmd_residual(args) -> int:
    cfg = load_config_file(args.config)
    scene, _ = _load_scene_and_sensors(args.scene, args.sensors)
    phys = _physics_from(cfg, scene.meta.resolution_m)
    state = _load_model(args.checkpoint, phys)
    out = _check_out_file(args.out, args.force)

    grid = ev.export_residual_map(state, scene, args.date)
    _write_f32_grid(out, grid)
    finite = grid.values[~grid.nodata_mask]
    print(f"residual map written to {out} (mean |r| = {np.mean(np.abs(finite)):.4f} degC/day)")
    return EXIT_OK


def _cmd_attn(args) -> int:
    cfg = load_config_file(args.config)
    scene, sensors = _load_scene_and_sensors(args.scene, args.sensors)
    phys = _physics_from(cfg, scene.meta.resolution_m)
    state = _load_model(args.checkpoint, phys)
    out = _check_out_file(args.out, args.force)

    weights = ev.attention_map(state, scene, sensors.get(args.sensor), args.date)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in weights:
            writer.writerow([repr(float(v)) for v in row])
    print(f"attention map for sensor {args.sensor} at {args.date} written to {out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    corrupt = os.environ.get("SPYCER_GRADCHECK_CORRUPT", "") == "1"
    report = gc.run_gradcheck(n_seeds=args.seeds, corrupt=corrupt)
    print(gc.format_report(report))
    if not gc.report_passes(report):
        raise NumericError("gradient check failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="spycer", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, scene=True, checkpoint=False, date=False):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        if scene:
            p.add_argument("--scene", required=True, help="scene bundle directory")
            p.add_argument("--sensors", help="sensor CSV (default: scene/sensors.csv)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")
        if date:
            p.add_argument("--date", required=True, help="date label, e.g. 2025-08-03")

    p = sub.add_parser("simulate", help="generate a synthetic scene bundle")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("train", help="train the patch model on a scene")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="export a full NSAT map for one date")
    common(p, checkpoint=True, date=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("curves", help="per-date predictions vs readings as CSV")
    common(p, checkpoint=True)
    p.add_argument("--ids", help="comma-separated sensor ids (default: all)")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(fn=_cmd_curves)

    p = sub.add_parser("eval", help="Monte Carlo cross-validation benchmark")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="compare full model against the two ablations")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--methods")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("baseline", help="fit one baseline and export predictions")
    common(p)
    p.add_argument("--method", required=True, choices=("lr", "rf", "gb", "mlp", "idw"))
    p.add_argument("--date", help="date label (idw map only)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_baseline)

    p = sub.add_parser("residual", help="export a full-scene physics residual grid")
    common(p, checkpoint=True, date=True)
    p.add_argument("--out", required=True, help="output .f32 path")
    p.set_defaults(fn=_cmd_residual)

    p = sub.add_parser("attn", help="export the 7x7 attention map for one sensor")
    common(p, checkpoint=True, date=True)
    p.add_argument("--sensor", required=True, help="sensor id")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(fn=_cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--seeds", type=int, default=gc.N_SEEDS)
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.fn(args)
    except UsageError as exc:
        print(f"spycer: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"spycer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"spycer: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SpycerError as exc:
        print(f"spycer: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"spycer: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
