"""Command-line entry point: ``saha-forecast <command> [--config PATH] [--seed N] [--out-dir DIR]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .features import build_window, feature_matrix, write_features_csv
from .harness import (
    CellOutput,
    ExperimentConfig,
    emit_outputs,
    median_table,
    metrics,
    plot_sweep,
    read_predictions_csv,
    run_experiment,
    test_range,
    write_predictions_csv,
)
from .monolith import clip_report, forecast, grid_search, train_monolith
from .saha import predict_full
from .structopt import pso_optimize
from .structopt import FitnessConfig
from .twin import generate_scenario, read_trace_csv, simulate, write_trace_csv

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("saha_forecast")


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, "rb") as fh:
        return ExperimentConfig.from_dict(tomllib.load(fh))


def _episode(cfg: ExperimentConfig, seed: int):
    return simulate(generate_scenario(cfg.scenario, seed, cfg.constants), cfg.constants)


def _out(args, cfg) -> Path:
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args, cfg):
    out = _out(args, cfg)
    trace = _episode(cfg, args.seed)
    path = out / f"trace_seed{args.seed}.csv"
    write_trace_csv(trace, path)
    print(f"wrote {path} ({trace.N} minutes, tau_g={trace.tau_g:.3f})")


def cmd_features(args, cfg):
    out = _out(args, cfg)
    path = out / f"features_seed{args.seed}.csv"
    write_features_csv(_episode(cfg, args.seed), path, cfg.constants)
    print(f"wrote {path}")


def _adapt_cell(args, cfg):
    t_star = args.t_star if args.t_star is not None else cfg.scenario.t_star
    trace = read_trace_csv(args.trace, t_star=t_star) if args.trace else _episode(cfg, args.seed)
    N, t_star = trace.N, trace.t_star
    T = args.t_adapt
    if not (T >= 1 and t_star + T + 1 < N):
        raise ValueError(f"T_adapt={T} out of range")
    start, stop = test_range(t_star, T, N)
    return trace, feature_matrix(trace, cfg.constants), T, start, stop


def cmd_train_monolith(args, cfg):
    trace, U, T, start, stop = _adapt_cell(args, cfg)
    pre = build_window(trace, 1, trace.t_star, features=U)
    gsr = grid_search(pre, cfg.grid, budget=cfg.grid_budget, patience=cfg.patience, seed=args.seed)
    model = train_monolith(trace, trace.t_star, T, gsr, features=U)
    y, pred = forecast(model, trace, start, stop, train_stop=trace.t_star + T, features=U)
    out = _out(args, cfg)
    (out / f"monolith_seed{args.seed}_T{T}.json").write_text(model.to_json())
    test = build_window(trace, start, stop, features=U)
    write_predictions_csv(CellOutput(t=test.minutes, y_true=y, y_mono=pred),
                          out / f"monolith_seed{args.seed}_T{T}.csv")
    mse, mae = metrics(y, pred)
    print(f"monolith seed={args.seed} T_adapt={T} trees={gsr.best_n_trees} mse={mse:.6g} mae={mae:.6g}")


def cmd_train_saha(args, cfg):
    trace, U, T, start, stop = _adapt_cell(args, cfg)
    adapt = build_window(trace, trace.t_star, trace.t_star + T, features=U)
    pso = dataclasses.replace(cfg.pso, **{k: getattr(args, k) for k in ("swarm_size", "iterations")
                                          if getattr(args, k) is not None})
    penalties = FitnessConfig(
        lambda_M=cfg.penalties.lambda_M if args.lambda_m is None else args.lambda_m,
        lambda_C=cfg.penalties.lambda_C if args.lambda_c is None else args.lambda_c,
    )
    res = pso_optimize(adapt, penalties, seed=args.seed, settings=pso)
    test = build_window(trace, start, stop, features=U)
    pred = clip_report(predict_full(res.payload, test.X))
    out = _out(args, cfg)
    (out / f"saha_seed{args.seed}_T{T}.txt").write_text(res.structure.to_text())
    with open(out / f"saha_seed{args.seed}_T{T}_history.csv", "w") as fh:
        fh.write("iteration,best_fitness\n")
        fh.writelines(f"{i},{J:.12g}\n" for i, J in enumerate(res.history))
    write_predictions_csv(CellOutput(t=test.minutes, y_true=test.y, y_saha=pred),
                          out / f"saha_seed{args.seed}_T{T}.csv")
    mse, mae = metrics(test.y, pred)
    print(f"saha seed={args.seed} T_adapt={T} J={res.fitness:.6g} mse={mse:.6g} mae={mae:.6g}")


def cmd_experiment(args, cfg):
    if args.seed_given:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    out = Path(args.out_dir or cfg.out_dir)
    result = run_experiment(cfg)
    emit_outputs(result, out)
    print(f"{'T_adapt':>8} {'monolith':>12} {'saha':>12}")
    table = median_table(result.rows)
    for T in cfg.t_adapt:
        print(f"{T:>8} {table[('monolith', T)]:>12.4e} {table[('saha', T)]:>12.4e}")
    failed = sum(bool(r.error) for r in result.rows)
    print(f"wrote {out} in {result.elapsed:.0f}s; {failed} failed cells")
    return 1 if failed else 0


def cmd_plot(args, cfg):
    out = Path(args.out_dir or cfg.out_dir)
    pattern = re.compile(rf"seed{args.seed}_T(\d+)\.csv$")
    cells = {}
    for path in sorted((out / "predictions").glob(f"seed{args.seed}_T*.csv")):
        m = pattern.search(path.name)
        if m:
            cells[int(m.group(1))] = read_predictions_csv(path)
    if not cells:
        raise FileNotFoundError(f"no prediction files for seed {args.seed} under {out / 'predictions'}")
    for cell in cells.values():
        for name in ("y_mono", "y_saha"):
            if np.all(np.isnan(getattr(cell, name))):
                setattr(cell, name, None)
    trace = _episode(cfg, args.seed)
    path = out / f"figure_seed{args.seed}.svg"
    plot_sweep((trace["t"].astype(int), trace["SpO2_obs"]), cells, path, title=f"seed {args.seed}")
    print(f"wrote {path}")


COMMANDS = {
    "simulate": (cmd_simulate, "simulate one episode and write its trace CSV"),
    "features": (cmd_features, "write the 13-column feature table of one episode"),
    "train-monolith": (cmd_train_monolith, "grid-search, refit and test the monolithic GBDT for one cell"),
    "train-saha": (cmd_train_saha, "search and test a SAHA-Net structure for one cell"),
    "experiment": (cmd_experiment, "run the full adaptation-window sweep"),
    "plot": (cmd_plot, "redraw the sweep figure from saved prediction CSVs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saha-forecast", description=__doc__.split(":")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="episode seed (default 0)")
        p.add_argument("--out-dir", help="output directory (default: config out_dir)")
        if name in ("train-monolith", "train-saha"):
            p.add_argument("--t-adapt", type=int, default=10, help="adaptation window in minutes")
            p.add_argument("--trace", help="trace CSV written by 'simulate' (default: simulate --seed)")
            p.add_argument("--t-star", type=int, default=None, help="transition minute of --trace")
        if name == "train-saha":
            p.add_argument("--swarm-size", type=int, default=None)
            p.add_argument("--iterations", type=int, default=None)
            p.add_argument("--lambda-m", type=float, default=None, help="penalty per active mask bit")
            p.add_argument("--lambda-c", type=float, default=None, help="penalty per active link")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    args.seed = 0 if args.seed is None else args.seed
    try:
        cfg = load_config(args.config)
        handler = COMMANDS[args.command][0]
        return handler(args, cfg) or 0
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for the shell
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"saha-forecast {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
