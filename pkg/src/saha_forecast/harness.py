"""Adaptation-window sweep: monolith vs. SAHA-Net across seeded episodes."""
from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .features import build_window, feature_matrix
from .monolith import GRID_PRESETS, clip_report, forecast, grid_search, train_monolith
from .saha import fit_full, predict_full, prior_structure
from .structopt import FitnessConfig, PsoSettings, pso_optimize
from .twin import ConfigError, ScenarioConfig, TwinConstants, generate_scenario, simulate

log = logging.getLogger(__name__)

DEFAULT_SWEEP = (5, 10, 50, 100, 150, 200)
MODELS = ("monolith", "saha")
MIN_TEST_MINUTES = 30


class LeakageError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    constants: TwinConstants = field(default_factory=TwinConstants)
    seeds: tuple = (0, 1, 2, 3, 4)
    t_adapt: tuple = DEFAULT_SWEEP
    grid: str = "default"
    grid_budget: int = 1200
    patience: int = 10
    pso: PsoSettings = field(default_factory=PsoSettings)
    penalties: FitnessConfig = field(default_factory=FitnessConfig)
    out_dir: str = "results"

    def __post_init__(self):
        N, t_star = self.scenario.N, self.scenario.t_star
        for T in self.t_adapt:
            if T < 1 or t_star + T >= N - MIN_TEST_MINUTES:
                raise ConfigError(f"T_adapt={T} leaves fewer than {MIN_TEST_MINUTES} test minutes")
        if self.grid not in GRID_PRESETS:
            raise ConfigError(f"unknown grid preset {self.grid!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        kw = {}
        if "scenario" in data:
            kw["scenario"] = ScenarioConfig.from_dict(data.pop("scenario"))
        if "constants" in data:
            kw["constants"] = TwinConstants(**data.pop("constants"))
        if "pso" in data:
            pso = dict(data.pop("pso"))
            pen = {k: pso.pop(k) for k in ("lambda_M", "lambda_C") if k in pso}
            kw["pso"] = PsoSettings(**pso)
            if pen:
                kw["penalties"] = FitnessConfig(**pen)
        exp = data.pop("experiment", {})
        exp.update(data.pop("monolith", {}))
        exp.update(data)
        known = {f.name for f in fields(cls)}
        unknown = set(exp) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("seeds", "t_adapt"):
            if key in exp:
                exp[key] = tuple(int(v) for v in exp[key])
        return cls(**kw, **exp)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario.as_dict(),
            "constants": self.constants.as_dict(),
            "experiment": {"seeds": list(self.seeds), "t_adapt": list(self.t_adapt), "out_dir": self.out_dir},
            "monolith": {"grid": self.grid, "grid_budget": self.grid_budget, "patience": self.patience},
            "pso": {**asdict(self.pso), **asdict(self.penalties)},
        }


@dataclass
class MetricsRow:
    seed: int
    model: str
    T_adapt: int
    mse: float
    mae: float
    test_start: int
    test_stop: int
    error: str = ""


@dataclass
class CellOutput:
    t: np.ndarray
    y_true: np.ndarray
    y_mono: np.ndarray | None = None
    y_saha: np.ndarray | None = None
    structure: str = ""
    pso_history: list = field(default_factory=list)
    lambdas: tuple = ()


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    cells: dict  # (seed, T) -> CellOutput
    observed: dict  # seed -> (t, SpO2_obs)
    prior_fit_mse: dict  # seed -> in-sample MSE of the pre-switch SAHA-Net
    grid: dict  # seed -> GridSearchResult
    elapsed: float = 0.0


def metrics(y_true, y_pred) -> tuple[float, float]:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("empty series")
    err = y_true - y_pred
    return float(np.mean(err**2)), float(np.mean(np.abs(err)))


def test_range(t_star: int, T_adapt: int, N: int) -> tuple[int, int]:
    """Half-open minute range of the test rows: ``(t_star + T_adapt, N - 1]``."""
    return t_star + T_adapt + 1, N


def _check_no_leakage(train: tuple[int, int], test: tuple[int, int]):
    if not train[1] - 1 < test[0]:
        raise LeakageError(f"training minutes {train} reach into test minutes {test}")


def _cell_seed(seed: int, T: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), 202, T]).generate_state(1, np.uint64)[0])


def run_experiment(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    t0 = time.perf_counter()
    N, t_star = cfg.scenario.N, cfg.scenario.t_star
    rows, cells, observed, prior_mse, grids = [], {}, {}, {}, {}
    for seed in cfg.seeds:
        trace = simulate(generate_scenario(cfg.scenario, seed, cfg.constants), cfg.constants)
        U = feature_matrix(trace, cfg.constants)
        observed[seed] = (trace["t"].astype(int), trace["SpO2_obs"])
        pre = build_window(trace, 1, t_star, features=U)
        gsr = grid_search(pre, cfg.grid, budget=cfg.grid_budget, patience=cfg.patience, seed=seed)
        grids[seed] = gsr
        prior_net = fit_full(prior_structure(), pre, seed=seed)
        prior_mse[seed] = float(np.mean((pre.y - prior_net.train_prediction) ** 2))
        log.info("seed %d: grid picked %s with %d trees", seed, gsr.best_hyperparams, gsr.best_n_trees)

        for T in cfg.t_adapt:
            start, stop = test_range(t_star, T, N)
            test = build_window(trace, start, stop, features=U)
            cell = CellOutput(t=test.minutes, y_true=test.y)
            cells[(seed, T)] = cell
            try:
                _check_no_leakage((1, t_star + T), (start, stop))
                mono = train_monolith(trace, t_star, T, gsr, features=U)
                _, cell.y_mono = forecast(mono, trace, start, stop, train_stop=t_star + T, features=U)
                rows.append(MetricsRow(seed, "monolith", T, *metrics(test.y, cell.y_mono), start, stop))
            except Exception as exc:  # noqa: BLE001 - failed cells become error rows
                log.exception("monolith cell seed=%d T=%d failed", seed, T)
                rows.append(MetricsRow(seed, "monolith", T, float("nan"), float("nan"), start, stop, repr(exc)))
            try:
                _check_no_leakage((t_star, t_star + T), (start, stop))
                adapt = build_window(trace, t_star, t_star + T, features=U)
                res = pso_optimize(adapt, cfg.penalties, seed=_cell_seed(seed, T), settings=cfg.pso)
                cell.y_saha = clip_report(predict_full(res.payload, test.X))
                cell.structure = res.structure.to_text()
                cell.pso_history = list(res.history)
                cell.lambdas = res.payload.lambdas
                rows.append(MetricsRow(seed, "saha", T, *metrics(test.y, cell.y_saha), start, stop))
            except Exception as exc:  # noqa: BLE001
                log.exception("saha cell seed=%d T=%d failed", seed, T)
                rows.append(MetricsRow(seed, "saha", T, float("nan"), float("nan"), start, stop, repr(exc)))
            log.info("seed %d T=%d done", seed, T)
    return ExperimentResult(cfg, rows, cells, observed, prior_mse, grids, time.perf_counter() - t0)


def median_table(rows: list[MetricsRow]) -> dict:
    """``{(model, T): median test MSE}`` over seeds, ignoring error rows."""
    out = {}
    for key in sorted({(r.model, r.T_adapt) for r in rows}):
        vals = [r.mse for r in rows if (r.model, r.T_adapt) == key and not r.error]
        out[key] = float(np.median(vals)) if vals else float("nan")
    return out


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def write_metrics_csv(rows: list[MetricsRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(MetricsRow)])
        for r in rows:
            w.writerow([_fmt(getattr(r, f.name)) for f in fields(MetricsRow)])


def write_predictions_csv(cell: CellOutput, path: Path) -> None:
    nan = np.full(len(cell.t), np.nan)
    mono = cell.y_mono if cell.y_mono is not None else nan
    saha = cell.y_saha if cell.y_saha is not None else nan
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "y_true", "y_mono", "y_saha"))
        for row in zip(cell.t, cell.y_true, mono, saha):
            w.writerow([str(int(row[0]))] + [_fmt(v) for v in row[1:]])


def read_predictions_csv(path: Path) -> CellOutput:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return CellOutput(t=data["t"].astype(int), y_true=data["y_true"], y_mono=data["y_mono"], y_saha=data["y_saha"])


def plot_sweep(observed: tuple, cells: dict, path: Path, title: str = "") -> None:
    """One panel per adaptation window: observed SpO2 and both forecasts."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "saha-forecast"
    t_obs, y_obs = observed
    Ts = sorted(cells)
    ncols = 2
    nrows = int(np.ceil(len(Ts) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(12, 3.0 * nrows), sharey=True, squeeze=False)
    for k, ax in enumerate(axes.ravel()):
        if k >= len(Ts):
            ax.set_visible(False)
            continue
        T = Ts[k]
        cell = cells[T]
        ax.set_gid(f"panel-T{T}")
        ax.plot(t_obs, y_obs, color="0.6", lw=0.8, label="SpO2 observed")
        if cell.y_mono is not None:
            ax.plot(cell.t, cell.y_mono, color="tab:orange", lw=1.0, label="monolith")
        if cell.y_saha is not None:
            ax.plot(cell.t, cell.y_saha, color="tab:blue", lw=1.0, label="SAHA-Net")
        ax.axvline(cell.t[0] - 1 - T, color="k", ls="--", lw=0.7)
        ax.axvspan(cell.t[0] - 1 - T, cell.t[0] - 1, color="tab:green", alpha=0.12)
        ax.set_title(f"T_adapt = {T} min", fontsize=10)
        ax.set_xlabel("minute")
        if k % ncols == 0:
            ax.set_ylabel("SpO2")
        if k == 0:
            ax.legend(loc="lower left", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def emit_outputs(result: ExperimentResult, out_dir: str | Path) -> dict:
    """Write metrics, per-cell predictions, structures, figures and a manifest."""
    out = Path(out_dir)
    written = {}
    try:
        (out / "predictions").mkdir(parents=True, exist_ok=True)
        (out / "structures").mkdir(exist_ok=True)
        path = out / "metrics.csv"
        write_metrics_csv(result.rows, path)
        written["metrics"] = path

        path = out / "summary.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("model", "T_adapt", "median_mse"))
            for (model, T), v in median_table(result.rows).items():
                w.writerow((model, T, _fmt(v)))
        written["summary"] = path

        path = out / "pso_history.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("seed", "T_adapt", "iteration", "best_fitness"))
            for (seed, T), cell in sorted(result.cells.items()):
                for it, J in enumerate(cell.pso_history):
                    w.writerow((seed, T, it, _fmt(J)))
        written["pso_history"] = path

        for (seed, T), cell in sorted(result.cells.items()):
            write_predictions_csv(cell, out / "predictions" / f"seed{seed}_T{T}.csv")
            if cell.structure:
                (out / "structures" / f"seed{seed}_T{T}.txt").write_text(cell.structure)

        for seed in result.config.seeds:
            per_T = {T: result.cells[(seed, T)] for T in result.config.t_adapt if (seed, T) in result.cells}
            path = out / f"figure_seed{seed}.svg"
            plot_sweep(result.observed[seed], per_T, path, title=f"seed {seed}")
            written[f"figure_seed{seed}"] = path

        path = out / "manifest.json"
        manifest = {
            "config": result.config.as_dict(),
            "seeds": list(result.config.seeds),
            "versions": {"saha_forecast": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "grid_selection": {str(s): {"hyperparams": asdict(g.best_hyperparams), "n_trees": g.best_n_trees,
                                        "validation_mse": g.validation_mse} for s, g in result.grid.items()},
            "prior_structure_fit_mse": {str(s): v for s, v in result.prior_fit_mse.items()},
            "elapsed_seconds": round(result.elapsed, 1),
        }
        path.write_text(json.dumps(manifest, indent=2, default=str))
        written["manifest"] = path
    except OSError as exc:
        raise OSError(f"failed writing {exc.filename or out}: {exc.strerror or exc}") from exc
    return written
