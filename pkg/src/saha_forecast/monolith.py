"""Monolithic gradient-boosting baseline.

Hyperparameters are tuned on the pre-transition window only: an 80/20
train-prefix / validation-tail split, a 1200-tree budget per grid point, and
early stopping once the tail MSE has not improved for 10 stages. The model is
then refit with the selected hyperparameters and tree count on everything
before ``t_star + T_adapt``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import gbdt
from .features import SupervisedWindow, build_window
from .gbdt import GbdtHyperparams, GradientBoostedEnsemble

SPO2_RANGE = (0.5, 1.0)


class InsufficientDataError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Training and test minutes overlap."""


def _grid(learning_rate, max_depth, min_samples_leaf, subsample):
    return [dict(learning_rate=lr, max_depth=d, min_samples_leaf=leaf, subsample=sub)
            for lr, d, leaf, sub in itertools.product(learning_rate, max_depth, min_samples_leaf, subsample)]


GRID_PRESETS = {
    "default": _grid((0.01, 0.05), (2, 3), (4, 8), (0.7, 1.0)),
    "reference": _grid((0.01,), (3,), (8,), (0.7,)),
    "small": _grid((0.05,), (2, 3), (8,), (0.7,)),
}


@dataclass
class GridSearchResult:
    best_hyperparams: GbdtHyperparams
    best_n_trees: int
    validation_mse: float
    ledger: list = field(default_factory=list)  # (hyperparams, best stage, mse, stages scanned)


def grid_search(pre_window: SupervisedWindow, grid: list[dict] | str = "default", budget: int = 1200,
                patience: int = 10, train_fraction: float = 0.8, seed: int = 0) -> GridSearchResult:
    if isinstance(grid, str):
        grid = GRID_PRESETS[grid]
    n = len(pre_window)
    if n < 50:
        raise InsufficientDataError(f"grid search needs >= 50 rows, got {n}")
    n_fit = int(np.floor(train_fraction * n))
    X_fit, y_fit = pre_window.X[:n_fit], pre_window.y[:n_fit]
    X_val, y_val = pre_window.X[n_fit:], pre_window.y[n_fit:]

    ledger = []
    best = None
    for point in grid:
        hp = GbdtHyperparams(n_estimators=budget, rng_seed=seed, **point)
        _, curve = gbdt.fit_early_stopping(X_fit, y_fit, X_val, y_val, hp, patience=patience)
        stage = int(np.argmin(curve))
        mse = float(curve[stage])
        ledger.append((hp, stage, mse, len(curve) - 1))
        # strict comparisons keep the earlier grid point on exact ties
        if best is None or mse < best[2] or (mse == best[2] and stage < best[1]):
            best = (hp, stage, mse)
    return GridSearchResult(best_hyperparams=best[0], best_n_trees=best[1], validation_mse=best[2], ledger=ledger)


def train_monolith(trace, t_star: int, T_adapt: int, gsr: GridSearchResult, consts=None,
                   features: np.ndarray | None = None) -> GradientBoostedEnsemble:
    """Refit on all rows in ``[1, t_star + T_adapt)``."""
    stop = t_star + T_adapt
    if stop >= trace.N:
        raise ValueError("t_star + T_adapt must be < N")
    window = build_window(trace, 1, stop, consts, features=features)
    n_trees = gsr.best_n_trees
    hp = gsr.best_hyperparams.with_(n_estimators=max(n_trees, 1))
    model = gbdt.fit(window.X, window.y, hp)
    return model.truncate(0) if n_trees == 0 else model


def clip_report(pred: np.ndarray) -> np.ndarray:
    return np.clip(pred, *SPO2_RANGE)


def forecast(model: GradientBoostedEnsemble, trace, test_start: int, test_stop: int, train_stop: int | None = None,
             consts=None, features: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-step-ahead forecasts for minutes ``[test_start, test_stop)``.

    Returns ``(y_true, y_pred)``; predictions use u_t only and are clipped to
    the observation range. ``train_stop`` is the exclusive end of the
    training minutes and must precede the test range.
    """
    if train_stop is not None and test_start <= train_stop:
        raise ProtocolError(f"test range starts at {test_start}, training ran up to {train_stop}")
    window = build_window(trace, test_start, test_stop, consts, features=features)
    return window.y, clip_report(model.predict(window.X))
