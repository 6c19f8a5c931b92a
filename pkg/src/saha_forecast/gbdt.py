"""Gradient-boosted regression trees with squared-error loss.

Trees are stored level-ordered in fixed-size arrays (node ``k`` has children
``2k+1`` and ``2k+2``), one row per boosting stage. Split search is an
exhaustive scan over midpoints between consecutive distinct feature values,
minimising the summed squared error of the two children. Near-ties (within a
relative 1e-12) resolve to the lowest feature index, then the lowest threshold.

The boosting loop is compiled with numba; it is sequential across stages.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from numba import njit

SERIAL_VERSION = 1


class FitError(ValueError):
    pass


class DataError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GbdtHyperparams:
    n_estimators: int = 1200
    learning_rate: float = 0.01
    max_depth: int = 3
    min_samples_leaf: int = 8
    subsample: float = 0.7
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")

    def with_(self, **kw) -> "GbdtHyperparams":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _tree_output(x, feat, thr, val):
    node = 0
    while feat[node] >= 0:
        if x[feat[node]] <= thr[node]:
            node = 2 * node + 1
        else:
            node = 2 * node + 2
    return val[node]


@njit(cache=True)
def _grow_tree(X, xs, resid, order, node_of, max_depth, min_leaf, feat, thr, val):
    """Grow one tree in place. ``node_of[i] < 0`` marks rows outside the bag.

    ``xs[f, j]`` is ``X[order[f, j], f]``, the j-th smallest value of feature f.
    """
    n_rows, n_feat = X.shape
    dres = np.zeros(n_rows)
    n_nodes = feat.shape[0]
    cnt = np.zeros(n_nodes, np.int64)
    shift = np.zeros(n_nodes)
    s1 = np.zeros(n_nodes)
    s2 = np.zeros(n_nodes)
    active = np.zeros(n_nodes, np.bool_)
    active[0] = True
    l_cnt = np.zeros(n_nodes, np.int64)
    l_s1 = np.zeros(n_nodes)
    l_s2 = np.zeros(n_nodes)
    last = np.zeros(n_nodes)
    seen = np.zeros(n_nodes, np.bool_)
    best = np.zeros(n_nodes)
    tol = np.zeros(n_nodes)
    best_f = np.full(n_nodes, -1, np.int64)
    best_t = np.zeros(n_nodes)

    for level in range(max_depth + 1):
        lo = (1 << level) - 1
        hi = (1 << (level + 1)) - 1
        for k in range(lo, hi):
            cnt[k] = 0
            s1[k] = 0.0
            s2[k] = 0.0
            seen[k] = False
        # shifted sums: shift by the first residual seen in each node
        for i in range(n_rows):
            k = node_of[i]
            if k < lo or k >= hi:
                continue
            if not seen[k]:
                seen[k] = True
                shift[k] = resid[i]
            d = resid[i] - shift[k]
            dres[i] = d
            cnt[k] += 1
            s1[k] += d
            s2[k] += d * d
        any_split = False
        for k in range(lo, hi):
            best_f[k] = -1
            if active[k]:
                feat[k] = -1
                val[k] = shift[k] + s1[k] / cnt[k]
                if level < max_depth and cnt[k] >= 2 * min_leaf:
                    best[k] = s2[k] - s1[k] * s1[k] / cnt[k]
                    tol[k] = 1e-12 * s2[k]
                    any_split = True
        if not any_split:
            break
        for f in range(n_feat):
            for k in range(lo, hi):
                l_cnt[k] = 0
                l_s1[k] = 0.0
                l_s2[k] = 0.0
                seen[k] = False
            for j in range(n_rows):
                i = order[f, j]
                k = node_of[i]
                if k < lo or k >= hi:
                    continue
                v = xs[f, j]
                if seen[k] and v > last[k]:
                    nl = l_cnt[k]
                    nr = cnt[k] - nl
                    if nl >= min_leaf and nr >= min_leaf:
                        r1 = s1[k] - l_s1[k]
                        r2 = s2[k] - l_s2[k]
                        sse = (l_s2[k] - l_s1[k] * l_s1[k] / nl) + (r2 - r1 * r1 / nr)
                        if sse < best[k] - tol[k]:
                            best[k] = sse
                            best_f[k] = f
                            best_t[k] = last[k] + (v - last[k]) * 0.5
                d = dres[i]
                l_cnt[k] += 1
                l_s1[k] += d
                l_s2[k] += d * d
                last[k] = v
                seen[k] = True
        for k in range(lo, hi):
            if best_f[k] >= 0:
                feat[k] = best_f[k]
                thr[k] = best_t[k]
                active[2 * k + 1] = True
                active[2 * k + 2] = True
        for i in range(n_rows):
            k = node_of[i]
            if k < lo or k >= hi:
                continue
            if best_f[k] >= 0:
                if X[i, best_f[k]] <= best_t[k]:
                    node_of[i] = 2 * k + 1
                else:
                    node_of[i] = 2 * k + 2
            else:
                node_of[i] = -1


@njit(cache=True)
def _boost(X, xs, y, order, inbag, base, lr, n_estimators, max_depth, min_leaf,
           Xv, yv, patience, feat, thr, val, curve):
    """Run boosting stages; returns the number of trees actually grown.

    ``inbag`` has shape (n_estimators, n) or (0, n) for no subsampling.
    When ``patience > 0`` the validation MSE is recorded per stage in
    ``curve`` and growth stops after ``patience`` stages without improvement.
    """
    n = X.shape[0]
    nv = Xv.shape[0]
    pred = np.full(n, base)
    pred_v = np.full(nv, base)
    resid = np.empty(n)
    node_of = np.empty(n, np.int64)
    track = patience > 0 and nv > 0
    best_mse = 0.0
    best_m = 0
    if track:
        acc = 0.0
        for i in range(nv):
            acc += (yv[i] - pred_v[i]) ** 2
        best_mse = acc / nv
        curve[0] = best_mse
    use_bag = inbag.shape[0] > 0
    for m in range(n_estimators):
        for i in range(n):
            resid[i] = y[i] - pred[i]
            if use_bag and not inbag[m, i]:
                node_of[i] = -1
            else:
                node_of[i] = 0
        _grow_tree(X, xs, resid, order, node_of, max_depth, min_leaf, feat[m], thr[m], val[m])
        for i in range(n):
            pred[i] += lr * _tree_output(X[i], feat[m], thr[m], val[m])
        if track:
            acc = 0.0
            for i in range(nv):
                pred_v[i] += lr * _tree_output(Xv[i], feat[m], thr[m], val[m])
                acc += (yv[i] - pred_v[i]) ** 2
            mse = acc / nv
            curve[m + 1] = mse
            if mse < best_mse:
                best_mse = mse
                best_m = m + 1
            elif m + 1 - best_m >= patience:
                return m + 1, pred
    return n_estimators, pred


@njit(cache=True)
def _staged(X, base, lr, feat, thr, val, n_trees):
    n = X.shape[0]
    out = np.empty((n_trees + 1, n))
    for i in range(n):
        p = base
        out[0, i] = p
        for m in range(n_trees):
            p += lr * _tree_output(X[i], feat[m], thr[m], val[m])
            out[m + 1, i] = p
    return out


@njit(cache=True)
def _predict(X, base, lr, feat, thr, val, n_trees):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        p = base
        for m in range(n_trees):
            p += lr * _tree_output(X[i], feat[m], thr[m], val[m])
        out[i] = p
    return out


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GradientBoostedEnsemble:
    """Fitted ensemble: ``base_value + learning_rate * sum(tree outputs)``."""

    base_value: float
    learning_rate: float
    feature: np.ndarray  # (n_trees, n_nodes) int64, -1 marks a leaf
    threshold: np.ndarray
    value: np.ndarray
    n_features: int
    hyperparams: GbdtHyperparams

    @property
    def n_trees(self) -> int:
        return self.feature.shape[0]

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected (n, {self.n_features}) inputs, got {X.shape}")
        return X

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        return _predict(X, self.base_value, self.learning_rate, self.feature, self.threshold,
                        self.value, self.n_trees)

    def staged_predict(self, X) -> np.ndarray:
        """Predictions after 0, 1, ..., n_trees stages, shape (n_trees + 1, n)."""
        X = self._check(X)
        return _staged(X, self.base_value, self.learning_rate, self.feature, self.threshold,
                       self.value, self.n_trees)

    def truncate(self, m: int) -> "GradientBoostedEnsemble":
        if not 0 <= m <= self.n_trees:
            raise ValueError(f"m={m} outside [0, {self.n_trees}]")
        return replace(self, feature=self.feature[:m].copy(), threshold=self.threshold[:m].copy(),
                       value=self.value[:m].copy())

    def tree_depths(self) -> list[int]:
        depths = []
        for row in self.feature:
            internal = np.flatnonzero(row >= 0)
            depths.append(0 if internal.size == 0 else int(np.floor(np.log2(internal.max() + 1))) + 1)
        return depths

    def to_json(self) -> str:
        return json.dumps({
            "format": "saha_forecast.gbdt", "version": SERIAL_VERSION,
            "base_value": self.base_value, "learning_rate": self.learning_rate,
            "n_features": self.n_features, "hyperparams": asdict(self.hyperparams),
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "value": self.value.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "GradientBoostedEnsemble":
        d = json.loads(text)
        if d.get("format") != "saha_forecast.gbdt" or d.get("version") != SERIAL_VERSION:
            raise ValueError("unsupported model blob")
        width = 2 ** (d["hyperparams"]["max_depth"] + 1) - 1
        return cls(
            base_value=d["base_value"], learning_rate=d["learning_rate"],
            feature=np.asarray(d["feature"], dtype=np.int64).reshape(-1, width),
            threshold=np.asarray(d["threshold"], dtype=np.float64).reshape(-1, width),
            value=np.asarray(d["value"], dtype=np.float64).reshape(-1, width),
            n_features=d["n_features"], hyperparams=GbdtHyperparams(**d["hyperparams"]),
        )


def _bag_masks(n: int, hp: GbdtHyperparams) -> np.ndarray:
    if hp.subsample >= 1.0:
        return np.zeros((0, n), dtype=np.bool_)
    k = math.ceil(hp.subsample * n)
    masks = np.zeros((hp.n_estimators, n), dtype=np.bool_)
    seed = int(hp.rng_seed) & (2**64 - 1)
    for m in range(hp.n_estimators):
        # one sub-stream per stage, so truncation never alters earlier trees
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, m])))
        masks[m, rng.choice(n, size=k, replace=False)] = True
    return masks


def _validate(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"incompatible shapes {X.shape} and {y.shape}")
    if X.shape[0] == 0:
        raise FitError("cannot fit on empty data")
    if X.shape[1] == 0:
        raise FitError("need at least one feature")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in training data")
    return X, y


def _fit(X, y, hp, X_val=None, y_val=None, patience=0):
    X, y = _validate(X, y)
    n, d = X.shape
    if X_val is None:
        X_val = np.zeros((0, d))
        y_val = np.zeros(0)
    else:
        X_val = np.ascontiguousarray(X_val, dtype=np.float64)
        y_val = np.ascontiguousarray(y_val, dtype=np.float64)
    width = 2 ** (hp.max_depth + 1) - 1
    M = hp.n_estimators
    feat = np.full((M, width), -1, dtype=np.int64)
    thr = np.zeros((M, width))
    val = np.zeros((M, width))
    curve = np.full(M + 1, np.nan)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    xs = np.ascontiguousarray(np.take_along_axis(X, order.T, axis=0).T)
    base = float(np.mean(y))
    grown, train_pred = _boost(X, xs, y, order, _bag_masks(n, hp), base, hp.learning_rate, M,
                               hp.max_depth, hp.min_samples_leaf, X_val, y_val, patience,
                               feat, thr, val, curve)
    model = GradientBoostedEnsemble(base, hp.learning_rate, feat[:grown], thr[:grown], val[:grown], d, hp)
    return model, train_pred, curve[: grown + 1]


def fit(X, y, hp: GbdtHyperparams) -> GradientBoostedEnsemble:
    """Fit ``hp.n_estimators`` stages of residual trees."""
    return _fit(X, y, hp)[0]


def fit_with_predictions(X, y, hp: GbdtHyperparams) -> tuple[GradientBoostedEnsemble, np.ndarray]:
    """Like :func:`fit`, also returning the in-sample predictions (identical to ``predict(X)``)."""
    model, train_pred, _ = _fit(X, y, hp)
    return model, train_pred


def fit_early_stopping(X, y, X_val, y_val, hp: GbdtHyperparams, patience: int = 10):
    """Grow stages until validation MSE has not improved for ``patience`` stages.

    Returns ``(model, curve)`` where ``curve[m]`` is the validation MSE after
    ``m`` stages for every stage actually grown.
    """
    if len(y_val) == 0:
        raise FitError("early stopping needs a validation set")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    model, _, curve = _fit(X, y, hp, X_val, y_val, patience)
    return model, curve


def predict(model: GradientBoostedEnsemble, X) -> np.ndarray:
    return model.predict(X)


def staged_predict(model: GradientBoostedEnsemble, X) -> np.ndarray:
    return model.staged_predict(X)


def truncate(model: GradientBoostedEnsemble, m: int) -> GradientBoostedEnsemble:
    return model.truncate(m)
