"""Two-level hierarchy of masked physiological agents and a fusing supervisor.

Forward pass for one minute ``t``:

1. agent ``i`` forecasts from the columns of u_t its mask selects;
2. each agent averages the private forecasts of the senders its links allow
   (its own forecast when nobody may send to it);
3. each agent blends private forecast and neighbour mean with a weight
   ``lambda_i`` in [0, 1);
4. the supervisor regresses the target on the three blended forecasts.

``C[j, i] == 1`` permits agent ``j`` to send to agent ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gbdt
from .features import FEATURE_INDEX, FEATURE_NAMES, N_FEATURES, SupervisedWindow
from .gbdt import GbdtHyperparams, GradientBoostedEnsemble

AGENTS = ("V", "G", "S")
LAMBDA_MAX = 1.0 - 1e-6

AGENT_HP = GbdtHyperparams(n_estimators=300, learning_rate=0.05, max_depth=3, min_samples_leaf=4, subsample=1.0)
SUPERVISOR_HP = GbdtHyperparams(n_estimators=200, learning_rate=0.05, max_depth=2, min_samples_leaf=4, subsample=1.0)


class StructureError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NetworkStructure:
    masks: np.ndarray  # (3, 13) bool, rows in AGENTS order
    links: np.ndarray  # (3, 3) bool, links[j, i]: j may send to i

    def __post_init__(self):
        masks = np.array(self.masks, dtype=bool)
        links = np.array(self.links, dtype=bool)
        if masks.shape != (3, N_FEATURES) or links.shape != (3, 3):
            raise StructureError("masks must be (3, 13) and links (3, 3)")
        if links.diagonal().any():
            raise StructureError("self-links are not allowed")
        if not masks.any(axis=1).all():
            raise StructureError("every agent needs at least one visible input")
        masks.setflags(write=False)
        links.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "links", links)

    @property
    def n_active_inputs(self) -> int:
        return int(self.masks.sum())

    @property
    def n_links(self) -> int:
        return int(self.links.sum())

    def columns(self, agent: int) -> np.ndarray:
        return np.flatnonzero(self.masks[agent])

    def senders(self, receiver: int) -> np.ndarray:
        return np.flatnonzero(self.links[:, receiver])

    def bitstring(self) -> str:
        bits = np.concatenate([self.masks.ravel(), self.links.ravel()])
        return "".join("1" if b else "0" for b in bits)

    def to_text(self) -> str:
        rows = ["".join("1" if b else "0" for b in m) for m in self.masks]
        c = "".join("1" if b else "0" for b in self.links.ravel())
        return f"M_V={rows[0]}\nM_G={rows[1]}\nM_S={rows[2]}\nC={c}\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkStructure":
        entries = dict(line.split("=", 1) for line in text.split() if "=" in line)
        masks = [[ch == "1" for ch in entries[f"M_{a}"]] for a in AGENTS]
        links = np.array([ch == "1" for ch in entries["C"]]).reshape(3, 3)
        return cls(np.array(masks), links)


def prior_structure() -> NetworkStructure:
    """Knowledge-based starting structure with no inter-agent links."""
    ventilation = ("PEEP", "RR", "VT", "CL", "dPEEP", "dRR", "V_A_feat")
    oxygenation = ("FiO2", "PEEP", "Prone", "P_A_O2_feat", "PaCO2_feat", "dFiO2", "dPEEP", "dProne")
    masks = np.zeros((3, N_FEATURES), dtype=bool)
    for row, names in zip(range(3), (ventilation, oxygenation, oxygenation)):
        masks[row, [FEATURE_INDEX[n] for n in names]] = True
    return NetworkStructure(masks, np.zeros((3, 3), dtype=bool))


def full_structure() -> NetworkStructure:
    return NetworkStructure(np.ones((3, N_FEATURES), dtype=bool), np.zeros((3, 3), dtype=bool))


# ---------------------------------------------------------------------------
# forward-pass pieces
# ---------------------------------------------------------------------------


def neighbor_aggregate(private: np.ndarray, links: np.ndarray, receiver: int) -> np.ndarray | float:
    """Mean of the permitted senders' private forecasts.

    ``private`` has the three agents on its first axis (scalar per agent or a
    series per agent). With no permitted sender the receiver's own private
    forecast is returned.
    """
    private = np.asarray(private, dtype=float)
    links = np.asarray(links, dtype=bool)
    senders = [j for j in range(3) if j != receiver and links[j, receiver]]
    if not senders:
        out = private[receiver]
    else:
        out = private[senders].mean(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def fit_lambda(private, aggregate, targets) -> float:
    """Least-squares blend weight projected onto [0, 1 - 1e-6]."""
    p = np.asarray(private, dtype=float)
    a = np.asarray(aggregate, dtype=float)
    y = np.asarray(targets, dtype=float)
    diff = a - p
    denom = float(np.dot(diff, diff))
    if denom == 0.0:
        return 0.0
    lam = float(np.dot(diff, y - p)) / denom
    return min(max(lam, 0.0), LAMBDA_MAX)


def convex_update(private, aggregate, lam: float):
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1)")
    out = (1.0 - lam) * np.asarray(private, dtype=float) + lam * np.asarray(aggregate, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


def _agent_seed(seed: int, agent: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), 101, agent]).generate_state(1, np.uint64)[0])


def private_forecasts(structure: NetworkStructure, window: SupervisedWindow, hp_agent: GbdtHyperparams = AGENT_HP,
                      seed: int = 0) -> tuple[np.ndarray, list[GradientBoostedEnsemble]]:
    """Fit each agent on its selected columns; return (3, n) in-sample forecasts and the models."""
    if len(window) == 0:
        raise InsufficientDataError("empty window")
    preds = np.empty((3, len(window)))
    models = []
    for i in range(3):
        cols = structure.columns(i)
        if cols.size == 0:
            raise StructureError(f"agent {AGENTS[i]} has an empty mask")
        hp = hp_agent.with_(rng_seed=_agent_seed(seed, i))
        model, preds[i] = gbdt.fit_with_predictions(window.X[:, cols], window.y, hp)
        models.append(model)
    return preds, models


def _updated(private: np.ndarray, links: np.ndarray, lambdas) -> tuple[np.ndarray, np.ndarray]:
    aggregates = np.stack([neighbor_aggregate(private, links, i) for i in range(3)])
    updated = np.stack([convex_update(private[i], aggregates[i], lambdas[i]) for i in range(3)])
    return aggregates, updated


def fit_supervisor(updated: np.ndarray, targets, hp_sup: GbdtHyperparams = SUPERVISOR_HP,
                   seed: int = 0) -> tuple[GradientBoostedEnsemble, np.ndarray]:
    """Fit the fusion regressor on the (n, 3) matrix of blended agent forecasts."""
    features = np.ascontiguousarray(np.asarray(updated, dtype=float).T)
    return gbdt.fit_with_predictions(features, targets, hp_sup.with_(rng_seed=_agent_seed(seed, 3)))


@dataclass(frozen=True, eq=False)
class TrainedSahaNet:
    structure: NetworkStructure
    agent_models: tuple
    lambdas: tuple
    supervisor_model: GradientBoostedEnsemble
    feature_names: tuple = FEATURE_NAMES
    train_prediction: np.ndarray = field(default=None, repr=False)
    train_range: tuple = (0, 0)


def fit_full(structure: NetworkStructure, window: SupervisedWindow, hp_agent: GbdtHyperparams = AGENT_HP,
             hp_sup: GbdtHyperparams = SUPERVISOR_HP, seed: int = 0) -> TrainedSahaNet:
    """Private fits, neighbour means, blend weights, then the supervisor, in that order."""
    if len(window) < 1:
        raise InsufficientDataError("cannot fit SAHA-Net on an empty window")
    private, models = private_forecasts(structure, window, hp_agent, seed)
    links = structure.links
    lambdas = []
    for i in range(3):
        aggregate = neighbor_aggregate(private, links, i)
        lambdas.append(fit_lambda(private[i], aggregate, window.y))
    _, updated = _updated(private, links, lambdas)
    supervisor, train_pred = fit_supervisor(updated, window.y, hp_sup, seed)
    return TrainedSahaNet(structure=structure, agent_models=tuple(models), lambdas=tuple(lambdas),
                          supervisor_model=supervisor, train_prediction=train_pred,
                          train_range=(window.start, window.stop))


def forward(net: TrainedSahaNet, X: np.ndarray) -> dict:
    """Intermediate quantities of the frozen forward pass, for inspection and tests."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(net.feature_names):
        raise gbdt.ShapeError(f"expected (n, {len(net.feature_names)}) inputs, got {X.shape}")
    private = np.stack([m.predict(X[:, net.structure.columns(i)]) for i, m in enumerate(net.agent_models)])
    aggregates, updated = _updated(private, net.structure.links, net.lambdas)
    final = net.supervisor_model.predict(np.ascontiguousarray(updated.T))
    return {"private": private, "aggregate": aggregates, "updated": updated, "prediction": final}


def predict_full(net: TrainedSahaNet, X: np.ndarray) -> np.ndarray:
    return forward(net, X)["prediction"]
