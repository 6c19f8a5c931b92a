"""Global-best particle swarm search over SAHA-Net structures.

A particle lives in the continuous box [0, 1]^48: 3 x 13 mask coordinates
followed by the 9 row-major link coordinates. Positions are thresholded to
bits only when evaluated; self-links are dropped and an empty mask is repaired
by switching on its highest coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .features import N_FEATURES, SupervisedWindow
from .gbdt import GbdtHyperparams
from .saha import AGENT_HP, SUPERVISOR_HP, NetworkStructure, TrainedSahaNet, fit_full, prior_structure

N_MASK = 3 * N_FEATURES
DIM = N_MASK + 9
THRESHOLD = 0.5


@dataclass(frozen=True)
class FitnessConfig:
    lambda_M: float = 1e-4
    lambda_C: float = 1e-4

    def __post_init__(self):
        if self.lambda_M < 0 or self.lambda_C < 0:
            raise ValueError("penalties must be non-negative")


@dataclass(frozen=True)
class PsoSettings:
    swarm_size: int = 30
    iterations: int = 30
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    v_max: float = 0.5
    init_velocity: float = 0.1
    seed_prior: bool = True


def threshold(position) -> NetworkStructure:
    position = np.asarray(position, dtype=float)
    if position.shape != (DIM,):
        raise ValueError(f"position must have {DIM} coordinates")
    bits = position >= THRESHOLD
    masks = bits[:N_MASK].reshape(3, N_FEATURES).copy()
    coords = position[:N_MASK].reshape(3, N_FEATURES)
    for i in range(3):
        if not masks[i].any():
            masks[i, int(np.argmax(coords[i]))] = True
    links = bits[N_MASK:].reshape(3, 3).copy()
    np.fill_diagonal(links, False)
    return NetworkStructure(masks, links)


def encode(structure: NetworkStructure, on: float = 0.75, off: float = 0.25) -> np.ndarray:
    bits = np.concatenate([structure.masks.ravel(), structure.links.ravel()])
    return np.where(bits, on, off).astype(float)


def penalty(structure: NetworkStructure, cfg: FitnessConfig) -> float:
    return cfg.lambda_M * structure.n_active_inputs + cfg.lambda_C * structure.n_links


def fitness(structure: NetworkStructure, adapt_window: SupervisedWindow, cfg: FitnessConfig = FitnessConfig(),
            hp_agent: GbdtHyperparams = AGENT_HP, hp_sup: GbdtHyperparams = SUPERVISOR_HP,
            seed: int = 0) -> tuple[float, TrainedSahaNet]:
    """In-window MSE of the refitted net plus L0 penalties on inputs and links."""
    net = fit_full(structure, adapt_window, hp_agent, hp_sup, seed=seed)
    mse = float(np.mean((adapt_window.y - net.train_prediction) ** 2))
    return mse + penalty(structure, cfg), net


@dataclass
class PsoResult:
    structure: NetworkStructure
    fitness: float
    payload: object
    history: list = field(default_factory=list)  # global-best fitness after init and each iteration
    n_evaluations: int = 0
    n_unique: int = 0


def swarm_search(objective: Callable[[NetworkStructure], tuple[float, object]], settings: PsoSettings = PsoSettings(),
                 seed: int = 0, prior: NetworkStructure | None = None) -> PsoResult:
    """Minimise ``objective`` over thresholded particle positions.

    ``objective`` returns ``(J, payload)``; results are memoised by structure.
    """
    S = settings.swarm_size
    if S < 1 or settings.iterations < 0:
        raise ValueError("swarm_size must be >= 1 and iterations >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 7]))
    x = rng.random((S, DIM))
    if settings.seed_prior:
        x[0] = encode(prior or prior_structure())
    v = rng.uniform(-settings.init_velocity, settings.init_velocity, (S, DIM))

    cache: dict[str, tuple[float, object, NetworkStructure]] = {}
    n_eval = 0

    def evaluate(pos):
        nonlocal n_eval
        n_eval += 1
        theta = threshold(pos)
        key = theta.bitstring()
        if key not in cache:
            J, payload = objective(theta)
            cache[key] = (float(J), payload, theta)
        return cache[key]

    results = [evaluate(p) for p in x]
    p_best = x.copy()
    p_fit = np.array([r[0] for r in results])
    g = int(np.argmin(p_fit))
    g_pos, g_fit, g_key = p_best[g].copy(), p_fit[g], results[g][2].bitstring()
    history = [g_fit]

    for _ in range(settings.iterations):
        r1 = rng.random((S, DIM))
        r2 = rng.random((S, DIM))
        v = (settings.inertia * v + settings.cognitive * r1 * (p_best - x)
             + settings.social * r2 * (g_pos - x))
        np.clip(v, -settings.v_max, settings.v_max, out=v)
        x = x + v
        # reflecting walls: mirror the position and reverse that velocity component
        outside = (x < 0.0) | (x > 1.0)
        x = np.where(x < 0.0, -x, x)
        x = np.where(x > 1.0, 2.0 - x, x)
        np.clip(x, 0.0, 1.0, out=x)
        v = np.where(outside, -v, v)
        for k in range(S):
            J, _, theta = evaluate(x[k])
            if J < p_fit[k]:
                p_fit[k] = J
                p_best[k] = x[k]
            # equal-fitness moves keep the swarm drifting across thresholding plateaus
            if J <= g_fit:
                g_fit, g_pos, g_key = J, x[k].copy(), theta.bitstring()
        history.append(g_fit)

    J, payload, theta = cache[g_key]
    return PsoResult(structure=theta, fitness=J, payload=payload, history=history,
                     n_evaluations=n_eval, n_unique=len(cache))


def pso_optimize(adapt_window: SupervisedWindow, cfg: FitnessConfig = FitnessConfig(), swarm_size: int = 30,
                 iterations: int = 30, seed: int = 0, settings: PsoSettings | None = None,
                 hp_agent: GbdtHyperparams = AGENT_HP, hp_sup: GbdtHyperparams = SUPERVISOR_HP) -> PsoResult:
    """Search structures on the adaptation window; ``payload`` is the best TrainedSahaNet."""
    if len(adapt_window) == 0:
        raise ValueError("adaptation window is empty")
    settings = settings or PsoSettings(swarm_size=swarm_size, iterations=iterations)

    def objective(theta):
        return fitness(theta, adapt_window, cfg, hp_agent, hp_sup, seed=seed)

    return swarm_search(objective, settings, seed=seed)
