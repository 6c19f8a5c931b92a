"""Shared checks for the unit tests and the acceptance suite."""
import numpy as np

from saha_forecast.features import N_FEATURES
from saha_forecast.saha import NetworkStructure, forward

BOUNDS = {
    "phi_auto": (0, 0.08), "f_DS": (0.05, 0.35), "PaCO2": (25, 80), "Aa": (5, 80), "P_a_O2_cap": (30, 600),
    "shunt": (0.02, 0.45), "SpO2_true": (0.5, 1.0), "SpO2_obs": (0.5, 1.0),
}


def twin_bound_violations(tr) -> list:
    bad = []
    for name, (lo, hi) in BOUNDS.items():
        v = tr[name]
        if np.any(v < lo) or np.any(v > hi):
            bad.append(name)
    if np.any(tr["VT_alv"] < 5):
        bad.append("VT_alv")
    g = tr["g"]
    if not (np.all(np.diff(g) > 0) and np.all((g > 0) & (g < 1))):
        bad.append("g")
    if g[tr.t_star - 1] != 0.5:
        bad.append("g(t_star)")
    return bad


def random_structure(rng, p_mask=0.4, p_link=0.4) -> NetworkStructure:
    masks = rng.random((3, N_FEATURES)) < p_mask
    for i in range(3):
        if not masks[i].any():
            masks[i, rng.integers(N_FEATURES)] = True
    links = rng.random((3, 3)) < p_link
    np.fill_diagonal(links, False)
    return NetworkStructure(masks, links)


def perturb_hidden_columns(net, X, agent, rng) -> bool:
    """True when scrambling the columns agent ``agent`` cannot see leaves its private forecast unchanged."""
    hidden = np.flatnonzero(~net.structure.masks[agent])
    if hidden.size == 0:
        return True
    Xp = X.copy()
    Xp[:, hidden] = rng.normal(0, 100, size=(len(X), hidden.size))
    return np.array_equal(forward(net, X)["private"][agent], forward(net, Xp)["private"][agent])
