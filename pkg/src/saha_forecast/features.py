"""Model-visible input vectors and one-step-ahead supervised windows.

Only ventilator settings, posture and compliance are read from a trace. The
three derived physiology features re-run the ventilation chain under the
pre-transition assumption ``g = 0`` (so alveolar dead space is fixed at its
healthy 0.10); they are honest estimates that become biased after the switch.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .twin import (
    TwinConstants,
    TwinTrace,
    alveolar_po2,
    auto_peep_fraction,
    deadspace_fraction,
    tidal_volumes,
    ventilation_and_paco2,
)

FEATURE_NAMES = (
    "FiO2", "PEEP", "VT", "RR", "Prone", "CL",
    "PaCO2_feat", "P_A_O2_feat", "V_A_feat",
    "dFiO2", "dPEEP", "dRR", "dProne",
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}


class EmptyWindowError(ValueError):
    pass


def derived_features(FiO2, PEEP, VT, RR, CL, consts: TwinConstants | None = None):
    """Return ``(PaCO2_feat, P_A_O2_feat, V_A_feat)`` computed with ``g = 0``."""
    consts = consts or TwinConstants()
    phi = auto_peep_fraction(RR, CL, consts)
    f_DS = deadspace_fraction(0.0, PEEP)
    _, VT_alv = tidal_volumes(VT, phi, f_DS, consts)
    V_A, PaCO2 = ventilation_and_paco2(VT_alv, RR, consts)
    PAO2 = alveolar_po2(FiO2, PaCO2, consts)
    return PaCO2, PAO2, V_A


def feature_matrix(trace: TwinTrace, consts: TwinConstants | None = None) -> np.ndarray:
    """All N rows of u_t for a trace, shape (N, 13). Row k is minute k + 1."""
    inputs = {name: np.asarray(trace[name], dtype=float) for name in ("FiO2", "PEEP", "VT", "RR", "Prone", "CL")}
    PaCO2, PAO2, V_A = derived_features(inputs["FiO2"], inputs["PEEP"], inputs["VT"], inputs["RR"],
                                       inputs["CL"], consts)

    def delta(a):
        return np.concatenate(([0.0], np.diff(a)))

    cols = [
        inputs["FiO2"], inputs["PEEP"], inputs["VT"], inputs["RR"], inputs["Prone"], inputs["CL"],
        PaCO2, PAO2, V_A,
        delta(inputs["FiO2"]), delta(inputs["PEEP"]), delta(inputs["RR"]), delta(inputs["Prone"]),
    ]
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class SupervisedWindow:
    """Rows ``(u_t, SpO2_obs(t + 1))`` for minutes ``t`` in ``[start, stop)``."""

    X: np.ndarray
    y: np.ndarray
    start: int
    stop: int

    def __len__(self) -> int:
        return len(self.y)

    @property
    def minutes(self) -> np.ndarray:
        return np.arange(self.start, self.stop)


def build_window(trace: TwinTrace, start: int, stop: int, consts: TwinConstants | None = None,
                 features: np.ndarray | None = None) -> SupervisedWindow:
    """Supervised pairs for the half-open minute range ``[start, stop)``.

    ``features`` may carry a precomputed :func:`feature_matrix` for the trace.
    """
    N = trace.N
    if not (1 <= start and stop <= N):
        raise ValueError(f"range [{start}, {stop}) must lie within [1, {N})")
    if stop <= start:
        raise EmptyWindowError(f"empty window [{start}, {stop})")
    U = feature_matrix(trace, consts) if features is None else features
    X = np.ascontiguousarray(U[start - 1:stop - 1])
    y = np.ascontiguousarray(np.asarray(trace["SpO2_obs"], dtype=float)[start:stop])
    return SupervisedWindow(X=X, y=y, start=start, stop=stop)


def write_features_csv(trace: TwinTrace, path: str | Path, consts: TwinConstants | None = None) -> None:
    U = feature_matrix(trace, consts)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t",) + FEATURE_NAMES)
        for t, row in zip(trace["t"], U):
            writer.writerow([format(t, ".12g")] + [format(v, ".12g") for v in row])
