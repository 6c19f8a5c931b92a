"""Synthetic digital twin of pulmonary gas exchange.

The twin evolves on a one-minute grid ``t = 1..N``. A logistic regime variable
``g(t)`` moves the lung from a healthy state into an ARDS-like state centred at
``t_star``; compliance falls, dead space, A-a gradient and shunt rise, and PEEP
and proning push back. The observed saturation is an EWMA-filtered, noisy copy
of the true arterial saturation.

Ventilator settings are produced by a closed-loop clinician model (reactive
FiO2/PEEP titration every ten minutes), so :func:`generate_scenario` rolls the
physiology forward while it builds the input trajectories. :func:`simulate`
then replays the full chain from the stored inputs and the scenario seed and
reproduces exactly what the controller saw.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

# Sub-stream identifiers; each episode RNG is derived only from its seed.
_STREAM_SCENARIO = 0
_STREAM_PHYSIOLOGY = 1
_STREAM_SENSOR = 2


class ConfigError(ValueError):
    """Raised for invalid scenario or constant ranges."""


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), stream]))


@dataclass(frozen=True)
class TwinConstants:
    P_b: float = 760.0
    P_H2O: float = 47.0
    R: float = 0.8
    V_CO2: float = 200.0  # mL/min
    SvO2: float = 0.70
    P50: float = 26.6
    hill_n: float = 2.7
    PBW: float = 70.0
    VD_anat: float | None = None  # defaults to 2.2 * PBW
    k_RR: float = 0.002
    k_CL: float = 0.004
    tau_sens: float = 10.0  # s
    sigma_obs: float = 0.01
    dt: float = 60.0  # s per step
    sigma_Aa: float = 1.5  # mmHg, per-minute A-a noise
    sigma_shunt: float = 0.01  # per-minute shunt noise

    def __post_init__(self):
        if self.VD_anat is None:
            object.__setattr__(self, "VD_anat", 2.2 * self.PBW)
        for name in ("P_b", "P_H2O", "P50"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.SvO2 < 1.0:
            raise ConfigError("SvO2 must lie in (0, 1)")
        if self.hill_n <= 0:
            raise ConfigError("hill_n must be positive")
        if self.tau_sens <= 0 or self.dt <= 0:
            raise ConfigError("tau_sens and dt must be positive")
        if min(self.sigma_obs, self.sigma_Aa, self.sigma_shunt) < 0:
            raise ConfigError("noise scales must be non-negative")

    @property
    def alpha(self) -> float:
        """EWMA retention factor of the oximeter."""
        return math.exp(-self.dt / self.tau_sens)

    def without_noise(self) -> "TwinConstants":
        return TwinConstants(**{**self.as_dict(), "sigma_obs": 0.0, "sigma_Aa": 0.0, "sigma_shunt": 0.0})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# Physiology equations. All accept scalars or numpy arrays.
# ---------------------------------------------------------------------------


def clip(x: ArrayLike, a: float, b: float) -> ArrayLike:
    """Restrict ``x`` to ``[a, b]`` as ``min(max(x, a), b)``."""
    if a > b:
        raise ValueError(f"invalid clip bounds: {a} > {b}")
    out = np.minimum(np.maximum(x, a), b)
    return float(out) if np.ndim(out) == 0 else out


def regime(t: ArrayLike, t_star: float, tau_g: float) -> ArrayLike:
    """Logistic transition variable g(t)."""
    if tau_g <= 0:
        raise ValueError("tau_g must be positive")
    z = -(np.asarray(t, dtype=float) - t_star) / tau_g
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(z))
    return float(out) if np.ndim(out) == 0 else out


def auto_peep_fraction(RR: ArrayLike, CL: ArrayLike, consts: TwinConstants) -> ArrayLike:
    return clip(consts.k_RR * (np.asarray(RR) - 14.0) + consts.k_CL * (35.0 - np.asarray(CL)), 0.0, 0.08)


def deadspace_fraction(g: ArrayLike, PEEP: ArrayLike) -> ArrayLike:
    g = np.asarray(g, dtype=float)
    return clip(0.10 * (1.0 - g) + 0.25 * g - 0.005 * g * (np.asarray(PEEP) - 5.0), 0.05, 0.35)


def tidal_volumes(VT: ArrayLike, phi_auto: ArrayLike, f_DS: ArrayLike, consts: TwinConstants):
    """Return ``(VT_eff, VT_alv)`` in mL."""
    VT_eff = np.asarray(VT, dtype=float) * (1.0 - np.asarray(phi_auto))
    VT_alv = np.maximum(VT_eff - consts.VD_anat - np.asarray(f_DS) * VT_eff, 5.0)
    if np.ndim(VT_eff) == 0:
        return float(VT_eff), float(VT_alv)
    return VT_eff, VT_alv


def ventilation_and_paco2(VT_alv: ArrayLike, RR: ArrayLike, consts: TwinConstants):
    """Return ``(V_A [L/min], PaCO2 [mmHg])``.

    V_CO2 is converted from mL/min to L/min so that the alveolar ventilation
    equation gives ~40 mmHg at ~4.3 L/min.
    """
    V_A = np.asarray(VT_alv, dtype=float) * np.asarray(RR) / 1000.0
    PaCO2 = clip(863.0 * (consts.V_CO2 / 1000.0) / np.maximum(V_A, 0.5), 25.0, 80.0)
    if np.ndim(V_A) == 0:
        return float(V_A), float(PaCO2)
    return V_A, PaCO2


def alveolar_po2(FiO2: ArrayLike, PaCO2: ArrayLike, consts: TwinConstants) -> ArrayLike:
    out = np.asarray(FiO2, dtype=float) * (consts.P_b - consts.P_H2O) - np.asarray(PaCO2) / consts.R
    return float(out) if np.ndim(out) == 0 else out


def aa_gradient_raw(g, PEEP, prone, eps_Aa=0.0):
    g = np.asarray(g, dtype=float)
    return 10.0 * (1.0 - g) + 45.0 * g - 2.0 * g * (np.asarray(PEEP) - 5.0) - 4.0 * g * np.asarray(prone) + eps_Aa


def aa_gradient(g: ArrayLike, PEEP: ArrayLike, prone: ArrayLike, eps_Aa: ArrayLike = 0.0) -> ArrayLike:
    return clip(aa_gradient_raw(g, PEEP, prone, eps_Aa), 5.0, 80.0)


def shunt_fraction_raw(g, PEEP, prone, eps_s=0.0):
    g = np.asarray(g, dtype=float)
    return 0.05 * (1.0 - g) + 0.32 * g - 0.015 * g * (np.asarray(PEEP) - 5.0) - 0.06 * g * np.asarray(prone) + eps_s


def shunt_fraction(g: ArrayLike, PEEP: ArrayLike, prone: ArrayLike, eps_s: ArrayLike = 0.0) -> ArrayLike:
    return clip(shunt_fraction_raw(g, PEEP, prone, eps_s), 0.02, 0.45)


def hill_saturation(PaO2: ArrayLike, consts: TwinConstants) -> ArrayLike:
    # Ratio form keeps P = P50 exactly at 0.5 and avoids overflow for large P.
    r = (consts.P50 / np.asarray(PaO2, dtype=float)) ** consts.hill_n
    out = 1.0 / (1.0 + r)
    return float(out) if np.ndim(out) == 0 else out


def arterial_saturation(shunt: ArrayLike, S_cap: ArrayLike, consts: TwinConstants) -> ArrayLike:
    shunt = np.asarray(shunt, dtype=float)
    return clip((1.0 - shunt) * np.asarray(S_cap) + shunt * consts.SvO2, 0.5, 1.0)


def observe(S_true: np.ndarray, consts: TwinConstants, rng: np.random.Generator | None = None,
            noise: np.ndarray | None = None) -> np.ndarray:
    """EWMA sensor inertia plus additive Gaussian noise, clipped to [0.5, 1].

    Either pass ``rng`` (noise drawn as ``N(0, sigma_obs^2)``) or a
    pre-drawn ``noise`` array of unit-variance draws.
    """
    S_true = np.asarray(S_true, dtype=float)
    if S_true.size == 0:
        raise ValueError("empty saturation series")
    if noise is None:
        noise = rng.standard_normal(S_true.size) if rng is not None else np.zeros(S_true.size)
    alpha = consts.alpha
    smooth = np.empty_like(S_true)
    smooth[0] = S_true[0]
    for k in range(1, S_true.size):
        smooth[k] = alpha * smooth[k - 1] + (1.0 - alpha) * S_true[k]
    return np.minimum(np.maximum(smooth + consts.sigma_obs * noise, 0.5), 1.0)


# ---------------------------------------------------------------------------
# Scenario generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    N: int = 720
    t_star: int = 360
    tau_g_range: tuple[float, float] = (12.0, 20.0)
    FiO2_init: float = 0.40
    PEEP_init: float = 5.0
    titration_interval: int = 10
    spo2_low: float = 0.90
    spo2_high: float = 0.96
    FiO2_step: float = 0.05
    PEEP_step: float = 1.0
    FiO2_wean_floor: float = 0.30
    PEEP_cap: float = 18.0
    prone_probability: float = 0.5
    prone_delay: tuple[int, int] = (60, 120)
    VT_per_kg: float = 6.0
    VT_jitter: float = 5.0  # mL, sd per minute
    RR_base: float = 14.0
    RR_peak: float = 28.0
    RR_jitter: float = 0.5  # breaths/min, sd per minute
    CL_pre: float = 50.0
    CL_post: float = 25.0
    CL_noise: float = 1.0
    CL_bounds: tuple[float, float] = (15.0, 60.0)

    def __post_init__(self):
        lo, hi = self.tau_g_range
        if not (12.0 <= lo <= hi <= 20.0):
            raise ConfigError("tau_g_range must lie inside [12, 20]")
        if self.N < 2 or not 1 <= self.t_star <= self.N:
            raise ConfigError("need N >= 2 and 1 <= t_star <= N")
        if not 0.21 <= self.FiO2_init <= 1.0:
            raise ConfigError("FiO2_init outside [0.21, 1]")
        if not 0.0 <= self.PEEP_init <= 24.0 or not self.PEEP_init <= self.PEEP_cap <= 24.0:
            raise ConfigError("PEEP settings outside [0, 24]")
        if self.titration_interval < 1:
            raise ConfigError("titration_interval must be >= 1")
        if not 0.0 <= self.prone_probability <= 1.0:
            raise ConfigError("prone_probability outside [0, 1]")
        if self.prone_delay[0] > self.prone_delay[1] or self.prone_delay[0] < 0:
            raise ConfigError("invalid prone_delay")
        if min(self.VT_jitter, self.RR_jitter, self.CL_noise) < 0:
            raise ConfigError("jitter scales must be non-negative")
        if self.CL_bounds[0] <= 0 or self.CL_bounds[0] > self.CL_bounds[1]:
            raise ConfigError("invalid CL_bounds")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


INPUT_COLUMNS = ("FiO2", "PEEP", "VT", "RR", "Prone", "CL")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scenario:
    N: int
    t_star: int
    tau_g: float
    FiO2: np.ndarray
    PEEP: np.ndarray
    VT: np.ndarray
    RR: np.ndarray
    Prone: np.ndarray
    CL: np.ndarray
    rng_seed: int

    def __post_init__(self):
        if not 12.0 <= self.tau_g <= 20.0:
            raise ConfigError("tau_g outside [12, 20]")
        for name in INPUT_COLUMNS:
            arr = _frozen(getattr(self, name))
            if arr.shape != (self.N,):
                raise ConfigError(f"{name} must have exactly N={self.N} entries")
            object.__setattr__(self, name, arr)
        if np.any(self.FiO2 < 0.21 - 1e-12) or np.any(self.FiO2 > 1.0 + 1e-12):
            raise ConfigError("FiO2 outside [0.21, 1]")
        if np.any(self.PEEP < 0) or np.any(self.PEEP > 24):
            raise ConfigError("PEEP outside [0, 24]")
        if np.any(self.VT <= 0) or np.any(self.RR <= 0) or np.any(self.CL <= 0):
            raise ConfigError("VT, RR and CL must be positive")
        if not np.all(np.isin(self.Prone, (0.0, 1.0))):
            raise ConfigError("Prone must be binary")


def _physiology_noise(seed: int, N: int, consts: TwinConstants):
    rng = _stream(seed, _STREAM_PHYSIOLOGY)
    eps_Aa = consts.sigma_Aa * rng.standard_normal(N)
    eps_s = consts.sigma_shunt * rng.standard_normal(N)
    sensor = _stream(seed, _STREAM_SENSOR).standard_normal(N)
    return eps_Aa, eps_s, sensor


def _true_saturation(g, FiO2, PEEP, VT, RR, prone, CL, eps_Aa, eps_s, consts):
    """One pass of the gas-exchange chain; returns a dict of hidden states."""
    phi = auto_peep_fraction(RR, CL, consts)
    f_DS = deadspace_fraction(g, PEEP)
    VT_eff, VT_alv = tidal_volumes(VT, phi, f_DS, consts)
    V_A, PaCO2 = ventilation_and_paco2(VT_alv, RR, consts)
    PAO2 = alveolar_po2(FiO2, PaCO2, consts)
    Aa = aa_gradient(g, PEEP, prone, eps_Aa)
    PaO2_cap = clip(PAO2 - Aa, 30.0, 600.0)
    shunt = shunt_fraction(g, PEEP, prone, eps_s)
    S_cap = hill_saturation(PaO2_cap, consts)
    SaO2 = arterial_saturation(shunt, S_cap, consts)
    return dict(g=g, phi_auto=phi, VT_eff=VT_eff, VT_alv=VT_alv, f_DS=f_DS, V_A=V_A, PaCO2=PaCO2,
                P_A_O2=PAO2, Aa=Aa, P_a_O2_cap=PaO2_cap, shunt=shunt, S_a_O2_cap=S_cap, SpO2_true=SaO2)


def generate_scenario(config: ScenarioConfig | None = None, seed: int = 0,
                      consts: TwinConstants | None = None) -> Scenario:
    """Build the per-minute inputs for one episode.

    VT, RR, CL and the proning schedule are open-loop; FiO2 and PEEP follow a
    reactive titration rule driven by the simulated oximeter reading, so the
    physiology is rolled forward minute by minute here.
    """
    config = config or ScenarioConfig()
    consts = consts or TwinConstants()
    N, t_star = config.N, config.t_star
    rng = _stream(seed, _STREAM_SCENARIO)

    tau_g = float(rng.uniform(*config.tau_g_range))
    prone_on = rng.random() < config.prone_probability
    prone_start = t_star + int(rng.integers(config.prone_delay[0], config.prone_delay[1] + 1))
    VT_noise = rng.standard_normal(N)
    RR_noise = rng.standard_normal(N)
    CL_noise = rng.standard_normal(N)

    t = np.arange(1, N + 1, dtype=float)
    g = regime(t, t_star, tau_g)
    VT = np.maximum(config.VT_per_kg * consts.PBW + config.VT_jitter * VT_noise, 1.0)
    RR = np.maximum(config.RR_base + (config.RR_peak - config.RR_base) * g + config.RR_jitter * RR_noise, 1.0)
    CL = np.clip(config.CL_pre * (1 - g) + config.CL_post * g + config.CL_noise * CL_noise, *config.CL_bounds)
    prone = ((t >= prone_start) & prone_on).astype(float)

    eps_Aa, eps_s, sensor = _physiology_noise(seed, N, consts)
    alpha = consts.alpha
    FiO2 = np.empty(N)
    PEEP = np.empty(N)
    fio2, peep = config.FiO2_init, config.PEEP_init
    smooth = 0.0
    for k in range(N):
        FiO2[k], PEEP[k] = fio2, peep
        sat = _true_saturation(g[k], fio2, peep, VT[k], RR[k], prone[k], CL[k], eps_Aa[k], eps_s[k], consts)
        s_true = sat["SpO2_true"]
        smooth = s_true if k == 0 else alpha * smooth + (1.0 - alpha) * s_true
        obs = min(max(smooth + consts.sigma_obs * sensor[k], 0.5), 1.0)
        if (k + 1) % config.titration_interval == 0:
            if obs < config.spo2_low:
                fio2 = round(min(fio2 + config.FiO2_step, 1.0), 6)
                peep = min(peep + config.PEEP_step, config.PEEP_cap)
            elif obs > config.spo2_high and fio2 > config.FiO2_wean_floor + 1e-9:
                fio2 = round(max(fio2 - config.FiO2_step, 0.21), 6)

    return Scenario(N=N, t_star=t_star, tau_g=tau_g, FiO2=FiO2, PEEP=PEEP, VT=VT, RR=RR,
                    Prone=prone, CL=CL, rng_seed=int(seed))


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

TRACE_COLUMNS = (
    "t", "FiO2", "PEEP", "VT", "RR", "Prone", "CL", "g", "phi_auto", "VT_eff", "VT_alv", "f_DS",
    "V_A", "PaCO2", "P_A_O2", "Aa", "P_a_O2_cap", "shunt", "S_a_O2_cap", "SpO2_true", "SpO2_obs",
)


@dataclass(frozen=True, eq=False)
class TwinTrace:
    """Per-minute record of one episode; every column is a read-only array of length N."""

    columns: dict = field(repr=False)
    t_star: int = 360
    tau_g: float = float("nan")

    def __post_init__(self):
        cols = {}
        for name in TRACE_COLUMNS:
            if name not in self.columns:
                raise KeyError(f"trace is missing column {name!r}")
            cols[name] = _frozen(self.columns[name])
        object.__setattr__(self, "columns", cols)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def N(self) -> int:
        return len(self.columns["t"])

    def replace(self, **cols) -> "TwinTrace":
        return TwinTrace({**self.columns, **cols}, t_star=self.t_star, tau_g=self.tau_g)


def simulate(scenario: Scenario, consts: TwinConstants | None = None) -> TwinTrace:
    """Apply the full gas-exchange and observation chain to a scenario."""
    consts = consts or TwinConstants()
    N = scenario.N
    t = np.arange(1, N + 1, dtype=float)
    g = regime(t, scenario.t_star, scenario.tau_g)
    eps_Aa, eps_s, sensor = _physiology_noise(scenario.rng_seed, N, consts)
    hidden = _true_saturation(g, scenario.FiO2, scenario.PEEP, scenario.VT, scenario.RR,
                              scenario.Prone, scenario.CL, eps_Aa, eps_s, consts)
    obs = observe(hidden["SpO2_true"], consts, noise=sensor)
    cols = {"t": t, **{name: getattr(scenario, name) for name in INPUT_COLUMNS}, **hidden, "SpO2_obs": obs}
    return TwinTrace(cols, t_star=scenario.t_star, tau_g=scenario.tau_g)


def write_trace_csv(trace: TwinTrace, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        data = np.column_stack([trace[c] for c in TRACE_COLUMNS])
        for row in data:
            writer.writerow([format(v, ".12g") for v in row])


def read_trace_csv(path: str | Path, t_star: int = 360) -> TwinTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader]
    data = np.asarray(rows, dtype=float)
    cols = {name: data[:, header.index(name)] for name in TRACE_COLUMNS}
    return TwinTrace(cols, t_star=t_star)
