# ensemble.py
# Emitter ensembles, the voltage -> ZPL tuning law and channel reachability.
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import bisect

from common import SCHEMA_VERSION, write_csv, write_json
from errors import ConfigError, DomainError, UnreachableError


log = logging.getLogger(__name__)

TRANSFORM_LIMIT_MHZ = 30.0
V_INH_FOV_GHZ = 20.0        # measured widefield window
V_INH_SNV_GHZ = 150.0       # full SnV- inhomogeneous range
BISECT_TOL_GHZ = 1e-6
TUNING_MODES = ("one-sided", "symmetric")

ENSEMBLE_COLUMNS = [
    "id", "x_um", "y_um", "f0_ghz", "delta_vm_ghz",
    "linewidth_mhz", "splitting_ghz", "brightness",
]


def tuning_sigma_for_mean(mean_tuning: float) -> float:
    # E|N(0, s)| = s * sqrt(2/pi)
    return mean_tuning * math.sqrt(math.pi / 2.0)


def mean_for_tuning_sigma(sigma: float) -> float:
    return sigma * math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Emitter:
    id: int
    position: Tuple[float, float]   # (x, y) in um
    f0: float                       # GHz offset from grid origin
    delta_vm: float                 # GHz
    linewidth: float                # MHz
    splitting: float                # GHz
    brightness: float = 1.0

    def __post_init__(self):
        if self.delta_vm < 0:
            raise DomainError(f"emitter {self.id}: delta_vm must be >= 0, got {self.delta_vm}")
        if not self.linewidth > 0:
            raise DomainError(f"emitter {self.id}: linewidth must be > 0, got {self.linewidth}")
        if self.splitting < 0:
            raise DomainError(f"emitter {self.id}: splitting must be >= 0, got {self.splitting}")
        if self.brightness < 0:
            raise DomainError(f"emitter {self.id}: brightness must be >= 0, got {self.brightness}")


@dataclass(frozen=True)
class EmpiricalCdf:
    """Piecewise-linear CDF through (value, cumulative probability) knots."""
    values: Tuple[float, ...]
    probs: Tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.probs, dtype=float)
        if v.size < 2 or v.size != p.size:
            raise ConfigError("CDF needs >= 2 knots with matching values/probs", field="values")
        if np.any(np.diff(v) < 0) or np.any(np.diff(p) < 0):
            raise ConfigError("CDF knots must be non-decreasing", field="values")
        if p[0] != 0.0 or p[-1] != 1.0:
            raise ConfigError("CDF probabilities must run from 0 to 1", field="probs")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.interp(rng.random(n), self.probs, self.values)

    def cdf(self, x) -> np.ndarray:
        return np.interp(x, self.values, self.probs, left=0.0, right=1.0)


# 20% <= 60 MHz (2x transform limit), 35% <= 200 MHz, tail to a 1 GHz cap
DEFAULT_LINEWIDTH_CDF = EmpiricalCdf(values=(30.0, 60.0, 200.0, 1000.0), probs=(0.0, 0.2, 0.35, 1.0))
# 80% of splittings >= 0.6 GHz, tail to a 3 GHz cap
DEFAULT_SPLITTING_CDF = EmpiricalCdf(values=(0.0, 0.6, 3.0), probs=(0.0, 0.2, 1.0))


@dataclass(frozen=True)
class EnsembleConfig:
    n_qubit: int = 100
    v_inh: float = V_INH_FOV_GHZ
    mean_tuning: Optional[float] = 2.0
    tuning_sigma: Optional[float] = None
    linewidth_model: EmpiricalCdf = DEFAULT_LINEWIDTH_CDF
    splitting_model: EmpiricalCdf = DEFAULT_SPLITTING_CDF
    rng_seed: int = 0
    fov_um: Tuple[float, float] = (40.0, 40.0)
    brightness_sigma: float = 0.3

    def __post_init__(self):
        if self.n_qubit < 0:
            raise ConfigError(f"n_qubit must be >= 0, got {self.n_qubit}", field="n_qubit")
        if not self.v_inh > 0:
            raise ConfigError(f"v_inh must be > 0, got {self.v_inh}", field="v_inh")
        if (self.mean_tuning is None) == (self.tuning_sigma is None):
            raise ConfigError("exactly one of mean_tuning / tuning_sigma must be set", field="mean_tuning")
        primary = self.mean_tuning if self.mean_tuning is not None else self.tuning_sigma
        if primary < 0:
            raise ConfigError(f"tuning parameter must be >= 0, got {primary}", field="mean_tuning")
        if min(self.fov_um) <= 0:
            raise ConfigError(f"fov_um must be positive, got {self.fov_um}", field="fov_um")
        if self.brightness_sigma < 0:
            raise ConfigError("brightness_sigma must be >= 0", field="brightness_sigma")

    @property
    def sigma(self) -> float:
        if self.tuning_sigma is not None:
            return float(self.tuning_sigma)
        return tuning_sigma_for_mean(float(self.mean_tuning))

    @property
    def mean(self) -> float:
        if self.mean_tuning is not None:
            return float(self.mean_tuning)
        return mean_for_tuning_sigma(float(self.tuning_sigma))


@dataclass(frozen=True)
class FrequencyGrid:
    v0: float = 0.0
    delta_v: float = 2.0
    k_max: int = 11

    def __post_init__(self):
        if not self.delta_v > 0:
            raise ConfigError(f"delta_v must be > 0, got {self.delta_v}", field="delta_v")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}", field="k_max")

    def frequency(self, k: int) -> float:
        return self.v0 + k * self.delta_v

    def channels(self) -> range:
        return range(1, self.k_max + 1)

    def frequencies(self) -> np.ndarray:
        return self.v0 + np.arange(1, self.k_max + 1) * self.delta_v


@dataclass(frozen=True)
class TuningLaw:
    v_max: float = 40.0
    exponent: float = 2.0
    direction: int = 1
    mode: str = "one-sided"

    def __post_init__(self):
        if not self.v_max > 0:
            raise ConfigError(f"v_max must be > 0, got {self.v_max}", field="v_max")
        if not self.exponent > 0:
            raise ConfigError(f"exponent must be > 0, got {self.exponent}", field="exponent")
        if self.direction not in (1, -1):
            raise ConfigError(f"direction must be +1 or -1, got {self.direction}", field="direction")
        if self.mode not in TUNING_MODES:
            raise ConfigError(f"mode must be one of {TUNING_MODES}, got {self.mode!r}", field="mode")


def _sample_arrays(config: EnsembleConfig) -> Dict[str, np.ndarray]:
    # draw order is part of the determinism contract: f0, tuning, linewidth, splitting, x, y, brightness
    rng = np.random.default_rng(config.rng_seed)
    n = config.n_qubit
    f0 = rng.uniform(0.0, config.v_inh, n)
    delta_vm = np.abs(rng.normal(0.0, config.sigma, n))
    linewidth = config.linewidth_model.sample(rng, n)
    splitting = config.splitting_model.sample(rng, n)
    x = rng.uniform(0.0, config.fov_um[0], n)
    y = rng.uniform(0.0, config.fov_um[1], n)
    brightness = np.exp(rng.normal(0.0, config.brightness_sigma, n))
    return {
        "f0": f0, "delta_vm": delta_vm, "linewidth": linewidth, "splitting": splitting,
        "x": x, "y": y, "brightness": brightness,
    }


def sample_ensemble(config: EnsembleConfig) -> List[Emitter]:
    a = _sample_arrays(config)
    emitters = [
        Emitter(
            id=i,
            position=(float(a["x"][i]), float(a["y"][i])),
            f0=float(a["f0"][i]),
            delta_vm=float(a["delta_vm"][i]),
            linewidth=float(a["linewidth"][i]),
            splitting=float(a["splitting"][i]),
            brightness=float(a["brightness"][i]),
        )
        for i in range(config.n_qubit)
    ]
    log.debug("sampled %d emitters (seed=%d)", len(emitters), config.rng_seed)
    return emitters


def interval_bounds(f0, delta_vm, law: TuningLaw) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised tuning intervals [lo, hi] for arrays of f0 and delta_vm."""
    f0 = np.asarray(f0, dtype=float)
    span = law.direction * np.asarray(delta_vm, dtype=float)
    if law.mode == "symmetric":
        a, b = f0 - span / 2.0, f0 + span / 2.0
    else:
        a, b = f0, f0 + span
    return np.minimum(a, b), np.maximum(a, b)


def tuning_interval(e: Emitter, law: TuningLaw) -> Tuple[float, float]:
    lo, hi = interval_bounds(e.f0, e.delta_vm, law)
    return float(lo), float(hi)


def spin_transitions(e: Emitter) -> Tuple[float, float]:
    return e.f0, e.f0 + e.splitting


def frequency_at_voltage(e: Emitter, law: TuningLaw, v: float) -> float:
    if not 0.0 <= v <= law.v_max:
        raise DomainError(f"voltage {v} V outside [0, {law.v_max}] V")
    x = (v / law.v_max) ** law.exponent
    if law.mode == "symmetric":
        x -= 0.5
    return e.f0 + law.direction * e.delta_vm * x


def voltage_for_frequency(e: Emitter, law: TuningLaw, f_target: float) -> float:
    lo, hi = tuning_interval(e, law)
    eps = 1e-12 * max(1.0, abs(lo), abs(hi))
    if not lo - eps <= f_target <= hi + eps:
        raise UnreachableError(
            f"emitter {e.id}: {f_target} GHz outside tuning interval [{lo}, {hi}] GHz"
        )
    f_target = min(max(f_target, lo), hi)

    def residual(v: float) -> float:
        return frequency_at_voltage(e, law, v) - f_target

    r0, r1 = residual(0.0), residual(law.v_max)
    if r0 == 0.0 or e.delta_vm == 0.0:
        return 0.0
    if r1 == 0.0:
        return law.v_max
    v = bisect(residual, 0.0, law.v_max, xtol=1e-12, maxiter=200)
    if abs(residual(v)) >= BISECT_TOL_GHZ:
        raise DomainError(f"bisection did not converge for emitter {e.id} at {f_target} GHz")
    return float(v)


def reachable_channels(e: Emitter, law: TuningLaw, grid: FrequencyGrid) -> FrozenSet[int]:
    lo, hi = tuning_interval(e, law)
    k_lo = max(1, math.floor((lo - grid.v0) / grid.delta_v))
    k_hi = min(grid.k_max, math.ceil((hi - grid.v0) / grid.delta_v))
    # candidate range is padded by one channel; the exact predicate decides
    return frozenset(k for k in range(k_lo, k_hi + 1) if lo <= grid.frequency(k) <= hi)


def ensemble_statistics(emitters: Sequence[Emitter]) -> Dict[str, float]:
    if not emitters:
        return {"n": 0}
    lw = np.array([e.linewidth for e in emitters])
    sp = np.array([e.splitting for e in emitters])
    dv = np.array([e.delta_vm for e in emitters])
    f0 = np.array([e.f0 for e in emitters])
    return {
        "n": len(emitters),
        "frac_linewidth_le_2tl": float(np.mean(lw <= 2 * TRANSFORM_LIMIT_MHZ)),
        "frac_linewidth_le_200mhz": float(np.mean(lw <= 200.0)),
        "frac_splitting_ge_0p6ghz": float(np.mean(sp >= 0.6)),
        "mean_delta_vm_ghz": float(dv.mean()),
        "f0_min_ghz": float(f0.min()),
        "f0_max_ghz": float(f0.max()),
    }


def ensemble_to_frame(emitters: Sequence[Emitter]) -> pd.DataFrame:
    rows = [
        {
            "id": e.id, "x_um": e.position[0], "y_um": e.position[1], "f0_ghz": e.f0,
            "delta_vm_ghz": e.delta_vm, "linewidth_mhz": e.linewidth,
            "splitting_ghz": e.splitting, "brightness": e.brightness,
        }
        for e in emitters
    ]
    return pd.DataFrame(rows, columns=ENSEMBLE_COLUMNS)


def ensemble_from_frame(df: pd.DataFrame) -> List[Emitter]:
    missing = [c for c in ENSEMBLE_COLUMNS if c not in df.columns]
    if missing:
        raise DomainError(f"ensemble table missing columns: {missing}")
    return [
        Emitter(
            id=int(r.id), position=(float(r.x_um), float(r.y_um)), f0=float(r.f0_ghz),
            delta_vm=float(r.delta_vm_ghz), linewidth=float(r.linewidth_mhz),
            splitting=float(r.splitting_ghz), brightness=float(r.brightness),
        )
        for r in df.itertuples(index=False)
    ]


def ensemble_document(emitters: Sequence[Emitter], config: Optional[EnsembleConfig] = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(config) if config is not None else None,
        "emitters": ensemble_to_frame(emitters).to_dict(orient="records"),
    }


def write_ensemble(emitters: Sequence[Emitter], directory: Path,
                   config: Optional[EnsembleConfig] = None) -> Tuple[Path, Path]:
    directory = Path(directory)
    csv_path = write_csv(ensemble_to_frame(emitters), directory / "ensemble.csv")
    json_path = write_json(ensemble_document(emitters, config), directory / "ensemble.json")
    return csv_path, json_path


def read_ensemble_csv(path: Path) -> List[Emitter]:
    return ensemble_from_frame(pd.read_csv(path))
