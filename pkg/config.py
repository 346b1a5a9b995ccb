# config.py
# Experiment configuration: defaults, YAML loading, validation, flag overrides
# and builders for the library dataclasses.
import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import yaml

from common import derive_seed
from ensemble import EmpiricalCdf, EnsembleConfig, FrequencyGrid, TuningLaw
from errors import ConfigError, DomainError
from photonics import LifetimeSet, PhotonBudget
from registry import NoiseParams
from spam import ReadoutModel


log = logging.getLogger(__name__)

RESOLVED_NAME = "resolved_config.yaml"

# seed keys for independent streams derived from the master seed
ENSEMBLE_STREAM = 1
FRAMES_STREAM = 2

DEFAULTS: Dict[str, Any] = {
    "experiment": "qsoc",
    "seed": 0,
    "out": "results",
    "threads": 1,
    "ensemble": {
        "n_qubit": 100,
        "v_inh": 20.0,
        "mean_tuning": 2.0,
        "tuning_sigma": None,
        "fov_um": [40.0, 40.0],
        "brightness_sigma": 0.3,
        "linewidth_cdf": {"values": [30.0, 60.0, 200.0, 1000.0], "probs": [0.0, 0.2, 0.35, 1.0]},
        "splitting_cdf": {"values": [0.0, 0.6, 3.0], "probs": [0.0, 0.2, 1.0]},
    },
    "grid": {"v0": 0.0, "delta_v": 2.0, "k_max": 11},
    "law": {"v_max": 40.0, "exponent": 2.0, "direction": 1, "mode": "one-sided"},
    "graph": {
        "ratios": [round(0.005 * i, 3) for i in range(20)],
        "n_qubits": [100, 300, 1000, 3000],
        "trials": 10,
        "coupled": True,
        "linewidth_limit_mhz": 60.0,
    },
    "registry": {
        "frames_dir": None,
        "n_emitters": 20,
        "shape_px": [120, 120],
        "pixel_pitch_um": 0.2,
        "voltage_steps": 121,
        "psf_sigma_px": 1.2,
        "background": 100.0,
        "peak_counts": 2000.0,
        "threshold": None,
        "min_separation_px": 3.0,
        "link_radius_px": 1.5,
        "min_detections": 2,
        "merge_distance_px": 1.0,
        "max_relative_difference": 0.5,
        "n_sys": 1024,
    },
    "spam": {
        "records_csv": None,
        "lambda_bright": 18.0,
        "lambda_dark": 1.6,
        "p_charge": 0.05,
        "shots": 100000,
        "t_m_us": 50.0,
        "t_cycle_us": 60.0,
        "lambda_bright_bin1": None,
        "lambda_bright_bin3": None,
        "c_th": list(range(0, 31)),
        "n_m": 3.5,
    },
    "photonics": {
        "lifetimes": {"tau_bulk": 4.12, "tau_on": 2.32, "tau_off": 5.56, "xi_zpl": 0.36},
        "budget": {
            "quantum_efficiency": 0.80,
            "zpl_fraction": 0.57,
            "c_line_fraction": 0.80,
            "psb_fraction": 0.43,
            "psb_after_filter": 0.35,
            "detector_qe": 0.65,
            "readout_counts": 18.0,
            "t_m_us": 50.0,
            "tau_emitter_ns": 5.0,
        },
        "cavity_q": 2000.0,
        "cavity_v_mode": 1.0,
    },
    "scaling": {
        "n_emitter": 2.3,
        "p_c": 1.0,
        "k_values": [1, 11],
        "sites": None,
    },
}


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {type(value).__name__}", field=path)
        for key in value:
            if key not in default:
                raise ConfigError("unknown key", field=f"{path}.{key}" if path else str(key))
        merged = copy.deepcopy(default)
        for key, v in value.items():
            merged[key] = _check(v, default[key], f"{path}.{key}" if path else str(key))
        return merged
    if default is None:
        return value
    if value is None:
        raise ConfigError("value may not be null", field=path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=path)
    elif isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
    elif isinstance(default, float):
        if not _is_number(value):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=path)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", field=path)
    return value


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    out: Path
    threads: int
    blocks: Dict[str, Any] = field(default_factory=dict)

    def block(self, name: str) -> Dict[str, Any]:
        return self.blocks[name]

    def to_dict(self) -> Dict[str, Any]:
        return {"experiment": self.experiment, "seed": self.seed, "out": str(self.out),
                "threads": self.threads, **copy.deepcopy(self.blocks)}


def from_dict(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    merged = _check(data or {}, DEFAULTS, "")
    if merged["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {merged['seed']}", field="seed")
    if merged["threads"] < 1:
        raise ConfigError(f"threads must be >= 1, got {merged['threads']}", field="threads")
    blocks = {k: v for k, v in merged.items() if isinstance(DEFAULTS[k], dict)}
    return ExperimentConfig(merged["experiment"], merged["seed"], Path(merged["out"]), merged["threads"], blocks)


def load_config(path: Optional[Path]) -> ExperimentConfig:
    """Defaults, overlaid by the YAML file when given."""
    if path is None:
        return from_dict({})
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML in {path}: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark is not None else None) from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"top level of {path} must be a mapping")
    log.debug("loaded config %s", path)
    return from_dict(data)


def apply_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, out: Optional[Path] = None,
                    threads: Optional[int] = None) -> ExperimentConfig:
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"seed must be >= 0, got {seed}", field="seed")
        cfg.seed = seed
    if out is not None:
        cfg.out = Path(out)
    if threads is not None:
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}", field="threads")
        cfg.threads = threads
    return cfg


def write_resolved(cfg: ExperimentConfig, directory: Path) -> Path:
    path = Path(directory) / RESOLVED_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None), encoding="utf-8")
    return path


def _build(block: str, factory: Callable[..., Any], **kwargs) -> Any:
    try:
        return factory(**kwargs)
    except ConfigError as exc:
        raise ConfigError(exc.message, field=f"{block}.{exc.field}" if exc.field else block) from None
    except DomainError as exc:
        raise ConfigError(str(exc), field=block) from None


def _cdf(block: Dict[str, Any], key: str) -> EmpiricalCdf:
    knots = block[key]
    return _build(f"ensemble.{key}", EmpiricalCdf, values=tuple(knots["values"]), probs=tuple(knots["probs"]))


def ensemble_config(cfg: ExperimentConfig, n_qubit: Optional[int] = None,
                    fov_um: Optional[tuple] = None) -> EnsembleConfig:
    b = cfg.block("ensemble")
    return _build(
        "ensemble", EnsembleConfig,
        n_qubit=b["n_qubit"] if n_qubit is None else n_qubit,
        v_inh=b["v_inh"],
        # a file that sets tuning_sigma means it, the mean default steps aside
        mean_tuning=None if b["tuning_sigma"] is not None else b["mean_tuning"],
        tuning_sigma=b["tuning_sigma"],
        linewidth_model=_cdf(b, "linewidth_cdf"),
        splitting_model=_cdf(b, "splitting_cdf"),
        rng_seed=derive_seed(cfg.seed, ENSEMBLE_STREAM),
        fov_um=tuple(b["fov_um"]) if fov_um is None else fov_um,
        brightness_sigma=b["brightness_sigma"],
    )


def frequency_grid(cfg: ExperimentConfig) -> FrequencyGrid:
    return _build("grid", FrequencyGrid, **cfg.block("grid"))


def tuning_law(cfg: ExperimentConfig) -> TuningLaw:
    return _build("law", TuningLaw, **cfg.block("law"))


def noise_params(cfg: ExperimentConfig) -> NoiseParams:
    b = cfg.block("registry")
    return _build("registry", NoiseParams, background=b["background"], peak_counts=b["peak_counts"])


def readout_model(cfg: ExperimentConfig) -> ReadoutModel:
    b = cfg.block("spam")
    keys = ("lambda_bright", "lambda_dark", "p_charge", "shots", "t_m_us", "t_cycle_us",
            "lambda_bright_bin1", "lambda_bright_bin3")
    return _build("spam", ReadoutModel, seed=cfg.seed, **{k: b[k] for k in keys})


def lifetime_set(cfg: ExperimentConfig) -> LifetimeSet:
    return _build("photonics.lifetimes", LifetimeSet, **cfg.block("photonics")["lifetimes"])


def photon_budget(cfg: ExperimentConfig) -> PhotonBudget:
    return _build("photonics.budget", PhotonBudget, **cfg.block("photonics")["budget"])
