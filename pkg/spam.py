# spam.py
# Spin state preparation and measurement statistics: the three-bin readout
# model, mixture-Poisson fits, thresholds, e_spam and post-selection.
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.stats import poisson

from common import derive_seed, ensure_columns, write_csv
from errors import DomainError, FitError, RecordParseError, ThresholdError


log = logging.getLogger(__name__)

LAMBDA_BRIGHT = 18.0
LAMBDA_DARK = 1.6
T_M_US = 50.0
T_CYCLE_US = 60.0           # repump + three readout bins, per herald attempt
QUADRANT_N_M = 3.5
CHUNK_SHOTS = 50_000
EM_TOL = 1e-9
EM_MAX_ITER = 500
EM_RESTARTS = 3
MIN_HISTOGRAM_TOTAL = 100
TRUNCATION_MARGIN = 10
NORMALIZATION_TOL = 1e-9

RECORD_COLUMNS = ["shot", "bin1", "bin2", "bin3"]
SWEEP_COLUMNS = ["c_th", "e_spam", "n_m", "p_success"]


@dataclass(frozen=True)
class ReadoutModel:
    lambda_bright: float = LAMBDA_BRIGHT
    lambda_dark: float = LAMBDA_DARK
    p_charge: float = 0.05
    shots: int = 100_000
    t_m_us: float = T_M_US
    seed: int = 0
    lambda_bright_bin1: Optional[float] = None
    lambda_bright_bin3: Optional[float] = None
    t_cycle_us: float = T_CYCLE_US

    def __post_init__(self):
        if not 0 < self.lambda_dark < self.lambda_bright:
            raise DomainError(f"need 0 < lambda_dark < lambda_bright, got {self.lambda_dark}, {self.lambda_bright}")
        if not 0.0 <= self.p_charge <= 1.0:
            raise DomainError(f"p_charge must be in [0, 1], got {self.p_charge}")
        if self.shots < 1:
            raise DomainError(f"shots must be >= 1, got {self.shots}")
        if self.t_m_us <= 0 or self.t_cycle_us <= 0:
            raise DomainError("t_m_us and t_cycle_us must be > 0")
        for name in ("lambda_bright_bin1", "lambda_bright_bin3"):
            v = getattr(self, name)
            if v is not None and not v > self.lambda_dark:
                raise DomainError(f"{name} must exceed lambda_dark, got {v}")

    @property
    def bright_bin1(self) -> float:
        return self.lambda_bright if self.lambda_bright_bin1 is None else self.lambda_bright_bin1

    @property
    def bright_bin3(self) -> float:
        return self.lambda_bright if self.lambda_bright_bin3 is None else self.lambda_bright_bin3


@dataclass(frozen=True)
class MixtureFit:
    """(1 - p0) * Poisson(lambda1) + p0 * Poisson(lambda2), lambda1 >= lambda2."""
    p0: float
    lambda1: float
    lambda2: float
    log_likelihood: float
    iterations: int = 0
    ll_history: Tuple[float, ...] = ()

    def pmf(self, n) -> np.ndarray:
        n = np.asarray(n)
        return (1.0 - self.p0) * poisson.pmf(n, self.lambda1) + self.p0 * poisson.pmf(n, self.lambda2)

    def mean(self) -> float:
        return (1.0 - self.p0) * self.lambda1 + self.p0 * self.lambda2


@dataclass(frozen=True)
class SpamResult:
    c_th: int
    e_spam: float
    n_m: float
    p_success: float
    survivors: int

    @property
    def empty(self) -> bool:
        return self.survivors == 0


@dataclass(frozen=True)
class QuadrantCounts:
    """Shots split by (bin2 bright, bin3 bright).

    gray: dark/dark (not initialized), red: dark/bright (correct),
    blue: bright/dark, magenta: bright/bright.
    """
    gray: int
    red: int
    blue: int
    magenta: int

    @property
    def total(self) -> int:
        return self.gray + self.red + self.blue + self.magenta

    @property
    def error(self) -> float:
        initialized = self.blue + self.red + self.magenta
        if initialized == 0:
            return math.nan
        return (self.blue + self.magenta) / initialized


def _simulate_chunk(model: ReadoutModel, index: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(model.seed, index))
    prepared = rng.random(n) < model.p_charge
    bin1 = rng.poisson(np.where(prepared, model.bright_bin1, model.lambda_dark))
    bin2 = rng.poisson(model.lambda_dark, n)
    bin3 = rng.poisson(np.where(prepared, model.bright_bin3, model.lambda_dark))
    return np.stack([bin1, bin2, bin3], axis=1)


def simulate_readout(model: ReadoutModel, threads: int = 1) -> pd.DataFrame:
    """Per-shot counts of the three readout bins.

    A shot is prepared with probability p_charge: bin 1 is then bright, the
    spin is pumped dark for bin 2 and flipped bright for bin 3. Unprepared
    shots are dark in every bin. Chunks are seeded by their index, so the
    result does not depend on ``threads``.
    """
    sizes = [min(CHUNK_SHOTS, model.shots - start) for start in range(0, model.shots, CHUNK_SHOTS)]
    tasks = list(enumerate(sizes))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(lambda t: _simulate_chunk(model, *t), tasks))
    else:
        chunks = [_simulate_chunk(model, i, n) for i, n in tasks]
    counts = np.concatenate(chunks, axis=0).astype(np.int64)
    df = pd.DataFrame(counts, columns=RECORD_COLUMNS[1:])
    df.insert(0, "shot", np.arange(model.shots, dtype=np.int64))
    log.debug("simulated %d shots in %d chunks", model.shots, len(sizes))
    return df


def count_histogram(counts: Sequence[int], length: Optional[int] = None) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise DomainError("counts must be >= 0")
    return np.bincount(counts, minlength=length or 0)


def _weighted_quantile(n: np.ndarray, h: np.ndarray, q: float) -> float:
    cdf = np.cumsum(h) / h.sum()
    return float(n[np.searchsorted(cdf, q)])


def _em(n: np.ndarray, h: np.ndarray, p0: float, lam1: float, lam2: float) -> MixtureFit:
    total = h.sum()
    history: List[float] = []
    prev = -math.inf
    it = 0
    for it in range(1, EM_MAX_ITER + 1):
        lw1 = math.log(1.0 - p0) + poisson.logpmf(n, lam1)
        lw2 = math.log(p0) + poisson.logpmf(n, lam2)
        lse = logsumexp(np.stack([lw1, lw2]), axis=0)
        ll = float(np.sum(h * lse))
        if history and ll < history[-1] - 1e-8 * max(1.0, abs(history[-1])):
            raise FitError(f"EM log-likelihood decreased at iteration {it}: {history[-1]} -> {ll}")
        history.append(ll)
        if ll - prev < EM_TOL:
            break
        prev = ll

        r2 = np.exp(lw2 - lse)
        w2 = float(np.sum(h * r2))
        w1 = total - w2
        if w1 > 0:
            lam1 = max(float(np.sum(h * (1.0 - r2) * n)) / w1, 1e-9)
        if w2 > 0:
            lam2 = max(float(np.sum(h * r2 * n)) / w2, 1e-9)
        p0 = min(max(w2 / total, 1e-12), 1.0 - 1e-12)
    return MixtureFit(p0, lam1, lam2, history[-1], it, tuple(history))


def _canonical(fit: MixtureFit) -> MixtureFit:
    if fit.lambda1 >= fit.lambda2:
        return fit
    return MixtureFit(1.0 - fit.p0, fit.lambda2, fit.lambda1, fit.log_likelihood,
                      fit.iterations, fit.ll_history)


def fit_mixture(histogram: Sequence[float], seed: int = 0) -> MixtureFit:
    """Maximum-likelihood two-component Poisson mixture by EM.

    ``histogram[n]`` is the number of shots with n counts. Starts from
    lambda2 = 25th percentile, lambda1 = 90th percentile, p0 = 0.5, plus
    seeded perturbed restarts; the best log-likelihood wins.
    """
    h = np.asarray(histogram, dtype=float)
    if h.ndim != 1 or np.any(h < 0):
        raise FitError("histogram must be a 1-D array of non-negative counts")
    if h.sum() < MIN_HISTOGRAM_TOTAL:
        raise FitError(f"histogram total {h.sum():g} < {MIN_HISTOGRAM_TOTAL}")
    if np.count_nonzero(h) < 2:
        raise FitError("histogram has a single occupied bin")
    n = np.arange(h.size, dtype=float)

    lam2 = max(_weighted_quantile(n, h, 0.25), 0.1)
    lam1 = max(_weighted_quantile(n, h, 0.90), lam2 + 1.0)
    starts = [(0.5, lam1, lam2)]
    rng = np.random.default_rng(seed)
    for _ in range(EM_RESTARTS - 1):
        f1, f2 = np.exp(rng.normal(0.0, 0.3, 2))
        starts.append((float(rng.uniform(0.2, 0.8)), lam1 * f1, lam2 * f2))

    best = max((_em(n, h, *s) for s in starts), key=lambda f: f.log_likelihood)
    best = _canonical(best)
    log.debug("mixture fit p0=%.4f l1=%.4f l2=%.4f ll=%.3f (%d it)",
              best.p0, best.lambda1, best.lambda2, best.log_likelihood, best.iterations)
    return best


def solve_threshold(fit: MixtureFit) -> float:
    """Real-valued count where the two weighted components cross."""
    if not 0.0 < fit.p0 < 1.0:
        raise ThresholdError(f"threshold undefined for p0={fit.p0}")
    if math.isclose(fit.lambda1, fit.lambda2, rel_tol=1e-12):
        raise ThresholdError("threshold undefined for equal component means")
    return (fit.lambda1 - fit.lambda2 + math.log(fit.p0 / (1.0 - fit.p0))) / math.log(fit.lambda1 / fit.lambda2)


def classify_bright(counts, n_m: float) -> np.ndarray:
    return np.asarray(counts) >= math.ceil(n_m)


def _as_distribution(p: Sequence[float], name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0):
        raise DomainError(f"{name} must be a non-empty non-negative 1-D distribution")
    if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
        raise DomainError(f"{name} sums to {p.sum():.12g}, not 1")
    return p


def e_spam(p_dark: Sequence[float], p_bright: Sequence[float]) -> Tuple[float, int]:
    """min over N_m of 0.5 * (P_dark[N >= N_m] + P_bright[N < N_m]).

    Returns the minimum and the smallest minimizing N_m.
    """
    pd_ = _as_distribution(p_dark, "P_dark")
    pb = _as_distribution(p_bright, "P_bright")
    size = max(pd_.size, pb.size)
    pd_ = np.pad(pd_, (0, size - pd_.size))
    pb = np.pad(pb, (0, size - pb.size))
    cd = np.concatenate([[0.0], np.cumsum(pd_)])
    cb = np.concatenate([[0.0], np.cumsum(pb)])
    objective = 0.5 * ((cd[-1] - cd) + cb)
    n_m = int(np.argmin(objective))
    return float(min(max(objective[n_m], 0.0), 0.5)), n_m


def _distribution(counts: np.ndarray, length: int) -> np.ndarray:
    return np.bincount(counts, minlength=length) / counts.size


def post_selection_sweep(records: pd.DataFrame, c_th_list: Sequence[int]) -> List[SpamResult]:
    """e_spam of the shots whose bin-1 count reaches each C_th.

    P_dark comes from bin 2 and P_bright from bin 3 of the survivors;
    p_success is the survivor fraction of all shots.
    """
    bins = records[RECORD_COLUMNS[1:]].to_numpy(dtype=np.int64)
    total = bins.shape[0]
    if total == 0:
        raise DomainError("no readout records")
    results = []
    for c_th in c_th_list:
        kept = bins[bins[:, 0] >= c_th]
        if kept.shape[0] == 0:
            log.warning("C_th=%d leaves no shots", c_th)
            results.append(SpamResult(int(c_th), math.nan, math.nan, 0.0, 0))
            continue
        length = int(kept[:, 1:].max()) + TRUNCATION_MARGIN + 1
        value, n_m = e_spam(_distribution(kept[:, 1], length), _distribution(kept[:, 2], length))
        results.append(SpamResult(int(c_th), value, float(n_m), kept.shape[0] / total, kept.shape[0]))
    return results


def quadrant_analysis(records: pd.DataFrame, n_m: float = QUADRANT_N_M) -> QuadrantCounts:
    if not n_m > 0:
        raise DomainError(f"N_m must be > 0, got {n_m}")
    b2 = records["bin2"].to_numpy() >= n_m
    b3 = records["bin3"].to_numpy() >= n_m
    return QuadrantCounts(
        gray=int(np.sum(~b2 & ~b3)),
        red=int(np.sum(~b2 & b3)),
        blue=int(np.sum(b2 & ~b3)),
        magenta=int(np.sum(b2 & b3)),
    )


def mean_time_to_success(p_success: float, t_cycle_us: float = T_CYCLE_US) -> float:
    """Average wait for a successful heralded preparation, in microseconds."""
    if t_cycle_us <= 0:
        raise DomainError(f"t_cycle_us must be > 0, got {t_cycle_us}")
    if p_success <= 0:
        return math.inf
    return t_cycle_us / p_success


def _fit_or_none(counts: np.ndarray, seed: int) -> Optional[MixtureFit]:
    try:
        return fit_mixture(count_histogram(counts), seed=seed)
    except FitError as exc:
        log.warning("mixture fit skipped: %s", exc)
        return None


def _threshold_or_none(fit: Optional[MixtureFit]) -> Optional[float]:
    if fit is None:
        return None
    try:
        return solve_threshold(fit)
    except ThresholdError as exc:
        log.warning("threshold skipped: %s", exc)
        return None


def fit_readout(records: pd.DataFrame, seed: int = 0) -> Dict[str, object]:
    """Fit report: mixtures of bins 1 and 3, dark mean of bin 2, thresholds."""
    report: Dict[str, object] = {"shots": int(len(records)), "lambda_dark_bin2": float(records["bin2"].mean())}
    for name in ("bin1", "bin3"):
        fit = _fit_or_none(records[name].to_numpy(), seed)
        report[name] = None if fit is None else {
            "p0": fit.p0, "lambda1": fit.lambda1, "lambda2": fit.lambda2,
            "log_likelihood": fit.log_likelihood, "iterations": fit.iterations,
            "n_m": _threshold_or_none(fit),
        }
    return report


def sweep_frame(results: Sequence[SpamResult]) -> pd.DataFrame:
    return pd.DataFrame([{c: getattr(r, c) for c in SWEEP_COLUMNS} for r in results], columns=SWEEP_COLUMNS)


def read_records_csv(path: Path) -> pd.DataFrame:
    """Readout CSV ``shot,bin1,bin2,bin3``; bad rows raise with their file line."""
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in RECORD_COLUMNS if c not in raw.columns]
    if missing:
        raise RecordParseError(f"missing columns {missing} in {path}", line=1)
    raw = ensure_columns(raw, RECORD_COLUMNS)
    out = {}
    for col in RECORD_COLUMNS:
        values = pd.to_numeric(raw[col].str.strip(), errors="coerce")
        bad = values.isna() | (values < 0) | (values % 1 != 0)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise RecordParseError(f"bad {col} value {raw[col].iloc[row]!r}", line=row + 2)
        out[col] = values.astype(np.int64)
    return pd.DataFrame(out, columns=RECORD_COLUMNS)


def write_records_csv(records: pd.DataFrame, path: Path) -> Path:
    return write_csv(records[RECORD_COLUMNS], path)
