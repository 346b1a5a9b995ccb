# graph.py
# Tunability-overlap connectivity, the p_c Monte-Carlo sweep, channel graphs
# and system scaling estimates.
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from common import derive_seed, write_csv, write_json
from ensemble import (
    TRANSFORM_LIMIT_MHZ, Emitter, EnsembleConfig, FrequencyGrid, TuningLaw,
    _sample_arrays, interval_bounds, reachable_channels,
)
from errors import DomainError


log = logging.getLogger(__name__)

N_SYS = 1024
N_EMITTER = 2.3
QMC_CHANNELS = 16
COTS_FOV_DIAMETER_UM = 2650.0
COTS_SPOT_SPACING_UM = 2.52
CUSTOM_LENS_SITES = 10_000_000
PC_CURVE_COLUMNS = ["ratio", "n_qubit", "p_c_mean", "p_c_stderr", "trials"]
SCALING_COLUMNS = ["n_qubit", "n_link", "label"]


class UnionFind:
    """Disjoint sets over 0..size-1 with path compression and union by size."""

    def __init__(self, size: int):
        self.parents = list(range(size))
        self.sizes = [1] * size
        self.num_components = size

    def find(self, elem: int) -> int:
        root = elem
        while root != self.parents[root]:
            root = self.parents[root]
        # compress the path so every visited element points at the root
        while elem != root:
            self.parents[elem], elem = root, self.parents[elem]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.sizes[ra] < self.sizes[rb]:
            ra, rb = rb, ra
        self.parents[rb] = ra
        self.sizes[ra] += self.sizes[rb]
        self.num_components -= 1
        return ra

    def components(self) -> List[List[int]]:
        groups: Dict[int, List[int]] = {}
        for i in range(len(self.parents)):
            groups.setdefault(self.find(i), []).append(i)
        return list(groups.values())


@dataclass(frozen=True)
class ConnectivityReport:
    components: Tuple[Tuple[int, ...], ...]
    largest_size: int
    p_c: float
    n_qubit: int
    non_singleton_fraction: float

    @property
    def partition(self) -> FrozenSet[FrozenSet[int]]:
        return frozenset(frozenset(c) for c in self.components)


def _report(components: List[List[int]], n: int) -> ConnectivityReport:
    comps = tuple(tuple(sorted(c)) for c in components)
    sizes = [len(c) for c in comps]
    largest = max(sizes)
    return ConnectivityReport(
        components=comps,
        largest_size=largest,
        p_c=largest / n,
        n_qubit=n,
        non_singleton_fraction=sum(s for s in sizes if s > 1) / n,
    )


def _arrays(ensemble: Sequence[Emitter]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.array([e.id for e in ensemble], dtype=np.int64)
    f0 = np.array([e.f0 for e in ensemble], dtype=float)
    dv = np.array([e.delta_vm for e in ensemble], dtype=float)
    return ids, f0, dv


def _sweep_labels(lo: np.ndarray, hi: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Component label per sorted position: cut when next left > running max right."""
    run_max = np.maximum.accumulate(hi[order])
    cuts = lo[order][1:] > run_max[:-1]
    return np.concatenate(([0], np.cumsum(cuts)))


def largest_component_fraction(f0: np.ndarray, delta_vm: np.ndarray, law: TuningLaw) -> float:
    lo, hi = interval_bounds(f0, delta_vm, law)
    labels = _sweep_labels(lo, hi, np.argsort(lo, kind="stable"))
    return float(np.bincount(labels).max() / lo.size)


def interval_components(ensemble: Sequence[Emitter], law: TuningLaw) -> ConnectivityReport:
    if len(ensemble) == 0:
        raise DomainError("interval_components needs at least one emitter")
    ids, f0, dv = _arrays(ensemble)
    lo, hi = interval_bounds(f0, dv, law)
    order = np.lexsort((ids, lo))
    labels = _sweep_labels(lo, hi, order)
    components: List[List[int]] = [[] for _ in range(int(labels[-1]) + 1)]
    for label, idx in zip(labels, order):
        components[label].append(int(ids[idx]))
    return _report(components, len(ensemble))


def union_find_components(ensemble: Sequence[Emitter], law: TuningLaw) -> ConnectivityReport:
    """Brute-force oracle: union every pair of intersecting closed intervals."""
    if len(ensemble) == 0:
        raise DomainError("union_find_components needs at least one emitter")
    ids, f0, dv = _arrays(ensemble)
    lo, hi = interval_bounds(f0, dv, law)
    overlap = (lo[:, None] <= hi[None, :]) & (lo[None, :] <= hi[:, None])
    uf = UnionFind(len(ensemble))
    for i, j in np.argwhere(np.triu(overlap, k=1)):
        uf.union(int(i), int(j))
    return _report([[int(ids[i]) for i in c] for c in uf.components()], len(ensemble))


@dataclass(frozen=True, eq=False)
class PcCurve:
    tunability_ratios: Tuple[float, ...]
    n_qubits: Tuple[int, ...]
    p_c_mean: np.ndarray      # shape (len(n_qubits), len(ratios))
    p_c_stderr: np.ndarray
    trials: int

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, n in enumerate(self.n_qubits):
            for j, r in enumerate(self.tunability_ratios):
                rows.append({
                    "ratio": r, "n_qubit": n, "p_c_mean": self.p_c_mean[i, j],
                    "p_c_stderr": self.p_c_stderr[i, j], "trials": self.trials,
                })
        return pd.DataFrame(rows, columns=PC_CURVE_COLUMNS)

    def threshold_ratio(self, n_qubit: int, target: float = 0.9) -> float:
        """Smallest ratio where p_c_mean reaches target (linear interpolation); nan if never."""
        row = self.p_c_mean[self.n_qubits.index(n_qubit)]
        ratios = np.asarray(self.tunability_ratios)
        hits = np.nonzero(row >= target)[0]
        if hits.size == 0:
            return math.nan
        j = int(hits[0])
        if j == 0:
            return float(ratios[0])
        r0, r1, p0, p1 = ratios[j - 1], ratios[j], row[j - 1], row[j]
        return float(r0 + (target - p0) * (r1 - r0) / (p1 - p0))

    def monotone_violations(self, tolerance: float = 2.0) -> List[Tuple[int, float]]:
        """(n_qubit, ratio) points where p_c_mean drops below the previous ratio
        by more than ``tolerance`` standard errors."""
        out = []
        for i, n in enumerate(self.n_qubits):
            for j in range(1, len(self.tunability_ratios)):
                se = max(self.p_c_stderr[i, j - 1], self.p_c_stderr[i, j])
                if self.p_c_mean[i, j] < self.p_c_mean[i, j - 1] - tolerance * se:
                    out.append((n, self.tunability_ratios[j]))
        return out


def pc_sweep(base_config: EnsembleConfig, ratios: Sequence[float], n_qubit_list: Sequence[int],
             trials: int = 10, law: TuningLaw = TuningLaw(), master_seed: Optional[int] = None,
             threads: int = 1, coupled: bool = True) -> PcCurve:
    """Monte-Carlo p_c against mean tunability ratio for several system sizes.

    Each trial samples its own ensemble with mean_tuning = ratio * v_inh. With
    ``coupled`` the trial seed depends on (n_qubit, trial) only, so every ratio
    reuses the same f0 and unit tuning draws and p_c is monotone per trial;
    otherwise the ratio index joins the seed key.
    """
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    ratios = tuple(float(r) for r in ratios)
    n_qubits = tuple(int(n) for n in n_qubit_list)
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise DomainError(f"ratios must lie in [0, 1], got {ratios}")
    if any(n < 1 for n in n_qubits):
        raise DomainError(f"n_qubit values must be >= 1, got {n_qubits}")
    master = base_config.rng_seed if master_seed is None else master_seed

    tasks = []
    for i, n in enumerate(n_qubits):
        for j, r in enumerate(ratios):
            for t in range(trials):
                keys = (n, t) if coupled else (n, t, j)
                tasks.append((i, j, t, replace(
                    base_config, n_qubit=n, mean_tuning=r * base_config.v_inh,
                    tuning_sigma=None, rng_seed=derive_seed(master, *keys),
                )))

    def run(task):
        cfg = task[3]
        a = _sample_arrays(cfg)
        return largest_component_fraction(a["f0"], a["delta_vm"], law)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    p = np.empty((len(n_qubits), len(ratios), trials))
    for (i, j, t, _), value in zip(tasks, results):
        p[i, j, t] = value
    mean = p.mean(axis=2)
    stderr = p.std(axis=2, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros_like(mean)
    for i, n in enumerate(n_qubits):
        log.info("n_qubit=%d p_c(ratio=%g)=%.4f p_c(ratio=%g)=%.4f",
                 n, ratios[0], mean[i, 0], ratios[-1], mean[i, -1])
    curve = PcCurve(ratios, n_qubits, mean, stderr, trials)
    for n, r in curve.monotone_violations():
        log.warning("n_qubit=%d: p_c drops at ratio %g by more than 2 stderr", n, r)
    return curve


@dataclass(frozen=True)
class ChannelGraph:
    members: Dict[int, Tuple[int, ...]]          # channel k -> emitter ids (m_k)
    node_channels: Dict[int, FrozenSet[int]]     # emitter id -> reachable channels
    edges: Tuple[Tuple[int, int], ...]

    def to_node_link(self) -> dict:
        return {
            "nodes": [{"id": i, "channels": sorted(ch)} for i, ch in sorted(self.node_channels.items())],
            "edges": [list(e) for e in self.edges],
        }

    def components(self) -> List[List[int]]:
        """Connected clusters of emitter ids, largest first."""
        ids = sorted(self.node_channels)
        index = {i: n for n, i in enumerate(ids)}
        uf = UnionFind(len(ids))
        for a, b in self.edges:
            uf.union(index[a], index[b])
        return sorted((sorted(ids[n] for n in c) for c in uf.components()), key=lambda c: (-len(c), c[0]))


def clique_edges(members: Dict[int, Tuple[int, ...]],
                 eligible: Optional[FrozenSet[int]] = None) -> Tuple[Tuple[int, int], ...]:
    """All pairs of (eligible) ids sharing a channel, sorted and deduplicated."""
    edges = set()
    for ids in members.values():
        for a, b in itertools.combinations([i for i in ids if eligible is None or i in eligible], 2):
            edges.add((min(a, b), max(a, b)))
    return tuple(sorted(edges))


def channel_graph(ensemble: Sequence[Emitter], law: TuningLaw, grid: FrequencyGrid,
                  linewidth_limit: float = 2 * TRANSFORM_LIMIT_MHZ) -> ChannelGraph:
    node_channels = {e.id: reachable_channels(e, law, grid) for e in ensemble}
    eligible = frozenset(e.id for e in ensemble if e.linewidth <= linewidth_limit)
    members = {
        k: tuple(sorted(i for i, ch in node_channels.items() if k in ch))
        for k in grid.channels()
    }
    return ChannelGraph(members, node_channels, clique_edges(members, eligible))


def write_channel_graph(g: ChannelGraph, path: Path) -> Path:
    return write_json(g.to_node_link(), path)


@dataclass(frozen=True)
class ScalingPoint:
    n_qubit: float
    n_link: float
    label: str = ""


def scaling_estimate(n_emitter: float, n_sys: float, p_c: float, k_max: float,
                     label: str = "") -> ScalingPoint:
    """N_qubit = n_emitter * N_sys * p_c * k_max; N_link is one channel's all-to-all component."""
    if min(n_emitter, n_sys, p_c, k_max) < 0:
        raise DomainError("scaling inputs must be >= 0")
    n_qubit = n_emitter * n_sys * p_c * k_max
    n_link = n_qubit / k_max if k_max > 0 else 0.0
    return ScalingPoint(n_qubit=n_qubit, n_link=min(n_link, n_qubit), label=label)


def resolvable_spots(fov_diameter_um: float, spot_spacing_um: float) -> int:
    if not (fov_diameter_um > 0 and spot_spacing_um > 0):
        raise DomainError("FOV diameter and spot spacing must be positive")
    return math.floor(math.pi * (fov_diameter_um / 2.0) ** 2 / spot_spacing_um ** 2)


def default_scaling_sites() -> Dict[str, float]:
    return {
        "single_qmc": QMC_CHANNELS,
        "full_sample": N_SYS,
        "cots_objective": resolvable_spots(COTS_FOV_DIAMETER_UM, COTS_SPOT_SPACING_UM),
        "custom_lens": CUSTOM_LENS_SITES,
    }


def scaling_points(n_emitter: float = N_EMITTER, p_c: float = 1.0,
                   sites: Optional[Dict[str, float]] = None,
                   k_values: Sequence[int] = (1, 11)) -> List[ScalingPoint]:
    sites = default_scaling_sites() if sites is None else sites
    return [
        scaling_estimate(n_emitter, n_sys, p_c, k, label=f"{name}_k{k}")
        for name, n_sys in sites.items()
        for k in k_values
    ]


def scaling_frame(points: Sequence[ScalingPoint]) -> pd.DataFrame:
    return pd.DataFrame([p.__dict__ for p in points], columns=SCALING_COLUMNS)


def operating_ratio(mean_tuning: float, v_inh: float) -> float:
    if not v_inh > 0:
        raise DomainError(f"v_inh must be > 0, got {v_inh}")
    return mean_tuning / v_inh


def write_pc_curve(curve: PcCurve, path: Path) -> Path:
    return write_csv(curve.to_frame(), path)
