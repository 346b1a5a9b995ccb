# registry.py
# Widefield characterization: frame stacks, spot detection, best voltages,
# identity merging across frequency channels and the per-channel lookup table.
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import imageio.v3 as iio
import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import median_abs_deviation

from common import SCHEMA_VERSION, write_csv, write_json
from ensemble import Emitter, FrequencyGrid, TuningLaw, reachable_channels, spin_transitions
from errors import DomainError, NoSignalError
from graph import ChannelGraph, UnionFind, clique_edges


log = logging.getLogger(__name__)

PIXEL_PITCH_UM = 0.2
PSF_SIGMA_PX = 1.2
MIN_SEPARATION_PX = 3.0
LINK_RADIUS_PX = 1.5
MERGE_DISTANCE_PX = 1.0
MAX_RELATIVE_DIFFERENCE = 0.5
DETECTION_SIGMAS = 5.0
MIN_DETECTIONS = 2
PROMINENCE_SIGMAS = 5.0
FIT_SIGMAS = 10.0
MAX_AMPLITUDE_GAIN = 5.0
FRAME_NAME = "k{channel:02}_v{step:03}.png"
LOOKUP_COLUMNS = ["channel", "id", "x_um", "y_um", "best_voltage_v"]
STATS_COLUMNS = ["n_spot", "n_spot_distinct", "per_channel_avg", "n_emitter", "n_sys", "k_max"]
CHANNEL_COUNT_COLUMNS = ["channel", "n_spot"]


@dataclass(frozen=True)
class NoiseParams:
    background: float = 100.0     # mean counts per pixel
    peak_counts: float = 2000.0   # PSF peak of a brightness-1 emitter on resonance
    shot_noise: bool = True

    def __post_init__(self):
        if self.background < 0 or self.peak_counts < 0:
            raise DomainError("background and peak_counts must be >= 0")

    @property
    def snr(self) -> float:
        return self.peak_counts / math.sqrt(self.background) if self.background > 0 else math.inf


@dataclass(frozen=True, eq=False)
class FrameStack:
    frames: np.ndarray            # (k_max, n_steps, height, width)
    voltages: np.ndarray
    grid: FrequencyGrid
    v_max: float
    pixel_pitch_um: float = PIXEL_PITCH_UM
    seed: Optional[int] = None

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise DomainError(f"frames must be 4-D (channel, step, y, x), got shape {self.frames.shape}")
        if self.frames.shape[0] != self.grid.k_max or self.frames.shape[1] != len(self.voltages):
            raise DomainError(f"frames shape {self.frames.shape} does not match grid/voltages")
        v = np.asarray(self.voltages)
        if v.size >= 2 and np.any(np.diff(v) <= 0):
            raise DomainError("voltage steps must be strictly increasing")
        if v.size and (v[0] < 0 or v[-1] > self.v_max):
            raise DomainError(f"voltage steps must lie in [0, {self.v_max}] V")
        if np.any(self.frames < 0):
            raise DomainError("frame intensities must be non-negative")

    @property
    def shape_px(self) -> Tuple[int, int]:
        return int(self.frames.shape[2]), int(self.frames.shape[3])

    def frame(self, channel: int, step: int) -> np.ndarray:
        return self.frames[channel - 1, step]


@dataclass(frozen=True)
class Spot:
    x: float                  # centroid, pixels (column)
    y: float                  # centroid, pixels (row)
    brightness: float
    channel: int
    best_voltage: float = math.nan


@dataclass(frozen=True)
class LookupEntry:
    emitter_id: int
    x_um: float
    y_um: float
    best_voltage: float


@dataclass(frozen=True)
class LookupTable:
    channels: Dict[int, Tuple[LookupEntry, ...]]
    identities: Dict[int, int]     # input spot index -> emitter id

    @property
    def emitter_ids(self) -> List[int]:
        return sorted({e.emitter_id for entries in self.channels.values() for e in entries})

    @property
    def n_spots(self) -> int:
        return sum(len(entries) for entries in self.channels.values())

    def to_document(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "channels": {
                str(k): [
                    {"id": e.emitter_id, "x_um": e.x_um, "y_um": e.y_um, "best_voltage_v": e.best_voltage}
                    for e in entries
                ]
                for k, entries in sorted(self.channels.items())
            },
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"channel": k, "id": e.emitter_id, "x_um": e.x_um, "y_um": e.y_um, "best_voltage_v": e.best_voltage}
            for k, entries in sorted(self.channels.items())
            for e in entries
        ]
        return pd.DataFrame(rows, columns=LOOKUP_COLUMNS)


@dataclass(frozen=True)
class EmitterStatistics:
    n_spot: int
    n_spot_distinct: float
    per_channel_avg: float
    n_emitter: float


def transition_channels(e: Emitter, law: TuningLaw, grid: FrequencyGrid) -> FrozenSet[int]:
    """Channels reachable by either spin transition of the emitter."""
    out = set()
    for f in spin_transitions(e):
        out |= reachable_channels(replace(e, f0=f), law, grid)
    return frozenset(out)


def _tuning_shift(law: TuningLaw, voltages: np.ndarray) -> np.ndarray:
    x = (voltages / law.v_max) ** law.exponent
    if law.mode == "symmetric":
        x = x - 0.5
    return law.direction * x


def synthesize_frames(ensemble: Sequence[Emitter], law: TuningLaw, grid: FrequencyGrid,
                      psf_sigma_px: float = PSF_SIGMA_PX, noise_params: NoiseParams = NoiseParams(),
                      voltage_steps: int = 41, pixel_pitch_um: float = PIXEL_PITCH_UM,
                      shape_px: Tuple[int, int] = (200, 200), seed: int = 0) -> FrameStack:
    """Render one Gaussian spot per emitter and spin transition into every
    (channel, voltage) frame, weighted by a Lorentzian in the detuning between
    the tuned transition and the channel frequency, then apply shot noise."""
    if voltage_steps < 2:
        raise DomainError(f"voltage_steps must be >= 2, got {voltage_steps}")
    voltages = np.linspace(0.0, law.v_max, voltage_steps)
    height, width = shape_px
    signal = np.zeros((grid.k_max, voltage_steps, height, width), dtype=np.float32)
    shift = _tuning_shift(law, voltages)
    channel_f = grid.frequencies()
    radius = int(math.ceil(4 * psf_sigma_px))

    for e in ensemble:
        gamma = e.linewidth / 1000.0
        amp = np.zeros((grid.k_max, voltage_steps))
        for f in spin_transitions(e):
            detuning = (f + e.delta_vm * shift)[None, :] - channel_f[:, None]
            amp += 1.0 / (1.0 + (2.0 * detuning / gamma) ** 2)
        amp *= noise_params.peak_counts * e.brightness

        cx, cy = e.position[0] / pixel_pitch_um, e.position[1] / pixel_pitch_um
        r0, r1 = max(0, int(cy) - radius), min(height, int(cy) + radius + 1)
        c0, c1 = max(0, int(cx) - radius), min(width, int(cx) + radius + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        psf = np.exp(-((cc - cx) ** 2 + (rr - cy) ** 2) / (2 * psf_sigma_px ** 2))
        signal[:, :, r0:r1, c0:c1] += (amp[:, :, None, None] * psf[None, None]).astype(np.float32)

    lam = signal + np.float32(noise_params.background)
    if noise_params.shot_noise:
        rng = np.random.default_rng(seed)
        frames = rng.poisson(lam).astype(np.float32)
    else:
        frames = lam
    log.debug("synthesized %s frames from %d emitters", frames.shape, len(ensemble))
    return FrameStack(frames, voltages, grid, law.v_max, pixel_pitch_um, seed)


def estimate_background(frames: np.ndarray) -> Tuple[float, float]:
    """Robust (level, noise) of the stack: median and normal-scaled MAD."""
    sample = np.asarray(frames, dtype=float).ravel()
    if sample.size == 0:
        return 0.0, 0.0
    return float(np.median(sample)), float(median_abs_deviation(sample, scale="normal"))


def _threshold(level: float, noise: float) -> float:
    # noise-free stacks still need a strictly positive margin above the level
    return max(level + DETECTION_SIGMAS * noise, level + 1.0)


def default_threshold(frames: np.ndarray) -> float:
    return _threshold(*estimate_background(frames))


def _centroid(frame: np.ndarray, r: int, c: int, background: float) -> Tuple[float, float]:
    r0, r1 = max(0, r - 1), min(frame.shape[0], r + 2)
    c0, c1 = max(0, c - 1), min(frame.shape[1], c + 2)
    w = np.clip(frame[r0:r1, c0:c1].astype(float) - background, 0.0, None)
    total = w.sum()
    if total <= 0:
        return float(c), float(r)
    rr, cc = np.mgrid[r0:r1, c0:c1]
    return float((w * cc).sum() / total), float((w * rr).sum() / total)


def detect_spots(frame: np.ndarray, threshold: float, min_separation_px: float = MIN_SEPARATION_PX,
                 channel: int = 0, voltage: float = math.nan,
                 background: Optional[float] = None) -> List[Spot]:
    """Local maxima above threshold with non-maximum suppression.

    Candidates are pixels equal to the maximum of a disk of radius
    ``min_separation_px`` and strictly above their 3x3 minimum (flat regions
    never qualify). Candidates are then accepted brightest first, dropping any
    closer than ``min_separation_px`` to an accepted one. Centroids are the
    background-subtracted intensity-weighted 3x3 centroids.
    """
    if not threshold > 0:
        raise DomainError(f"threshold must be > 0, got {threshold}")
    frame = np.asarray(frame, dtype=float)
    rad = int(math.ceil(min_separation_px))
    d2 = np.arange(-rad, rad + 1) ** 2
    footprint = (d2[:, None] + d2[None, :]) <= min_separation_px ** 2
    dil = ndimage.maximum_filter(frame, footprint=footprint, mode="nearest")
    ero = ndimage.minimum_filter(frame, size=3, mode="nearest")
    cand = np.argwhere((frame == dil) & (frame > threshold) & (frame > ero))
    if cand.size == 0:
        return []

    values = frame[cand[:, 0], cand[:, 1]]
    order = np.argsort(-values, kind="stable")
    accepted: List[Tuple[int, int]] = []
    for idx in order:
        r, c = int(cand[idx, 0]), int(cand[idx, 1])
        if all((r - ar) ** 2 + (c - ac) ** 2 >= min_separation_px ** 2 for ar, ac in accepted):
            accepted.append((r, c))

    bg = float(np.median(frame)) if background is None else background
    spots = []
    for r, c in accepted:
        x, y = _centroid(frame, r, c, bg)
        spots.append(Spot(x=x, y=y, brightness=float(frame[r, c]), channel=channel, best_voltage=voltage))
    return spots


def best_voltage(voltages: Sequence[float], track: Sequence[float]) -> float:
    """Voltage of the brightest sample; ties go to the lowest voltage."""
    voltages = np.asarray(voltages, dtype=float)
    track = np.asarray(track, dtype=float)
    if track.size < 2 or track.size != voltages.size:
        raise DomainError(f"need >= 2 matching samples, got {track.size} / {voltages.size}")
    if not np.any(track > 0):
        raise NoSignalError("brightness track has no signal")
    return float(voltages[int(np.argmax(track))])


@dataclass(frozen=True)
class ResonancePeak:
    voltage: float
    amplitude: float
    step: int             # index of the brightest sample


def resonance_peak(voltages: Sequence[float], track: Sequence[float], pixel_noise: float,
                   window_px: int = 9) -> Optional[ResonancePeak]:
    """Resonance of a background-subtracted window track, or None if there is none.

    A channel the emitter cannot reach leaves a monotone tail whose maximum
    sits at an end of the sweep, so the brightest sample must be interior and
    clear both ends by PROMINENCE_SIGMAS. Near its maximum a Lorentzian in
    voltage has a parabolic reciprocal: the vertex of the parabola through
    1/track at the brightest sample and its neighbours gives the resonance
    voltage and on-resonance amplitude. Both neighbours must reach FIT_SIGMAS,
    otherwise the line is narrower than the voltage step and is not resolved.
    Noise of a window sum is sqrt(window_px * pixel_noise**2 + signal).
    """
    v = np.asarray(voltages, dtype=float)
    y = np.asarray(track, dtype=float)
    best_voltage(v, y)
    i = int(np.argmax(y))
    if i == 0 or i == y.size - 1:
        return None

    def sigma(value: float) -> float:
        return math.sqrt(window_px * pixel_noise ** 2 + max(value, 0.0))

    ends = max(y[0], y[-1])
    if y[i] - ends < PROMINENCE_SIGMAS * math.hypot(sigma(y[i]), sigma(ends)):
        return None
    if any(y[j] < FIT_SIGMAS * sigma(y[j]) for j in (i - 1, i + 1)):
        return None

    x = v[i - 1:i + 2] - v[i]
    a, b, c = np.polyfit(x, 1.0 / y[i - 1:i + 2], 2)
    if not a > 0:
        return ResonancePeak(float(v[i]), float(y[i]), i)
    # the brightest sample is the nearest one to the resonance
    dx = float(np.clip(-b / (2.0 * a), x[0] / 2.0, x[2] / 2.0))
    inverse = a * dx * dx + b * dx + c
    amplitude = y[i] if inverse <= 0 else min(max(1.0 / inverse, y[i]), MAX_AMPLITUDE_GAIN * y[i])
    return ResonancePeak(float(v[i] + dx), float(amplitude), i)


def _mergeable(a: Spot, b: Spot, brightness_threshold: float, max_relative_difference: float) -> bool:
    if not (a.brightness > brightness_threshold and b.brightness > brightness_threshold):
        return False
    return abs(a.brightness - b.brightness) / max(a.brightness, b.brightness) < max_relative_difference


def merge_identities(spots: Sequence[Spot], brightness_threshold: float = 0.0,
                     max_distance_px: float = MERGE_DISTANCE_PX,
                     max_relative_difference: float = MAX_RELATIVE_DIFFERENCE,
                     pixel_pitch_um: float = PIXEL_PITCH_UM) -> LookupTable:
    """Group spots into emitters and build the per-channel lookup table.

    Two spots match when their centroids are closer than ``max_distance_px``
    (Euclidean), both exceed ``brightness_threshold`` and their brightness
    differs by less than ``max_relative_difference`` of the larger one.
    Emitters are the transitive closure of matches. Ids follow the first
    occurrence in canonical (channel, y, x, brightness) order, so the result
    does not depend on input order.
    """
    n = len(spots)
    canon = sorted(range(n), key=lambda i: (spots[i].channel, spots[i].y, spots[i].x,
                                            -spots[i].brightness, spots[i].best_voltage))
    uf = UnionFind(n)
    if n > 1:
        coords = np.array([(spots[i].x, spots[i].y) for i in canon])
        for a, b in sorted(cKDTree(coords).query_pairs(r=max_distance_px)):
            sa, sb = spots[canon[a]], spots[canon[b]]
            if math.hypot(sa.x - sb.x, sa.y - sb.y) < max_distance_px and \
                    _mergeable(sa, sb, brightness_threshold, max_relative_difference):
                uf.union(a, b)

    root_to_id: Dict[int, int] = {}
    identities: Dict[int, int] = {}
    best: Dict[Tuple[int, int], int] = {}
    for pos, i in enumerate(canon):
        eid = root_to_id.setdefault(uf.find(pos), len(root_to_id))
        identities[i] = eid
        key = (spots[i].channel, eid)
        if key not in best or spots[i].brightness > spots[best[key]].brightness:
            best[key] = i

    channels: Dict[int, List[LookupEntry]] = {}
    for (k, eid), i in sorted(best.items()):
        s = spots[i]
        channels.setdefault(k, []).append(
            LookupEntry(eid, s.x * pixel_pitch_um, s.y * pixel_pitch_um, s.best_voltage)
        )
    return LookupTable({k: tuple(v) for k, v in channels.items()}, identities)


def emitter_statistics(table: Union[LookupTable, int], n_sys: int, k_max: int) -> EmitterStatistics:
    """N_spot, N_spot' = N_spot/2 (two spin transitions), N_spot'/k_max and
    n_emitter = N_spot'/(k_max * n_sys)."""
    if n_sys < 1 or k_max < 1:
        raise DomainError(f"n_sys and k_max must be >= 1, got {n_sys}, {k_max}")
    n_spot = table.n_spots if isinstance(table, LookupTable) else int(table)
    distinct = n_spot / 2.0
    return EmitterStatistics(
        n_spot=n_spot,
        n_spot_distinct=distinct,
        per_channel_avg=distinct / k_max,
        n_emitter=distinct / (k_max * n_sys),
    )


@dataclass(frozen=True)
class RegistryResult:
    detections: int
    spots: Tuple[Spot, ...]
    table: LookupTable
    threshold: float
    background: float
    rejected_tracks: int = 0
    merge_floor: float = 0.0


def _link_channel(detections: List[Spot], link_radius_px: float) -> List[List[int]]:
    if len(detections) == 1:
        return [[0]]
    uf = UnionFind(len(detections))
    coords = np.array([(s.x, s.y) for s in detections])
    for a, b in sorted(cKDTree(coords).query_pairs(r=link_radius_px)):
        uf.union(a, b)
    return sorted((sorted(g) for g in uf.components()), key=lambda g: g[0])


def run_pipeline(stack: FrameStack, threshold: Optional[float] = None,
                 min_separation_px: float = MIN_SEPARATION_PX, link_radius_px: float = LINK_RADIUS_PX,
                 min_detections: int = MIN_DETECTIONS, max_distance_px: float = MERGE_DISTANCE_PX,
                 max_relative_difference: float = MAX_RELATIVE_DIFFERENCE,
                 threads: int = 1) -> RegistryResult:
    level, noise = estimate_background(stack.frames)
    thr = _threshold(level, noise) if threshold is None else threshold
    log.info("background=%.1f noise=%.2f threshold=%.1f", level, noise, thr)

    slices = [(k, s) for k in stack.grid.channels() for s in range(len(stack.voltages))]

    def detect(task):
        k, s = task
        return detect_spots(stack.frame(k, s), thr, min_separation_px, channel=k,
                            voltage=float(stack.voltages[s]), background=level)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            per_slice = list(ex.map(detect, slices))
    else:
        per_slice = [detect(t) for t in slices]

    by_channel: Dict[int, List[Spot]] = {}
    for (k, _), found in zip(slices, per_slice):
        by_channel.setdefault(k, []).extend(found)
    n_detections = sum(len(v) for v in by_channel.values())

    height, width = stack.shape_px
    channel_spots: List[Spot] = []
    unresolved = 0
    for k in stack.grid.channels():
        detections = by_channel.get(k, [])
        if not detections:
            continue
        for group in _link_channel(detections, link_radius_px):
            if len(group) < min_detections:
                continue
            x = float(np.mean([detections[i].x for i in group]))
            y = float(np.mean([detections[i].y for i in group]))
            r, c = min(max(int(round(y)), 0), height - 1), min(max(int(round(x)), 0), width - 1)
            window = stack.frames[k - 1, :, max(0, r - 1):r + 2, max(0, c - 1):c + 2]
            window_px = window.shape[1] * window.shape[2]
            track = window.sum(axis=(1, 2), dtype=float) - level * window_px
            try:
                peak = resonance_peak(stack.voltages, track, noise, window_px)
            except NoSignalError:
                log.warning("channel %d: spot at (%.1f, %.1f) has no signal, skipped", k, x, y)
                continue
            if peak is None:
                unresolved += 1
                log.debug("channel %d: no resolved resonance at (%.1f, %.1f)", k, x, y)
                continue
            cx, cy = _centroid(stack.frames[k - 1, peak.step], r, c, level)
            channel_spots.append(Spot(cx, cy, peak.amplitude, k, peak.voltage))

    # window-sum brightness, so the floor is the detection margin of a 3x3 sum
    floor = DETECTION_SIGMAS * 3.0 * noise
    table = merge_identities(channel_spots, floor, max_distance_px, max_relative_difference,
                             stack.pixel_pitch_um)
    log.info("detections=%d channel spots=%d off-resonance=%d emitters=%d",
             n_detections, len(channel_spots), unresolved, len(table.emitter_ids))
    return RegistryResult(n_detections, tuple(channel_spots), table, thr, level, unresolved, floor)


def save_frame_stack(stack: FrameStack, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in stack.grid.channels():
        for s in range(len(stack.voltages)):
            img = np.clip(np.rint(stack.frame(k, s)), 0, 65535).astype(np.uint16)
            iio.imwrite(directory / FRAME_NAME.format(channel=k, step=s), img)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "pixel_pitch_um": stack.pixel_pitch_um,
        "voltages_v": list(map(float, stack.voltages)),
        "v_max": stack.v_max,
        "grid": {"v0": stack.grid.v0, "delta_v": stack.grid.delta_v, "k_max": stack.grid.k_max},
        "shape_px": list(stack.shape_px),
        "seed": stack.seed,
    }
    write_json(meta, directory / "meta.json")
    return directory


def load_frame_stack(directory: Path) -> FrameStack:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"frame directory {directory} has no meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    grid = FrequencyGrid(**meta["grid"])
    voltages = np.asarray(meta["voltages_v"], dtype=float)
    frames = []
    for k in grid.channels():
        row = []
        for s in range(len(voltages)):
            path = directory / FRAME_NAME.format(channel=k, step=s)
            if not path.is_file():
                raise FileNotFoundError(f"missing frame {path}")
            row.append(iio.imread(path).astype(np.float32))
        frames.append(row)
    return FrameStack(np.asarray(frames, dtype=np.float32), voltages, grid, float(meta["v_max"]),
                      float(meta["pixel_pitch_um"]), meta.get("seed"))


def write_lookup_table(table: LookupTable, directory: Path) -> Tuple[Path, Path]:
    directory = Path(directory)
    return (write_json(table.to_document(), directory / "lookup_table.json"),
            write_csv(table.to_frame(), directory / "lookup_table.csv"))


def stats_frame(stats: EmitterStatistics, n_sys: int, k_max: int) -> pd.DataFrame:
    return pd.DataFrame([{**stats.__dict__, "n_sys": n_sys, "k_max": k_max}], columns=STATS_COLUMNS)


def channel_counts(table: LookupTable, k_max: int) -> pd.DataFrame:
    """Bright spots per frequency channel (m_k), zero rows for empty channels."""
    rows = [{"channel": k, "n_spot": len(table.channels.get(k, ()))} for k in range(1, k_max + 1)]
    return pd.DataFrame(rows, columns=CHANNEL_COUNT_COLUMNS)


def registry_graph(table: LookupTable, k_max: int) -> ChannelGraph:
    """Channel graph of measured emitters.

    Ids listed in the same channel form a clique; an id seen in several
    channels belongs to each of those cliques and joins them into one cluster.
    """
    node_channels: Dict[int, set] = {}
    for k, entries in table.channels.items():
        for e in entries:
            node_channels.setdefault(e.emitter_id, set()).add(k)
    members = {k: tuple(sorted(e.emitter_id for e in table.channels.get(k, ()))) for k in range(1, k_max + 1)}
    return ChannelGraph(members, {i: frozenset(ch) for i, ch in sorted(node_channels.items())},
                        clique_edges(members))
