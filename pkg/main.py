# main.py
# Command-line entry point: one subcommand per experiment, every run writes
# its data files plus resolved_config.yaml into --out.
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd

import config as cfgmod
from common import derive_seed, setup_logging, write_csv, write_json
from ensemble import sample_ensemble, write_ensemble
from errors import QsocError
from graph import (channel_graph, default_scaling_sites, pc_sweep, scaling_frame,
                   scaling_points, write_channel_graph, write_pc_curve)
from photonics import budget_document, budget_table
from registry import (channel_counts, emitter_statistics, load_frame_stack, registry_graph, run_pipeline,
                      save_frame_stack, stats_frame, synthesize_frames, write_lookup_table)
from spam import (fit_readout, mean_time_to_success, post_selection_sweep, quadrant_analysis,
                  read_records_csv, simulate_readout, sweep_frame)


log = logging.getLogger("qsoc")

PREVIEW_ROWS = 10


def _preview(title: str, df: pd.DataFrame) -> None:
    print(f"\n[{title}] first {min(len(df), PREVIEW_ROWS)} of {len(df)} rows:")
    print(df.head(PREVIEW_ROWS).to_string(index=False))


def run_pc_sweep(cfg: cfgmod.ExperimentConfig) -> List[Path]:
    g = cfg.block("graph")
    law = cfgmod.tuning_law(cfg)
    base = cfgmod.ensemble_config(cfg)
    curve = pc_sweep(base, g["ratios"], g["n_qubits"], trials=g["trials"], law=law,
                     master_seed=cfg.seed, threads=cfg.threads, coupled=g["coupled"])
    written = [write_pc_curve(curve, cfg.out / "pc_curve.csv")]

    example = channel_graph(sample_ensemble(base), law, cfgmod.frequency_grid(cfg), g["linewidth_limit_mhz"])
    written.append(write_channel_graph(example, cfg.out / "channel_graph.json"))

    _preview("p_c", curve.to_frame())
    for n in curve.n_qubits:
        print(f"[threshold] n_qubit={n}: p_c >= 0.9 from ratio {curve.threshold_ratio(n):.4g}")
    return written


def _stack_from_config(cfg: cfgmod.ExperimentConfig):
    r = cfg.block("registry")
    fov = (r["shape_px"][1] * r["pixel_pitch_um"], r["shape_px"][0] * r["pixel_pitch_um"])
    emitters = sample_ensemble(cfgmod.ensemble_config(cfg, n_qubit=r["n_emitters"], fov_um=fov))
    stack = synthesize_frames(
        emitters, cfgmod.tuning_law(cfg), cfgmod.frequency_grid(cfg),
        psf_sigma_px=r["psf_sigma_px"], noise_params=cfgmod.noise_params(cfg),
        voltage_steps=r["voltage_steps"], pixel_pitch_um=r["pixel_pitch_um"],
        shape_px=tuple(r["shape_px"]), seed=derive_seed(cfg.seed, cfgmod.FRAMES_STREAM),
    )
    return emitters, stack


def run_synth_frames(cfg: cfgmod.ExperimentConfig) -> List[Path]:
    emitters, stack = _stack_from_config(cfg)
    frames_dir = save_frame_stack(stack, cfg.out / "frames")
    written = [frames_dir, *write_ensemble(emitters, cfg.out, cfgmod.ensemble_config(cfg))]
    print(f"[frames] {stack.frames.shape[0]} channels x {stack.frames.shape[1]} steps -> {frames_dir}")
    return written


def run_registry(cfg: cfgmod.ExperimentConfig) -> List[Path]:
    r = cfg.block("registry")
    if r["frames_dir"]:
        stack = load_frame_stack(Path(r["frames_dir"]))
        written: List[Path] = []
    else:
        emitters, stack = _stack_from_config(cfg)
        written = list(write_ensemble(emitters, cfg.out, cfgmod.ensemble_config(cfg)))
    result = run_pipeline(
        stack, threshold=r["threshold"], min_separation_px=r["min_separation_px"],
        link_radius_px=r["link_radius_px"], min_detections=r["min_detections"],
        max_distance_px=r["merge_distance_px"], max_relative_difference=r["max_relative_difference"],
        threads=cfg.threads,
    )
    written.extend(write_lookup_table(result.table, cfg.out))
    stats = emitter_statistics(result.table, r["n_sys"], stack.grid.k_max)
    stats_df = stats_frame(stats, r["n_sys"], stack.grid.k_max)
    written.append(write_csv(stats_df, cfg.out / "stats.csv"))
    counts = channel_counts(result.table, stack.grid.k_max)
    written.append(write_csv(counts, cfg.out / "channel_counts.csv"))
    cluster = registry_graph(result.table, stack.grid.k_max)
    written.append(write_channel_graph(cluster, cfg.out / "registry_graph.json"))
    _preview("lookup table", result.table.to_frame())
    _preview("stats", stats_df)
    _preview("spots per channel", counts)
    largest = cluster.components()[0] if cluster.node_channels else []
    print(f"[cluster] largest connected cluster: {len(largest)} of {len(cluster.node_channels)} emitters")
    return written


def run_spam(cfg: cfgmod.ExperimentConfig) -> List[Path]:
    s = cfg.block("spam")
    model = cfgmod.readout_model(cfg)
    if s["records_csv"]:
        records = read_records_csv(Path(s["records_csv"]))
    else:
        records = simulate_readout(model, threads=cfg.threads)
    results = post_selection_sweep(records, s["c_th"])
    sweep = sweep_frame(results)
    report = fit_readout(records, seed=cfg.seed)
    quad = quadrant_analysis(records, s["n_m"])
    report["quadrants"] = {"n_m": s["n_m"], "gray": quad.gray, "red": quad.red,
                           "blue": quad.blue, "magenta": quad.magenta, "error": quad.error}
    report["mean_time_to_success_us"] = {
        str(res.c_th): mean_time_to_success(res.p_success, model.t_cycle_us) for res in results
    }
    written = [write_csv(sweep, cfg.out / "spam_sweep.csv"), write_json(report, cfg.out / "spam_fit.json")]
    _preview("spam sweep", sweep)
    print(f"[quadrants] error without post-selection: {quad.error:.4%}")
    return written


def run_budget(cfg: cfgmod.ExperimentConfig) -> List[Path]:
    p = cfg.block("photonics")
    table = budget_table(cfgmod.lifetime_set(cfg), cfgmod.photon_budget(cfg), p["cavity_q"], p["cavity_v_mode"])
    written = [write_json(budget_document(table), cfg.out / "budget.json")]
    print("\n[budget]")
    print(table.to_string(index=False))
    return written


def run_scaling(cfg: cfgmod.ExperimentConfig) -> List[Path]:
    s = cfg.block("scaling")
    sites: Optional[Dict[str, float]] = s["sites"] or default_scaling_sites()
    points = scaling_points(s["n_emitter"], s["p_c"], sites, s["k_values"])
    df = scaling_frame(points)
    written = [write_csv(df, cfg.out / "scaling.csv")]
    _preview("scaling", df)
    return written


COMMANDS: Dict[str, Callable[[cfgmod.ExperimentConfig], List[Path]]] = {
    "pc-sweep": run_pc_sweep,
    "registry": run_registry,
    "spam": run_spam,
    "budget": run_budget,
    "scaling": run_scaling,
    "synth-frames": run_synth_frames,
}

HELP = {
    "pc-sweep": "fully-connected fraction p_c against tunability ratio",
    "registry": "detect, merge and tabulate emitters from a frame stack",
    "spam": "readout statistics, e_spam and post-selection sweep",
    "budget": "Purcell factors and the p_det photon budget",
    "scaling": "qubit and link counts for larger systems",
    "synth-frames": "write a synthetic widefield frame stack",
}


class CliParser(argparse.ArgumentParser):
    """argparse with the validation exit code: bad flags exit 1, not 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(1, f"[error] {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment file")
    common.add_argument("--seed", type=int, help="master seed (overrides the file)")
    common.add_argument("--out", type=Path, help="output directory (overrides the file)")
    common.add_argument("--threads", type=int, help="worker threads (overrides the file)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = CliParser(prog="qsoc", description="QSoC spin-qubit architecture simulator")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = cfgmod.apply_overrides(cfgmod.load_config(args.config), args.seed, args.out, args.threads)
        written = COMMANDS[args.command](cfg)
        written.append(cfgmod.write_resolved(cfg, cfg.out))
    except OSError as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return 2
    except (QsocError, ValueError) as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return 1
    for path in written:
        log.info("saved %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
