import json

import numpy as np
import pandas as pd
import pytest
import yaml

import config as cfgmod
from ensemble import Emitter, FrequencyGrid, TuningLaw
from errors import ConfigError
from main import main
from registry import save_frame_stack, synthesize_frames

SMALL = {
    "ensemble": {"n_qubit": 30},
    "graph": {"ratios": [0.0, 0.05], "n_qubits": [20, 50], "trials": 2},
    "registry": {"n_emitters": 5, "shape_px": [40, 40], "voltage_steps": 5},
    "spam": {"shots": 2000, "c_th": [0, 5, 18]},
}


def write_config(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def run(tmp_path, command, data=SMALL, out="out", *extra):
    cfg = write_config(tmp_path, data)
    return main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "pc-sweep" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["budget", "--seed", "abc"], ["budget", "--threads", "x"],
                                  ["no-such-command"], []])
def test_bad_arguments_exit_one(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1
    assert "[error]" in capsys.readouterr().err


@pytest.mark.parametrize("command,files", [
    ("pc-sweep", ["pc_curve.csv", "channel_graph.json"]),
    ("synth-frames", ["frames/meta.json", "ensemble.csv", "ensemble.json"]),
    ("registry", ["lookup_table.json", "lookup_table.csv", "stats.csv", "channel_counts.csv",
                  "registry_graph.json", "ensemble.csv"]),
    ("spam", ["spam_sweep.csv", "spam_fit.json"]),
    ("budget", ["budget.json"]),
    ("scaling", ["scaling.csv"]),
])
def test_commands_write_outputs(tmp_path, command, files):
    assert run(tmp_path, command) == 0
    for name in files + ["resolved_config.yaml"]:
        assert (tmp_path / "out" / name).exists(), name


def test_pc_sweep_output(tmp_path):
    assert run(tmp_path, "pc-sweep", {**SMALL, "graph": {"ratios": [0.0], "n_qubits": [40], "trials": 3}}) == 0
    lines = (tmp_path / "out" / "pc_curve.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "ratio,n_qubit,p_c_mean,p_c_stderr,trials"
    df = pd.read_csv(tmp_path / "out" / "pc_curve.csv")
    assert df["p_c_mean"].iloc[0] == pytest.approx(1 / 40)
    graph = json.loads((tmp_path / "out" / "channel_graph.json").read_text(encoding="utf-8"))
    assert len(graph["nodes"]) == 30


def test_resolved_config_reloads(tmp_path):
    assert run(tmp_path, "budget", SMALL, "out", "--seed", "42") == 0
    resolved = cfgmod.load_config(tmp_path / "out" / "resolved_config.yaml")
    assert resolved.seed == 42
    assert resolved.block("spam")["shots"] == 2000


def test_registry_from_frames_dir(tmp_path):
    pitch = 0.2
    emitters = [
        Emitter(id=i, position=((8.0 + 12.0 * (i % 5)) * pitch, (10.0 + 12.0 * (i // 5)) * pitch),
                f0=2.0 * (1 + i % 9) - 0.3, delta_vm=1.0, linewidth=150.0, splitting=30.0)
        for i in range(10)
    ]
    stack = synthesize_frames(emitters, TuningLaw(), FrequencyGrid(), voltage_steps=21,
                              pixel_pitch_um=pitch, shape_px=(32, 64), seed=5)
    frames_dir = save_frame_stack(stack, tmp_path / "frames")
    data = {"registry": {"frames_dir": str(frames_dir)}}
    assert run(tmp_path, "registry", data) == 0
    table = pd.read_csv(tmp_path / "out" / "lookup_table.csv")
    assert table["id"].nunique() == 10
    assert not (tmp_path / "out" / "ensemble.csv").exists()


def test_registry_missing_frames_dir(tmp_path, capsys):
    data = {"registry": {"frames_dir": str(tmp_path / "missing")}}
    assert run(tmp_path, "registry", data) == 2
    assert "[error]" in capsys.readouterr().err


def test_spam_outputs(tmp_path):
    assert run(tmp_path, "spam", {"spam": {"shots": 2000, "c_th": [0]}}) == 0
    sweep = pd.read_csv(tmp_path / "out" / "spam_sweep.csv")
    assert list(sweep.columns) == ["c_th", "e_spam", "n_m", "p_success"]
    assert sweep["p_success"].iloc[0] == 1.0
    report = json.loads((tmp_path / "out" / "spam_fit.json").read_text(encoding="utf-8"))
    assert report["shots"] == 2000
    q = report["quadrants"]
    assert q["gray"] + q["red"] + q["blue"] + q["magenta"] == 2000
    assert report["mean_time_to_success_us"]["0"] == pytest.approx(60.0)


def test_spam_from_records(tmp_path):
    records = tmp_path / "records.csv"
    records.write_text("shot,bin1,bin2,bin3\n" + "".join(f"{i},{i % 20},1,{i % 20}\n" for i in range(200)),
                       encoding="utf-8")
    data = {"spam": {"records_csv": str(records), "c_th": [0, 10]}}
    assert run(tmp_path, "spam", data) == 0
    sweep = pd.read_csv(tmp_path / "out" / "spam_sweep.csv")
    assert sweep["p_success"].tolist() == [1.0, 0.5]


def test_spam_malformed_records(tmp_path, capsys):
    records = tmp_path / "records.csv"
    records.write_text("shot,bin1,bin2,bin3\n0,1,2,3\n1,oops,2,3\n", encoding="utf-8")
    assert run(tmp_path, "spam", {"spam": {"records_csv": str(records)}}) == 1
    assert "line 3" in capsys.readouterr().err


def test_budget_values(tmp_path):
    assert run(tmp_path, "budget") == 0
    doc = json.loads((tmp_path / "out" / "budget.json").read_text(encoding="utf-8"))
    q = doc["quantities"]
    assert q["purcell_lifetimes"]["value"] == pytest.approx(2.87, abs=0.01)
    assert q["photon_zpl_rounded"]["value"] == 24
    assert q["p_det_rounded"]["value"] == pytest.approx(2.4e-3)


def test_scaling_output(tmp_path):
    data = {"scaling": {"sites": {"full_sample": 1024.0}, "k_values": [11]}}
    assert run(tmp_path, "scaling", data) == 0
    df = pd.read_csv(tmp_path / "out" / "scaling.csv")
    assert df["n_qubit"].iloc[0] == pytest.approx(25907.2)


@pytest.mark.parametrize("command,name", [
    ("spam", "spam_sweep.csv"), ("spam", "spam_fit.json"), ("pc-sweep", "pc_curve.csv"),
    ("synth-frames", "ensemble.csv"), ("registry", "lookup_table.json"), ("registry", "stats.csv"),
    ("registry", "registry_graph.json"), ("budget", "budget.json"), ("scaling", "scaling.csv"),
])
def test_runs_are_byte_identical(tmp_path, command, name):
    assert run(tmp_path, command, SMALL, "a", "--seed", "7") == 0
    assert run(tmp_path, command, SMALL, "b", "--seed", "7") == 0
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_thread_count_does_not_change_results(tmp_path):
    assert run(tmp_path, "pc-sweep", SMALL, "a", "--threads", "1") == 0
    assert run(tmp_path, "pc-sweep", SMALL, "b", "--threads", "3") == 0
    assert (tmp_path / "a" / "pc_curve.csv").read_bytes() == (tmp_path / "b" / "pc_curve.csv").read_bytes()


def test_unknown_key_reports_field(tmp_path, capsys):
    assert run(tmp_path, "budget", {"graph": {"ratio": [0.1]}}) == 1
    assert "graph.ratio" in capsys.readouterr().err


def test_config_errors():
    with pytest.raises(ConfigError) as exc:
        cfgmod.from_dict({"spam": {"shots": "many"}})
    assert exc.value.field == "spam.shots"
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"seed": -1})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"law": {"v_max": None}})
    with pytest.raises(ConfigError) as exc:
        cfgmod.ensemble_config(cfgmod.from_dict({"ensemble": {"v_inh": 0.0}}))
    assert exc.value.field.startswith("ensemble")


def test_yaml_syntax_error_has_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 1\nspam:\n  shots: [1, 2\n", encoding="utf-8")
    with pytest.raises(ConfigError) as exc:
        cfgmod.load_config(path)
    assert exc.value.line is not None


def test_overrides():
    cfg = cfgmod.apply_overrides(cfgmod.from_dict({}), seed=3, threads=2)
    assert (cfg.seed, cfg.threads) == (3, 2)
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides(cfgmod.from_dict({}), threads=0)
    assert np.isclose(cfgmod.readout_model(cfg).lambda_bright, 18.0)
