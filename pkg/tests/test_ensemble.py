import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ensemble import (Emitter, EmpiricalCdf, EnsembleConfig, FrequencyGrid, TuningLaw,
                      ensemble_statistics, frequency_at_voltage, read_ensemble_csv,
                      reachable_channels, sample_ensemble, spin_transitions,
                      tuning_interval, tuning_sigma_for_mean, voltage_for_frequency,
                      write_ensemble)
from errors import ConfigError, DomainError, UnreachableError


def emitter(f0=5.0, delta_vm=2.0, **kw):
    kw.setdefault("linewidth", 50.0)
    kw.setdefault("splitting", 1.0)
    return Emitter(id=kw.pop("id", 0), position=(0.0, 0.0), f0=f0, delta_vm=delta_vm, **kw)


def test_empty_ensemble():
    assert sample_ensemble(EnsembleConfig(n_qubit=0)) == []


def test_same_seed_same_ensemble():
    cfg = EnsembleConfig(n_qubit=50, rng_seed=7)
    assert sample_ensemble(cfg) == sample_ensemble(cfg)
    assert sample_ensemble(cfg) != sample_ensemble(EnsembleConfig(n_qubit=50, rng_seed=8))


def test_sigma_from_mean_tuning():
    assert tuning_sigma_for_mean(2.0) == pytest.approx(2.5066, abs=1e-4)
    assert EnsembleConfig(mean_tuning=2.0).sigma == pytest.approx(2.0 * math.sqrt(math.pi / 2))
    derived = EnsembleConfig(mean_tuning=None, tuning_sigma=2.5066282746310002)
    assert derived.mean == pytest.approx(2.0)


def test_sampled_distributions():
    cfg = EnsembleConfig(n_qubit=10_000, v_inh=20.0, mean_tuning=2.0, rng_seed=3)
    ens = sample_ensemble(cfg)
    f0 = np.array([e.f0 for e in ens])
    dv = np.array([e.delta_vm for e in ens])
    assert f0.min() >= 0.0 and f0.max() <= 20.0
    assert stats.kstest(f0 / 20.0, "uniform").pvalue > 0.01
    se = dv.std(ddof=1) / math.sqrt(dv.size)
    assert abs(dv.mean() - 2.0) < 3 * se


@pytest.mark.parametrize("kwargs", [
    {"v_inh": 0.0},
    {"n_qubit": -1},
    {"mean_tuning": 2.0, "tuning_sigma": 1.0},
    {"mean_tuning": None, "tuning_sigma": None},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        EnsembleConfig(**kwargs)


def test_empirical_cdf_rejects_bad_knots():
    with pytest.raises(ConfigError):
        EmpiricalCdf(values=(1.0, 0.0), probs=(0.0, 1.0))
    with pytest.raises(ConfigError):
        EmpiricalCdf(values=(0.0, 1.0), probs=(0.1, 1.0))


def test_emitter_invariants():
    with pytest.raises(DomainError):
        emitter(delta_vm=-1.0)
    with pytest.raises(DomainError):
        emitter(linewidth=0.0)


def test_frequency_at_voltage():
    law = TuningLaw(v_max=40.0, exponent=2.0)
    e = emitter()
    assert frequency_at_voltage(e, law, 0.0) == 5.0
    assert frequency_at_voltage(e, law, 40.0) == 7.0
    assert frequency_at_voltage(e, law, 20.0) == pytest.approx(5.5)
    with pytest.raises(DomainError):
        frequency_at_voltage(e, law, 41.0)


def test_voltage_for_frequency():
    law = TuningLaw(v_max=40.0, exponent=2.0)
    e = emitter()
    assert voltage_for_frequency(e, law, 5.0) == 0.0
    assert voltage_for_frequency(e, law, 7.0) == 40.0
    assert voltage_for_frequency(e, law, 5.5) == pytest.approx(20.0, abs=1e-6)
    with pytest.raises(UnreachableError):
        voltage_for_frequency(e, law, 7.5)
    with pytest.raises(UnreachableError):
        voltage_for_frequency(e, law, 4.9)


@given(
    f0=st.floats(0.0, 20.0),
    delta_vm=st.floats(0.01, 5.0),
    frac=st.floats(0.0, 1.0),
    exponent=st.floats(0.5, 3.0),
    direction=st.sampled_from([1, -1]),
)
@settings(max_examples=200, deadline=None)
def test_voltage_inverts_tuning_law(f0, delta_vm, frac, exponent, direction):
    law = TuningLaw(v_max=40.0, exponent=exponent, direction=direction)
    e = emitter(f0=f0, delta_vm=delta_vm)
    lo, hi = tuning_interval(e, law)
    target = lo + frac * (hi - lo)
    v = voltage_for_frequency(e, law, target)
    assert 0.0 <= v <= law.v_max
    assert abs(frequency_at_voltage(e, law, v) - target) < 1e-6


def test_symmetric_mode_centres_interval():
    law = TuningLaw(mode="symmetric")
    e = emitter(f0=5.0, delta_vm=2.0)
    assert tuning_interval(e, law) == (4.0, 6.0)
    assert frequency_at_voltage(e, law, 0.0) == pytest.approx(4.0)
    assert frequency_at_voltage(e, law, law.v_max) == pytest.approx(6.0)


def test_negative_direction_interval():
    law = TuningLaw(direction=-1)
    assert tuning_interval(emitter(f0=5.0, delta_vm=2.0), law) == (3.0, 5.0)


def test_reachable_channels():
    grid = FrequencyGrid(v0=0.0, delta_v=2.0, k_max=11)
    law = TuningLaw()
    assert reachable_channels(emitter(f0=6.0, delta_vm=0.0), law, grid) == {3}
    assert reachable_channels(emitter(f0=6.5, delta_vm=0.0), law, grid) == frozenset()
    e = emitter(f0=3.0, delta_vm=2.5)
    brute = {k for k in range(1, 12) if 3.0 <= grid.frequency(k) <= 5.5}
    assert reachable_channels(e, law, grid) == brute == {2}


@given(f0=st.floats(-5.0, 30.0), delta_vm=st.floats(0.0, 10.0))
@settings(max_examples=200, deadline=None)
def test_reachable_channels_match_scan(f0, delta_vm):
    grid = FrequencyGrid(v0=0.5, delta_v=2.0, k_max=11)
    law = TuningLaw()
    e = emitter(f0=f0, delta_vm=delta_vm)
    lo, hi = tuning_interval(e, law)
    assert reachable_channels(e, law, grid) == {k for k in grid.channels() if lo <= grid.frequency(k) <= hi}


def test_spin_transitions():
    assert spin_transitions(emitter(f0=5.0, splitting=2.0)) == (5.0, 7.0)


def test_ensemble_statistics():
    ens = [emitter(id=0, linewidth=40.0, splitting=0.7), emitter(id=1, linewidth=150.0, splitting=0.1),
           emitter(id=2, linewidth=500.0, splitting=1.0), emitter(id=3, linewidth=60.0, splitting=0.6)]
    s = ensemble_statistics(ens)
    assert s["n"] == 4
    assert s["frac_linewidth_le_2tl"] == 0.5
    assert s["frac_linewidth_le_200mhz"] == 0.75
    assert s["frac_splitting_ge_0p6ghz"] == 0.75


def test_ensemble_csv_round_trip(tmp_path):
    ens = sample_ensemble(EnsembleConfig(n_qubit=5, rng_seed=1))
    csv_path, json_path = write_ensemble(ens, tmp_path, EnsembleConfig(n_qubit=5, rng_seed=1))
    assert json_path.exists()
    back = read_ensemble_csv(csv_path)
    assert [e.id for e in back] == [e.id for e in ens]
    assert [e.f0 for e in back] == pytest.approx([e.f0 for e in ens], rel=1e-8)
