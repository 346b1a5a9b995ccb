import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble import Emitter, EnsembleConfig, FrequencyGrid, TuningLaw, interval_bounds, sample_ensemble
from errors import DomainError
from graph import (PC_CURVE_COLUMNS, PcCurve, UnionFind, channel_graph, interval_components,
                   operating_ratio, pc_sweep, resolvable_spots, scaling_estimate,
                   scaling_frame, scaling_points, union_find_components)


def make(intervals, linewidth=30.0):
    return [
        Emitter(id=i, position=(0.0, 0.0), f0=f0, delta_vm=dv, linewidth=linewidth, splitting=0.0)
        for i, (f0, dv) in enumerate(intervals)
    ]


def test_union_find():
    uf = UnionFind(5)
    uf.union(0, 1)
    uf.union(3, 4)
    uf.union(1, 0)
    assert uf.num_components == 3
    assert uf.find(0) == uf.find(1)
    assert sorted(sorted(c) for c in uf.components()) == [[0, 1], [2], [3, 4]]


def test_interval_components_hand_example():
    ens = [Emitter(id=i, position=(0.0, 0.0), f0=f0, delta_vm=1.0, linewidth=30.0, splitting=0.0)
           for i, f0 in [(1, 0.0), (2, 0.5), (3, 3.0)]]
    report = interval_components(ens, TuningLaw())
    assert report.partition == frozenset({frozenset({1, 2}), frozenset({3})})
    assert report.largest_size == 2
    assert report.p_c == pytest.approx(2 / 3)
    assert report.non_singleton_fraction == pytest.approx(2 / 3)


def test_zero_tunability_gives_singletons():
    ens = make([(float(i), 0.0) for i in range(7)])
    report = interval_components(ens, TuningLaw())
    assert len(report.components) == 7
    assert report.p_c == pytest.approx(1 / 7)
    assert report.non_singleton_fraction == 0.0


def test_touching_intervals_connect():
    ens = make([(0.0, 1.0), (1.0, 1.0), (2.0, 0.0)])
    assert interval_components(ens, TuningLaw()).p_c == 1.0


def test_empty_ensemble_raises():
    with pytest.raises(DomainError):
        interval_components([], TuningLaw())
    with pytest.raises(DomainError):
        union_find_components([], TuningLaw())


def test_sweep_matches_union_find_on_random_instances():
    rng = np.random.default_rng(2024)
    law = TuningLaw()
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(1, 301))
        ens = make(zip(rng.uniform(0, 20, n), np.abs(rng.normal(0, rng.uniform(0.01, 1.0), n))))
        if interval_components(ens, law).partition != union_find_components(ens, law).partition:
            mismatches += 1
    assert mismatches == 0


@st.composite
def integer_intervals(draw):
    # integer endpoints make shared endpoints and duplicates common
    n = draw(st.integers(1, 40))
    f0 = draw(st.lists(st.integers(0, 30), min_size=n, max_size=n))
    dv = draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    return [(float(a), float(b)) for a, b in zip(f0, dv)]


@given(integer_intervals(), st.sampled_from(["one-sided", "symmetric"]), st.sampled_from([1, -1]))
@settings(max_examples=300, deadline=None)
def test_sweep_equals_oracle_property(intervals, mode, direction):
    law = TuningLaw(mode=mode, direction=direction)
    ens = make(intervals)
    sweep = interval_components(ens, law)
    oracle = union_find_components(ens, law)
    assert sweep.partition == oracle.partition
    assert sweep.largest_size == oracle.largest_size


def test_pc_sweep_ratio_zero_is_one_over_n():
    curve = pc_sweep(EnsembleConfig(), [0.0], [50, 200], trials=5, master_seed=1)
    assert curve.p_c_mean[0, 0] == pytest.approx(1 / 50, rel=1e-12)
    assert curve.p_c_mean[1, 0] == pytest.approx(1 / 200, rel=1e-12)
    assert np.all(curve.p_c_stderr == 0.0)


def test_pc_sweep_full_tunability():
    curve = pc_sweep(EnsembleConfig(), [1.0], [1000], trials=5, master_seed=2)
    assert curve.p_c_mean[0, 0] >= 0.99


def test_pc_sweep_monotone_and_scales():
    ratios = np.linspace(0.0, 0.2, 41)
    curve = pc_sweep(EnsembleConfig(v_inh=20.0), ratios, [100, 1000], trials=10, master_seed=5)
    for i in range(2):
        assert np.all(np.diff(curve.p_c_mean[i]) >= 0.0)
    assert curve.monotone_violations() == []
    small, large = curve.threshold_ratio(100), curve.threshold_ratio(1000)
    assert not math.isnan(small) and not math.isnan(large)
    assert large < small


def test_pc_sweep_deterministic_and_thread_independent():
    kwargs = dict(ratios=[0.0, 0.02, 0.05], n_qubit_list=[100], trials=4, master_seed=9)
    a = pc_sweep(EnsembleConfig(), **kwargs)
    b = pc_sweep(EnsembleConfig(), threads=3, **kwargs)
    np.testing.assert_array_equal(a.p_c_mean, b.p_c_mean)


def test_pc_sweep_uncoupled_still_deterministic():
    kwargs = dict(ratios=[0.01, 0.05], n_qubit_list=[100], trials=3, master_seed=4, coupled=False)
    np.testing.assert_array_equal(pc_sweep(EnsembleConfig(), **kwargs).p_c_mean,
                                  pc_sweep(EnsembleConfig(), **kwargs).p_c_mean)


def test_pc_curve_frame_and_threshold():
    curve = PcCurve((0.0, 0.1, 0.2), (10,), np.array([[0.5, 0.8, 1.0]]), np.zeros((1, 3)), 3)
    df = curve.to_frame()
    assert list(df.columns) == PC_CURVE_COLUMNS
    assert len(df) == 3
    assert curve.threshold_ratio(10, 0.9) == pytest.approx(0.15)
    assert math.isnan(curve.threshold_ratio(10, 1.5))


def test_monotone_violations_use_stderr_band():
    mean = np.array([[0.5, 0.8, 0.6]])
    dipping = PcCurve((0.0, 0.1, 0.2), (10,), mean, np.full((1, 3), 0.05), 4)
    assert dipping.monotone_violations() == [(10, 0.2)]
    noisy = PcCurve((0.0, 0.1, 0.2), (10,), mean, np.full((1, 3), 0.15), 4)
    assert noisy.monotone_violations() == []
    assert noisy.monotone_violations(tolerance=1.0) == [(10, 0.2)]


def test_channel_graph_edges_are_interval_edges():
    law = TuningLaw()
    cfg = EnsembleConfig(n_qubit=50, rng_seed=12)
    delta_v = cfg.v_inh / 1e4
    grid = FrequencyGrid(v0=0.0, delta_v=delta_v, k_max=10_000)
    ens = sample_ensemble(cfg)
    g = channel_graph(ens, law, grid, linewidth_limit=math.inf)
    lo, hi = interval_bounds([e.f0 for e in ens], [e.delta_vm for e in ens], law)
    assert g.edges
    for a, b in g.edges:
        assert lo[a] <= hi[b] and lo[b] <= hi[a]
    # overlaps wider than a channel spacing inside the grid always share a channel
    edges = set(g.edges)
    top = grid.frequency(grid.k_max)
    for a in range(len(ens)):
        for b in range(a + 1, len(ens)):
            start = max(lo[a], lo[b], delta_v)
            stop = min(hi[a], hi[b], top)
            if stop - start > 1.5 * delta_v:
                assert (a, b) in edges


def test_channel_graph_disjoint_and_triangle():
    grid, law = FrequencyGrid(), TuningLaw()
    assert channel_graph(make([(2.0, 0.0), (6.0, 0.0)]), law, grid).edges == ()
    tri = channel_graph(make([(10.0, 0.0)] * 3), law, grid)
    assert tri.members[5] == (0, 1, 2)
    assert tri.edges == ((0, 1), (0, 2), (1, 2))


def test_channel_graph_bridge_and_linewidth_limit():
    grid, law = FrequencyGrid(), TuningLaw()
    ens = make([(14.0, 2.0), (14.0, 0.0), (14.0, 0.0), (16.0, 0.0), (16.0, 0.0)])
    g = channel_graph(ens, law, grid)
    assert g.node_channels[0] == {7, 8}
    assert set(g.edges) == {(0, 1), (0, 2), (1, 2), (0, 3), (0, 4), (3, 4)}

    broad = [Emitter(id=9, position=(0.0, 0.0), f0=14.0, delta_vm=0.0, linewidth=200.0, splitting=0.0)]
    g2 = channel_graph(ens[1:3] + broad, law, grid)
    assert g2.members[7] == (1, 2, 9)
    assert g2.edges == ((1, 2),)


def test_scaling_estimate():
    assert scaling_estimate(2.3, 1024, 1.0, 11).n_qubit == pytest.approx(25907.2)
    assert scaling_estimate(2.3, 1024, 1.0, 1).n_qubit == pytest.approx(2355.2)
    assert scaling_estimate(2.3, 1024, 0.0, 11).n_qubit == 0.0
    p = scaling_estimate(2.3, 1024, 1.0, 11)
    assert p.n_link == pytest.approx(2355.2)
    assert p.n_link <= p.n_qubit
    with pytest.raises(DomainError):
        scaling_estimate(-1.0, 1024, 1.0, 11)


def test_resolvable_spots():
    assert 850_000 <= resolvable_spots(2650, 2.52) <= 890_000
    assert resolvable_spots(2.0, 1.0) == 3
    assert resolvable_spots(1000, 10) == 7853


def test_scaling_points_and_ratio():
    points = scaling_points()
    labels = [p.label for p in points]
    assert "full_sample_k11" in labels and "custom_lens_k1" in labels
    full = next(p for p in points if p.label == "full_sample_k11")
    assert full.n_qubit == pytest.approx(25907.2)
    assert list(scaling_frame(points).columns) == ["n_qubit", "n_link", "label"]
    assert operating_ratio(2.0, 150.0) == pytest.approx(0.01333, abs=1e-5)
