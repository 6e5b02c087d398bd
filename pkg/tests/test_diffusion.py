import math

import numpy as np
import pytest

import impairnet.diffusion as diffusion
from impairnet.detection import WeightingPolicy, neighborhood_weights, run_detection_loop
from impairnet.diffusion import (
    LmsConfig,
    MsdSeries,
    NoiseProfile,
    TargetSignal,
    atc_procedures,
    atc_round,
    generate_target,
    lms_adapt,
    measure,
    msd,
    run_experiment,
    simulate_trial,
    to_db,
)
from impairnet.graph import Graph, GraphSpec, generate_graph


def small_config(**overrides):
    base = dict(
        graph_spec=GraphSpec(6, 1.0), signal_length=20, step_size=0.005, iterations=200,
        n_simulations=3, weighting=WeightingPolicy(0.015, 8.0), noise=NoiseProfile(0.04, 0, 2.0),
    )
    base.update(overrides)
    return LmsConfig(**base)


# -- target and measurements ---------------------------------------------------

def test_target_sparsity_extremes():
    rng = np.random.default_rng(0)
    assert not generate_target(4, 0.0, rng).values.any()
    full = generate_target(4, 1.0, rng).values
    assert np.count_nonzero(full) == 4


@pytest.mark.parametrize("length, sparsity, k", [(100, 0.5, 50), (10, 0.25, 3), (7, 0.5, 4), (3, 0.5, 2)])
def test_target_support_size_rounds(length, sparsity, k):
    t = generate_target(length, sparsity, np.random.default_rng(1))
    assert np.count_nonzero(t.values) == k


def test_target_moments():
    rng = np.random.default_rng(3)
    draws = [generate_target(100, 0.5, rng).values for _ in range(10_000)]
    support = np.array([np.count_nonzero(v) for v in draws])
    nonzeros = np.concatenate([v[v != 0] for v in draws])
    assert support.mean() == 50
    assert nonzeros.var() == pytest.approx(1.0, abs=0.05)
    # support is uniform: each coordinate is active half the time
    hits = np.mean([v != 0 for v in draws], axis=0)
    assert np.abs(hits - 0.5).max() < 0.05


def test_target_rejects_bad_sparsity():
    with pytest.raises(ValueError):
        generate_target(10, 1.5, np.random.default_rng(0))


def test_noiseless_measurement_is_exact():
    x = TargetSignal(np.array([0.5, -1.0, 2.0]), 1.0)
    a, d = measure(1, x, NoiseProfile(0.0), np.random.default_rng(4))
    assert d == pytest.approx(float(a @ x.values), abs=1e-14)


def test_zero_target_noiseless_gives_zero():
    _, d = measure(0, TargetSignal(np.zeros(5), 0.0), NoiseProfile(0.0), np.random.default_rng(4))
    assert d == 0.0


def test_impaired_noise_std():
    x = TargetSignal(np.array([1.0, -0.5]), 1.0)
    noise = NoiseProfile(0.04, impaired_node=2, impaired_exponent=2.0)
    assert noise.sigma(2) == pytest.approx(4.0)
    assert noise.sigma(1) == 0.04
    rng = np.random.default_rng(5)
    resid = []
    for _ in range(100_000):
        a, d = measure(2, x, noise, rng)
        resid.append(d - a @ x.values)
    assert np.std(resid) == pytest.approx(4.0, abs=0.05)


# -- LMS step ------------------------------------------------------------------

def test_lms_fixed_point_at_zero_error():
    x = np.array([0.3, -0.2])
    a = np.array([1.0, 2.0])
    np.testing.assert_array_equal(lms_adapt(x, a, float(a @ x), 0.1), x)


def test_lms_hand_value():
    np.testing.assert_allclose(lms_adapt([0.0, 0.0], [1.0, 0.0], 1.0, 0.5), [0.5, 0.0], atol=1e-15)


def test_lms_does_not_mutate_input():
    x = np.zeros(2)
    lms_adapt(x, [1.0, 0.0], 1.0, 0.5)
    assert not x.any()


@pytest.mark.parametrize("args", [([0.0], [1.0, 2.0], 1.0, 0.1), ([0.0], [1.0], 1.0, 0.0)])
def test_lms_rejects_bad_input(args):
    with pytest.raises(ValueError):
        lms_adapt(*args)


def test_noiseless_adaptation_converges():
    rng = np.random.default_rng(6)
    target = generate_target(100, 0.5, rng)
    x = np.zeros(100)
    errors = []
    for _ in range(30):
        for _ in range(100):
            a, d = measure(0, target, NoiseProfile(0.0), rng)
            x = lms_adapt(x, a, d, 0.001)
        errors.append(np.linalg.norm(x - target.values))
    assert all(b < a for a, b in zip(errors, errors[1:]))


# -- MSD -----------------------------------------------------------------------

@pytest.mark.parametrize("x, expected", [([1.0, 2.0], -200.0), ([2.0, 2.0], 0.0), ([1.1, 2.0], -20.0)])
def test_msd_examples(x, expected):
    assert msd(x, TargetSignal(np.array([1.0, 2.0]), 1.0)) == pytest.approx(expected, abs=1e-12)


def test_to_db_floor_and_values():
    np.testing.assert_allclose(to_db([0.0, 1.0, 100.0, 1e-30]), [-200.0, 0.0, 20.0, -200.0])
    assert to_db(1e-30, floor=-400.0) == pytest.approx(-300.0)


def test_averaging_happens_in_linear_domain(monkeypatch):
    # two trials with squared deviations 1 and 100 average to 50.5, not 10 dB
    traces = iter([np.array([[1.0, 1.0]]), np.array([[100.0, 100.0]])])
    monkeypatch.setattr(diffusion, "simulate_trial",
                        lambda config, seed, index: (next(traces), np.array([0.0])))
    cfg = small_config(graph_spec=GraphSpec(2, 1.0), iterations=1, n_simulations=2)
    series = run_experiment(cfg, 0)
    assert series.node_msd_db[0, 1] == pytest.approx(10 * math.log10(50.5))
    assert series.intact_mean_db[0] == pytest.approx(10 * math.log10(50.5))


def test_steady_state_uses_last_fifth():
    node_msd = np.ones((10, 2))
    node_msd[8:, 1] = 10.0
    series = MsdSeries(node_msd, np.array([1]), np.zeros((1, 10)), [[0, 0]])
    assert series.steady_state_db() == pytest.approx(10.0)
    assert series.steady_state_db(fraction=0.4) == pytest.approx(10 * math.log10(5.5))


# -- ATC rounds ----------------------------------------------------------------

@pytest.mark.parametrize("window", [1, 10])
@pytest.mark.parametrize("exponent", [0.0, 8.0, math.inf])
def test_round_matches_generic_detection_loop(window, exponent):
    cfg = small_config(graph_spec=GraphSpec(7, 0.5), adaptation_window=window,
                       weighting=WeightingPolicy(0.015, exponent))
    setup = np.random.default_rng(7)
    graph = generate_graph(cfg.graph_spec, setup)
    target = generate_target(cfg.signal_length, cfg.sparsity, setup)
    x0 = np.zeros((7, cfg.signal_length))

    rng_fast = np.random.default_rng(8)
    fast = x0
    for _ in range(4):
        fast = atc_round(fast, graph, target, cfg, rng_fast)

    rng_loop = np.random.default_rng(8)
    adapt, combine = atc_procedures(target, cfg, rng_loop)
    slow = run_detection_loop(adapt, combine, 4, graph, x0)

    np.testing.assert_array_equal(fast, slow)
    assert rng_fast.random() == rng_loop.random()


def test_uniform_complete_graph_equalizes_states():
    cfg = small_config(weighting=WeightingPolicy.uniform(), noise=NoiseProfile(0.04))
    target = generate_target(cfg.signal_length, 0.5, np.random.default_rng(0))
    out = atc_round(np.zeros((6, 20)), Graph.complete(6), target, cfg, np.random.default_rng(1))
    np.testing.assert_allclose(out, np.tile(out[0], (6, 1)), atol=1e-15)


def test_uniform_combination_keeps_network_mean():
    cfg = small_config(weighting=WeightingPolicy.uniform(), noise=NoiseProfile(0.04))
    target = generate_target(cfg.signal_length, 0.5, np.random.default_rng(0))
    adapt, combine = atc_procedures(target, cfg, np.random.default_rng(2))
    temps = []

    def recording_adapt(node, x, t):
        temps.append(adapt(node, x, t))
        return temps[-1]

    out = run_detection_loop(recording_adapt, combine, 1, Graph.complete(6), np.zeros((6, 20)))
    np.testing.assert_allclose(out.mean(axis=0), np.mean(temps, axis=0), atol=1e-15)


def test_impaired_node_pushed_out_after_50_rounds():
    cfg = small_config(step_size=0.001, signal_length=100, iterations=80)
    _, rel = simulate_trial(cfg, 11, 0)
    assert np.nanmean(rel[50:]) < 1.0


def test_impaired_gets_least_weight_once_far():
    cfg = small_config(graph_spec=GraphSpec(8, 1.0), step_size=0.001, signal_length=100)
    setup = np.random.default_rng(12)
    graph = Graph.complete(8)
    target = generate_target(100, 0.5, setup)
    adapt, _ = atc_procedures(target, cfg, np.random.default_rng(13))
    checked = 0

    def combine(view):
        nonlocal checked
        w = neighborhood_weights(view, cfg.weighting)
        if view.self_id != 0:
            imp = view.neighbor_ids.index(0)
            gap = np.linalg.norm(view.own_estimate - view.estimates[imp])
            if gap > cfg.weighting.zeta:
                assert w[imp] <= np.delete(w, imp).min()
                checked += 1
        return w @ view.estimates

    run_detection_loop(adapt, combine, 60, graph, np.zeros((8, 100)))
    assert checked > 0


def test_impairment_hurts_uniform_weighting():
    uniform = WeightingPolicy.uniform()
    impaired = run_experiment(small_config(weighting=uniform, iterations=400), 5)
    clean = run_experiment(small_config(weighting=uniform, iterations=400, noise=NoiseProfile(0.04)), 5)
    assert impaired.steady_state_db() > clean.steady_state_db() + 10


def test_mse_trend_non_increasing_without_impairment():
    cfg = small_config(weighting=WeightingPolicy.uniform(), noise=NoiseProfile(0.04), step_size=0.001,
                       signal_length=100, iterations=800, n_simulations=5)
    series = run_experiment(cfg, 21)
    windows = series.node_msd.reshape(8, 100, -1).mean(axis=1)
    assert (np.diff(windows, axis=0) <= 0).all()


# -- experiment ----------------------------------------------------------------

def test_experiment_repeatable_and_schedule_independent():
    cfg = small_config(graph_spec=GraphSpec(6, 0.6), iterations=30, n_simulations=4)
    first = run_experiment(cfg, 99)
    second = run_experiment(cfg, 99)

    def reversed_map(fn, items):
        items = list(items)
        done = {i: fn(i) for i in reversed(items)}
        return [done[i] for i in items]

    third = run_experiment(cfg, 99, map_fn=reversed_map)
    for other in (second, third):
        np.testing.assert_array_equal(first.node_msd, other.node_msd)
        np.testing.assert_array_equal(first.impaired_weight, other.impaired_weight)
    assert first.trial_seeds == [[99, i] for i in range(4)]


def test_different_seeds_differ():
    cfg = small_config(iterations=5, n_simulations=1)
    assert not np.array_equal(run_experiment(cfg, 1).node_msd, run_experiment(cfg, 2).node_msd)


@pytest.mark.parametrize("overrides", [
    dict(step_size=-0.001), dict(adaptation_window=0), dict(iterations=0),
    dict(n_simulations=0), dict(sparsity=1.2), dict(noise=NoiseProfile(0.04, 9, 2.0)),
])
def test_config_validation(overrides):
    with pytest.raises(ValueError):
        small_config(**overrides)
