"""Tests for evaluation, reconstruction, aggregation, and run artifacts."""

import csv

import numpy as np
import pytest

from qfactor.agents import AgentNetwork, Controller
from qfactor.envs import PAYOFF, MatrixGame, make_env
from qfactor.harness import (
    additive_residual,
    aggregate_seeds,
    evaluate,
    phi_stability,
    read_manifest,
    read_metrics_csv,
    read_phi_csv,
    read_reconstruction_csv,
    reconstruct_qtot,
    smooth_cma10,
    write_aggregate_csv,
    write_manifest,
    write_metrics_csv,
    write_phi_csv,
    write_reconstruction_csv,
)
from qfactor.mixers import QmixMixer, QtranHeads, ResidualEstimator
from qfactor.nn import Tensor, no_grad


def matrix_net(seed=0):
    env = MatrixGame()
    rng = np.random.default_rng(seed)
    return AgentNetwork(env.obs_dim, env.n_actions, env.n_agents, rng), env


def param_bytes(module):
    return b"".join(p.data.tobytes()
                    for _, p in module.named_parameters("m."))


# -- evaluation -----------------------------------------------------------


def test_evaluate_zero_net_plays_first_action():
    net, env = matrix_net()
    net.head.weight.data[:] = 0.0
    net.head.bias.data[:] = 0.0
    # all-zero action values tie, greedy picks action 0 for both agents
    assert evaluate(net, env, [0, 1, 2]) == PAYOFF[0, 0]


def test_evaluate_deterministic_and_pure():
    env = make_env("predator_prey", n_predators=2)
    rng = np.random.default_rng(7)
    net = AgentNetwork(env.obs_dim, env.n_actions, env.n_agents, rng)
    before = param_bytes(net)
    first = evaluate(net, env, [0, 1, 2])
    second = evaluate(net, env, [0, 1, 2])
    assert first == second
    assert param_bytes(net) == before


def test_evaluate_is_mean_over_seeds():
    env = make_env("predator_prey", n_predators=2)
    rng = np.random.default_rng(8)
    net = AgentNetwork(env.obs_dim, env.n_actions, env.n_agents, rng)
    seeds = [0, 1, 2, 3]
    singles = [evaluate(net, env, [s]) for s in seeds]
    assert np.isclose(evaluate(net, env, seeds), np.mean(singles))


# -- smoothing ------------------------------------------------------------


def test_smooth_constant_series_unchanged():
    assert smooth_cma10([3.0] * 25) == [3.0] * 25


def test_smooth_short_prefix_uses_what_exists():
    assert smooth_cma10([0.0, 10.0]) == [0.0, 5.0]


def test_smooth_trailing_window_forgets_old_values():
    series = [1.0] * 10 + [0.0] * 10
    out = smooth_cma10(series)
    assert out[9] == 1.0
    assert out[10] == 0.9
    assert out[19] == 0.0


def test_smooth_rejects_empty():
    with pytest.raises(ValueError):
        smooth_cma10([])


# -- reconstruction -------------------------------------------------------


def test_reconstruct_requires_the_matrix_game():
    net, _ = matrix_net()
    with pytest.raises(ValueError):
        reconstruct_qtot(net, "vdn", make_env("predator_prey", n_predators=2))


def test_reconstruct_rejects_unknown_algorithm():
    net, env = matrix_net()
    with pytest.raises(ValueError):
        reconstruct_qtot(net, "iql", env)


def test_reconstruct_zero_net_gives_zero_table():
    net, env = matrix_net()
    net.head.weight.data[:] = 0.0
    net.head.bias.data[:] = 0.0
    table = reconstruct_qtot(net, "vdn", env)
    assert table.shape == (3, 3)
    assert np.allclose(table, 0.0)


def test_reconstruct_sum_matches_per_agent_values():
    net, env = matrix_net(seed=3)
    ctl = Controller(net)
    ctl.start_episode()
    _, q = ctl.act(env.reset(0).obs, 0.0)
    table = reconstruct_qtot(net, "vdn", env)
    for a0 in range(3):
        for a1 in range(3):
            assert np.isclose(table[a0, a1], q[0, a0] + q[1, a1])


def test_reconstruct_sum_is_exactly_additive():
    net, env = matrix_net(seed=4)
    assert additive_residual(reconstruct_qtot(net, "vdn", env)) < 1e-12


def test_reconstruct_with_zero_factors_matches_plain_sum():
    net, env = matrix_net(seed=5)
    est = ResidualEstimator(2, np.random.default_rng(6))
    est.out.weight.data[:] = 0.0
    est.out.bias.data[:] = 0.0
    plain = reconstruct_qtot(net, "vdn", env)
    shifted = reconstruct_qtot(net, "rqn", env, estimator=est)
    assert np.allclose(shifted, plain)


def test_reconstruct_factor_shift_hand_cell():
    net, env = matrix_net(seed=7)
    est = ResidualEstimator(2, np.random.default_rng(8))
    ctl = Controller(net)
    ctl.start_episode()
    _, q = ctl.act(env.reset(0).obs, 0.0)
    table = reconstruct_qtot(net, "rqn", env, estimator=est)
    chosen = np.array([q[0, 0], q[1, 2]])
    with no_grad():
        phi = est(Tensor(np.concatenate([chosen, chosen]).reshape(1, -1)))
    assert np.isclose(table[0, 2], chosen.sum() + phi.data[0].sum())


def test_reconstruct_monotone_mixer_hand_cell():
    net, env = matrix_net(seed=9)
    mixer = QmixMixer(2, env.state_dim, np.random.default_rng(10))
    ctl = Controller(net)
    ctl.start_episode()
    res = env.reset(0)
    _, q = ctl.act(res.obs, 0.0)
    table = reconstruct_qtot(net, "qmix", env, mixer=mixer)
    with no_grad():
        expect = mixer(Tensor(np.array([[q[0, 1], q[1, 0]]])),
                       Tensor(res.state.reshape(1, -1))).item()
    assert np.isclose(table[1, 0], expect)


def test_reconstruct_joint_critic_is_symmetric():
    # summed action one-hots cannot distinguish who played which action
    net, env = matrix_net(seed=11)
    heads = QtranHeads(env.n_actions, net.hidden_dim,
                       np.random.default_rng(12))
    table = reconstruct_qtot(net, "qtran", env, heads=heads)
    assert np.allclose(table, table.T)


# -- additive residual ----------------------------------------------------


def test_additive_table_has_zero_residual():
    rows = np.array([1.0, -2.0, 0.5])[:, None]
    cols = np.array([0.25, 3.0, -1.0])[None, :]
    assert additive_residual(rows + cols) < 1e-12


def test_payoff_matrix_residual_value():
    assert np.isclose(additive_residual(PAYOFF), 128.0 / 9.0)


# -- aggregation ----------------------------------------------------------


def test_aggregate_identical_runs_zero_interval():
    mean, half = aggregate_seeds([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])
    assert np.allclose(mean, [1.0, 2.0])
    assert np.allclose(half, 0.0)


def test_aggregate_hand_values():
    mean, half = aggregate_seeds([[0.0, 0.0], [2.0, 2.0], [4.0, 4.0]])
    assert np.allclose(mean, [2.0, 2.0])
    assert np.allclose(half, 1.96 * 2.0 / np.sqrt(3.0))


def test_aggregate_rejects_single_run():
    with pytest.raises(ValueError):
        aggregate_seeds([[1.0, 2.0]])


def test_aggregate_rejects_flat_input():
    with pytest.raises(ValueError):
        aggregate_seeds([1.0, 2.0, 3.0])


# -- factor stability -----------------------------------------------------


def test_stability_constant_trace_scores_zero():
    ratios, drifts = phi_stability(np.ones((30, 2)))
    assert np.allclose(ratios, 0.0)
    assert np.allclose(drifts, 0.0)


def test_stability_settled_trace_scores_zero():
    trace = np.zeros((30, 1))
    trace[:5, 0] = [5.0, 4.0, 3.0, 2.0, 1.0]
    ratios, drifts = phi_stability(trace)
    assert ratios[0] == 0.0
    assert drifts[0] == 0.0


def test_stability_flags_a_trace_still_ramping():
    trace = (np.arange(30) * 0.1).reshape(-1, 1)
    ratios, drifts = phi_stability(trace)
    tail = np.array([2.7, 2.8, 2.9])
    assert np.isclose(ratios[0], tail.std() / 2.9)
    assert np.isclose(drifts[0], 0.1 * 2 / 2.9)


def test_stability_rejects_short_traces():
    with pytest.raises(ValueError):
        phi_stability(np.ones((19, 2)))
    with pytest.raises(ValueError):
        phi_stability(np.ones(30))


# -- artifacts ------------------------------------------------------------


def test_metrics_round_trip(tmp_path):
    path = tmp_path / "metrics.csv"
    rows = [(100, 0.1234567890123456789), (200, -8.0)]
    write_metrics_csv(path, rows)
    episodes, values = read_metrics_csv(path)
    assert episodes == [100, 200]
    assert values == [0.1234567890123456789, -8.0]


def test_metrics_header_enforced(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("episode,reward\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_csv(path)


def test_factor_trace_round_trip(tmp_path):
    path = tmp_path / "phi.csv"
    write_phi_csv(path, [(100, [0.1, -0.2]), (200, [0.3, 0.4])])
    episodes, trace = read_phi_csv(path)
    assert episodes == [100, 200]
    assert np.array_equal(trace, [[0.1, -0.2], [0.3, 0.4]])


def test_reconstruction_round_trip(tmp_path):
    path = tmp_path / "reconstruction.csv"
    table = np.random.default_rng(0).normal(size=(3, 3))
    write_reconstruction_csv(path, table)
    assert np.array_equal(read_reconstruction_csv(path), table)


def test_aggregate_csv_contents(tmp_path):
    path = tmp_path / "aggregate.csv"
    write_aggregate_csv(path, [100, 200], [1.5, 2.5], [0.25, 0.5])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["episode", "mean_reward", "ci95"]
    assert rows[1] == ["100", "1.5", "0.25"]
    assert rows[2] == ["200", "2.5", "0.5"]


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "run.json"
    config = {"algo": "rqn", "seed": 3, "env": {"name": "matrix"},
              "lr": 5e-4}
    write_manifest(path, config)
    assert read_manifest(path) == config
    assert path.read_bytes().endswith(b"\n")


def test_writers_are_byte_stable(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    rows = [(100, 1.0 / 3.0), (200, -0.07)]
    write_metrics_csv(a, rows)
    write_metrics_csv(b, rows)
    assert a.read_bytes() == b.read_bytes()
    ma, mb = tmp_path / "a.json", tmp_path / "b.json"
    write_manifest(ma, {"seed": 1, "algo": "vdn"})
    write_manifest(mb, {"algo": "vdn", "seed": 1})
    assert ma.read_bytes() == mb.read_bytes()
