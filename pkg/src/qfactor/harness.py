"""Evaluation protocol, metric post-processing, and run artifacts.

Everything here is read-only with respect to training state: evaluation and
reconstruction run greedy forward passes without building graphs, and the
aggregation helpers work on plain arrays and CSV files.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .agents import Controller, build_inputs
from .envs import MatrixGame
from .nn import Tensor, no_grad


# ---------------------------------------------------------------------------
# Evaluation.

def evaluate(net, env, seeds):
    """Mean undiscounted greedy return, one episode per seed.

    Parameters and replay contents are untouched: a throwaway controller
    runs the net graph-free at epsilon 0.
    """
    controller = Controller(net)
    total = 0.0
    for seed in seeds:
        res = env.reset(seed)
        controller.start_episode()
        episode_return = 0.0
        while not res.done:
            actions, _ = controller.act(res.obs, 0.0)
            res = env.step(actions)
            episode_return += res.reward
        total += episode_return
    return total / len(seeds)


def smooth_cma10(series, window=10):
    """Running mean over the trailing window (shorter at the start)."""
    series = list(series)
    if not series:
        raise ValueError("cannot smooth an empty series")
    out = []
    for k in range(len(series)):
        lo = max(0, k - window + 1)
        out.append(float(np.mean(series[lo:k + 1])))
    return out


# ---------------------------------------------------------------------------
# Matrix-game reconstruction.

def reconstruct_qtot(agent, algo, env, mixer=None, heads=None, estimator=None):
    """Joint value assigned to every joint action of the one-step game.

    Returns a square table indexed [first agent's action, second agent's
    action]. Each algorithm reconstructs with its own head: plain sum,
    factor-shifted sum, state-conditioned mixing, or the joint critic.
    """
    if not isinstance(env, MatrixGame):
        raise ValueError("reconstruction is defined for the one-step matrix "
                         "game only")
    res = env.reset(seed=0)
    x = build_inputs(res.obs, None, env.n_actions)
    with no_grad():
        q, hidden = agent.q_values(Tensor(x), agent.init_hidden(env.n_agents))
    q = q.data
    n = env.n_actions
    table = np.zeros((n, n))
    for a0 in range(n):
        for a1 in range(n):
            chosen = np.array([q[0, a0], q[1, a1]])
            if algo == "vdn":
                table[a0, a1] = chosen.sum()
            elif algo == "rqn":
                feats = np.concatenate([chosen, chosen]).reshape(1, -1)
                with no_grad():
                    phi = estimator(Tensor(feats)).data[0]
                table[a0, a1] = (chosen + phi).sum()
            elif algo == "qmix":
                with no_grad():
                    table[a0, a1] = mixer(
                        Tensor(chosen.reshape(1, -1)),
                        Tensor(res.state.reshape(1, -1))).item()
            elif algo == "qtran":
                onehot = np.zeros((1, n))
                onehot[0, a0] += 1.0
                onehot[0, a1] += 1.0
                h_sum = hidden.data.sum(axis=0, keepdims=True)
                with no_grad():
                    table[a0, a1] = heads.joint_value(Tensor(h_sum),
                                                      Tensor(onehot)).item()
            else:
                raise ValueError(f"unknown algorithm {algo!r}")
    return table


def additive_residual(table):
    """Largest deviation of a square table from its best r_i + c_j fit.

    A sum of per-agent values is exactly additive, so this is the
    structural witness that a plain sum cannot represent tables with
    interaction terms.
    """
    t = np.asarray(table, dtype=np.float64)
    fit = (t.mean(axis=1, keepdims=True) + t.mean(axis=0, keepdims=True)
           - t.mean())
    return float(np.abs(t - fit).max())


# ---------------------------------------------------------------------------
# Multi-seed aggregation.

def aggregate_seeds(series):
    """Pointwise mean and 95% confidence half-width across runs.

    series is a (runs, points) array-like with equal-length rows; the
    half-width uses the normal approximation with the sample standard
    deviation.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("series must be a rectangular (runs, points) array")
    if arr.shape[0] < 2:
        raise ValueError("aggregation needs at least two runs")
    mean = arr.mean(axis=0)
    half = 1.96 * arr.std(axis=0, ddof=1) / np.sqrt(arr.shape[0])
    return mean, half


def phi_stability(trace, tail_fraction=0.1):
    """Per-agent convergence measures for a factor trace.

    trace is (snapshots, n_agents). Returns (ratios, drifts): the tail
    standard deviation over the full range, and the magnitude of the tail's
    fitted linear change over the full range. Both near zero mean the
    factors settled; the drift term catches traces that wander slowly but
    never stop. Agents whose factors never moved at all score (0, 0).
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 2 or len(trace) < 20:
        raise ValueError("need a (snapshots >= 20, n_agents) trace")
    tail_len = max(2, int(round(len(trace) * tail_fraction)))
    tail = trace[-tail_len:]
    spans = trace.max(axis=0) - trace.min(axis=0)
    ratios = np.zeros(trace.shape[1])
    drifts = np.zeros(trace.shape[1])
    steps = np.arange(tail_len)
    for i in range(trace.shape[1]):
        if spans[i] == 0.0:
            continue
        ratios[i] = tail[:, i].std() / spans[i]
        slope = np.polyfit(steps, tail[:, i], 1)[0]
        drifts[i] = abs(slope) * (tail_len - 1) / spans[i]
    return ratios, drifts


# ---------------------------------------------------------------------------
# Run artifacts.

def write_metrics_csv(path, rows):
    """rows of (episode, eval_reward); floats written via repr for exact
    round-trips and byte-stable reruns."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "eval_reward"])
        for episode, value in rows:
            writer.writerow([int(episode), repr(float(value))])


def read_metrics_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["episode", "eval_reward"]:
            raise ValueError(f"unexpected metrics header {header!r}")
        episodes, values = [], []
        for row in reader:
            episodes.append(int(row[0]))
            values.append(float(row[1]))
    return episodes, values


def write_phi_csv(path, rows):
    """rows of (episode, per-agent factor vector)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "agent", "phi"])
        for episode, phi in rows:
            for agent, value in enumerate(phi):
                writer.writerow([int(episode), agent, repr(float(value))])


def read_phi_csv(path):
    """Returns (episodes, trace) with trace shaped (snapshots, n_agents)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["episode", "agent", "phi"]:
            raise ValueError(f"unexpected factor-trace header {header!r}")
        by_episode = {}
        for row in reader:
            by_episode.setdefault(int(row[0]), {})[int(row[1])] = float(row[2])
    episodes = sorted(by_episode)
    trace = np.array([[by_episode[ep][i] for i in sorted(by_episode[ep])]
                      for ep in episodes])
    return episodes, trace


def write_reconstruction_csv(path, table):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["a0", "a1", "qtot"])
        for a0 in range(table.shape[0]):
            for a1 in range(table.shape[1]):
                writer.writerow([a0, a1, repr(float(table[a0, a1]))])


def read_reconstruction_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["a0", "a1", "qtot"]:
            raise ValueError(f"unexpected reconstruction header {header!r}")
        entries = {(int(r[0]), int(r[1])): float(r[2]) for r in reader}
    side = max(a for a, _ in entries) + 1
    table = np.zeros((side, side))
    for (a0, a1), value in entries.items():
        table[a0, a1] = value
    return table


def write_aggregate_csv(path, episodes, mean, half_width):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "mean_reward", "ci95"])
        for episode, m, h in zip(episodes, mean, half_width):
            writer.writerow([int(episode), repr(float(m)), repr(float(h))])


def write_manifest(path, config):
    with open(path, "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path):
    with open(path) as f:
        return json.load(f)
