"""Joint-value factorizations over per-agent action values.

Four ways to form a team value from per-agent values: a plain sum, a plain
sum plus per-episode residual factors, a monotone state-conditioned mixing
network, and an unconstrained joint critic trained against consistency
losses. Also tabular oracles that check, by enumeration, when a factored
representation keeps the joint greedy action equal to the per-agent greedy
actions.
"""

from __future__ import annotations

import numpy as np

from .nn import (
    Linear,
    MLP,
    Module,
    absval,
    concat,
    elu,
    indexed_max,
    indexed_mean,
    mse_loss,
    mul,
    relu,
    reshape,
    rowwise_mix,
    tmean,
    tsum,
)


# ---------------------------------------------------------------------------
# Additive mixing.

def vdn_mix(q):
    """Team value as the sum of per-agent chosen values, per row."""
    return tsum(q, axis=1)


def rqn_features(chosen, idx, n_agents):
    """Per-episode summary features: each agent's mean and max chosen value.

    chosen is a column tensor of per-step values. idx has one row per
    (episode, agent) pair in episode-major order, listing the rows of chosen
    that belong to the pair, padded with -1. Returns (episodes, 2 * n_agents)
    with means in the first half and maxes in the second.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] % n_agents:
        raise ValueError("feature index rows must group complete episodes")
    episodes = idx.shape[0] // n_agents
    means = reshape(indexed_mean(chosen, idx), episodes, n_agents)
    maxes = reshape(indexed_max(chosen, idx), episodes, n_agents)
    return concat([means, maxes], axis=1)


class ResidualEstimator(Module):
    """Maps episode summary features to one additive factor per agent.

    A single hidden layer with ReLU; weights are unconstrained in sign, so
    factors can push individual values up or down freely. calls counts
    forward passes so training can prove its target path never consults
    this network.
    """

    def __init__(self, n_agents, rng, width=64):
        self.n_agents = n_agents
        self.hidden = Linear(2 * n_agents, width, rng)
        self.out = Linear(width, n_agents, rng)
        self.calls = 0

    def __call__(self, features):
        self.calls += 1
        return self.out(relu(self.hidden(features)))


def rqn_mix(q, phi):
    """Team value as the sum of factor-shifted per-agent values, per row."""
    return tsum(q + phi, axis=1)


# ---------------------------------------------------------------------------
# Monotone state-conditioned mixing.

class QmixMixer(Module):
    """Two mixing layers whose weights come from state-fed hypernetworks.

    Both weight blocks pass through an absolute value, so the output is
    non-decreasing in every per-agent input; biases are unconstrained, and
    the final bias is itself a small network of the state.
    """

    def __init__(self, n_agents, state_dim, rng, embed_dim=32):
        self.n_agents = n_agents
        self.embed_dim = embed_dim
        self.w1_net = Linear(state_dim, n_agents * embed_dim, rng)
        self.b1_net = Linear(state_dim, embed_dim, rng)
        self.w2_net = Linear(state_dim, embed_dim, rng)
        self.b2_net = MLP([state_dim, embed_dim, 1], rng)

    def __call__(self, q, state):
        w1 = absval(self.w1_net(state))
        hidden = elu(rowwise_mix(q, w1, self.n_agents, self.embed_dim)
                     + self.b1_net(state))
        w2 = absval(self.w2_net(state))
        mixed = tsum(mul(hidden, w2), axis=1)
        return mixed + self.b2_net(state)


# ---------------------------------------------------------------------------
# Unconstrained joint critic with consistency losses.

class QtranHeads(Module):
    """Joint action-value and state-value heads over pooled agent summaries.

    Both heads read the sum of per-agent recurrent hidden states (a
    permutation-invariant summary); the joint head additionally reads the
    summed action one-hots.
    """

    def __init__(self, n_actions, hidden_dim, rng, width=64):
        self.joint_net = MLP([hidden_dim + n_actions, width, width, 1], rng)
        self.value_net = MLP([hidden_dim, width, width, 1], rng)

    def joint_value(self, h_sum, action_sum):
        return self.joint_net(concat([h_sum, action_sum], axis=1))

    def state_value(self, h_sum):
        return self.value_net(h_sum)


def qtran_losses(joint_taken, td_target, greedy_sum, taken_sum, state_value,
                 joint_greedy_ref, joint_taken_ref):
    """Three-part loss tying per-agent values to the joint critic.

    joint_taken: critic at the taken actions (gradients train the critic).
    td_target: bootstrap targets for the critic, constant.
    greedy_sum / taken_sum: summed per-agent values at greedy / taken actions.
    state_value: the state-value head output.
    joint_greedy_ref / joint_taken_ref: critic outputs treated as constants.

    The first term regresses the critic to its targets. The second drives
    summed greedy values plus state value to equal the critic at the greedy
    actions. The third penalizes, quadratically, any taken action where the
    summed values plus state value fall below the critic.
    """
    l_td = mse_loss(joint_taken, td_target)
    l_opt = mse_loss(greedy_sum + state_value, joint_greedy_ref)
    gap = taken_sum + state_value - joint_taken_ref
    undershoot = relu(-gap)
    l_nopt = tmean(mul(undershoot, undershoot))
    return l_td, l_opt, l_nopt


# ---------------------------------------------------------------------------
# Tabular verification oracles.

def joint_sum_table(q_tables):
    """Dense joint table of summed per-agent values: entry[a] = sum Q_i(a_i)."""
    q_tables = np.asarray(q_tables, dtype=np.float64)
    n_agents, n_actions = q_tables.shape
    total = np.zeros((n_actions,) * n_agents)
    for i in range(n_agents):
        shape = [1] * n_agents
        shape[i] = n_actions
        total = total + q_tables[i].reshape(shape)
    return total


def table_greedy(q_tables):
    """Per-agent greedy actions, ties to the lowest index."""
    return tuple(int(np.argmax(row)) for row in np.asarray(q_tables))


def igm_holds(q_tables, q_tot):
    """True iff the joint greedy action of q_tot equals the tuple of
    per-agent greedy actions, ties resolved to the lowest index on both
    sides."""
    q_tot = np.asarray(q_tot, dtype=np.float64)
    joint = np.unravel_index(int(np.argmax(q_tot)), q_tot.shape)
    return tuple(int(v) for v in joint) == table_greedy(q_tables)


def residual_factorization_holds(q_tables, phi, q_tot, tol=1e-9):
    """Check the residual factorization conditions on a tabular instance.

    With per-agent factors phi, the shifted sum must equal q_tot exactly at
    the per-agent greedy joint action, dominate q_tot everywhere else, and
    the factor total must equal the gap between the joint maximum and the
    summed greedy values. Any instance passing this check keeps the joint
    greedy action recoverable from the per-agent tables alone.
    """
    q_tables = np.asarray(q_tables, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    q_tot = np.asarray(q_tot, dtype=np.float64)
    greedy = table_greedy(q_tables)
    margin = joint_sum_table(q_tables) + phi.sum() - q_tot
    if abs(margin[greedy]) > tol:
        return False
    if (margin < -tol).any():
        return False
    greedy_sum = sum(q_tables[i, greedy[i]] for i in range(len(q_tables)))
    return abs(phi.sum() - (q_tot.max() - greedy_sum)) <= tol


def random_factorization_instance(rng, n_agents=2, n_actions=3,
                                  kind="satisfying"):
    """Tabular (q_tables, phi, q_tot) triple for verification sweeps.

    kind "satisfying" builds q_tot so every condition holds; "random" draws
    an unrelated joint table; "adversarial" starts from a satisfying
    instance and breaks exactly one cell by a small margin.
    """
    q_tables = rng.normal(size=(n_agents, n_actions))
    phi = rng.normal(size=n_agents)
    if kind == "random":
        q_tot = rng.normal(size=(n_actions,) * n_agents)
        return q_tables, phi, q_tot
    greedy = table_greedy(q_tables)
    slack = rng.uniform(0.1, 2.0, size=(n_actions,) * n_agents)
    slack[greedy] = 0.0
    q_tot = joint_sum_table(q_tables) + phi.sum() - slack
    if kind == "satisfying":
        return q_tables, phi, q_tot
    if kind != "adversarial":
        raise ValueError(f"unknown instance kind {kind!r}")
    delta = rng.uniform(0.1, 1.0)
    if rng.random() < 0.5:
        # Break the equality at the greedy joint action.
        q_tot[greedy] += delta * (1 if rng.random() < 0.5 else -1)
    else:
        # Lift one other cell above the shifted sum.
        flat = int(rng.integers(q_tot.size))
        cell = np.unravel_index(flat, q_tot.shape)
        if cell == greedy:
            cell = np.unravel_index((flat + 1) % q_tot.size, q_tot.shape)
        q_tot[cell] = joint_sum_table(q_tables)[cell] + phi.sum() + delta
    return q_tables, phi, q_tot
