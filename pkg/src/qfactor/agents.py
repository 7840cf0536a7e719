"""Shared recurrent per-agent action-value network and action selection.

One parameter set serves every agent. Each agent's input is its observation
concatenated with its previous action (one-hot, zeros on the first step) and
its identity (one-hot), so shared weights can still specialize per agent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import GRUCell, Linear, Module, Tensor, linear, no_grad, relu


def build_inputs(obs, last_actions, n_actions):
    """Stack observation, previous-action one-hot, and agent-id one-hot.

    obs is (n_agents, obs_dim); last_actions is a sequence of ints or None at
    the start of an episode. Returns a plain (n_agents, obs_dim + n_actions +
    n_agents) array.
    """
    obs = np.asarray(obs, dtype=np.float64)
    n_agents, obs_dim = obs.shape
    x = np.zeros((n_agents, obs_dim + n_actions + n_agents))
    x[:, :obs_dim] = obs
    if last_actions is not None:
        idx = np.asarray(last_actions, dtype=np.int64)
        x[np.arange(n_agents), obs_dim + idx] = 1.0
    x[:, obs_dim + n_actions:] = np.eye(n_agents)
    return x


class AgentNetwork(Module):
    """Linear encoder, GRU cell, linear head; one action value per action.

    The forward pass is split so a trainer can batch the input-side work of
    all timesteps at once (encode) and run only the hidden-state recurrence
    (step_from_gates) sequentially.
    """

    def __init__(self, obs_dim, n_actions, n_agents, rng, hidden_dim=64):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_agents = n_agents
        self.hidden_dim = hidden_dim
        in_dim = obs_dim + n_actions + n_agents
        self.encoder = Linear(in_dim, hidden_dim, rng)
        self.cell = GRUCell(hidden_dim, hidden_dim, rng)
        self.head = Linear(hidden_dim, n_actions, rng)

    def init_hidden(self, rows):
        return Tensor(np.zeros((rows, self.hidden_dim)))

    def encode(self, x):
        """Input-side gate preactivations for a block of rows; no recurrence."""
        embed = relu(linear(x, self.encoder.weight, self.encoder.bias))
        return self.cell.gates(embed)

    def step_from_gates(self, gi, h):
        """Advance hidden states one step from precomputed gate inputs."""
        return self.cell.from_gates(gi, h)

    def q_from_hidden(self, h):
        return linear(h, self.head.weight, self.head.bias)

    def q_values(self, x, h):
        """One full step: inputs (rows, in_dim) and hidden (rows, hidden_dim)
        to (action values, next hidden)."""
        h2 = self.step_from_gates(self.encode(x), h)
        return self.q_from_hidden(h2), h2


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from eps_start to eps_min over anneal_steps env steps."""

    eps_min: float = 0.05
    anneal_steps: int = 50000
    eps_start: float = 1.0

    @classmethod
    def fixed(cls, eps):
        return cls(eps_min=eps, anneal_steps=0, eps_start=eps)

    def at(self, env_step):
        if env_step < 0:
            raise ValueError("env_step must be non-negative")
        if self.anneal_steps <= 0 or env_step >= self.anneal_steps:
            return self.eps_min
        frac = env_step / self.anneal_steps
        return self.eps_start + frac * (self.eps_min - self.eps_start)


def select_action(q, epsilon, rng=None):
    """Epsilon-greedy over one agent's action values; ties go to the lowest
    index. rng is consulted only when epsilon > 0."""
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.size == 0:
        raise ValueError("empty action-value vector")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


class Controller:
    """Drives the shared network step by step while interacting with an env.

    Keeps the per-agent hidden states and last actions between calls; all
    forward passes run without building autodiff graphs.
    """

    def __init__(self, net):
        self.net = net

    def start_episode(self):
        self._h = self.net.init_hidden(self.net.n_agents)
        self._last = None

    def act(self, obs, epsilon, rng=None):
        """Pick one action per agent; returns (actions, q row per agent)."""
        x = build_inputs(obs, self._last, self.net.n_actions)
        with no_grad():
            q, self._h = self.net.q_values(Tensor(x), self._h)
        actions = [select_action(row, epsilon, rng) for row in q.data]
        self._last = actions
        return actions, q.data.copy()
