"""Episode replay, bootstrap targets, per-algorithm losses, training loop.

The trainer flattens each sampled batch into one row per (step, episode,
agent), with episodes sorted by length so the set of live rows is always a
prefix. Input-side work for all timesteps runs as single batched matrix
products; only the hidden-state recurrence is sequential. Padded steps are
never materialized, so they cannot touch any loss.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .agents import AgentNetwork, Controller, EpsilonSchedule, build_inputs
from .harness import evaluate
from .mixers import (
    QmixMixer,
    QtranHeads,
    ResidualEstimator,
    qtran_losses,
    rqn_features,
    rqn_mix,
    vdn_mix,
)
from .nn import (
    RmsProp,
    Tensor,
    concat,
    gather_cols,
    index_rows,
    mse_loss,
    no_grad,
    reshape,
    slice_rows,
    tsum,
)

ALGOS = ("vdn", "qmix", "qtran", "rqn")


@dataclass
class EpisodeRecord:
    """One finished episode in replay storage.

    Arrays are float32; every value an environment emits here (flags and
    eighth-scaled coordinates) converts to and from float32 exactly. The
    final step is always the terminal one: episodes are recorded whole.
    """

    obs: np.ndarray      # (T, n_agents, obs_dim)
    states: np.ndarray   # (T, state_dim)
    actions: np.ndarray  # (T, n_agents) int64
    rewards: np.ndarray  # (T,)

    def __post_init__(self):
        t = len(self.rewards)
        if t < 1:
            raise ValueError("episode must contain at least one step")
        if not (len(self.obs) == len(self.states) == len(self.actions) == t):
            raise ValueError("per-step fields have inconsistent lengths")

    @property
    def length(self):
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity episode store with strictly first-in-first-out
    eviction and uniform sampling without replacement."""

    def __init__(self, capacity, rng):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._rng = rng
        self._items = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def add(self, episode):
        if len(self._items) < self.capacity:
            self._items.append(episode)
        else:
            self._items[self._next] = episode
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size):
        if len(self._items) < batch_size:
            raise ValueError(
                f"buffer holds {len(self._items)} episodes, need {batch_size}")
        idx = self._rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


@dataclass
class TrainBatch:
    """Episodes padded to a common length with a step-validity mask."""

    obs: np.ndarray      # (episodes, max_len, n_agents, obs_dim)
    states: np.ndarray   # (episodes, max_len, state_dim)
    actions: np.ndarray  # (episodes, max_len, n_agents)
    rewards: np.ndarray  # (episodes, max_len)
    mask: np.ndarray     # (episodes, max_len) bool
    lengths: np.ndarray  # (episodes,)


def pad_batch(episodes):
    """Stack episodes into padded arrays plus a validity mask."""
    if not episodes:
        raise ValueError("empty batch")
    lengths = np.array([ep.length for ep in episodes], dtype=np.int64)
    n_eps = len(episodes)
    max_len = int(lengths.max())
    n_agents, obs_dim = episodes[0].obs.shape[1:]
    state_dim = episodes[0].states.shape[1]
    batch = TrainBatch(
        obs=np.zeros((n_eps, max_len, n_agents, obs_dim), np.float32),
        states=np.zeros((n_eps, max_len, state_dim), np.float32),
        actions=np.zeros((n_eps, max_len, n_agents), np.int64),
        rewards=np.zeros((n_eps, max_len), np.float32),
        mask=np.zeros((n_eps, max_len), bool),
        lengths=lengths,
    )
    for e, ep in enumerate(episodes):
        t = ep.length
        batch.obs[e, :t] = ep.obs
        batch.states[e, :t] = ep.states
        batch.actions[e, :t] = ep.actions
        batch.rewards[e, :t] = ep.rewards
        batch.mask[e, :t] = True
    return batch


class FlatBatch:
    """Row layout for batched recurrent forwards over variable lengths.

    Episodes are sorted longest-first, so the episodes alive at step t are
    exactly the first k[t]. Rows are laid out step-major: step t occupies
    rows [offsets[t] * N, (offsets[t] + k[t]) * N), episode-slot-major
    within the step, agent-major within the episode. An "instance" is one
    (step, episode) pair; instance j owns rows [j * N, (j + 1) * N).
    """

    def __init__(self, batch, n_actions):
        lengths = batch.lengths
        order = np.argsort(-lengths, kind="stable")
        slen = lengths[order]
        max_len = int(slen[0])
        obs = batch.obs[order, :max_len]
        states = batch.states[order, :max_len]
        actions = batch.actions[order, :max_len]
        rewards = batch.rewards[order, :max_len]

        n_eps, max_len, n_agents, obs_dim = obs.shape
        self.n_episodes = n_eps
        self.n_steps = max_len
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.k = (slen[None, :] > np.arange(max_len)[:, None]).sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(self.k)])
        self.offsets = offsets
        self.n_instances = int(offsets[-1])
        j_total = self.n_instances

        in_dim = obs_dim + n_actions + n_agents
        self.X = np.zeros((j_total * n_agents, in_dim))
        self.actions_flat = np.zeros(j_total * n_agents, np.int64)
        self.inst_reward = np.zeros(j_total)
        self.inst_state = np.zeros((j_total, states.shape[2]))
        self.inst_terminal = np.zeros(j_total, bool)
        self.inst_next = np.full(j_total, -1, np.int64)
        self.inst_episode = np.zeros(j_total, np.int64)
        self.feature_idx = np.full((n_eps * n_agents, max_len), -1, np.int64)

        eye = np.eye(n_agents)
        agent_col = np.arange(n_agents)
        for t in range(max_len):
            kt = int(self.k[t])
            j0 = int(offsets[t])
            x = np.zeros((kt, n_agents, in_dim))
            x[:, :, :obs_dim] = obs[:kt, t]
            if t > 0:
                prev = actions[:kt, t - 1]
                x[np.arange(kt)[:, None], agent_col[None, :],
                  obs_dim + prev] = 1.0
            x[:, :, obs_dim + n_actions:] = eye
            self.X[j0 * n_agents:(j0 + kt) * n_agents] = x.reshape(
                kt * n_agents, in_dim)
            self.actions_flat[j0 * n_agents:(j0 + kt) * n_agents] = \
                actions[:kt, t].reshape(-1)

            inst = slice(j0, j0 + kt)
            self.inst_reward[inst] = rewards[:kt, t]
            self.inst_state[inst] = states[:kt, t]
            self.inst_episode[inst] = np.arange(kt)
            terminal = t == slen[:kt] - 1
            self.inst_terminal[inst] = terminal
            if t + 1 < max_len:
                self.inst_next[inst] = np.where(
                    terminal, -1, offsets[t + 1] + np.arange(kt))
            slot = np.arange(kt)
            self.feature_idx[(slot[:, None] * n_agents + agent_col).ravel(),
                             t] = ((j0 + slot)[:, None] * n_agents
                                   + agent_col).ravel()


def run_agents(net, flat):
    """Forward the shared network over a flat batch.

    Returns (action values, hidden states), both with one row per
    (step, episode, agent) in flat row order.
    """
    gates = net.encode(Tensor(flat.X))
    h = net.init_hidden(int(flat.k[0]) * flat.n_agents)
    h_parts = []
    row = 0
    for t in range(flat.n_steps):
        rows_t = int(flat.k[t]) * flat.n_agents
        if h.data.shape[0] != rows_t:
            h = slice_rows(h, 0, rows_t)
        h = net.step_from_gates(slice_rows(gates, row, row + rows_t), h)
        h_parts.append(h)
        row += rows_t
    hidden = h_parts[0] if len(h_parts) == 1 else concat(h_parts, axis=0)
    return net.q_from_hidden(hidden), hidden


def bootstrap_targets(rewards, next_values, terminal, gamma):
    """One-step targets: reward, plus the discounted next-step value at
    non-terminal steps."""
    rewards = np.asarray(rewards, np.float64)
    keep = ~np.asarray(terminal, bool)
    return rewards + gamma * keep * np.asarray(next_values, np.float64)


def _action_onehot_sums(actions, n_instances, n_agents, n_actions):
    """Summed action one-hots per instance from flat per-row actions."""
    out = np.zeros((n_instances, n_actions))
    rows = np.repeat(np.arange(n_instances), n_agents)
    np.add.at(out, (rows, actions), 1.0)
    return out


class Trainer:
    """Sequential loop: act, store, sample, train, sync, evaluate."""

    def __init__(self, env, algo, seed, buffer_size=5000, batch_size=32,
                 lr=5e-4, gamma=None, eps_min=0.05, eps_anneal=50000,
                 epsilon_fixed=None, sync_interval=200, eval_every=100,
                 eval_episodes=20, detach_features=False, optimizer="rmsprop"):
        if algo not in ALGOS:
            raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGOS}")
        self.env = env
        self.algo = algo
        self.seed = seed
        self.batch_size = batch_size
        self.gamma = env.gamma if gamma is None else gamma
        self.sync_interval = sync_interval
        self.eval_every = eval_every
        self.detach_features = detach_features
        self.n_agents = env.n_agents
        self.n_actions = env.n_actions

        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.action_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        buffer_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        self.eval_seeds = [np.random.SeedSequence([seed, 4, k])
                           for k in range(eval_episodes)]
        self.probe_seed = np.random.SeedSequence([seed, 5])

        self.agent = AgentNetwork(env.obs_dim, env.n_actions, env.n_agents,
                                  init_rng)
        modules = {"agent": self.agent}
        self.mixer = self.heads = self.estimator = None
        if algo == "qmix":
            self.mixer = QmixMixer(env.n_agents, env.state_dim, init_rng)
            modules["mixer"] = self.mixer
        elif algo == "qtran":
            self.heads = QtranHeads(env.n_actions, self.agent.hidden_dim,
                                    init_rng)
            modules["heads"] = self.heads
        elif algo == "rqn":
            self.estimator = ResidualEstimator(env.n_agents, init_rng)
            modules["estimator"] = self.estimator
        self.modules = modules

        self.target_agent = copy.deepcopy(self.agent).freeze()
        self.target_mixer = (copy.deepcopy(self.mixer).freeze()
                             if self.mixer else None)
        self.target_heads = (copy.deepcopy(self.heads).freeze()
                             if self.heads else None)

        named = []
        for prefix, module in modules.items():
            named.extend(module.named_parameters(prefix + "."))
        self.optimizer = RmsProp(named, lr=lr, mode=optimizer)

        if epsilon_fixed is not None:
            self.schedule = EpsilonSchedule.fixed(epsilon_fixed)
        else:
            self.schedule = EpsilonSchedule(eps_min=eps_min,
                                            anneal_steps=eps_anneal)
        self.buffer = ReplayBuffer(buffer_size, buffer_rng)
        self.controller = Controller(self.agent)
        self.eval_env = env.clone()
        # Fixed probe episode for factor snapshots: a random-policy
        # trajectory drawn once, so successive snapshots re-score the same
        # observation and action stream and differ only through the weights.
        self.probe_obs = self.probe_actions = None
        if self.estimator is not None:
            probe_rng = np.random.default_rng(
                np.random.SeedSequence([seed, 5, 1]))
            res = self.eval_env.reset(self.probe_seed)
            obs_l, act_l = [], []
            while not res.done:
                actions = [int(a) for a in
                           probe_rng.integers(env.n_actions,
                                              size=env.n_agents)]
                obs_l.append(res.obs)
                act_l.append(actions)
                res = self.eval_env.step(actions)
            self.probe_obs = obs_l
            self.probe_actions = act_l
        self.env_steps = 0
        self.episodes_done = 0
        self.syncs = 0
        self._block = Tensor(np.tile(np.eye(self.agent.hidden_dim),
                                     (env.n_agents, 1)))

    # -- interaction ------------------------------------------------------

    def _rollout(self, env_seed):
        res = self.env.reset(env_seed)
        self.controller.start_episode()
        obs_l, state_l, act_l, rew_l = [], [], [], []
        while not res.done:
            epsilon = self.schedule.at(self.env_steps)
            obs_l.append(res.obs)
            state_l.append(res.state)
            actions, _ = self.controller.act(res.obs, epsilon, self.action_rng)
            res = self.env.step(actions)
            act_l.append(actions)
            rew_l.append(res.reward)
            self.env_steps += 1
        return EpisodeRecord(np.asarray(obs_l, np.float32),
                             np.asarray(state_l, np.float32),
                             np.asarray(act_l, np.int64),
                             np.asarray(rew_l, np.float32))

    # -- targets ----------------------------------------------------------

    def _td_targets(self, flat):
        """Per-instance bootstrap targets; never builds a graph and, for the
        residual algorithm, never touches the estimation network."""
        with no_grad():
            q, hidden = run_agents(self.target_agent, flat)
            if self.algo in ("vdn", "rqn"):
                boot = q.data.max(axis=1).reshape(
                    flat.n_instances, flat.n_agents).sum(axis=1)
            elif self.algo == "qmix":
                maxes = q.data.max(axis=1).reshape(flat.n_instances,
                                                   flat.n_agents)
                boot = self.target_mixer(Tensor(maxes),
                                         Tensor(flat.inst_state)).data[:, 0]
            else:
                greedy = q.data.argmax(axis=1)
                h_sum = hidden.data.reshape(flat.n_instances, flat.n_agents,
                                            -1).sum(axis=1)
                onehot = _action_onehot_sums(greedy, flat.n_instances,
                                             flat.n_agents, flat.n_actions)
                boot = self.target_heads.joint_value(
                    Tensor(h_sum), Tensor(onehot)).data[:, 0]
        next_values = boot[np.maximum(flat.inst_next, 0)]
        return bootstrap_targets(flat.inst_reward, next_values,
                                 flat.inst_terminal, self.gamma)

    # -- losses -----------------------------------------------------------

    def _loss(self, flat, targets):
        y = Tensor(targets.reshape(-1, 1))
        q_all, hidden = run_agents(self.agent, flat)
        chosen = gather_cols(q_all, flat.actions_flat)
        chosen_inst = reshape(chosen, flat.n_instances, flat.n_agents)

        if self.algo == "vdn":
            return mse_loss(vdn_mix(chosen_inst), y)

        if self.algo == "rqn":
            feats = rqn_features(chosen, flat.feature_idx, flat.n_agents)
            if self.detach_features:
                feats = Tensor(feats.data.copy())
            phi = self.estimator(feats)
            phi_rows = index_rows(phi, flat.inst_episode)
            return mse_loss(rqn_mix(chosen_inst, phi_rows), y)

        if self.algo == "qmix":
            return mse_loss(self.mixer(chosen_inst, Tensor(flat.inst_state)),
                            y)

        greedy_idx = q_all.data.argmax(axis=1)
        greedy_sum = tsum(reshape(gather_cols(q_all, greedy_idx),
                                  flat.n_instances, flat.n_agents), axis=1)
        taken_sum = tsum(chosen_inst, axis=1)
        h_sum = reshape(hidden, flat.n_instances,
                        flat.n_agents * self.agent.hidden_dim) @ self._block
        taken_onehot = _action_onehot_sums(flat.actions_flat,
                                           flat.n_instances, flat.n_agents,
                                           flat.n_actions)
        greedy_onehot = _action_onehot_sums(greedy_idx, flat.n_instances,
                                            flat.n_agents, flat.n_actions)
        f_taken = self.heads.joint_value(h_sum, Tensor(taken_onehot))
        value = self.heads.state_value(h_sum)
        with no_grad():
            f_greedy_ref = self.heads.joint_value(Tensor(h_sum.data),
                                                  Tensor(greedy_onehot))
        f_taken_ref = Tensor(f_taken.data.copy())
        l_td, l_opt, l_nopt = qtran_losses(f_taken, y, greedy_sum, taken_sum,
                                           value, f_greedy_ref, f_taken_ref)
        return l_td + l_opt + l_nopt

    # -- one gradient step ------------------------------------------------

    def train_step(self, episodes):
        flat = FlatBatch(pad_batch(episodes), self.n_actions)
        targets = self._td_targets(flat)
        loss = self._loss(flat, targets)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite training loss after {self.episodes_done} episodes")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return value

    def sync_targets(self):
        self.target_agent.sync_from(self.agent)
        if self.target_mixer is not None:
            self.target_mixer.sync_from(self.mixer)
        if self.target_heads is not None:
            self.target_heads.sync_from(self.heads)
        self.syncs += 1

    # -- measurement ------------------------------------------------------

    def evaluate(self):
        """Mean greedy return over the fixed battery of evaluation seeds."""
        return evaluate(self.agent, self.eval_env, self.eval_seeds)

    def phi_snapshot(self):
        """Residual factors of the current network on the fixed probe
        episode."""
        if self.estimator is None:
            raise RuntimeError("factor snapshots need the residual algorithm")
        h = self.agent.init_hidden(self.n_agents)
        last = None
        chosen = []
        with no_grad():
            for obs, actions in zip(self.probe_obs, self.probe_actions):
                x = build_inputs(obs, last, self.n_actions)
                q, h = self.agent.q_values(Tensor(x), h)
                chosen.append(q.data[np.arange(self.n_agents), actions])
                last = actions
            trace = np.asarray(chosen)
            feats = np.concatenate([trace.mean(axis=0), trace.max(axis=0)])
            phi = self.estimator(Tensor(feats.reshape(1, -1)))
        return phi.data[0].copy()

    # -- loop -------------------------------------------------------------

    def run(self, episodes, log=None):
        """Train for a number of episodes; returns the metric history.

        history["metrics"] holds (episode, eval reward) rows, history["phi"]
        holds (episode, per-agent factors) for the residual algorithm, and
        history["loss"] holds (episode, training loss).
        """
        history = {"metrics": [], "phi": [], "loss": []}
        for _ in range(episodes):
            ep_seed = np.random.SeedSequence([self.seed, 1, self.episodes_done])
            self.buffer.add(self._rollout(ep_seed))
            self.episodes_done += 1
            if len(self.buffer) >= self.batch_size:
                loss = self.train_step(self.buffer.sample(self.batch_size))
                history["loss"].append((self.episodes_done, loss))
            if self.episodes_done % self.sync_interval == 0:
                self.sync_targets()
            if self.episodes_done % self.eval_every == 0:
                score = self.evaluate()
                history["metrics"].append((self.episodes_done, score))
                if self.algo == "rqn":
                    history["phi"].append((self.episodes_done,
                                           self.phi_snapshot()))
                if log is not None:
                    log(self.episodes_done, score)
        return history
