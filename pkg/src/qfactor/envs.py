"""Built-in cooperative grid tasks behind one deterministic step interface.

Every environment is a plain state machine: reset(seed) fixes all randomness
for the episode (placements and prey motion), and the trajectory is then a
pure function of the joint actions. Rewards are shared: each step's team
reward is the sum of the per-agent credits also reported in the StepResult.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Grid moves indexed by action: up, down, left, right.
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

# Coordinates in observations and states are divided by this. A power of two
# keeps every encoded value exact in float32 replay storage.
COORD_SCALE = 8.0


@dataclass
class StepResult:
    obs: np.ndarray      # (n_agents, obs_dim) float64
    state: np.ndarray    # (state_dim,) float64
    reward: float
    done: bool
    credits: np.ndarray  # (n_agents,) per-agent components summing to reward


class BaseEnv:
    """Shared plumbing: action validation, step/terminal bookkeeping."""

    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    time_limit: int
    gamma: float

    def __init__(self):
        self._done = True
        self._t = 0

    def reset(self, seed):
        raise NotImplementedError

    def step(self, actions):
        raise NotImplementedError

    def clone(self):
        """Fresh instance with the same construction parameters."""
        return type(self)(**getattr(self, "_ctor", {}))

    def _check_step(self, actions):
        if self._done:
            raise RuntimeError("step() called on a finished episode; reset() first")
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        for a in actions:
            if not 0 <= int(a) < self.n_actions:
                raise ValueError(f"action {a} out of range [0, {self.n_actions})")

    def _result(self, credits, done):
        self._done = done
        return StepResult(self._obs(), self._state(), float(credits.sum()), done,
                          credits)

    def _obs(self):
        raise NotImplementedError

    def _state(self):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# One-step matrix game.

PAYOFF = np.array([
    [8.0, -12.0, -12.0],
    [-12.0, 0.0, 0.0],
    [-12.0, 0.0, 0.0],
])


def matrix_payoff(a0, a1):
    """Payoff of the one-step two-player game."""
    return float(PAYOFF[a0, a1])


class MatrixGame(BaseEnv):
    """Two agents, three actions, a single joint step paying PAYOFF[a0, a1]."""

    n_agents = 2
    n_actions = 3
    obs_dim = 1
    state_dim = 1
    time_limit = 1
    gamma = 1.0  # every step is terminal, so no bootstrapping happens

    def __init__(self):
        super().__init__()
        self._ctor = {}

    def reset(self, seed):
        self._done = False
        self._t = 0
        return StepResult(self._obs(), self._state(), 0.0, False,
                          np.zeros(self.n_agents))

    def step(self, actions):
        self._check_step(actions)
        self._t += 1
        r = matrix_payoff(int(actions[0]), int(actions[1]))
        credits = np.full(self.n_agents, r / self.n_agents)
        return self._result(credits, done=True)

    def _obs(self):
        return np.ones((self.n_agents, 1))

    def _state(self):
        return np.ones(1)


# ---------------------------------------------------------------------------
# Predator-prey.

class PredatorPrey(BaseEnv):
    """Predators hunt randomly moving prey on an open square grid.

    Actions: 4 moves, stay, and a dedicated capture action. A prey adjacent
    (4-neighborhood) to at least two predators that both pick capture in the
    same step is caught and every agent in the team is credited +5. A prey
    with exactly one adjacent capturing predator credits capture_penalty to
    every agent (0 by default). Each step costs 0.01 per agent. The episode
    ends when all prey are caught or the time limit is reached.
    """

    n_actions = 6
    gamma = 0.99

    def __init__(self, n_predators=2, n_prey=None, capture_penalty=0.0,
                 size=7, time_limit=None, view=5):
        super().__init__()
        if n_prey is None:
            n_prey = max(1, n_predators // 2)
        if time_limit is None:
            # Denser teams capture sooner; a shorter horizon keeps the
            # many-agent variant at desk scale.
            time_limit = 40 if n_predators <= 2 else 30
        self._ctor = dict(n_predators=n_predators, n_prey=n_prey,
                          capture_penalty=capture_penalty, size=size,
                          time_limit=time_limit, view=view)
        self.n_agents = n_predators
        self.n_prey = n_prey
        self.capture_penalty = float(capture_penalty)
        self.size = size
        self.time_limit = time_limit
        self.view = view
        self.obs_dim = view * view * 3 + 2
        self.state_dim = 2 * n_predators + 3 * n_prey

    def reset(self, seed):
        self._rng = np.random.default_rng(seed)
        cells = self._rng.choice(self.size * self.size,
                                 size=self.n_agents + self.n_prey, replace=False)
        coords = np.stack([cells // self.size, cells % self.size], axis=1)
        self.predators = coords[:self.n_agents].astype(np.int64)
        self.prey = coords[self.n_agents:].astype(np.int64)
        self.prey_alive = np.ones(self.n_prey, dtype=bool)
        self._done = False
        self._t = 0
        return StepResult(self._obs(), self._state(), 0.0, False,
                          np.zeros(self.n_agents))

    def _occupied(self, cell, skip_predator=None, skip_prey=None):
        for j in range(self.n_agents):
            if j != skip_predator and (self.predators[j] == cell).all():
                return True
        for p in range(self.n_prey):
            if p != skip_prey and self.prey_alive[p] and (self.prey[p] == cell).all():
                return True
        return False

    def _in_bounds(self, cell):
        return 0 <= cell[0] < self.size and 0 <= cell[1] < self.size

    def step(self, actions):
        self._check_step(actions)
        credits = np.zeros(self.n_agents)

        # Predators move one at a time in index order; blocked moves are lost.
        for j, a in enumerate(actions):
            a = int(a)
            if a < 4:
                tgt = self.predators[j] + MOVES[a]
                if self._in_bounds(tgt) and not self._occupied(tgt, skip_predator=j):
                    self.predators[j] = tgt

        # Capture resolution against post-move predator positions.
        for p in range(self.n_prey):
            if not self.prey_alive[p]:
                continue
            capturers = [j for j, a in enumerate(actions)
                         if int(a) == 5
                         and abs(self.predators[j] - self.prey[p]).sum() == 1]
            if len(capturers) >= 2:
                self.prey_alive[p] = False
                credits += 5.0
            elif len(capturers) == 1:
                credits += self.capture_penalty

        # Surviving prey wander uniformly over their open moves (stay included).
        for p in range(self.n_prey):
            if not self.prey_alive[p]:
                continue
            options = [self.prey[p]]
            for dr, dc in MOVES:
                tgt = self.prey[p] + (dr, dc)
                if self._in_bounds(tgt) and not self._occupied(tgt, skip_prey=p):
                    options.append(tgt)
            self.prey[p] = options[self._rng.integers(len(options))]

        credits -= 0.01
        self._t += 1
        done = not self.prey_alive.any() or self._t >= self.time_limit
        return self._result(credits, done)

    def _obs(self):
        half = self.view // 2
        padded = self.size + 2 * half
        wall = np.ones((padded, padded))
        wall[half:half + self.size, half:half + self.size] = 0.0
        pred_grid = np.zeros((padded, padded))
        for r, c in self.predators:
            pred_grid[r + half, c + half] = 1.0
        prey_grid = np.zeros((padded, padded))
        for p in range(self.n_prey):
            if self.prey_alive[p]:
                r, c = self.prey[p]
                prey_grid[r + half, c + half] = 1.0
        obs = np.zeros((self.n_agents, self.obs_dim))
        for j, (r, c) in enumerate(self.predators):
            window = np.stack([wall[r:r + self.view, c:c + self.view],
                               pred_grid[r:r + self.view, c:c + self.view],
                               prey_grid[r:r + self.view, c:c + self.view]],
                              axis=-1)
            obs[j, :-2] = window.ravel()
            obs[j, -2:] = (r / COORD_SCALE, c / COORD_SCALE)
        return obs

    def _state(self):
        parts = [self.predators.ravel() / COORD_SCALE]
        for p in range(self.n_prey):
            parts.append(self.prey[p] / COORD_SCALE)
            parts.append([1.0 if self.prey_alive[p] else 0.0])
        return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Switch.

class Switch(BaseEnv):
    """Two agents swap sides of a map joined by a one-cell-wide corridor.

    Each agent's goal is the other agent's start cell. First arrival pays +5;
    every step costs 0.1 per agent still travelling. An arrived agent leaves
    the grid, so it neither blocks the corridor nor pays further penalties.
    """

    n_agents = 2
    n_actions = 5  # 4 moves + stay
    obs_dim = 3
    state_dim = 6
    gamma = 0.99
    rows = 3
    cols = 7

    def __init__(self, time_limit=50):
        super().__init__()
        self._ctor = dict(time_limit=time_limit)
        self.time_limit = time_limit
        self.cells = {(r, 0) for r in range(self.rows)}
        self.cells |= {(r, self.cols - 1) for r in range(self.rows)}
        self.cells |= {(1, c) for c in range(1, self.cols - 1)}
        self.starts = ((0, 0), (2, self.cols - 1))
        self.goals = (self.starts[1], self.starts[0])

    def reset(self, seed):
        self.agents = np.array(self.starts, dtype=np.int64)
        self.arrived = np.zeros(2, dtype=bool)
        self._done = False
        self._t = 0
        return StepResult(self._obs(), self._state(), 0.0, False, np.zeros(2))

    def step(self, actions):
        self._check_step(actions)
        credits = np.zeros(2)
        for j, a in enumerate(actions):
            if self.arrived[j]:
                continue
            credits[j] -= 0.1
            a = int(a)
            if a < 4:
                tgt = tuple(self.agents[j] + MOVES[a])
                other = 1 - j
                blocked = (not self.arrived[other]
                           and tgt == tuple(self.agents[other]))
                if tgt in self.cells and not blocked:
                    self.agents[j] = tgt
            if tuple(self.agents[j]) == self.goals[j]:
                self.arrived[j] = True
                credits[j] += 5.0
        self._t += 1
        done = self.arrived.all() or self._t >= self.time_limit
        return self._result(credits, done)

    def _obs(self):
        obs = np.zeros((2, 3))
        for j in range(2):
            obs[j] = (self.agents[j, 0] / COORD_SCALE,
                      self.agents[j, 1] / COORD_SCALE,
                      1.0 if self.arrived[j] else 0.0)
        return obs

    def _state(self):
        return self._obs().ravel()


# ---------------------------------------------------------------------------
# Checkers.

class Checkers(BaseEnv):
    """Two agents collect apples (+1) and should avoid lemons (-1).

    Fruit fills the left five columns in an alternating pattern (8 apples, 7
    lemons); both agents start on the right edge. Entering a fruit cell
    consumes it. Each step costs 0.01 per agent; the episode ends when all
    apples are gone or the time limit is reached.
    """

    n_agents = 2
    n_actions = 5
    gamma = 0.99
    rows = 3
    cols = 8
    fruit_cols = 5

    def __init__(self, time_limit=50, view=3):
        super().__init__()
        self._ctor = dict(time_limit=time_limit, view=view)
        self.time_limit = time_limit
        self.view = view
        self.obs_dim = view * view * 4 + 2
        self.fruit_cells = [(r, c) for r in range(self.rows)
                            for c in range(self.fruit_cols)]
        self.state_dim = 2 * self.n_agents + len(self.fruit_cells)
        self.starts = ((0, self.cols - 1), (2, self.cols - 1))

    def reset(self, seed):
        self.agents = np.array(self.starts, dtype=np.int64)
        # +1 apple on even (row + col), -1 lemon on odd.
        self.fruit = {cell: (1 if (cell[0] + cell[1]) % 2 == 0 else -1)
                      for cell in self.fruit_cells}
        self._done = False
        self._t = 0
        return StepResult(self._obs(), self._state(), 0.0, False, np.zeros(2))

    def step(self, actions):
        self._check_step(actions)
        credits = np.zeros(2)
        for j, a in enumerate(actions):
            a = int(a)
            if a < 4:
                tgt = self.agents[j] + MOVES[a]
                inside = 0 <= tgt[0] < self.rows and 0 <= tgt[1] < self.cols
                other = 1 - j
                if inside and not (tgt == self.agents[other]).all():
                    self.agents[j] = tgt
                    kind = self.fruit.pop(tuple(tgt), 0)
                    credits[j] += float(kind)
            credits[j] -= 0.01
        self._t += 1
        apples_left = any(v == 1 for v in self.fruit.values())
        done = not apples_left or self._t >= self.time_limit
        return self._result(credits, done)

    def _obs(self):
        half = self.view // 2
        pr, pc = self.rows + 2 * half, self.cols + 2 * half
        wall = np.ones((pr, pc))
        wall[half:half + self.rows, half:half + self.cols] = 0.0
        agent_grid = np.zeros((pr, pc))
        for r, c in self.agents:
            agent_grid[r + half, c + half] = 1.0
        apple_grid = np.zeros((pr, pc))
        lemon_grid = np.zeros((pr, pc))
        for (r, c), kind in self.fruit.items():
            (apple_grid if kind == 1 else lemon_grid)[r + half, c + half] = 1.0
        obs = np.zeros((2, self.obs_dim))
        for j, (r, c) in enumerate(self.agents):
            window = np.stack([wall[r:r + self.view, c:c + self.view],
                               agent_grid[r:r + self.view, c:c + self.view],
                               apple_grid[r:r + self.view, c:c + self.view],
                               lemon_grid[r:r + self.view, c:c + self.view]],
                              axis=-1)
            obs[j, :-2] = window.ravel()
            obs[j, -2:] = (r / COORD_SCALE, c / COORD_SCALE)
        return obs

    def _state(self):
        flags = [1.0 if cell in self.fruit else 0.0 for cell in self.fruit_cells]
        return np.concatenate([self.agents.ravel() / COORD_SCALE, flags])


# ---------------------------------------------------------------------------
# Factory.

_ENV_PARAMS = {
    "matrix": set(),
    "predator_prey": {"n_predators", "n_prey", "capture_penalty", "size",
                      "time_limit", "view"},
    "switch": {"time_limit"},
    "checkers": {"time_limit", "view"},
}


def make_env(name, **params):
    """Build an environment by name, rejecting unknown names and parameters."""
    if name not in _ENV_PARAMS:
        raise ValueError(f"unknown environment {name!r}; "
                         f"choose from {sorted(_ENV_PARAMS)}")
    unknown = set(params) - _ENV_PARAMS[name]
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    if name == "matrix":
        return MatrixGame()
    if name == "predator_prey":
        return PredatorPrey(**params)
    if name == "switch":
        return Switch(**params)
    return Checkers(**params)
