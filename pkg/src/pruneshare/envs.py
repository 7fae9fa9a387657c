"""Desk-scale multi-agent environments.

Both environments follow one contract: ``reset() -> (state, observations)``
and ``step(joint_action) -> (state, observations, per_agent_rewards,
team_reward, done)``. All randomness is consumed at reset (placement); step
dynamics are deterministic, so a seed plus an action log fully determines a
trajectory.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .errors import ConfigError, UsageError


class EnvContract(Protocol):
    n_agents: int
    n_actions: int
    obs_width: int
    state_width: int

    def reset(self): ...
    def step(self, actions): ...


# ---------------------------------------------------------------------------
# Level-based foraging
# ---------------------------------------------------------------------------

# action ids
UP, DOWN, LEFT, RIGHT, STAY, FORAGE = range(6)
_DELTAS = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


@dataclass(frozen=True)
class LbfConfig:
    rows: int
    cols: int
    agent_levels: tuple[int, ...]
    food_levels: tuple[int, ...]
    max_steps: int
    obs_radius: int = 2

    def __post_init__(self):
        object.__setattr__(self, "agent_levels", tuple(int(v) for v in self.agent_levels))
        object.__setattr__(self, "food_levels", tuple(int(v) for v in self.food_levels))
        if min(self.agent_levels, default=0) < 1 or min(self.food_levels, default=0) < 1:
            raise ConfigError("agent and food levels must be >= 1")
        n_cells = self.rows * self.cols
        if len(self.food_levels) + len(self.agent_levels) > n_cells:
            raise ConfigError("more agents+foods than grid cells")
        # a food can have at most 4 adjacent foragers
        for food in self.food_levels:
            reachable = any(sum(combo) >= food
                            for size in range(1, min(4, len(self.agent_levels)) + 1)
                            for combo in itertools.combinations(self.agent_levels, size))
            if not reachable:
                raise ConfigError(
                    f"food level {food} cannot be foraged by any subset of "
                    f"agent levels {self.agent_levels}")

    @property
    def n_agents(self) -> int:
        return len(self.agent_levels)

    @property
    def level_scale(self) -> float:
        return float(max(max(self.agent_levels), max(self.food_levels)))


def lbf_presets(name: str) -> LbfConfig:
    """Named task presets. The two full-size tasks use six agents; the
    ``-desk`` variants keep the level structure with three agents and two
    foods on a smaller grid for fast, repeatable runs."""
    presets = {
        "LBF1": LbfConfig(8, 8, (1, 1, 1, 2, 2, 2), (3,) * 6, 50),
        "LBF2": LbfConfig(8, 8, (1, 1, 2, 2, 3, 3), (4,) * 6, 50),
        "LBF1-desk": LbfConfig(5, 5, (1, 1, 2), (3, 3), 25),
        "LBF2-desk": LbfConfig(5, 5, (1, 2, 3), (4, 4), 25),
    }
    if name not in presets:
        raise UsageError(f"unknown LBF preset {name!r}; "
                         f"expected one of {sorted(presets)}")
    return presets[name]


class LevelBasedForaging:
    """Grid foraging: a food is collected when the foraging agents adjacent
    to it have a level sum at least the food's level. Each participant is
    rewarded its level share of the food's level, scaled so a full clear of
    the board totals exactly 1 across agents and steps.

    Movement is simultaneous; a move fails when it leaves the grid, enters a
    food cell, enters any currently occupied cell, or contests a target cell
    with another mover (all contestants stay). The rule is order-independent.
    """

    n_actions = 6

    def __init__(self, config: LbfConfig, seed: int = 0,
                 record: bool = False):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.n_agents = config.n_agents
        window = 2 * config.obs_radius + 1
        self.obs_width = 3 * window * window
        self.state_width = 2 * config.rows * config.cols + 1
        self.done = True
        self.agent_pos = np.zeros((self.n_agents, 2), dtype=np.intp)
        self.food_grid = np.zeros((config.rows, config.cols))
        self.t = 0
        self.initial_layout: Optional[dict] = None
        self.record = record
        self.replay_episodes: list[dict] = []

    def reset(self):
        cfg = self.config
        n_cells = cfg.rows * cfg.cols
        picks = self.rng.permutation(n_cells)[:len(cfg.food_levels) + self.n_agents]
        cells = np.stack(np.unravel_index(picks, (cfg.rows, cfg.cols)), axis=1)
        self.food_grid = np.zeros((cfg.rows, cfg.cols))
        for (r, c), level in zip(cells[:len(cfg.food_levels)], cfg.food_levels):
            self.food_grid[r, c] = level
        self.agent_pos = cells[len(cfg.food_levels):].copy()
        self._agents_grid = np.zeros((cfg.rows, cfg.cols))
        for (r, c), level in zip(self.agent_pos, cfg.agent_levels):
            self._agents_grid[r, c] = level
        self.t = 0
        self.done = False
        self.initial_layout = {
            "agents": self.agent_pos.tolist(),
            "agent_levels": list(cfg.agent_levels),
            "foods": cells[:len(cfg.food_levels)].tolist(),
            "food_levels": list(cfg.food_levels),
        }
        if self.record:
            self.replay_episodes.append({"layout": self.initial_layout,
                                         "actions": [], "rewards": []})
        return self.state(), self.observations()

    def _agent_grid(self) -> np.ndarray:
        # maintained incrementally by step(); agents never share a cell
        return self._agents_grid

    def state(self) -> np.ndarray:
        scale = self.config.level_scale
        return np.concatenate([
            self._agent_grid().reshape(-1) / scale,
            self.food_grid.reshape(-1) / scale,
            [self.t / self.config.max_steps],
        ])

    def observations(self) -> np.ndarray:
        cfg = self.config
        rad = cfg.obs_radius
        window = 2 * rad + 1
        cells = window * window
        scale = cfg.level_scale
        agent_pad = np.zeros((cfg.rows + 2 * rad, cfg.cols + 2 * rad))
        agent_pad[rad:rad + cfg.rows, rad:rad + cfg.cols] = self._agent_grid()
        agent_pad /= scale
        food_pad = np.zeros_like(agent_pad)
        food_pad[rad:rad + cfg.rows, rad:rad + cfg.cols] = self.food_grid
        food_pad /= scale
        center = 2 * cells + (cells - 1) // 2
        obs = np.zeros((self.n_agents, self.obs_width))
        for i in range(self.n_agents):
            r, c = self.agent_pos[i]
            obs[i, :cells] = agent_pad[r:r + window, c:c + window].reshape(-1)
            obs[i, cells:2 * cells] = food_pad[r:r + window,
                                               c:c + window].reshape(-1)
            obs[i, center] = cfg.agent_levels[i] / scale
        return obs

    def step(self, actions):
        if self.done:
            raise UsageError("step() called on a finished episode")
        actions = np.asarray(actions, dtype=np.intp)
        if actions.shape != (self.n_agents,):
            raise UsageError(f"expected {self.n_agents} actions")
        if actions.min() < 0 or actions.max() >= self.n_actions:
            raise UsageError(f"action index out of range: {actions}")
        cfg = self.config

        # simultaneous movement (order-independent: contested targets and
        # currently occupied cells block every mover)
        pos = [tuple(p) for p in self.agent_pos]
        proposals = []
        movers = []
        for i in range(self.n_agents):
            act = int(actions[i])
            delta = _DELTAS.get(act)
            if delta is None:
                proposals.append(pos[i])
            else:
                movers.append(i)
                proposals.append((pos[i][0] + delta[0], pos[i][1] + delta[1]))
        if movers:
            occupied = set(pos)
            moved = []
            for i in movers:
                r, c = proposals[i]
                blocked = (not (0 <= r < cfg.rows and 0 <= c < cfg.cols)
                           or self.food_grid[r, c] > 0
                           or (r, c) in occupied
                           or sum(1 for j in movers
                                  if proposals[j] == (r, c)) > 1)
                if not blocked:
                    moved.append(i)
            for i in moved:
                self._agents_grid[pos[i]] = 0.0
            for i in moved:
                self.agent_pos[i] = proposals[i]
                self._agents_grid[proposals[i]] = cfg.agent_levels[i]

        # foraging
        rewards = np.zeros(self.n_agents)
        total_food = float(sum(cfg.food_levels))
        foragers = [i for i in range(self.n_agents) if actions[i] == FORAGE]
        if foragers:
            for r, c in np.argwhere(self.food_grid > 0):
                level = self.food_grid[r, c]
                near = [i for i in foragers
                        if abs(self.agent_pos[i][0] - r) + abs(self.agent_pos[i][1] - c) == 1]
                if not near:
                    continue
                level_sum = sum(cfg.agent_levels[i] for i in near)
                if level_sum >= level:
                    self.food_grid[r, c] = 0.0
                    for i in near:
                        rewards[i] += (cfg.agent_levels[i] / level_sum
                                       * level / total_food)

        self.t += 1
        self.done = bool(self.food_grid.sum() == 0 or self.t >= cfg.max_steps)
        if self.record:
            episode = self.replay_episodes[-1]
            episode["actions"].append([int(a) for a in actions])
            episode["rewards"].append([float(r) for r in rewards])
        return (self.state(), self.observations(), rewards,
                float(rewards.sum()), self.done)


# ---------------------------------------------------------------------------
# Heterogeneous coordination matrix game
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoordGameConfig:
    n_agents: int = 3
    n_actions: int = 3
    obs_width: int = 4
    target_seed: int = 0     # the hidden assignment is a task property

    def __post_init__(self):
        if self.n_actions < self.n_agents:
            raise ConfigError("coordination game needs n_actions >= n_agents "
                              "(a pairwise-distinct assignment must exist)")

    @property
    def target(self) -> tuple[int, ...]:
        rng = np.random.default_rng(self.target_seed)
        return tuple(int(a) for a in
                     rng.permutation(self.n_actions)[:self.n_agents])


class CoordinationGame:
    """Single-step game: team reward 1 iff the joint action equals a hidden
    pairwise-distinct target assignment, else 0. Every agent sees the same
    constant observation, so policies without some form of agent
    identification cannot split their behavior."""

    def __init__(self, config: CoordGameConfig, seed: int = 0):
        self.config = config
        self.n_agents = config.n_agents
        self.n_actions = config.n_actions
        self.obs_width = config.obs_width
        self.state_width = 1
        self.target = np.array(config.target, dtype=np.intp)
        self.done = True

    def reset(self):
        self.done = False
        return self.state(), self.observations()

    def state(self) -> np.ndarray:
        return np.ones(1)

    def observations(self) -> np.ndarray:
        return np.ones((self.n_agents, self.obs_width))

    def step(self, actions):
        if self.done:
            raise UsageError("step() called on a finished episode")
        actions = np.asarray(actions, dtype=np.intp)
        if actions.shape != (self.n_agents,):
            raise UsageError(f"expected {self.n_agents} actions")
        if actions.min() < 0 or actions.max() >= self.n_actions:
            raise UsageError(f"action index out of range: {actions}")
        reward = 1.0 if np.array_equal(actions, self.target) else 0.0
        rewards = np.full(self.n_agents, reward)
        self.done = True
        return self.state(), self.observations(), rewards, reward, True


def coord_game_step(env: CoordinationGame, actions):
    """Reward vector for a joint action (thin wrapper over step)."""
    _, _, rewards, _, _ = env.step(actions)
    return rewards


def write_replay_log(path, episodes, provenance=None):
    """JSON-lines replay log: a provenance header line, then one episode
    per line with the initial layout and action/reward streams, for
    external rule re-checks."""
    import json
    with open(path, "w") as f:
        f.write(json.dumps({"provenance": provenance or {}},
                           sort_keys=True) + "\n")
        for episode in episodes:
            f.write(json.dumps(episode, sort_keys=True) + "\n")


def read_replay_log(path):
    """Returns (provenance, episodes)."""
    import json
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if lines and "provenance" in lines[0]:
        return lines[0]["provenance"], lines[1:]
    return {}, lines


def make_env(name: str, seed: int = 0, overrides: Optional[dict] = None,
             record: bool = False):
    """Factory used by the experiment harness. ``record`` enables the
    replay log on environments that support it."""
    overrides = dict(overrides or {})
    if name == "coord":
        cfg = CoordGameConfig(**overrides) if overrides else CoordGameConfig()
        return CoordinationGame(cfg, seed)
    cfg = lbf_presets(name)
    if overrides:
        base = {"rows": cfg.rows, "cols": cfg.cols,
                "agent_levels": cfg.agent_levels, "food_levels": cfg.food_levels,
                "max_steps": cfg.max_steps, "obs_radius": cfg.obs_radius}
        for key in overrides:
            if key not in base:
                raise ConfigError(f"unknown env override {key!r}")
        base.update(overrides)
        if "agent_levels" in overrides:
            base["agent_levels"] = tuple(overrides["agent_levels"])
        if "food_levels" in overrides:
            base["food_levels"] = tuple(overrides["food_levels"])
        cfg = LbfConfig(**base)
    return LevelBasedForaging(cfg, seed, record=record)
