"""Multi-agent n-step advantage actor-critic with per-agent rewards.

Actors and critics are separate shared networks (each under its own sharing
mode schedule). Critics are decentralized: each agent's value estimate is
conditioned on its own observation and trained against its own n-step
return. Rollouts are synchronous over a single environment; segments of
``n_steps`` env steps may span episode boundaries, with returns truncated
at terminals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import netcore
from .errors import TrainingError, UsageError
from .netcore import NetworkTopology, OptimizerConfig, OptimizerState
from .seeding import substream, substream_seed
from .sharednet import SharedAgentNetwork, SharingMode

_TINY = 1e-300   # probability floor inside logs; softmax outputs stay > 0


@dataclass
class A2cConfig:
    gamma: float = 0.99
    n_steps: int = 5
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 5e-4
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    clip_norm: float = 10.0
    hidden: tuple[int, ...] = (128, 128, 128)


@dataclass
class RolloutSegment:
    obs: np.ndarray           # (n, N, obs_w)
    actions: np.ndarray       # (n, N)
    rewards: np.ndarray       # (n, N) per-agent rewards
    terminals: np.ndarray     # (n,) 1.0 where the episode ended at that step
    bootstrap_obs: np.ndarray  # (N, obs_w) observation after the last step

    @property
    def length(self) -> int:
        return self.obs.shape[0]


def n_step_advantage(segment: RolloutSegment, gamma: float, values,
                     bootstrap_values):
    """Per-agent, per-step advantages and value targets.

    The target at step t is the discounted reward sum to the segment end
    plus the discounted bootstrap value, truncated at terminals (the
    bootstrap term is dropped past a terminal). The advantage subtracts the
    critic's value at t. Returns (advantages, targets), both (n, N).
    """
    values = np.asarray(values, dtype=np.float64)
    bootstrap = np.asarray(bootstrap_values, dtype=np.float64)
    n = segment.length
    if values.shape != (n, segment.obs.shape[1]):
        raise UsageError(f"values shape {values.shape} does not match segment")
    targets = np.empty_like(values)
    running = bootstrap.copy()
    for t in range(n - 1, -1, -1):
        running = segment.rewards[t] + gamma * running * (1.0 - segment.terminals[t])
        targets[t] = running
    return targets - values, targets


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float


class A2cTrainer:
    def __init__(self, actor: SharedAgentNetwork, critic: SharedAgentNetwork,
                 config: A2cConfig, explore_rng: np.random.Generator):
        if actor.n_agents != critic.n_agents:
            raise UsageError("actor and critic must serve the same agents")
        self.actor = actor
        self.critic = critic
        self.config = config
        self.explore_rng = explore_rng
        self.opt = OptimizerConfig(algo="rmsprop", lr=config.lr,
                                   decay=config.rms_decay, eps=config.rms_eps,
                                   clip_norm=config.clip_norm)
        self.actor_opt = [OptimizerState(r) for r in actor.roots]
        self.critic_opt = [OptimizerState(r) for r in critic.roots]
        self.env_steps = 0
        self.updates = 0
        self._cur_obs = None
        self._ep_team_return = 0.0
        self._ep_agent_returns = None
        self._ep_length = 0
        self.completed_episodes: list[dict] = []

    @classmethod
    def build(cls, env, mode, actor_schedule, critic_schedule,
              config: A2cConfig, master_seed: int) -> "A2cTrainer":
        mode = SharingMode.parse(mode, env.n_agents)
        actor_topology = NetworkTopology.mlp(env.obs_width, config.hidden,
                                             env.n_actions,
                                             out_activation="softmax")
        critic_topology = NetworkTopology.mlp(env.obs_width, config.hidden, 1)
        actor = SharedAgentNetwork.build(
            actor_topology, env.n_agents, mode, actor_schedule,
            init_seed=substream_seed(master_seed, "init", "actor"),
            mask_seed=substream_seed(master_seed, "masks", "actor"))
        critic = SharedAgentNetwork.build(
            critic_topology, env.n_agents, mode, critic_schedule,
            init_seed=substream_seed(master_seed, "init", "critic"),
            mask_seed=substream_seed(master_seed, "masks", "critic"))
        return cls(actor, critic, config,
                   explore_rng=substream(master_seed, "explore"))

    # -- acting --

    def policy(self, obs) -> np.ndarray:
        ids = np.arange(self.actor.n_agents)
        return self.actor.forward_rows(np.asarray(obs, dtype=np.float64),
                                       ids).y

    def sample_actions(self, obs):
        """Categorical draw per agent from the softmax policy. Returns
        (actions, log_probs, entropies)."""
        probs = self.policy(obs)
        if not np.isfinite(probs).all():
            raise TrainingError("non-finite action probabilities")
        cum = np.cumsum(probs, axis=1)
        u = self.explore_rng.random(probs.shape[0])
        actions = (u[:, None] > cum).sum(axis=1)
        actions = np.minimum(actions, probs.shape[1] - 1).astype(np.intp)
        picked = probs[np.arange(len(actions)), actions]
        log_probs = np.log(np.maximum(picked, _TINY))
        entropies = -(probs * np.log(np.maximum(probs, _TINY))).sum(axis=1)
        return actions, log_probs, entropies

    def greedy_actions(self, obs):
        return np.argmax(self.policy(obs), axis=1).astype(np.intp)

    # -- rollouts --

    def collect_segment(self, env) -> RolloutSegment:
        """Advance the environment by n_steps, resetting on episode ends.
        Completed-episode returns accumulate in ``completed_episodes``."""
        n = self.config.n_steps
        N = self.actor.n_agents
        if self._cur_obs is None:
            _, self._cur_obs = env.reset()
            self._ep_agent_returns = np.zeros(N)
            self._ep_team_return = 0.0
            self._ep_length = 0
        obs_hist = np.empty((n, N, env.obs_width))
        act_hist = np.empty((n, N), dtype=np.intp)
        rew_hist = np.empty((n, N))
        term_hist = np.zeros(n)
        for t in range(n):
            obs_hist[t] = self._cur_obs
            actions, _, _ = self.sample_actions(self._cur_obs)
            _, obs, rewards, team_reward, done = env.step(actions)
            act_hist[t] = actions
            rew_hist[t] = rewards
            self._ep_team_return += team_reward
            self._ep_agent_returns += rewards
            self._ep_length += 1
            self.env_steps += 1
            if done:
                term_hist[t] = 1.0
                self.completed_episodes.append({
                    "env_step": self.env_steps,
                    "team_return": self._ep_team_return,
                    "agent_returns": self._ep_agent_returns.copy(),
                    "length": self._ep_length,
                })
                _, obs = env.reset()
                self._ep_agent_returns = np.zeros(N)
                self._ep_team_return = 0.0
                self._ep_length = 0
            self._cur_obs = obs
        return RolloutSegment(obs_hist, act_hist, rew_hist, term_hist,
                              np.asarray(self._cur_obs, dtype=np.float64))

    # -- learning --

    def a2c_update(self, segment: RolloutSegment) -> UpdateStats:
        """One combined gradient step on actor and critic.

        Total objective (advantages and value targets held constant):
          policy:  -(sum A*log pi(a) + beta * sum H) / (n*N)
          value:   c * sum (V - target)^2 / (n*N)
        """
        cfg = self.config
        n = segment.length
        N = self.actor.n_agents
        scale = 1.0 / (n * N)
        ids_step = np.arange(N)

        # critic pass over all segment steps plus the bootstrap observation
        obs_c = np.concatenate([segment.obs,
                                segment.bootstrap_obs[None]], axis=0)
        rows_c = obs_c.reshape((n + 1) * N, -1)
        ids_c = np.tile(ids_step, n + 1)
        critic_fwd = self.critic.forward_rows(rows_c, ids_c, want_cache=True)
        v_all = critic_fwd.y.reshape(n + 1, N)
        values, bootstrap = v_all[:n], v_all[n]

        advantages, targets = n_step_advantage(segment, cfg.gamma, values,
                                               bootstrap)

        # actor pass
        rows_a = segment.obs.reshape(n * N, -1)
        ids_a = np.tile(ids_step, n)
        actor_fwd = self.actor.forward_rows(rows_a, ids_a, want_cache=True)
        probs = actor_fwd.y
        acts = segment.actions.reshape(n * N)
        picked = np.maximum(probs[np.arange(n * N), acts], _TINY)
        log_picked = np.log(picked)
        entropies = -(probs * np.log(np.maximum(probs, _TINY))).sum(axis=1)

        adv_flat = advantages.reshape(n * N)
        policy_loss = float(-(adv_flat * log_picked).sum() * scale
                            - cfg.entropy_coef * entropies.sum() * scale)
        value_loss = float(cfg.value_coef * ((values - targets) ** 2).sum()
                           * scale)
        if not (np.isfinite(policy_loss) and np.isfinite(value_loss)):
            raise TrainingError("non-finite A2C loss")

        # d(loss)/d(probs): advantage term on the chosen action plus the
        # entropy bonus on every action
        dprobs = (cfg.entropy_coef * scale
                  * (np.log(np.maximum(probs, _TINY)) + 1.0))
        dprobs[np.arange(n * N), acts] -= adv_flat * scale / picked
        actor_grads = self.actor.backward_rows(actor_fwd, dprobs)

        dv = np.zeros((n + 1, N))
        dv[:n] = 2.0 * cfg.value_coef * (values - targets) * scale
        critic_grads = self.critic.backward_rows(critic_fwd,
                                                 dv.reshape((n + 1) * N, 1))

        netcore.clip_gradients(actor_grads, cfg.clip_norm)
        netcore.clip_gradients(critic_grads, cfg.clip_norm)
        for root, g, st in zip(self.actor.roots, actor_grads, self.actor_opt):
            netcore.apply_update(root, g, st, self.opt)
        for root, g, st in zip(self.critic.roots, critic_grads, self.critic_opt):
            netcore.apply_update(root, g, st, self.opt)
        self.updates += 1
        return UpdateStats(policy_loss, value_loss,
                           float(entropies.mean()))

    def train_segment(self, env) -> UpdateStats:
        return self.a2c_update(self.collect_segment(env))

    def evaluate(self, env, episodes: int) -> float:
        """Mean greedy team return; consumes no exploration RNG."""
        total = 0.0
        for _ in range(episodes):
            _, obs = env.reset()
            done = False
            while not done:
                _, obs, _, team_reward, done = env.step(self.greedy_actions(obs))
                total += team_reward
        return total / episodes

    def save_checkpoint(self, directory, meta: Optional[dict] = None):
        import os
        self.actor.save(os.path.join(directory, "actor"), meta)
        self.critic.save(os.path.join(directory, "critic"), meta)
