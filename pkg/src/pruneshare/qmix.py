"""Value-factorization trainer: shared recurrent utility networks under any
sharing mode, a state-conditioned monotonic mixing network, whole-episode
replay, target networks, and epsilon-greedy execution.

The mixer's weights come from hypernetworks of the global state and pass
through an absolute value, so the joint value is non-decreasing in every
agent's utility. The mixer itself is never pruned or shared per agent; only
the utility networks go through :class:`SharedAgentNetwork`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import netcore
from .errors import TrainingError, UsageError
from .netcore import (GradientStore, NetworkTopology, OptimizerConfig,
                      OptimizerState)
from .seeding import substream, substream_seed
from .sharednet import SharedAgentNetwork, SharingMode

_MIX_ACTS = ("elu", "relu", "identity")


def _mix_act(x, kind):
    if kind == "elu":
        e = np.exp(np.minimum(x, 0.0))
        return np.where(x > 0.0, x, e - 1.0)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x


def _mix_act_grad(x, kind):
    if kind == "elu":
        return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))
    if kind == "relu":
        return (x > 0.0).astype(float)
    return np.ones_like(x)


@dataclass
class MixerCache:
    states: np.ndarray
    q: np.ndarray
    raw_w1: object
    raw_b1: object
    raw_w2: object
    raw_b2: object
    w1: np.ndarray
    w2: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


class MixingNetwork:
    """Two-stage mixer with non-negative, state-generated weights."""

    HYPER_NAMES = ("w1", "b1", "w2", "b2")

    def __init__(self, n_agents: int, state_width: int, mix_hidden: int = 32,
                 hyper_hidden: int = 64, activation: str = "elu", seed: int = 0):
        if activation not in _MIX_ACTS:
            raise UsageError(f"mixer activation must be one of {_MIX_ACTS}")
        self.n_agents = n_agents
        self.state_width = state_width
        self.mix_hidden = mix_hidden
        self.activation = activation
        self.topologies = {
            "w1": NetworkTopology.mlp(state_width, [hyper_hidden],
                                      n_agents * mix_hidden),
            "b1": NetworkTopology.mlp(state_width, [hyper_hidden], mix_hidden),
            "w2": NetworkTopology.mlp(state_width, [hyper_hidden], mix_hidden),
            "b2": NetworkTopology.mlp(state_width, [hyper_hidden], 1),
        }
        seqs = np.random.SeedSequence(int(seed)).spawn(4)
        self.params = {name: netcore.init_parameters(self.topologies[name],
                                                     np.random.default_rng(s))
                       for name, s in zip(self.HYPER_NAMES, seqs)}

    def copy(self) -> "MixingNetwork":
        dup = MixingNetwork(self.n_agents, self.state_width, self.mix_hidden,
                            self.topologies["w1"].layers[0].out_width,
                            self.activation)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        return dup

    def copy_from(self, other: "MixingNetwork"):
        for name in self.HYPER_NAMES:
            for (_, _, dst), (_, _, src) in zip(self.params[name].arrays(),
                                                other.params[name].arrays()):
                np.copyto(dst, src)

    def stores(self):
        return [(name, self.params[name]) for name in self.HYPER_NAMES]

    def forward(self, states, q, want_cache: bool = False):
        """states: (B, S); q: (B, N) per-agent chosen utilities.
        Returns (q_joint (B,), cache or None)."""
        states = np.asarray(states, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        if states.ndim != 2 or q.ndim != 2:
            raise UsageError("mixer inputs must be 2-d batches")
        if q.shape[1] != self.n_agents:
            raise UsageError(f"expected {self.n_agents} utility values per row")
        if states.shape[0] != q.shape[0]:
            raise UsageError("states/q batch mismatch")
        B = states.shape[0]
        outs = {name: netcore.forward_cached(self.params[name],
                                             self.topologies[name], states,
                                             unit_masks=None)
                for name in self.HYPER_NAMES}
        w1 = np.abs(outs["w1"].y[0]).reshape(B, self.n_agents, self.mix_hidden)
        b1 = outs["b1"].y[0]
        w2 = np.abs(outs["w2"].y[0])
        b2 = outs["b2"].y[0][:, 0]
        pre = np.einsum("bn,bnm->bm", q, w1) + b1
        hidden = _mix_act(pre, self.activation)
        qjt = (hidden * w2).sum(axis=1) + b2
        cache = None
        if want_cache:
            cache = MixerCache(states, q, outs["w1"], outs["b1"],
                               outs["w2"], outs["b2"], w1, w2, pre, hidden)
        return qjt, cache

    def backward(self, cache: MixerCache, dqjt):
        """Gradients of sum(dqjt * q_joint) with respect to the per-agent
        utilities and every hypernetwork parameter."""
        if cache is None:
            raise UsageError("mixer backward requires a forward cache")
        dqjt = np.asarray(dqjt, dtype=np.float64)
        B = dqjt.shape[0]
        db2 = dqjt[:, None]
        dw2 = dqjt[:, None] * cache.hidden
        dh = dqjt[:, None] * cache.w2
        dpre = dh * _mix_act_grad(cache.pre, self.activation)
        db1 = dpre
        dw1 = np.einsum("bn,bm->bnm", cache.q, dpre)
        dq = np.einsum("bnm,bm->bn", cache.w1, dpre)
        raw_w1 = cache.raw_w1.y[0]
        raw_w2 = cache.raw_w2.y[0]
        da1 = (dw1.reshape(B, -1) * np.sign(raw_w1))
        da2 = dw2 * np.sign(raw_w2)
        grads = {}
        for name, d in (("w1", da1), ("b1", db1), ("w2", da2), ("b2", db2)):
            raw = {"w1": cache.raw_w1, "b1": cache.raw_b1,
                   "w2": cache.raw_w2, "b2": cache.raw_b2}[name]
            g, _ = netcore.backward_sequence(self.params[name],
                                             self.topologies[name],
                                             raw.cache, d[None])
            grads[name] = g
        return dq, grads


def mix(mixer: MixingNetwork, state, q_values):
    """Joint value of one state and one per-agent utility vector."""
    state = np.asarray(state, dtype=np.float64)
    q = np.asarray(q_values, dtype=np.float64)
    qjt, _ = mixer.forward(state[None], q[None])
    return float(qjt[0])


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    obs: np.ndarray         # (T+1, N, obs_w)
    states: np.ndarray      # (T+1, S)
    actions: np.ndarray     # (T, N)
    rewards: np.ndarray     # (T,) team reward
    initial_state: np.ndarray   # (N, H) recurrent state at episode start

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


class ReplayBuffer:
    """Whole-episode replay so recurrent utilities replay from the episode
    start."""

    def __init__(self, capacity: int):
        self.episodes = deque(maxlen=capacity)

    def add(self, episode: Episode):
        self.episodes.append(episode)

    def sample(self, rng: np.random.Generator, k: int) -> list[Episode]:
        idx = rng.choice(len(self.episodes), size=k, replace=True)
        return [self.episodes[i] for i in idx]

    def __len__(self):
        return len(self.episodes)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class QmixConfig:
    gamma: float = 0.99
    lr: float = 5e-4
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    clip_norm: float = 10.0
    buffer_episodes: int = 5000
    batch_episodes: int = 32
    min_buffer_episodes: int = 32
    train_steps_per_episode: int = 1
    target_update_interval: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 50_000
    utility_hidden: int = 64
    mixer_hidden: int = 32
    hyper_hidden: int = 64
    mixer_activation: str = "elu"


@dataclass
class EpisodeStats:
    env_step: int
    episode: int
    ret: float
    length: int
    losses: list
    epsilon: float


class QmixTrainer:
    def __init__(self, utilities: SharedAgentNetwork, mixer: MixingNetwork,
                 config: QmixConfig, explore_rng: np.random.Generator,
                 replay_rng: np.random.Generator):
        self.utilities = utilities
        self.mixer = mixer
        self.config = config
        self.explore_rng = explore_rng
        self.replay_rng = replay_rng
        self.target_utilities = self._clone_net(utilities)
        self.target_mixer = mixer.copy()
        self.buffer = ReplayBuffer(config.buffer_episodes)
        self.opt = OptimizerConfig(algo="rmsprop", lr=config.lr,
                                   decay=config.rms_decay, eps=config.rms_eps,
                                   clip_norm=config.clip_norm)
        self.util_opt = [OptimizerState(r) for r in utilities.roots]
        self.mixer_opt = {name: OptimizerState(p) for name, p in mixer.stores()}
        self.env_steps = 0
        self.episodes = 0
        self.updates = 0

    @staticmethod
    def _clone_net(net: SharedAgentNetwork) -> SharedAgentNetwork:
        return SharedAgentNetwork(net.base_topology, net.n_agents, net.mode,
                                  [r.copy() for r in net.roots],
                                  net.neuron_masks, net.weight_masks,
                                  net.schedule)

    @classmethod
    def build(cls, env, mode, schedule, config: QmixConfig,
              master_seed: int) -> "QmixTrainer":
        mode = SharingMode.parse(mode, env.n_agents)
        topology = NetworkTopology.recurrent(env.obs_width,
                                             config.utility_hidden,
                                             env.n_actions)
        utilities = SharedAgentNetwork.build(
            topology, env.n_agents, mode, schedule,
            init_seed=substream_seed(master_seed, "init", "utility"),
            mask_seed=substream_seed(master_seed, "masks", "utility"))
        mixer = MixingNetwork(env.n_agents, env.state_width,
                              config.mixer_hidden, config.hyper_hidden,
                              config.mixer_activation,
                              seed=substream_seed(master_seed, "init", "mixer"))
        return cls(utilities, mixer, config,
                   explore_rng=substream(master_seed, "explore"),
                   replay_rng=substream(master_seed, "replay"))

    # -- acting --

    def epsilon(self) -> float:
        cfg = self.config
        frac = min(self.env_steps / max(cfg.eps_anneal_steps, 1), 1.0)
        return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)

    def utility_values(self, net: SharedAgentNetwork, obs, states):
        ids = np.arange(net.n_agents)
        res = net.forward_rows(obs, ids, states)
        return res.y, res.state

    def select_actions(self, obs, states, epsilon: float):
        """Per-agent epsilon-greedy over utilities; argmax ties resolve to
        the lowest action index. Returns (actions, new_states)."""
        if not 0.0 <= epsilon <= 1.0:
            raise UsageError("epsilon must lie in [0, 1]")
        q, new_states = self.utility_values(self.utilities, obs, states)
        greedy = np.argmax(q, axis=1)
        if epsilon > 0.0:
            explore = self.explore_rng.random(len(greedy)) < epsilon
            randoms = self.explore_rng.integers(0, q.shape[1], len(greedy))
            actions = np.where(explore, randoms, greedy)
        else:
            actions = greedy
        return actions.astype(np.intp), new_states

    # -- learning --

    def td_loss(self, episodes: list[Episode]):
        """Mean squared TD error over every valid step of a batch of
        episodes, and its exact gradients for the online utilities and the
        mixer. The max over next joint actions is factored per agent
        (each agent maximizes its own target utility, then mix)."""
        if not episodes:
            raise UsageError("td_loss needs a non-empty batch")
        cfg = self.config
        E = len(episodes)
        N = self.utilities.n_agents
        obs_w = self.utilities.obs_width
        S = self.mixer.state_width
        T = max(ep.length for ep in episodes)

        obs = np.zeros((T + 1, E, N, obs_w))
        states = np.zeros((T + 1, E, S))
        actions = np.zeros((T, E, N), dtype=np.intp)
        rewards = np.zeros((T, E))
        valid = np.zeros((T, E))
        terminated = np.zeros((T, E))
        for e, ep in enumerate(episodes):
            L = ep.length
            obs[:L + 1, e] = ep.obs
            states[:L + 1, e] = ep.states
            # keep padded steps on the final observation; their gradient is 0
            obs[L + 1:, e] = ep.obs[L]
            states[L + 1:, e] = ep.states[L]
            actions[:L, e] = ep.actions
            rewards[:L, e] = ep.rewards
            valid[:L, e] = 1.0
            terminated[L - 1, e] = 1.0

        R = E * N
        ids = np.tile(np.arange(N), E)
        x_online = obs[:T].reshape(T, R, obs_w)
        h0 = np.zeros((R, self.utilities.state_width))
        online = self.utilities.forward_rows_seq(x_online, ids, h0,
                                                 want_cache=True)
        q_all = online.y.reshape(T, E, N, -1)
        q_taken = np.take_along_axis(q_all, actions[..., None], axis=3)[..., 0]

        x_target = obs[1:T + 1].reshape(T, R, obs_w)
        target = self.target_utilities.forward_rows_seq(x_target, ids, h0)
        q_next_max = target.y.reshape(T, E, N, -1).max(axis=3)

        qjt, cache = self.mixer.forward(states[:T].reshape(T * E, S),
                                        q_taken.reshape(T * E, N),
                                        want_cache=True)
        qjt_next, _ = self.target_mixer.forward(
            states[1:T + 1].reshape(T * E, S), q_next_max.reshape(T * E, N))
        y = rewards + cfg.gamma * (1.0 - terminated) * qjt_next.reshape(T, E)
        diff = (qjt.reshape(T, E) - y) * valid
        n_valid = valid.sum()
        loss = float((diff * diff).sum() / n_valid)

        dqjt = (2.0 * diff / n_valid).reshape(T * E)
        dq, mixer_grads = self.mixer.backward(cache, dqjt)
        dq_full = np.zeros((T, E, N, q_all.shape[3]))
        np.put_along_axis(dq_full, actions[..., None],
                          dq.reshape(T, E, N)[..., None], axis=3)
        util_grads = self.utilities.backward_rows(online,
                                                  dq_full.reshape(T, R, -1))
        return loss, util_grads, mixer_grads

    def _apply(self, util_grads: list[GradientStore], mixer_grads: dict):
        family = list(util_grads) + [mixer_grads[n] for n in
                                     self.mixer.HYPER_NAMES]
        netcore.clip_gradients(family, self.opt.clip_norm)
        for root, g, st in zip(self.utilities.roots, util_grads, self.util_opt):
            netcore.apply_update(root, g, st, self.opt)
        for name, params in self.mixer.stores():
            netcore.apply_update(params, mixer_grads[name],
                                 self.mixer_opt[name], self.opt)
        self.updates += 1
        if self.updates % self.config.target_update_interval == 0:
            self.refresh_targets()

    def refresh_targets(self):
        for src, dst in zip(self.utilities.roots, self.target_utilities.roots):
            for (_, _, a), (_, _, b) in zip(src.arrays(), dst.arrays()):
                np.copyto(b, a)
        self.target_mixer.copy_from(self.mixer)

    def train_episode(self, env) -> EpisodeStats:
        """Roll out one episode with the current epsilon, store it, then run
        the configured number of gradient steps (none until the buffer
        reaches its minimum fill)."""
        N = self.utilities.n_agents
        state, obs = env.reset()
        h = np.zeros((N, self.utilities.state_width))
        initial_state = h.copy()
        obs_hist = [obs.copy()]
        state_hist = [state.copy()]
        act_hist, rew_hist = [], []
        done = False
        eps = self.epsilon()
        while not done:
            eps = self.epsilon()
            actions, h = self.select_actions(obs, h, eps)
            state, obs, rewards, team_reward, done = env.step(actions)
            obs_hist.append(obs.copy())
            state_hist.append(state.copy())
            act_hist.append(actions)
            rew_hist.append(team_reward)
            self.env_steps += 1
        episode = Episode(np.stack(obs_hist), np.stack(state_hist),
                          np.stack(act_hist), np.array(rew_hist),
                          initial_state)
        self.buffer.add(episode)
        self.episodes += 1

        losses = []
        if len(self.buffer) >= self.config.min_buffer_episodes:
            for _ in range(self.config.train_steps_per_episode):
                batch = self.buffer.sample(self.replay_rng,
                                           self.config.batch_episodes)
                loss, util_grads, mixer_grads = self.td_loss(batch)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite TD loss: {loss}")
                self._apply(util_grads, mixer_grads)
                losses.append(loss)
        return EpisodeStats(self.env_steps, self.episodes, episode.ret,
                            episode.length, losses, eps)

    def evaluate(self, env, episodes: int) -> float:
        """Mean greedy (epsilon=0) return; consumes no exploration RNG."""
        total = 0.0
        N = self.utilities.n_agents
        for _ in range(episodes):
            _, obs = env.reset()
            h = np.zeros((N, self.utilities.state_width))
            done = False
            while not done:
                q, h = self.utility_values(self.utilities, obs, h)
                _, obs, _, team_reward, done = env.step(
                    np.argmax(q, axis=1).astype(np.intp))
                total += team_reward
        return total / episodes

    def save_checkpoint(self, directory, meta: Optional[dict] = None):
        import os
        self.utilities.save(os.path.join(directory, "utilities"), meta)
        for name, params in self.mixer.stores():
            netcore.save_params(os.path.join(directory, f"mixer_{name}.psnet"),
                                self.mixer.topologies[name], params,
                                meta={"n_agents": self.mixer.n_agents,
                                      "mix_hidden": self.mixer.mix_hidden,
                                      "activation": self.mixer.activation})
