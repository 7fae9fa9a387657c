"""Bind one root network to N agents under a selectable sharing mode.

Modes:
  FuPS      full sharing, no agent indication
  FuPS_id   full sharing + one-hot agent id appended to the observation
  SNP_PS    per-agent structured unit masks over a single root
  SNP_PS_id masks combined with the one-hot input
  USNP_PS   per-agent unstructured (per-weight) masks
  SNP_NPS   one structured mask shared by every agent
  Grouped   one root per cluster of a fixed agent -> cluster assignment

Structured masks are applied by multiplying hidden activations with the
agent's keep vectors, which is exactly equivalent to zeroing the pruned
units' incoming rows, biases, and outgoing columns. Unstructured masks
have no such unit structure and are applied to the weights directly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import netcore
from .errors import ConfigError, UsageError
from .netcore import (GradientStore, NetworkTopology, ParameterStore,
                      SeqForward, zeros_like_store)
from .pruning import (NeuronMaskGroup, PruningSchedule, WeightMask,
                      generate_group_tickets, generate_single_ticket,
                      generate_unstructured_masks)

SHARING_KINDS = ("FuPS", "FuPS_id", "SNP_PS", "SNP_PS_id", "USNP_PS",
                 "SNP_NPS", "Grouped")
_ONE_HOT_KINDS = ("FuPS_id", "SNP_PS_id")
_NEURON_MASK_KINDS = ("SNP_PS", "SNP_PS_id", "SNP_NPS")


@dataclass(frozen=True)
class SharingMode:
    kind: str
    clusters: Optional[tuple[int, ...]] = None   # Grouped: agent -> cluster

    def __post_init__(self):
        if self.kind not in SHARING_KINDS:
            raise ConfigError(f"unknown sharing mode {self.kind!r}; "
                              f"expected one of {SHARING_KINDS}")
        if self.kind == "Grouped":
            if not self.clusters:
                raise ConfigError("Grouped mode needs an agent->cluster assignment")
            labels = sorted(set(self.clusters))
            if labels != list(range(len(labels))):
                raise ConfigError("cluster labels must be 0..K-1 and cover all agents")
            if len(labels) > len(self.clusters):
                raise ConfigError("cluster count exceeds the number of agents")
        elif self.clusters is not None:
            raise ConfigError(f"mode {self.kind} does not take a cluster assignment")

    @property
    def uses_one_hot(self) -> bool:
        return self.kind in _ONE_HOT_KINDS

    @property
    def uses_neuron_masks(self) -> bool:
        return self.kind in _NEURON_MASK_KINDS

    @property
    def uses_weight_masks(self) -> bool:
        return self.kind == "USNP_PS"

    @property
    def n_clusters(self) -> int:
        return len(set(self.clusters)) if self.kind == "Grouped" else 1

    @classmethod
    def parse(cls, value, n_agents: Optional[int] = None) -> "SharingMode":
        if isinstance(value, SharingMode):
            mode = value
        elif isinstance(value, str):
            mode = cls(value)
        elif isinstance(value, dict):
            clusters = value.get("clusters")
            mode = cls(value.get("mode", value.get("kind")),
                       tuple(clusters) if clusters is not None else None)
        else:
            raise ConfigError(f"cannot parse sharing mode from {value!r}")
        if (mode.kind == "Grouped" and n_agents is not None
                and len(mode.clusters) != n_agents):
            raise ConfigError(
                f"cluster assignment covers {len(mode.clusters)} agents, "
                f"expected {n_agents}")
        return mode


@dataclass
class FeatureRecord:
    agent: int
    layer: int
    observation_id: int
    values: np.ndarray


class FeatureDump:
    def __init__(self, records: list[FeatureRecord]):
        self.records = records

    def rows(self):
        """Flat (agent, layer, neuron, value, observation_id) tuples."""
        for rec in self.records:
            for j, v in enumerate(rec.values):
                yield rec.agent, rec.layer, j, float(v), rec.observation_id


@dataclass
class RowsForward:
    """Forward over a batch of rows, each owned by an agent."""
    y: np.ndarray
    state: Optional[np.ndarray]
    hiddens: list
    parts: list               # (root_idx, row_idx, SeqForward)
    agent_ids: np.ndarray


class SharedAgentNetwork:
    def __init__(self, base_topology: NetworkTopology, n_agents: int,
                 mode: SharingMode, roots: list[ParameterStore],
                 neuron_masks: Optional[NeuronMaskGroup] = None,
                 weight_masks: Optional[list[WeightMask]] = None,
                 schedule: Optional[PruningSchedule] = None):
        self.base_topology = base_topology
        self.n_agents = n_agents
        self.mode = mode
        self.topology = (base_topology.widen_input(n_agents)
                         if mode.uses_one_hot else base_topology)
        self.roots = roots
        self.neuron_masks = neuron_masks
        self.weight_masks = weight_masks
        self.schedule = schedule
        self._mask_stacks = None
        if neuron_masks is not None:
            # (N, width) keep matrix per hidden layer, for fast row indexing
            self._mask_stacks = [neuron_masks.stacked(l)
                                 for l in range(neuron_masks.n_layers())]
        for root in roots:
            netcore.check_shapes(root, self.topology)

    # -- construction --

    @classmethod
    def build(cls, base_topology: NetworkTopology, n_agents: int, mode,
              schedule=None, init_seed: int = 0,
              mask_seed: int = 0) -> "SharedAgentNetwork":
        mode = SharingMode.parse(mode, n_agents)
        if n_agents < 1:
            raise UsageError("n_agents must be >= 1")
        topology = (base_topology.widen_input(n_agents)
                    if mode.uses_one_hot else base_topology)
        neuron_masks = None
        weight_masks = None
        if schedule is not None and not isinstance(schedule, PruningSchedule):
            schedule = PruningSchedule.parse(schedule)
        if mode.uses_neuron_masks or mode.uses_weight_masks:
            if schedule is None:
                raise ConfigError(f"mode {mode.kind} requires a pruning schedule")
            schedule.validate_for(topology)
            if mode.kind == "SNP_NPS":
                neuron_masks = generate_single_ticket(topology, schedule,
                                                      n_agents, mask_seed)
            elif mode.uses_weight_masks:
                weight_masks = generate_unstructured_masks(topology, schedule,
                                                           n_agents, mask_seed)
            else:
                neuron_masks = generate_group_tickets(topology, schedule,
                                                      n_agents, mask_seed)
        n_roots = mode.n_clusters
        if n_roots == 1:
            roots = [netcore.init_parameters(topology, init_seed)]
        else:
            seqs = np.random.SeedSequence(int(init_seed)).spawn(n_roots)
            roots = [netcore.init_parameters(topology, np.random.default_rng(s))
                     for s in seqs]
        return cls(base_topology, n_agents, mode, roots, neuron_masks,
                   weight_masks, schedule)

    # -- row bookkeeping --

    @property
    def obs_width(self) -> int:
        return self.base_topology.in_width

    @property
    def out_width(self) -> int:
        return self.topology.out_width

    @property
    def state_width(self) -> int:
        return self.topology.state_width

    def root_of_agent(self, agent: int) -> int:
        if not 0 <= agent < self.n_agents:
            raise UsageError(f"unknown agent id {agent} (n_agents={self.n_agents})")
        if self.mode.kind == "Grouped":
            return self.mode.clusters[agent]
        return 0

    def _augment(self, obs: np.ndarray, agent_ids: np.ndarray) -> np.ndarray:
        """Append one-hot agent indication columns when the mode uses them.
        ``obs`` is (..., R, obs_width) with rows aligned to ``agent_ids``."""
        if not self.mode.uses_one_hot:
            return obs
        one_hot = np.zeros(obs.shape[:-1] + (self.n_agents,))
        one_hot[..., np.arange(len(agent_ids)), agent_ids] = 1.0
        return np.concatenate([obs, one_hot], axis=-1)

    def unit_masks_for_rows(self, agent_ids: np.ndarray):
        if self._mask_stacks is None:
            return None
        return [stack[agent_ids] for stack in self._mask_stacks]

    def masked_params_for(self, agent: int) -> ParameterStore:
        """Agent's effective parameters (root elementwise the agent's weight
        mask). For structured modes this is the expanded unit mask; plain
        sharing returns the root itself."""
        root = self.roots[self.root_of_agent(agent)]
        if self.mode.uses_weight_masks:
            return self.weight_masks[agent].apply(root)
        if self.neuron_masks is not None:
            from .pruning import expand_to_weight_mask
            wm = expand_to_weight_mask(self.neuron_masks[agent], self.topology)
            return wm.apply(root)
        return root

    # -- forward / backward --

    def forward_rows_seq(self, x_seq, agent_ids, state=None,
                         want_cache: bool = False) -> RowsForward:
        """Time-major forward for rows owned by agents: ``x_seq`` is
        (T, R, obs_width), ``agent_ids`` (R,). Rows of different agents may
        interleave freely; masks and one-hot columns are selected per row."""
        x_seq = np.asarray(x_seq, dtype=np.float64)
        agent_ids = np.asarray(agent_ids, dtype=np.intp)
        if x_seq.ndim != 3:
            raise UsageError(f"expected (T, R, obs) input, got {x_seq.shape}")
        if x_seq.shape[2] != self.obs_width:
            raise UsageError(f"observation width {x_seq.shape[2]} != "
                             f"{self.obs_width}")
        if agent_ids.min(initial=0) < 0 or agent_ids.max(initial=0) >= self.n_agents:
            raise UsageError("agent id out of range")
        T, R, _ = x_seq.shape
        x_aug = self._augment(x_seq, agent_ids)

        if self.mode.uses_weight_masks:
            parts_spec = [("agent", a, np.flatnonzero(agent_ids == a))
                          for a in range(self.n_agents)]
        elif self.mode.kind == "Grouped":
            clusters = np.asarray(self.mode.clusters)
            parts_spec = [("root", c, np.flatnonzero(clusters[agent_ids] == c))
                          for c in range(self.mode.n_clusters)]
        else:
            # single-root fast path: no row scattering needed
            rows = np.arange(R)
            masks = self.unit_masks_for_rows(agent_ids)
            res = netcore.forward_sequence(self.roots[0], self.topology,
                                           np.ascontiguousarray(x_aug), state,
                                           masks, want_cache)
            return RowsForward(y=res.y, state=res.state, hiddens=res.hiddens,
                               parts=[(0, None, rows, res, self.roots[0])],
                               agent_ids=agent_ids)

        y = np.empty((T, R, self.out_width))
        state_out = (np.empty((R, self.state_width))
                     if self.state_width else None)
        hiddens = [np.empty((T, R, w)) for w in self.topology.hidden_widths]
        parts = []
        for kind, idx, rows in parts_spec:
            if rows.size == 0:
                continue
            if kind == "agent":
                params = self.masked_params_for(idx)
                root_idx = self.root_of_agent(idx)
            else:
                params = self.roots[idx]
                root_idx = idx
            sub_x = np.ascontiguousarray(x_aug[:, rows, :])
            sub_state = None if state is None else np.ascontiguousarray(
                np.asarray(state, dtype=np.float64)[rows])
            masks = self.unit_masks_for_rows(agent_ids[rows])
            res = netcore.forward_sequence(params, self.topology, sub_x,
                                           sub_state, masks, want_cache)
            y[:, rows, :] = res.y
            if state_out is not None and res.state is not None:
                state_out[rows] = res.state
            for h_all, h_part in zip(hiddens, res.hiddens):
                h_all[:, rows, :] = h_part
            parts.append((root_idx, idx if kind == "agent" else None,
                          rows, res, params))
        return RowsForward(y=y, state=state_out, hiddens=hiddens,
                           parts=parts, agent_ids=agent_ids)

    def forward_rows(self, obs, agent_ids, state=None,
                     want_cache: bool = False) -> RowsForward:
        """Single-step version: ``obs`` is (R, obs_width); outputs drop the
        time axis."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 2:
            raise UsageError(f"expected (R, obs) input, got {obs.shape}")
        res = self.forward_rows_seq(obs[None], agent_ids, state, want_cache)
        res.y = res.y[0]
        res.hiddens = [h[0] for h in res.hiddens]
        return res

    def backward_rows(self, rows: RowsForward, dy, dstate=None) -> list[GradientStore]:
        """Backpropagate per-row output gradients; returns one summed
        GradientStore per root (gradients of sum over rows)."""
        dy = np.asarray(dy, dtype=np.float64)
        if dy.ndim == 2:
            dy = dy[None]
        full = len(rows.parts) == 1 and rows.parts[0][2].size == dy.shape[1]
        if full and len(self.roots) == 1 and not self.mode.uses_weight_masks:
            _, _, _, res, params = rows.parts[0]
            sub_dstate = None if dstate is None else np.ascontiguousarray(
                np.asarray(dstate, dtype=np.float64))
            g, _ = netcore.backward_sequence(params, self.topology, res.cache,
                                             np.ascontiguousarray(dy),
                                             sub_dstate)
            return [g]
        grads = [zeros_like_store(root) for root in self.roots]
        for root_idx, agent, rows_idx, res, params in rows.parts:
            sub_dy = np.ascontiguousarray(dy[:, rows_idx, :])
            sub_dstate = None if dstate is None else np.ascontiguousarray(
                np.asarray(dstate, dtype=np.float64)[rows_idx])
            g, _ = netcore.backward_sequence(params, self.topology, res.cache,
                                             sub_dy, sub_dstate)
            if agent is not None and self.mode.uses_weight_masks:
                # chain rule through theta * mask
                self.weight_masks[agent].mask_store(g)
            grads[root_idx].add_(g)
        return grads

    def agent_forward(self, agent: int, observation, state=None):
        """Forward one agent on one observation vector. Returns
        (output, new_state, hidden activations)."""
        obs = np.asarray(observation, dtype=np.float64)
        if obs.ndim != 1 or obs.shape[0] != self.obs_width:
            raise UsageError(
                f"observation must have shape ({self.obs_width},), got {obs.shape}")
        self.root_of_agent(agent)   # validates the id
        st = None
        if state is not None:
            st = np.asarray(state, dtype=np.float64).reshape(1, -1)
        res = self.forward_rows(obs[None], np.array([agent]), st)
        new_state = None if res.state is None else res.state[0]
        return res.y[0], new_state, [h[0] for h in res.hiddens]

    # -- spec-level aggregation and accounting --

    def accumulate_agent_gradients(self, per_agent: Sequence[GradientStore]
                                   ) -> list[GradientStore]:
        """Average per-agent gradients into the shared root(s): sum divided
        by the number of agents (by cluster size under Grouped). Positions
        masked for every agent stay exactly zero."""
        if len(per_agent) != self.n_agents:
            raise UsageError(f"expected {self.n_agents} gradient stores, "
                             f"got {len(per_agent)}")
        out = [zeros_like_store(root) for root in self.roots]
        members = [0] * len(self.roots)
        for agent, g in enumerate(per_agent):
            root = self.root_of_agent(agent)
            out[root].add_(g)
            members[root] += 1
        for g, m in zip(out, members):
            if m:
                g.scale_(1.0 / m)
        return out

    def parameter_count(self):
        """(total trainable parameter count, breakdown). Masks are not
        parameters, so masked modes count the same as plain sharing."""
        per_root = self.roots[0].n_params()
        total = per_root * len(self.roots)
        per_layer = [sum(arr.size for arr in layer.values())
                     for layer in self.roots[0].layers]
        breakdown = {
            "mode": self.mode.kind,
            "n_roots": len(self.roots),
            "per_root": per_root,
            "per_layer": per_layer,
            "one_hot_extra": (self.n_agents * self.topology.layers[0].out_width
                              if self.mode.uses_one_hot else 0),
        }
        return total, breakdown

    def dump_hidden_features(self, observations, agents=None) -> FeatureDump:
        """Post-activation hidden vectors per (agent, layer, observation)."""
        obs = np.asarray(observations, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None]
        if agents is None:
            agents = list(range(self.n_agents))
        records = []
        for obs_id, row in enumerate(obs):
            ids = np.asarray(agents, dtype=np.intp)
            res = self.forward_rows(np.repeat(row[None], len(ids), axis=0), ids)
            for layer, h in enumerate(res.hiddens):
                for k, agent in enumerate(ids):
                    records.append(FeatureRecord(int(agent), layer, obs_id,
                                                 h[k].copy()))
        return FeatureDump(records)

    # -- checkpointing: netcore format per root plus the mask file --

    def save(self, directory, meta: Optional[dict] = None):
        os.makedirs(directory, exist_ok=True)
        info = {
            "mode": self.mode.kind,
            "clusters": list(self.mode.clusters) if self.mode.clusters else None,
            "n_agents": self.n_agents,
            "schedule": str(self.schedule) if self.schedule else None,
            "n_roots": len(self.roots),
            "meta": meta or {},
        }
        with open(os.path.join(directory, "net.json"), "w") as f:
            json.dump(info, f, indent=1, sort_keys=True)
        for i, root in enumerate(self.roots):
            netcore.save_params(os.path.join(directory, f"root{i}.psnet"),
                                self.topology, root)
        # the base (unaugmented) topology is recoverable from net.json + roots
        with open(os.path.join(directory, "base_topology.json"), "w") as f:
            json.dump(netcore._topology_to_json(self.base_topology), f)
        if self.neuron_masks is not None:
            self.neuron_masks.save(os.path.join(directory, "masks.txt"))
        if self.weight_masks is not None:
            for a, wm in enumerate(self.weight_masks):
                netcore.save_params(
                    os.path.join(directory, f"wmask{a}.psnet"),
                    self.topology, ParameterStore(wm.layers))

    @classmethod
    def load(cls, directory) -> "SharedAgentNetwork":
        with open(os.path.join(directory, "net.json")) as f:
            info = json.load(f)
        with open(os.path.join(directory, "base_topology.json")) as f:
            base_topology = netcore._topology_from_json(json.load(f))
        mode = SharingMode(info["mode"],
                           tuple(info["clusters"]) if info["clusters"] else None)
        roots = []
        for i in range(info["n_roots"]):
            _, params, _ = netcore.load_params(
                os.path.join(directory, f"root{i}.psnet"))
            roots.append(params)
        neuron_masks = None
        weight_masks = None
        mask_path = os.path.join(directory, "masks.txt")
        if os.path.exists(mask_path):
            neuron_masks = NeuronMaskGroup.load(mask_path)
        if mode.uses_weight_masks:
            weight_masks = []
            for a in range(info["n_agents"]):
                _, params, _ = netcore.load_params(
                    os.path.join(directory, f"wmask{a}.psnet"))
                weight_masks.append(WeightMask(params.layers))
        schedule = (PruningSchedule.parse(info["schedule"])
                    if info["schedule"] else None)
        return cls(base_topology, info["n_agents"], mode, roots,
                   neuron_masks, weight_masks, schedule)


def load_meta(directory) -> dict:
    with open(os.path.join(directory, "net.json")) as f:
        return json.load(f).get("meta", {})
