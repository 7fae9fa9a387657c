"""Per-agent neuron masks: group tickets and their ablation variants.

A mask keeps or prunes whole units of each hidden feature vector. The main
generator draws one independent random mask per agent from a shared root
network (``generate_group_tickets``); the ablations draw per-weight random
masks (``generate_unstructured_masks``) or a single mask reused by every
agent (``generate_single_ticket``). Prune counts are exact:
``floor(ratio * width)`` units per layer, never stochastic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .netcore import NetworkTopology, ParameterStore, _layer_array_shapes


@dataclass(frozen=True)
class PruningSchedule:
    """Per-hidden-layer pruning ratios, written ``"0-0.1-0.9"``."""

    ratios: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        for r in self.ratios:
            if not (0.0 <= r < 1.0):
                raise ConfigError(f"pruning ratio {r} outside [0, 1)")

    @classmethod
    def parse(cls, text: str) -> "PruningSchedule":
        ratios = []
        for token in str(text).split("-"):
            token = token.strip()
            try:
                value = float(token)
            except ValueError:
                raise ConfigError(f"malformed pruning ratio token {token!r}") from None
            if not (0.0 <= value < 1.0):
                raise ConfigError(
                    f"pruning ratio token {token!r} outside [0, 1): "
                    "at least one neuron must survive each layer")
            ratios.append(value)
        return cls(tuple(ratios))

    @classmethod
    def zeros(cls, n: int) -> "PruningSchedule":
        return cls((0.0,) * n)

    def __str__(self) -> str:
        return "-".join(f"{r:g}" for r in self.ratios)

    def __len__(self) -> int:
        return len(self.ratios)

    @property
    def is_zero(self) -> bool:
        return all(r == 0.0 for r in self.ratios)

    def validate_for(self, topology: NetworkTopology):
        widths = topology.hidden_widths
        if len(self.ratios) != len(widths):
            raise ConfigError(
                f"schedule '{self}' has {len(self.ratios)} ratios but the "
                f"topology has {len(widths)} hidden layers")

    def prune_counts(self, topology: NetworkTopology) -> tuple[int, ...]:
        self.validate_for(topology)
        return tuple(int(np.floor(r * w))
                     for r, w in zip(self.ratios, topology.hidden_widths))

    def with_last_ratio(self, ratio: float) -> "PruningSchedule":
        if not self.ratios:
            raise UsageError("schedule has no entries")
        return PruningSchedule(self.ratios[:-1] + (float(ratio),))


class NeuronMask:
    """Binary keep vectors (1 = kept, 0 = pruned), one per hidden layer."""

    __slots__ = ("keep",)

    def __init__(self, keep: Sequence[np.ndarray]):
        self.keep = tuple(np.asarray(k, dtype=np.float64) for k in keep)
        for k in self.keep:
            if k.ndim != 1 or not np.isin(k, (0.0, 1.0)).all():
                raise UsageError("mask layers must be 1-d binary vectors")

    def pruned_counts(self) -> tuple[int, ...]:
        return tuple(int((k == 0).sum()) for k in self.keep)

    def kept_counts(self) -> tuple[int, ...]:
        return tuple(int(k.sum()) for k in self.keep)

    def same_as(self, other: "NeuronMask") -> bool:
        return (len(self.keep) == len(other.keep)
                and all(np.array_equal(a, b)
                        for a, b in zip(self.keep, other.keep)))


class NeuronMaskGroup:
    """One NeuronMask per agent, drawn from a common schedule and seed."""

    def __init__(self, masks: Sequence[NeuronMask], schedule: PruningSchedule,
                 seed: int, topology_hash: str):
        if not masks:
            raise UsageError("mask group must contain at least one mask")
        self.masks = list(masks)
        self.schedule = schedule
        self.seed = int(seed)
        self.topology_hash = topology_hash

    def __len__(self) -> int:
        return len(self.masks)

    def __getitem__(self, agent: int) -> NeuronMask:
        return self.masks[agent]

    def n_layers(self) -> int:
        return len(self.masks[0].keep)

    def stacked(self, layer: int) -> np.ndarray:
        """(n_agents, width) keep matrix for one hidden layer."""
        return np.stack([m.keep[layer] for m in self.masks])

    def all_identical(self) -> bool:
        return all(m.same_as(self.masks[0]) for m in self.masks[1:])

    # -- mask file format (see docs/FORMATS.md) --

    def save(self, path):
        lines = ["PSMASK1",
                 f"topology_hash {self.topology_hash}",
                 f"schedule {self.schedule}",
                 f"seed {self.seed}",
                 f"n_agents {len(self.masks)}"]
        for a, mask in enumerate(self.masks):
            for l, keep in enumerate(mask.keep):
                bits = "".join("1" if v else "0" for v in keep)
                lines.append(f"agent {a} layer {l} {bits}")
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, topology: Optional[NetworkTopology] = None):
        with open(path, "r", encoding="ascii") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
        if not lines or lines[0] != "PSMASK1":
            raise UsageError(f"{path}: not a mask file")
        header = {}
        body = []
        for ln in lines[1:]:
            if ln.startswith("agent "):
                body.append(ln)
            else:
                key, _, value = ln.partition(" ")
                header[key] = value
        schedule = PruningSchedule.parse(header["schedule"])
        n_agents = int(header["n_agents"])
        topo_hash = header["topology_hash"]
        if topology is not None and topology.topology_hash() != topo_hash:
            raise UsageError(
                f"{path}: mask file was generated for a different topology")
        per_agent: list[list[np.ndarray]] = [[] for _ in range(n_agents)]
        for ln in body:
            parts = ln.split()
            a, bits = int(parts[1]), parts[4]
            per_agent[a].append(np.array([1.0 if ch == "1" else 0.0
                                          for ch in bits]))
        masks = [NeuronMask(keeps) for keeps in per_agent]
        return cls(masks, schedule, int(header["seed"]), topo_hash)


class WeightMask:
    """Binary arrays shape-congruent with a ParameterStore (1 = kept)."""

    __slots__ = ("layers",)

    def __init__(self, layers: list[dict[str, np.ndarray]]):
        self.layers = layers

    @classmethod
    def ones(cls, topology: NetworkTopology) -> "WeightMask":
        return cls([{name: np.ones(shape)
                     for name, shape in _layer_array_shapes(spec).items()}
                    for spec in topology.layers])

    def apply(self, params: ParameterStore) -> ParameterStore:
        """Effective parameters: elementwise product with the mask."""
        if len(params.layers) != len(self.layers):
            raise UsageError("weight mask does not match parameter store")
        return ParameterStore([
            {name: arr * self.layers[i][name] for name, arr in layer.items()}
            for i, layer in enumerate(params.layers)])

    def mask_store(self, store) -> None:
        """In-place elementwise product, e.g. to mask a gradient store."""
        for i, layer in enumerate(store.layers):
            for name, arr in layer.items():
                arr *= self.layers[i][name]

    def zero_count(self) -> int:
        return sum(int((arr == 0).sum())
                   for layer in self.layers for arr in layer.values())


def _spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    # distinct substream per agent
    return [np.random.default_rng(s)
            for s in np.random.SeedSequence(int(seed)).spawn(n)]


def _draw_neuron_mask(topology: NetworkTopology, schedule: PruningSchedule,
                      rng: np.random.Generator) -> NeuronMask:
    keeps = []
    for ratio, width in zip(schedule.ratios, topology.hidden_widths):
        k = int(np.floor(ratio * width))
        keep = np.ones(width)
        if k > 0:
            pruned = rng.choice(width, size=k, replace=False)
            keep[pruned] = 0.0
        keeps.append(keep)
    return NeuronMask(keeps)


def generate_group_tickets(topology: NetworkTopology, schedule: PruningSchedule,
                           n_agents: int, seed: int) -> NeuronMaskGroup:
    """Draw one independent structured mask per agent (uniform over all
    unit subsets of the prescribed size per layer). Deterministic per seed;
    each agent consumes its own RNG substream."""
    if n_agents < 1:
        raise UsageError("n_agents must be >= 1")
    schedule.validate_for(topology)
    masks = [_draw_neuron_mask(topology, schedule, rng)
             for rng in _spawn_rngs(seed, n_agents)]
    return NeuronMaskGroup(masks, schedule, seed, topology.topology_hash())


def generate_single_ticket(topology: NetworkTopology, schedule: PruningSchedule,
                           n_agents: int, seed: int) -> NeuronMaskGroup:
    """One structured mask replicated for every agent (shared-subnetwork
    ablation: agents stay indistinguishable)."""
    if n_agents < 1:
        raise UsageError("n_agents must be >= 1")
    schedule.validate_for(topology)
    mask = _draw_neuron_mask(topology, schedule, _spawn_rngs(seed, 1)[0])
    return NeuronMaskGroup([mask] * n_agents, schedule, seed,
                           topology.topology_hash())


def generate_unstructured_masks(topology: NetworkTopology,
                                schedule: PruningSchedule, n_agents: int,
                                seed: int) -> list[WeightMask]:
    """Per-weight random masks at the same per-layer ratios (unstructured
    ablation): for each hidden layer, ``floor(ratio * weight_count)``
    individual weights are zeroed per agent; biases are untouched."""
    if n_agents < 1:
        raise UsageError("n_agents must be >= 1")
    schedule.validate_for(topology)
    out = []
    for rng in _spawn_rngs(seed, n_agents):
        wm = WeightMask.ones(topology)
        for li, ratio in enumerate(schedule.ratios):
            names = [n for n in wm.layers[li] if not n.startswith("b")]
            sizes = [wm.layers[li][n].size for n in names]
            total = int(sum(sizes))
            k = int(np.floor(ratio * total))
            if k == 0:
                continue
            picks = rng.choice(total, size=k, replace=False)
            offsets = np.cumsum([0] + sizes)
            for name, lo, hi in zip(names, offsets[:-1], offsets[1:]):
                local = picks[(picks >= lo) & (picks < hi)] - lo
                flat = wm.layers[li][name].reshape(-1)
                flat[local] = 0.0
        out.append(wm)
    return out


def expand_to_weight_mask(mask: NeuronMask, topology: NetworkTopology) -> WeightMask:
    """Expand unit keep vectors to full weight masks: a pruned unit zeroes
    its incoming weight row, its bias entry, and its outgoing column in the
    next layer; a pruned GRU unit is zeroed consistently across all three
    gates and both recurrent directions. Idempotent by construction."""
    widths = topology.hidden_widths
    if len(mask.keep) != len(widths):
        raise UsageError("mask does not match topology hidden layers")
    for keep, width in zip(mask.keep, widths):
        if keep.shape[0] != width:
            raise UsageError("mask layer width mismatch")
    n_layers = len(topology.layers)
    layers = []
    for i, spec in enumerate(topology.layers):
        keep_in = mask.keep[i - 1] if i > 0 else np.ones(spec.in_width)
        keep_out = mask.keep[i] if i < n_layers - 1 else np.ones(spec.out_width)
        arrays = {}
        if spec.kind == "dense":
            arrays["w"] = np.outer(keep_out, keep_in)
            arrays["b"] = keep_out.copy()
        else:
            for g in ("r", "z", "c"):
                arrays[f"w_{g}"] = np.outer(keep_out, keep_in)
                arrays[f"u_{g}"] = np.outer(keep_out, keep_out)
                arrays[f"b_{g}"] = keep_out.copy()
        layers.append(arrays)
    return WeightMask(layers)


@dataclass
class LayerOverlap:
    mean_shared: float        # mean pairwise count of jointly kept units
    min_shared: int
    max_shared: int
    owner_counts: np.ndarray  # per unit: how many agents keep it


def mask_overlap_stats(group: NeuronMaskGroup) -> list[LayerOverlap]:
    """Exact combinatorial sharing statistics per hidden layer."""
    stats = []
    n = len(group)
    for layer in range(group.n_layers()):
        kept = group.stacked(layer)
        owners = kept.sum(axis=0).astype(int)
        shared = (kept @ kept.T).astype(int)
        iu = np.triu_indices(n, k=1)
        pair_counts = shared[iu]
        if pair_counts.size:
            stats.append(LayerOverlap(float(pair_counts.mean()),
                                      int(pair_counts.min()),
                                      int(pair_counts.max()), owners))
        else:
            kept_count = int(kept[0].sum())
            stats.append(LayerOverlap(float(kept_count), kept_count,
                                      kept_count, owners))
    return stats
