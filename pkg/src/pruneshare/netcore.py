"""Minimal dense/GRU network primitives with exact analytic gradients.

Everything is float64 and sized for networks of a few hundred units. A
network is a :class:`NetworkTopology` (static description) plus a
:class:`ParameterStore` (the arrays); forward/backward are free functions
over the pair, so several agents can share one store. Hidden activations
can be multiplied by per-unit binary masks, which is how pruned subnetworks
are realized (see :mod:`pruneshare.sharednet`).

Sequence inputs are time-major ``(T, B, width)``; the recurrent state is a
plain ``(B, H)`` array (zeros when ``None``).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import kernels
from .errors import TrainingError, UsageError

ACTIVATIONS = ("identity", "relu", "tanh", "softmax")
LAYER_KINDS = ("dense", "gru")

# canonical array names per layer kind; serialization / traversal order
ARRAY_ORDER = {
    "dense": ("w", "b"),
    "gru": ("w_r", "w_z", "w_c", "u_r", "u_z", "u_c", "b_r", "b_z", "b_c"),
}

_ACT_CODE = {
    "identity": kernels.ACT_IDENTITY,
    "relu": kernels.ACT_RELU,
    "tanh": kernels.ACT_TANH,
    "softmax": kernels.ACT_SOFTMAX,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_width: int
    out_width: int
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.in_width < 1 or self.out_width < 1:
            raise UsageError("layer widths must be positive")
        if self.kind == "gru" and self.activation != "identity":
            raise UsageError("gru layers use their own gating; set activation='identity'")


@dataclass(frozen=True)
class NetworkTopology:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise UsageError("topology needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_width != b.in_width:
                raise UsageError(
                    f"layer widths do not chain: {a.out_width} -> {b.in_width}")
        if sum(1 for l in self.layers if l.kind == "gru") > 1:
            raise UsageError("at most one gru layer is supported")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        """Widths of the hidden feature vectors (outputs of all but the last
        layer); pruning schedules have exactly one ratio per entry."""
        return tuple(l.out_width for l in self.layers[:-1])

    @property
    def gru_index(self) -> Optional[int]:
        for i, l in enumerate(self.layers):
            if l.kind == "gru":
                return i
        return None

    @property
    def state_width(self) -> int:
        i = self.gru_index
        return 0 if i is None else self.layers[i].out_width

    def describe(self) -> str:
        return "|".join(f"{l.kind}:{l.in_width}x{l.out_width}:{l.activation}"
                        for l in self.layers)

    def topology_hash(self) -> str:
        return hashlib.sha256(self.describe().encode()).hexdigest()[:16]

    def widen_input(self, extra: int) -> "NetworkTopology":
        """New topology whose first layer accepts ``extra`` more inputs
        (used to append one-hot agent indication columns)."""
        first = self.layers[0]
        widened = LayerSpec(first.kind, first.in_width + extra,
                            first.out_width, first.activation)
        return NetworkTopology((widened,) + self.layers[1:])

    @staticmethod
    def mlp(in_width: int, hidden: Sequence[int], out_width: int,
            hidden_activation: str = "relu",
            out_activation: str = "identity") -> "NetworkTopology":
        widths = [in_width, *hidden, out_width]
        layers = []
        for i in range(len(widths) - 1):
            act = out_activation if i == len(widths) - 2 else hidden_activation
            layers.append(LayerSpec("dense", widths[i], widths[i + 1], act))
        return NetworkTopology(tuple(layers))

    @staticmethod
    def recurrent(in_width: int, hidden: int, out_width: int,
                  out_activation: str = "identity") -> "NetworkTopology":
        """dense -> gru -> dense, the standard recurrent utility layout."""
        return NetworkTopology((
            LayerSpec("dense", in_width, hidden, "relu"),
            LayerSpec("gru", hidden, hidden),
            LayerSpec("dense", hidden, out_width, out_activation),
        ))


def _layer_array_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "dense":
        return {"w": (spec.out_width, spec.in_width), "b": (spec.out_width,)}
    h, i = spec.out_width, spec.in_width
    shapes = {}
    for g in ("r", "z", "c"):
        shapes[f"w_{g}"] = (h, i)
        shapes[f"u_{g}"] = (h, h)
        shapes[f"b_{g}"] = (h,)
    return shapes


class ParameterStore:
    """Per-layer named float64 arrays matching a topology."""

    __slots__ = ("layers",)

    def __init__(self, layers: list[dict[str, np.ndarray]]):
        self.layers = layers

    def copy(self) -> "ParameterStore":
        return ParameterStore([{k: v.copy() for k, v in layer.items()}
                               for layer in self.layers])

    def arrays(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            kind = "gru" if "w_r" in layer else "dense"
            for name in ARRAY_ORDER[kind]:
                yield i, name, layer[name]

    def n_params(self) -> int:
        return sum(arr.size for _, _, arr in self.arrays())

    def all_finite(self) -> bool:
        return all(np.isfinite(np.vdot(arr, arr)) for _, _, arr in self.arrays())


class GradientStore(ParameterStore):
    """Same layout as its ParameterStore, plus an accumulation counter."""

    __slots__ = ("count",)

    def __init__(self, layers, count: int = 0):
        super().__init__(layers)
        self.count = count

    def copy(self) -> "GradientStore":
        return GradientStore([{k: v.copy() for k, v in layer.items()}
                              for layer in self.layers], self.count)

    def add_(self, other: "GradientStore") -> "GradientStore":
        _check_congruent(self, other)
        for (_, _, a), (_, _, b) in zip(self.arrays(), other.arrays()):
            a += b
        self.count += max(other.count, 1)
        return self

    def scale_(self, factor: float) -> "GradientStore":
        for _, _, a in self.arrays():
            a *= factor
        return self

    def sq_norm(self) -> float:
        return float(sum(np.vdot(a, a) for _, _, a in self.arrays()))


def zeros_like_store(params: ParameterStore) -> GradientStore:
    return GradientStore([{k: np.zeros_like(v) for k, v in layer.items()}
                          for layer in params.layers])


def _check_congruent(a: ParameterStore, b: ParameterStore):
    if len(a.layers) != len(b.layers):
        raise UsageError("stores have different layer counts")
    for la, lb in zip(a.layers, b.layers):
        if set(la) != set(lb):
            raise UsageError("stores have different array names")
        for k in la:
            if la[k].shape != lb[k].shape:
                raise UsageError(
                    f"array {k!r} shape mismatch: {la[k].shape} vs {lb[k].shape}")


def check_shapes(params: ParameterStore, topology: NetworkTopology):
    if len(params.layers) != len(topology.layers):
        raise UsageError("parameter store does not match topology layer count")
    for i, spec in enumerate(topology.layers):
        want = _layer_array_shapes(spec)
        have = params.layers[i]
        if set(want) != set(have):
            raise UsageError(f"layer {i} arrays {sorted(have)} != {sorted(want)}")
        for name, shape in want.items():
            if have[name].shape != shape:
                raise UsageError(
                    f"layer {i} array {name!r} has shape {have[name].shape}, "
                    f"expected {shape}")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_parameters(topology: NetworkTopology, seed) -> ParameterStore:
    """Fan-in scaled random init: weights are uniform with standard
    deviation 1/sqrt(fan_in) (bounds +-sqrt(3/fan_in)), biases zero.
    Deterministic for a fixed seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for spec in topology.layers:
        arrays = {}
        for name, shape in _layer_array_shapes(spec).items():
            if name.startswith("b"):
                arrays[name] = np.zeros(shape)
            else:
                fan_in = shape[1]
                bound = np.sqrt(3.0 / fan_in)
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        layers.append(arrays)
    return ParameterStore(layers)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    topology: NetworkTopology
    params: ParameterStore
    inputs: list            # per layer: (T, B, in_width)
    posts: list             # per layer: (T, B, out_width), mask already applied
    masks: list             # per layer: (B, width) float64 or None
    gru_internals: Optional[tuple] = None   # (r_seq, z_seq, c_seq, hprev_seq)
    shape: tuple = ()       # (T, B)


@dataclass
class SeqForward:
    y: np.ndarray                  # (T, B, out_width)
    state: Optional[np.ndarray]    # (B, H) or None
    hiddens: list                  # per hidden layer: (T, B, width)
    cache: Optional[ForwardCache] = None


def _as_f64(x, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise UsageError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def _norm_mask(mask, width: int, batch: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != width:
            raise UsageError(f"unit mask length {arr.shape[0]} != layer width {width}")
        return np.broadcast_to(arr, (batch, width))
    if arr.shape != (batch, width):
        raise UsageError(f"unit mask shape {arr.shape} != ({batch}, {width})")
    return arr


def forward_sequence(params: ParameterStore, topology: NetworkTopology,
                     x_seq, state=None, unit_masks=None,
                     want_cache: bool = False) -> SeqForward:
    """Run the network over a time-major batch ``(T, B, in_width)``.

    ``unit_masks`` is an optional per-layer sequence (length len(layers)-1)
    of binary keep vectors, each ``(width,)`` or ``(B, width)``, multiplied
    into that layer's post-activation output (and, for the GRU layer, into
    the recurrent state). ``None`` entries leave a layer unmasked.
    """
    check_shapes(params, topology)
    x = _as_f64(x_seq, "input sequence", 3)
    T, B, width = x.shape
    if width != topology.in_width:
        raise UsageError(f"input width {width} != topology input {topology.in_width}")
    n_layers = len(topology.layers)
    if unit_masks is not None and len(unit_masks) != n_layers - 1:
        raise UsageError(f"expected {n_layers - 1} unit masks, got {len(unit_masks)}")

    inputs, posts, masks = [], [], []
    gru_internals = None
    new_state = None
    cur = x
    for i, spec in enumerate(topology.layers):
        mask = None
        if unit_masks is not None and i < n_layers - 1:
            mask = _norm_mask(unit_masks[i], spec.out_width, B)
            if mask is not None and spec.activation == "softmax":
                raise UsageError("unit masks on softmax layers are not supported")
        inputs.append(cur)
        if spec.kind == "dense":
            flat = np.ascontiguousarray(cur.reshape(T * B, spec.in_width))
            post = kernels.dense_forward(flat, params.layers[i]["w"],
                                         params.layers[i]["b"],
                                         _ACT_CODE[spec.activation])
            post = post.reshape(T, B, spec.out_width)
            if mask is not None:
                post = post * mask[None, :, :]
        else:
            h0 = state
            if h0 is None:
                h0 = np.zeros((B, spec.out_width))
            else:
                h0 = _as_f64(h0, "recurrent state", 2)
                if h0.shape != (B, spec.out_width):
                    raise UsageError(
                        f"recurrent state shape {h0.shape} != ({B}, {spec.out_width})")
            m = mask if mask is not None else np.ones((B, spec.out_width))
            p = params.layers[i]
            post, r_seq, z_seq, c_seq, hprev_seq = kernels.gru_forward_seq(
                np.ascontiguousarray(cur), np.ascontiguousarray(h0),
                p["w_r"], p["w_z"], p["w_c"], p["u_r"], p["u_z"], p["u_c"],
                p["b_r"], p["b_z"], p["b_c"], np.ascontiguousarray(m))
            gru_internals = (r_seq, z_seq, c_seq, hprev_seq)
            new_state = post[-1]
        posts.append(post)
        masks.append(mask)
        cur = post

    hiddens = posts[:-1]
    cache = None
    if want_cache:
        cache = ForwardCache(topology, params, inputs, posts, masks,
                             gru_internals, (T, B))
    return SeqForward(y=posts[-1], state=new_state, hiddens=hiddens, cache=cache)


def forward(params: ParameterStore, topology: NetworkTopology, x,
            state=None, unit_masks=None):
    """Single-step forward. ``x`` is a vector ``(in_width,)`` or a batch of
    rows ``(B, in_width)``; returns (output, new_state, hidden activations)
    with matching dimensionality."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise UsageError(f"input must be 1- or 2-dimensional, got {arr.shape}")
    st = state
    if st is not None:
        st = np.asarray(st, dtype=np.float64)
        if st.ndim == 1:
            st = st[None, :]
    res = forward_sequence(params, topology, arr[None, :, :], st, unit_masks)
    y = res.y[0]
    hiddens = [h[0] for h in res.hiddens]
    new_state = res.state
    if single:
        y = y[0]
        hiddens = [h[0] for h in hiddens]
        new_state = None if new_state is None else new_state[0]
    return y, new_state, hiddens


def forward_cached(params, topology, x, state=None, unit_masks=None) -> SeqForward:
    """Batched single-step forward that keeps the cache for :func:`backward`.
    ``x`` is ``(B, in_width)``."""
    arr = _as_f64(x, "input", 2)
    st = None if state is None else _as_f64(state, "recurrent state", 2)
    return forward_sequence(params, topology, arr[None, :, :], st, unit_masks,
                            want_cache=True)


def backward_sequence(params: ParameterStore, topology: NetworkTopology,
                      cache: ForwardCache, dy_seq, dstate=None):
    """Exact gradients of a scalar loss given d(loss)/d(output sequence).

    Returns ``(GradientStore, dx_seq)``. ``dstate`` optionally adds a
    gradient on the final recurrent state.
    """
    if cache is None:
        raise UsageError("backward requires the cache from a forward pass")
    if cache.params is not params or cache.topology is not topology:
        raise UsageError("cache does not belong to these parameters/topology")
    T, B = cache.shape
    dy = _as_f64(dy_seq, "output gradient", 3)
    if dy.shape != (T, B, topology.out_width):
        raise UsageError(f"output gradient shape {dy.shape} != "
                         f"({T}, {B}, {topology.out_width})")

    grads = zeros_like_store(params)
    grads.count = 1
    cur = dy
    for i in range(len(topology.layers) - 1, -1, -1):
        spec = topology.layers[i]
        mask = cache.masks[i]
        if spec.kind == "dense":
            if mask is not None:
                cur = cur * mask[None, :, :]
            flat_in = np.ascontiguousarray(
                cache.inputs[i].reshape(T * B, spec.in_width))
            flat_post = np.ascontiguousarray(
                cache.posts[i].reshape(T * B, spec.out_width))
            flat_d = np.ascontiguousarray(cur.reshape(T * B, spec.out_width))
            dx, dw, db = kernels.dense_backward(flat_in, params.layers[i]["w"],
                                                flat_post,
                                                _ACT_CODE[spec.activation], flat_d)
            grads.layers[i]["w"] += dw
            grads.layers[i]["b"] += db
            cur = dx.reshape(T, B, spec.in_width)
        else:
            m = mask if mask is not None else np.ones((B, spec.out_width))
            r_seq, z_seq, c_seq, hprev_seq = cache.gru_internals
            dh_final = dstate if dstate is not None else np.zeros((B, spec.out_width))
            dh_final = np.ascontiguousarray(np.asarray(dh_final, dtype=np.float64))
            p = params.layers[i]
            out = kernels.gru_backward_seq(
                np.ascontiguousarray(cache.inputs[i]), r_seq, z_seq, c_seq,
                hprev_seq, p["w_r"], p["w_z"], p["w_c"],
                p["u_r"], p["u_z"], p["u_c"],
                np.ascontiguousarray(m), np.ascontiguousarray(cur), dh_final)
            dx_seq, _dh0 = out[0], out[1]
            g = grads.layers[i]
            for name, val in zip(("w_r", "w_z", "w_c", "u_r", "u_z", "u_c",
                                  "b_r", "b_z", "b_c"), out[2:]):
                g[name] += val
            cur = dx_seq
            dstate = None
    return grads, cur


def backward(params, topology, cache: ForwardCache, output_gradient):
    """Single-step counterpart of :func:`backward_sequence`; the gradient is
    ``(B, out_width)`` matching a :func:`forward_cached` call."""
    dy = _as_f64(output_gradient, "output gradient", 2)
    grads, dx = backward_sequence(params, topology, cache, dy[None, :, :])
    return grads, dx[0]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    algo: str = "rmsprop"        # "rmsprop" | "sgd"
    lr: float = 5e-4
    decay: float = 0.99
    eps: float = 1e-5
    clip_norm: float = 10.0      # 0 disables clipping

    def __post_init__(self):
        if self.algo not in ("rmsprop", "sgd"):
            raise UsageError(f"unknown optimizer {self.algo!r}")


class OptimizerState:
    def __init__(self, params: ParameterStore):
        self.v = zeros_like_store(params)
        self.steps = 0


def clip_gradients(grad_stores: Sequence[GradientStore], max_norm: float) -> float:
    """Scale a family of gradient stores so their joint global norm does not
    exceed ``max_norm``. Raises TrainingError on non-finite gradients.
    Returns the pre-clip norm."""
    total = sum(g.sq_norm() for g in grad_stores)
    if not np.isfinite(total):
        raise TrainingError("non-finite gradient encountered")
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grad_stores:
            g.scale_(factor)
    return norm


def apply_update(params: ParameterStore, grads: GradientStore,
                 opt_state: OptimizerState, config: OptimizerConfig) -> ParameterStore:
    """One optimizer step, in place. Non-finite gradients abort the run."""
    _check_congruent(params, grads)
    if not grads.all_finite():
        raise TrainingError("non-finite gradient encountered")
    for (_, _, p), (_, _, g), (_, _, v) in zip(params.arrays(), grads.arrays(),
                                               opt_state.v.arrays()):
        pf = p.reshape(-1)
        gf = np.ascontiguousarray(g.reshape(-1))
        if config.algo == "sgd":
            kernels.sgd_update(pf, gf, config.lr)
        else:
            kernels.rmsprop_update(pf, gf, v.reshape(-1), config.lr,
                                   config.decay, config.eps)
    opt_state.steps += 1
    return params


# ---------------------------------------------------------------------------
# checkpoint format (see docs/FORMATS.md)
# ---------------------------------------------------------------------------

_MAGIC = b"PSNET1\n"


def _topology_to_json(topology: NetworkTopology) -> list:
    return [{"kind": l.kind, "in": l.in_width, "out": l.out_width,
             "activation": l.activation} for l in topology.layers]


def _topology_from_json(spec_list) -> NetworkTopology:
    return NetworkTopology(tuple(
        LayerSpec(d["kind"], d["in"], d["out"], d["activation"])
        for d in spec_list))


def save_params(path, topology: NetworkTopology, params: ParameterStore,
                meta: Optional[dict] = None):
    """Write a parameter checkpoint: magic, length-prefixed JSON header,
    then each array as raw little-endian float64 in row-major order."""
    check_shapes(params, topology)
    records = [{"layer": i, "name": name, "shape": list(arr.shape)}
               for i, name, arr in params.arrays()]
    header = json.dumps({"topology": _topology_to_json(topology),
                         "meta": meta or {}, "arrays": records},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, _, arr in params.arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path):
    """Inverse of :func:`save_params`; returns (topology, params, meta)."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise UsageError(f"{path}: not a parameter checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        topology = _topology_from_json(header["topology"])
        layers: list[dict[str, np.ndarray]] = [{} for _ in topology.layers]
        for rec in header["arrays"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            arr = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            layers[rec["layer"]][rec["name"]] = arr
    params = ParameterStore(layers)
    check_shapes(params, topology)
    return topology, params, header.get("meta", {})
