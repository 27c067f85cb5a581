"""The SPELL head: feature fusion followed by three graph streams.

Layer names carry the row index of the reference architecture table::

    l04  spatial projection 4 -> 64
    l06  visual fusion (visual + projected spatial) -> F, BN, ReLU
    l07  audio fusion -> F, BN, ReLU
    l09..l11  per-stream EDGE-CONV (forward / undirected / backward), BN, ReLU
    l12  SAGE-CONV F -> F shared by all streams, BN, ReLU
    l15..l17  per-stream SAGE-CONV F -> 1

The per-stream scalars are summed and squashed by a sigmoid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import EdgeSet
from .tensor_core import (
    BatchNormState,
    DimensionError,
    ParamTensor,
    StateError,
    ValidationError,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
    sigmoid,
)

STREAM_INDEX = {"forward": (9, 15), "undirected": (10, 16), "backward": (11, 17)}
GRAPH_MODES = ("bidir", "undirected", "none")
FILTER_DIMS = (16, 32, 64, 128, 256)
INCEPTION_WIDTHS = (16, 32, 64)
CKPT_MAGIC = b"SPELLCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    visual_dim: int = 512
    audio_dim: int = 512
    spatial_dim: int = 4
    spatial_proj_dim: int = 64
    filter_dim: int = 64
    use_spatial: bool = True
    inception_layer2: bool = False
    # None tracks filter_dim
    edge_mlp_hidden: int | None = None
    graph_mode: str = "bidir"

    def __post_init__(self):
        for name in ("visual_dim", "audio_dim", "spatial_dim", "spatial_proj_dim", "filter_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.edge_mlp_hidden is not None and self.edge_mlp_hidden < 1:
            raise ValidationError(f"ModelConfig.edge_mlp_hidden must be >= 1, got {self.edge_mlp_hidden}")
        if self.graph_mode not in GRAPH_MODES:
            raise ValidationError(f"graph_mode must be one of {GRAPH_MODES}, got {self.graph_mode!r}")

    @property
    def hidden(self) -> int:
        return self.edge_mlp_hidden or self.filter_dim

    @property
    def streams(self) -> tuple[str, ...]:
        return {"bidir": ("forward", "undirected", "backward"),
                "undirected": ("undirected",),
                "none": ()}[self.graph_mode]


@dataclass
class NodeBatch:
    visual: np.ndarray
    audio: np.ndarray
    spatial: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.visual)

    @classmethod
    def from_features(cls, features: np.ndarray, labels=None, config: ModelConfig | None = None):
        """Split packed ``[visual | audio | spatial]`` rows."""
        cfg = config or ModelConfig()
        v, a, s = cfg.visual_dim, cfg.audio_dim, cfg.spatial_dim
        if features.shape[1] != v + a + s:
            raise DimensionError(f"feature width {features.shape[1]} != {v}+{a}+{s}")
        return cls(features[:, :v], features[:, v:v + a], features[:, v + a:], labels)


class SpellParams:
    """Named trainable tensors plus batch-norm states."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, ParamTensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def add_linear(self, name: str, fan_in: int, fan_out: int, rng, bias=True):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(self.dtype)
        self.tensors[f"{name}.w"] = ParamTensor(f"{name}.w", w)
        if bias:
            self.tensors[f"{name}.b"] = ParamTensor(f"{name}.b", np.zeros((1, fan_out), self.dtype))

    def add_bn(self, name: str, dim: int):
        state = BatchNormState.create(f"{name}.bn", dim, self.dtype)
        self.bn[name] = state
        self.tensors[state.gamma.name] = state.gamma
        self.tensors[state.beta.name] = state.beta

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list[ParamTensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def count(self) -> int:
        return sum(p.size for p in self.tensors.values())

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint needs, running statistics included."""
        out = {k: p.value for k, p in self.tensors.items()}
        for name, st in self.bn.items():
            out[f"{name}.bn.running_mean"] = st.running_mean
            out[f"{name}.bn.running_var"] = st.running_var
        return out

    def copy(self) -> "SpellParams":
        other = SpellParams(self.dtype)
        for k, p in self.tensors.items():
            other.tensors[k] = ParamTensor(k, p.value.copy())
        for name, st in self.bn.items():
            other.bn[name] = BatchNormState(
                other.tensors[st.gamma.name], other.tensors[st.beta.name],
                st.running_mean.copy(), st.running_var.copy(), st.momentum, st.eps)
        return other


def _stream_names(stream: str) -> tuple[str, str]:
    e, s = STREAM_INDEX[stream]
    return f"l{e:02d}_edge_{stream}", f"l{s:02d}_sage_{stream}"


def init_params(config: ModelConfig, rng_seed=0, dtype=np.float32) -> SpellParams:
    rng = np.random.default_rng(rng_seed)
    p = SpellParams(dtype)
    f, h = config.filter_dim, config.hidden
    visual_in = config.visual_dim
    if config.use_spatial:
        p.add_linear("l04_spatial", config.spatial_dim, config.spatial_proj_dim, rng)
        visual_in += config.spatial_proj_dim
    p.add_linear("l06_visual", visual_in, f, rng)
    p.add_bn("l06_visual", f)
    p.add_linear("l07_audio", config.audio_dim, f, rng)
    p.add_bn("l07_audio", f)
    if config.graph_mode == "none":
        p.add_linear("head", f, 1, rng)
        return p
    for stream in config.streams:
        edge, _ = _stream_names(stream)
        p.add_linear(f"{edge}.g1", 2 * f, h, rng)
        p.add_linear(f"{edge}.g2", h, f, rng)
        p.add_bn(edge, f)
    if config.inception_layer2:
        for k in INCEPTION_WIDTHS:
            p.add_linear(f"l12_inception.sage{k}", f, k, rng)
        p.add_linear("l12_inception.proj", sum(INCEPTION_WIDTHS) + f, f, rng)
    else:
        p.add_linear("l12_sage_shared", f, f, rng)
    p.add_bn("l12_sage_shared", f)
    for stream in config.streams:
        _, sage = _stream_names(stream)
        p.add_linear(sage, f, 1, rng)
    return p


def param_count(config: ModelConfig) -> int:
    """Number of trainable scalars (weights, biases, BN affine)."""
    return init_params(config, 0).count()


def config_from_params(params: SpellParams) -> ModelConfig:
    """Recover the architecture flags from tensor names and shapes."""
    t = params.tensors
    f = t["l07_audio.w"].shape[1]
    use_spatial = "l04_spatial.w" in t
    spatial_proj = t["l04_spatial.w"].shape[1] if use_spatial else 64
    visual_dim = t["l06_visual.w"].shape[0] - (spatial_proj if use_spatial else 0)
    if "head.w" in t:
        mode, hidden = "none", None
    else:
        streams = [s for s in STREAM_INDEX if f"{_stream_names(s)[0]}.g1.w" in t]
        mode = "bidir" if len(streams) == 3 else "undirected"
        hidden = t[f"{_stream_names(streams[0])[0]}.g1.w"].shape[1]
    return ModelConfig(
        visual_dim=visual_dim, audio_dim=t["l07_audio.w"].shape[0],
        spatial_dim=t["l04_spatial.w"].shape[0] if use_spatial else 4,
        spatial_proj_dim=spatial_proj, filter_dim=f, use_spatial=use_spatial,
        inception_layer2="l12_inception.proj.w" in t,
        edge_mlp_hidden=None if hidden in (None, f) else hidden, graph_mode=mode)


# -- aggregation --------------------------------------------------------------

class Adjacency:
    """Index helpers for summing per-edge values into destination or source nodes."""

    def __init__(self, edge_set: EdgeSet, num_nodes: int | None = None):
        n = edge_set.num_nodes if num_nodes is None else num_nodes
        e = edge_set.edges
        if len(e) and (e.min() < 0 or e.max() >= n):
            raise DimensionError(
                f"edge endpoint out of range for {n} nodes (max index {int(e.max())})")
        self.n = n
        self.src = e[:, 0]
        self.dst = e[:, 1]
        if len(e) and np.any(np.diff(self.dst) < 0):
            order = np.lexsort((self.src, self.dst))
            self.src, self.dst = self.src[order], self.dst[order]
        self.dst_starts = _segment_starts(self.dst)
        self.src_perm = np.argsort(self.src, kind="stable")
        self.src_starts = _segment_starts(self.src[self.src_perm])
        self.in_degree = np.bincount(self.dst, minlength=n)

    def sum_to_dst(self, values: np.ndarray) -> np.ndarray:
        return _segment_sum(values, self.dst, self.dst_starts, self.n)

    def sum_to_src(self, values: np.ndarray) -> np.ndarray:
        return _segment_sum(values[self.src_perm], self.src[self.src_perm], self.src_starts, self.n)


def _segment_starts(seg: np.ndarray) -> np.ndarray:
    if len(seg) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])


def _segment_sum(values, seg, starts, n):
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    if len(starts):
        out[seg[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def edge_conv_forward(x: np.ndarray, adj: Adjacency, params: SpellParams, name: str):
    """Sum over in-neighbours ``w`` of ``g([x_v, x_w])`` with a two-layer MLP ``g``.

    The first layer of ``g`` is split into the halves acting on ``x_v`` and
    ``x_w`` so it runs per node, not per edge. Returns pre-normalisation output.
    """
    w1, b1 = params[f"{name}.g1.w"], params[f"{name}.g1.b"]
    w2, b2 = params[f"{name}.g2.w"], params[f"{name}.g2.b"]
    d = x.shape[1]
    if w1.shape[0] != 2 * d:
        raise DimensionError(f"{name}: input shape {x.shape} vs g1 weight {w1.shape}")
    own = x @ w1.value[:d]
    other = x @ w1.value[d:]
    pre = own[adj.dst] + other[adj.src] + b1.value
    hid = relu(pre)
    agg = adj.sum_to_dst(hid)
    deg = adj.in_degree[:, None].astype(x.dtype)
    out = agg @ w2.value + deg * b2.value
    return out, (x, adj, pre, agg, deg, w1, b1, w2, b2)


def edge_conv_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    x, adj, pre, agg, deg, w1, b1, w2, b2 = cache
    d = x.shape[1]
    w2.grad += agg.T @ grad_out
    b2.grad += (deg * grad_out).sum(axis=0, keepdims=True)
    g_agg = grad_out @ w2.value.T
    g_pre = relu_backward(g_agg[adj.dst], pre)
    b1.grad += g_pre.sum(axis=0, keepdims=True)
    g_own = adj.sum_to_dst(g_pre)
    g_other = adj.sum_to_src(g_pre)
    w1.grad[:d] += x.T @ g_own
    w1.grad[d:] += x.T @ g_other
    return g_own @ w1.value[:d].T + g_other @ w1.value[d:].T


def sage_conv_forward(x: np.ndarray, adj: Adjacency, params: SpellParams, name: str):
    """``out[v] = M . sum_{w in N(v)} x_w + b`` (pre-activation).

    Narrowing layers apply ``M`` before aggregating so the per-edge work runs
    on the smaller width; the result is the same sum.
    """
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    if w.shape[1] < w.shape[0]:
        y, lin_cache = linear_forward(x, w, None)
        out = adj.sum_to_dst(y[adj.src]) + b.value
        return out, ("transform_first", adj, lin_cache, b)
    agg = adj.sum_to_dst(x[adj.src])
    out, lin_cache = linear_forward(agg, w, b)
    return out, ("aggregate_first", adj, lin_cache, None)


def sage_conv_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    order, adj, lin_cache, b = cache
    if order == "transform_first":
        b.grad += grad_out.sum(axis=0, keepdims=True)
        return linear_backward(adj.sum_to_src(grad_out[adj.dst]), lin_cache)
    g_agg = linear_backward(grad_out, lin_cache)
    return adj.sum_to_src(g_agg[adj.dst])


def maxpool_forward(x: np.ndarray, adj: Adjacency):
    """Per-feature max over in-neighbours; every node needs an in-edge (self-loop)."""
    if np.any(adj.in_degree == 0):
        raise ValidationError("maxpool requires every node to have an in-edge")
    gathered = x[adj.src]
    out = np.maximum.reduceat(gathered, adj.dst_starts, axis=0)
    return out, (x, adj, gathered, out)


def maxpool_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    x, adj, gathered, out = cache
    n_edges = len(adj.src)
    # first arg-max edge per (node, feature)
    hit = gathered == out[adj.dst]
    rank = np.where(hit, n_edges - np.arange(n_edges)[:, None], 0)
    first = n_edges - np.maximum.reduceat(rank, adj.dst_starts, axis=0)
    grad_x = np.zeros_like(x)
    cols = np.broadcast_to(np.arange(x.shape[1]), first.shape)
    np.add.at(grad_x, (adj.src[first], cols), grad_out)
    return grad_x


# -- full model ---------------------------------------------------------------

def _dense_bn_relu(x, params, name, mode, bias=True):
    z, lin = linear_forward(x, params[f"{name}.w"], params[f"{name}.b"] if bias else None)
    y, bn = batchnorm_forward(z, params.bn[name], mode)
    return relu(y), (lin, bn, y)


def _dense_bn_relu_backward(grad, cache):
    lin, bn, y = cache
    return linear_backward(batchnorm_backward(relu_backward(grad, y), bn), lin)


class SpellModel:
    """Forward/backward driver holding the per-call cache."""

    def __init__(self, config: ModelConfig, params: SpellParams):
        self.config = config
        self.params = params
        self._cache = None

    @classmethod
    def create(cls, config: ModelConfig, seed=0, dtype=np.float32) -> "SpellModel":
        return cls(config, init_params(config, seed, dtype))

    # fusion -----------------------------------------------------------------
    def fuse_features(self, batch: NodeBatch, mode: str = "eval"):
        cfg, p = self.config, self.params
        dt = p.dtype
        visual = np.asarray(batch.visual, dtype=dt)
        audio = np.asarray(batch.audio, dtype=dt)
        if visual.shape[1] != cfg.visual_dim or audio.shape[1] != cfg.audio_dim:
            raise DimensionError(
                f"batch widths visual={visual.shape[1]} audio={audio.shape[1]}, "
                f"config expects {cfg.visual_dim}/{cfg.audio_dim}")
        cache = {}
        if cfg.use_spatial:
            spatial = np.asarray(batch.spatial, dtype=dt)
            if spatial.shape[1] != cfg.spatial_dim:
                raise DimensionError(f"spatial width {spatial.shape[1]} != {cfg.spatial_dim}")
            sp, cache["spatial"] = linear_forward(spatial, p["l04_spatial.w"], p["l04_spatial.b"])
            visual = np.concatenate([visual, sp], axis=1)
        hv, cache["visual"] = _dense_bn_relu(visual, p, "l06_visual", mode)
        ha, cache["audio"] = _dense_bn_relu(audio, p, "l07_audio", mode)
        return hv + ha, cache

    def _fuse_backward(self, grad, cache):
        g_visual = _dense_bn_relu_backward(grad, cache["visual"])
        _dense_bn_relu_backward(grad, cache["audio"])
        if "spatial" in cache:
            linear_backward(g_visual[:, self.config.visual_dim:], cache["spatial"])

    # layer 2 ----------------------------------------------------------------
    def _layer2(self, x, adj, mode):
        p = self.params
        if not self.config.inception_layer2:
            z, conv = sage_conv_forward(x, adj, p, "l12_sage_shared")
            y, bn = batchnorm_forward(z, p.bn["l12_sage_shared"], mode)
            return relu(y), ("sage", conv, bn, y)
        branches, caches = [], []
        for k in INCEPTION_WIDTHS:
            z, c = sage_conv_forward(x, adj, p, f"l12_inception.sage{k}")
            branches.append(z)
            caches.append(c)
        pooled, pool_cache = maxpool_forward(x, adj)
        cat = np.concatenate(branches + [pooled], axis=1)
        z, proj = linear_forward(cat, p["l12_inception.proj.w"], p["l12_inception.proj.b"])
        y, bn = batchnorm_forward(z, p.bn["l12_sage_shared"], mode)
        return relu(y), ("inception", (caches, pool_cache, proj), bn, y)

    def _layer2_backward(self, grad, cache):
        kind, conv, bn, y = cache
        g = batchnorm_backward(relu_backward(grad, y), bn)
        if kind == "sage":
            return sage_conv_backward(g, conv)
        caches, pool_cache, proj = conv
        g_cat = linear_backward(g, proj)
        gx, col = 0, 0
        for k, c in zip(INCEPTION_WIDTHS, caches):
            gx = gx + sage_conv_backward(g_cat[:, col:col + k], c)
            col += k
        return gx + maxpool_backward(g_cat[:, col:], pool_cache)

    def inception_layer2(self, x, edge_set: EdgeSet, mode="eval"):
        if not self.config.inception_layer2:
            raise ValidationError("model was built without the inception layer-2 variant")
        return self._layer2(np.asarray(x, self.params.dtype), Adjacency(edge_set, len(x)), mode)[0]

    # streams ----------------------------------------------------------------
    def _stream(self, fused, adj, stream, mode):
        p = self.params
        edge, sage = _stream_names(stream)
        z1, c1 = edge_conv_forward(fused, adj, p, edge)
        y1, bn1 = batchnorm_forward(z1, p.bn[edge], mode)
        h1 = relu(y1)
        h2, c2 = self._layer2(h1, adj, mode)
        score, c3 = sage_conv_forward(h2, adj, p, sage)
        return score[:, 0], (c1, bn1, y1, c2, c3)

    def _stream_backward(self, grad_score, cache):
        c1, bn1, y1, c2, c3 = cache
        g = sage_conv_backward(grad_score[:, None], c3)
        g = self._layer2_backward(g, c2)
        g = batchnorm_backward(relu_backward(g, y1), bn1)
        return edge_conv_backward(g, c1)

    def logits(self, batch: NodeBatch, edge_sets: dict[str, EdgeSet] | None, mode="eval"):
        fused, fuse_cache = self.fuse_features(batch, mode)
        n = len(fused)
        if self.config.graph_mode == "none":
            z, head = linear_forward(fused, self.params["head.w"], self.params["head.b"])
            return z[:, 0], {"fuse": fuse_cache, "head": head, "streams": {}}
        if edge_sets is None:
            raise ValidationError("graph model needs edge sets")
        total = np.zeros(n, dtype=fused.dtype)
        streams = {}
        for stream in self.config.streams:
            es = edge_sets[stream]
            if es.num_nodes != n:
                raise DimensionError(f"{stream} graph has {es.num_nodes} nodes, batch has {n}")
            score, streams[stream] = self._stream(fused, Adjacency(es, n), stream, mode)
            total = total + score
        return total, {"fuse": fuse_cache, "streams": streams}

    def forward(self, batch: NodeBatch, edge_sets: dict[str, EdgeSet] | None, mode="eval"):
        """Node speaking probabilities. Train mode keeps a cache for ``backward``."""
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        z, cache = self.logits(batch, edge_sets, mode)
        prob = sigmoid(z)
        self._cache = (cache, prob) if mode == "train" else None
        return prob

    def backward(self, grad_prob: np.ndarray, streams=None):
        """Accumulate parameter gradients; ``streams`` limits which streams propagate."""
        if self._cache is None:
            raise StateError("backward needs a fresh train-mode forward pass")
        cache, prob = self._cache
        self._cache = None
        g_logit = np.asarray(grad_prob, dtype=prob.dtype) * prob * (1 - prob)
        if self.config.graph_mode == "none":
            g_fused = linear_backward(g_logit[:, None], cache["head"])
        else:
            g_fused = 0
            active = self.config.streams if streams is None else streams
            for stream in active:
                g_fused = g_fused + self._stream_backward(g_logit, cache["streams"][stream])
            if isinstance(g_fused, int):
                return
        self._fuse_backward(g_fused, cache["fuse"])


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: SpellParams, path) -> None:
    arrays = params.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValidationError(f"{path}: bad checkpoint magic at offset 0")
    pos, out = len(CKPT_MAGIC), {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise ValidationError(f"{path}: tensor {name!r} truncated at offset {pos}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise ValidationError(f"{path}: truncated record at offset {pos}") from exc
    return out


def load_checkpoint(path, dtype=np.float32) -> SpellModel:
    arrays = read_checkpoint_arrays(path)
    params = SpellParams(dtype)
    bn_names = sorted({k[:-len(".bn.gamma")] for k in arrays if k.endswith(".bn.gamma")})
    for k, v in arrays.items():
        if ".bn.running_" not in k:
            params.tensors[k] = ParamTensor(k, v.astype(dtype))
    for name in bn_names:
        params.bn[name] = BatchNormState(
            params.tensors[f"{name}.bn.gamma"], params.tensors[f"{name}.bn.beta"],
            arrays[f"{name}.bn.running_mean"].astype(dtype),
            arrays[f"{name}.bn.running_var"].astype(dtype))
    config = config_from_params(params)
    expected = init_params(config, 0, dtype)
    if sorted(expected.tensors) != sorted(params.tensors):
        raise ValidationError(f"{path}: tensor names do not match a known architecture")
    for k, p in expected.tensors.items():
        if p.shape != params.tensors[k].shape:
            raise ValidationError(f"{path}: tensor {k} has shape {params.tensors[k].shape}, "
                                  f"expected {p.shape}")
    return SpellModel(config, params)

