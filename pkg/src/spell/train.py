"""Adam + cosine-annealed training of the SPELL head on chunked graphs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import AUDIO, SPATIAL, VISUAL, Dataset
from .graph import VARIANTS, Chunk, edge_dropout, union_edge_sets
from .model import ModelConfig, NodeBatch, SpellModel, SpellParams, init_params
from .tensor_core import ValidationError, bce_loss

log = logging.getLogger(__name__)

MODALITY_MASKS = ("none", "video_only", "audio_only")


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 2e-4
    lr_min: float = 0.0
    t_max: int = 10
    # "restart": period t_max epochs; "single": one cosine over all epochs
    schedule: str = "restart"
    epochs: int = 120
    batch_size: int = 16
    tau: float = 0.9
    n: int = 2000
    edge_dropout_p: float = 0.2
    seed: int = 0
    use_graph: bool = True
    bidir: bool = True
    modality_mask: str = "none"
    use_spatial: bool = True
    filter_dim: int = 64
    edge_mlp_hidden: int | None = None
    inception_layer2: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr_max > self.lr_min >= 0:
            raise ValidationError(f"need lr_max > lr_min >= 0, got {self.lr_max}, {self.lr_min}")
        if self.t_max < 1 or self.batch_size < 1 or self.epochs < 0 or self.n < 1:
            raise ValidationError("t_max, batch_size and n must be >= 1; epochs >= 0")
        if self.tau < 0:
            raise ValidationError(f"tau must be >= 0, got {self.tau}")
        if not 0 <= self.edge_dropout_p < 1:
            raise ValidationError(f"edge_dropout_p must be in [0, 1), got {self.edge_dropout_p}")
        if self.modality_mask not in MODALITY_MASKS:
            raise ValidationError(f"modality_mask must be one of {MODALITY_MASKS}")
        if self.schedule not in ("restart", "single"):
            raise ValidationError(f"schedule must be 'restart' or 'single', got {self.schedule!r}")

    def model_config(self) -> ModelConfig:
        mode = "none" if not self.use_graph else ("bidir" if self.bidir else "undirected")
        return ModelConfig(filter_dim=self.filter_dim, use_spatial=self.use_spatial,
                           inception_layer2=self.inception_layer2,
                           edge_mlp_hidden=self.edge_mlp_hidden, graph_mode=mode)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    val_ap: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.losses)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    period = config.t_max if config.schedule == "restart" else max(config.epochs, 1)
    phase = (epoch % period) / period
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * phase))


def adam_step(params: SpellParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every tensor; gradients are zeroed after."""
    plist = params.parameters()
    for p in plist:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in tensor {p.name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p in plist:
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= step.astype(p.value.dtype, copy=False)
        p.zero_grad()


def apply_modality_mask(features: np.ndarray, mask: str) -> np.ndarray:
    if mask == "none":
        return features
    out = features.copy()
    if mask == "audio_only":
        out[:, VISUAL] = 0
        out[:, SPATIAL] = 0
    elif mask == "video_only":
        out[:, AUDIO] = 0
    else:
        raise ValidationError(f"unknown modality mask {mask!r}")
    return out


def make_batch(dataset: Dataset, chunks: list[Chunk], config: ModelConfig, mask="none"):
    """Disjoint union of chunks: stacked node rows plus offset edge sets."""
    rows = np.concatenate([c.feature_rows for c in chunks])
    feats = apply_modality_mask(dataset.features[rows], mask)
    labels = dataset.labels[rows]
    batch = NodeBatch.from_features(feats, labels if np.all(labels >= 0) else None, config)
    edges = {v: union_edge_sets([c.edge_sets[v] for c in chunks]) for v in VARIANTS}
    return batch, edges


def train(dataset: Dataset, config: TrainConfig, eval_dataset: Dataset | None = None,
          dtype=np.float32) -> tuple[SpellModel, TrainHistory]:
    if not dataset.has_labels:
        raise ValidationError("training dataset has unlabeled boxes")
    mcfg = config.model_config()
    rng = np.random.default_rng(config.seed)
    model = SpellModel(mcfg, init_params(mcfg, rng, dtype))
    adam = AdamState(config.beta1, config.beta2, config.adam_eps)
    chunks = dataset.chunks(config.n, config.tau)
    history = TrainHistory()
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        order = rng.permutation(len(chunks))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            group = [chunks[i] for i in order[start:start + config.batch_size]]
            batch, edges = make_batch(dataset, group, mcfg, config.modality_mask)
            if config.edge_dropout_p > 0:
                edges = {v: edge_dropout(es, config.edge_dropout_p, rng) for v, es in edges.items()}
            prob = model.forward(batch, edges, "train")
            loss, grad = bce_loss(prob, batch.labels.astype(prob.dtype))
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            model.backward(grad)
            adam_step(model.params, adam, lr)
            total += loss * len(batch)
            count += len(batch)
        history.losses.append(total / max(count, 1))
        history.lrs.append(lr)
        if eval_dataset is not None:
            from .metrics import evaluate

            history.val_ap.append(evaluate(model, eval_dataset, config).ap)
        log.debug("epoch %d lr %.3g loss %.5f", epoch, lr, history.losses[-1])
    return model, history


def predict(model: SpellModel, dataset: Dataset, config: TrainConfig) -> np.ndarray:
    """Eval-mode scores for every box, one forward pass per chunk."""
    scores = np.zeros(len(dataset), dtype=np.float64)
    for chunk in dataset.chunks(config.n, config.tau):
        batch, edges = make_batch(dataset, [chunk], model.config, config.modality_mask)
        scores[chunk.feature_rows] = model.forward(batch, edges, "eval")
    return scores

