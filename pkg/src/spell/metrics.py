"""Average precision, model evaluation, and the ablation / sweep harness."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, split_by_video
from .model import SpellModel, param_count
from .tensor_core import ValidationError
from .train import TrainConfig, predict, train


class UndefinedMetricError(ValidationError):
    pass


def _tie_rank(keys) -> np.ndarray:
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    rank = np.empty(len(keys), dtype=np.int64)
    rank[order] = np.arange(len(keys))
    return rank


def average_precision(scores, labels, keys=None) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks k of the positives.

    Scores are ranked descending; ties fall back to ``keys`` order (or input
    order when no keys are given).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValidationError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")
    tie = _tie_rank(keys) if keys is not None else np.arange(len(scores))
    order = np.lexsort((tie, -scores))
    hits = labels[order] == 1
    precision_at_k = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at_k[hits].sum() / n_pos)


@dataclass
class PredictionSet:
    keys: list[tuple[str, float, str]]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(set(self.keys)) != len(self.keys):
            raise ValidationError("prediction keys are not unique")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("prediction scores must be finite")

    def ap(self) -> float:
        return average_precision(self.scores, self.labels, self.keys)

    def per_video(self) -> dict[str, float]:
        """AP per video; videos without a positive are skipped."""
        groups: dict[str, list[int]] = {}
        for i, k in enumerate(self.keys):
            groups.setdefault(k[0], []).append(i)
        out = {}
        for vid in sorted(groups):
            idx = groups[vid]
            if np.any(self.labels[idx] == 1):
                out[vid] = average_precision(self.scores[idx], self.labels[idx],
                                             [self.keys[i] for i in idx])
        return out


@dataclass
class EvalResult:
    ap: float
    per_video: dict[str, float]
    predictions: PredictionSet


def evaluate(model: SpellModel, dataset: Dataset, config: TrainConfig) -> EvalResult:
    if not dataset.has_labels:
        raise ValidationError("evaluation dataset has unlabeled boxes")
    scores = predict(model, dataset, config)
    preds = PredictionSet([b.key for b in dataset.boxes], scores, dataset.labels)
    return EvalResult(preds.ap(), preds.per_video(), preds)


# -- harness --------------------------------------------------------------------

# Graph-module ablation rows (audio augmentation belongs to the feature encoder)
ABLATION_ROWS = {
    "no_graph": dict(use_graph=False, bidir=False, edge_dropout_p=0.0, use_spatial=False),
    "graph": dict(use_graph=True, bidir=False, edge_dropout_p=0.0, use_spatial=False),
    "graph+bidir": dict(use_graph=True, bidir=True, edge_dropout_p=0.0, use_spatial=False),
    "graph+bidir+drpt": dict(use_graph=True, bidir=True, use_spatial=False),
    "graph+bidir+drpt+spfeat": dict(use_graph=True, bidir=True, use_spatial=True),
}
MODALITY_ROWS = {
    "audio_only": dict(modality_mask="audio_only"),
    "video_only": dict(modality_mask="video_only"),
    "audio+video": dict(modality_mask="none"),
}


@dataclass
class AblationRow:
    name: str
    config: TrainConfig
    ap: float

    def flags(self) -> dict:
        c = self.config
        return {"graph": c.use_graph, "bidir": c.use_graph and c.bidir,
                "drpt": c.use_graph and c.edge_dropout_p > 0, "sp_feat": c.use_spatial,
                "modality": c.modality_mask}


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)

    def ap(self, name: str) -> float:
        return next(r.ap for r in self.rows if r.name == name)

    def to_records(self) -> list[dict]:
        return [{"row": r.name, **r.flags(), "ap": r.ap} for r in self.rows]


@dataclass
class SweepPoint:
    value: float
    ap: float
    edge_count: int
    param_count: int


def _train_eval(train_set, eval_set, config):
    model, _ = train(train_set, config)
    return evaluate(model, eval_set, config).ap


def _resolve_eval(dataset, eval_dataset):
    if eval_dataset is None:
        return split_by_video(dataset)
    return dataset, eval_dataset


def run_ablation(dataset: Dataset, base_config: TrainConfig, eval_dataset: Dataset | None = None,
                 rows=None, modality=True) -> AblationReport:
    """Train and evaluate each ablation row with the base config's seed.

    Without ``eval_dataset`` the videos are split in half for train/eval.
    """
    train_set, eval_set = _resolve_eval(dataset, eval_dataset)
    specs = {k: v for k, v in ABLATION_ROWS.items() if rows is None or k in rows}
    if modality:
        specs.update({k: v for k, v in MODALITY_ROWS.items() if rows is None or k in rows})
    report, done = AblationReport(), {}
    for name, overrides in specs.items():
        cfg = dataclasses.replace(base_config, **overrides)
        if cfg not in done:
            done[cfg] = _train_eval(train_set, eval_set, cfg)
        report.rows.append(AblationRow(name, cfg, done[cfg]))
    return report


def run_sweep(dataset: Dataset, base_config: TrainConfig, axis: str, values,
              eval_dataset: Dataset | None = None) -> list[SweepPoint]:
    if axis not in ("tau", "n", "filter_dim"):
        raise ValidationError(f"sweep axis must be tau, n or filter_dim, got {axis!r}")
    values = list(values)
    if not values:
        raise ValidationError("sweep needs at least one value")
    train_set, eval_set = _resolve_eval(dataset, eval_dataset)
    cast = float if axis == "tau" else int
    out = []
    for value in values:
        cfg = dataclasses.replace(base_config, **{axis: cast(value)})
        ap = _train_eval(train_set, eval_set, cfg)
        edges = sum(len(c.edge_sets["undirected"]) for c in eval_set.chunks(cfg.n, cfg.tau))
        out.append(SweepPoint(cast(value), ap, edges, param_count(cfg.model_config())))
    return out


def write_csv(records: list[dict], path) -> None:
    if not records:
        raise ValidationError("no rows to write")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")
