"""Track CSVs, the binary feature store, and the joined in-memory dataset.

Track file columns: ``video_id,time,cx,cy,w,h,entity_id,label`` (label may be
empty). AVA's three-way annotations must be collapsed to 0/1 before they get
here.

Feature store: ``SPELLFEAT1``, u32 record count, u32 width, then row-major
little-endian float32. A companion ``<store>.index.csv`` maps
``video_id,time,entity_id`` keys to rows.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .graph import Chunk, FaceBox, build_chunk_graphs, order_and_chunk
from .tensor_core import ValidationError

TRACK_HEADER = ["video_id", "time", "cx", "cy", "w", "h", "entity_id", "label"]
INDEX_HEADER = ["video_id", "time", "entity_id", "row"]
PREDICTION_HEADER = ["video_id", "time", "entity_id", "score"]
FEAT_MAGIC = b"SPELLFEAT1"
FEATURE_WIDTH = 1028
VISUAL = slice(0, 512)
AUDIO = slice(512, 1024)
SPATIAL = slice(1024, 1028)


class DataFormatError(ValidationError):
    pass


def fmt_float(x: float) -> str:
    return repr(float(x))


def index_path_for(features_path) -> Path:
    return Path(str(features_path) + ".index.csv")


@dataclass
class Dataset:
    """Face boxes joined with their feature rows; ``boxes[i]`` owns ``features[i]``."""

    boxes: list[FaceBox]
    features: np.ndarray
    _chunk_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.boxes) != len(self.features):
            raise ValidationError(f"{len(self.boxes)} boxes but {len(self.features)} feature rows")
        for i, b in enumerate(self.boxes):
            if b.feature_index != i:
                self.boxes[i] = FaceBox(b.video_id, b.time, b.entity_id, b.box, b.label, i)

    def __len__(self):
        return len(self.boxes)

    @property
    def has_labels(self) -> bool:
        return bool(self.boxes) and all(b.label is not None for b in self.boxes)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([-1 if b.label is None else b.label for b in self.boxes], dtype=np.int64)

    def video_ids(self) -> list[str]:
        return sorted({b.video_id for b in self.boxes})

    def by_video(self) -> dict[str, list[FaceBox]]:
        out: dict[str, list[FaceBox]] = {}
        for b in self.boxes:
            out.setdefault(b.video_id, []).append(b)
        return {k: out[k] for k in sorted(out)}

    def subset(self, video_ids) -> "Dataset":
        keep = set(video_ids)
        rows = [i for i, b in enumerate(self.boxes) if b.video_id in keep]
        return Dataset([self.boxes[i] for i in rows], self.features[rows])

    def chunks(self, n: int, tau: float) -> list[Chunk]:
        """Chunked graphs per video, in video-id order. Cached per ``(n, tau)``."""
        key = (n, float(tau))
        if key not in self._chunk_cache:
            out = []
            for boxes in self.by_video().values():
                out.extend(build_chunk_graphs(c, tau) for c in order_and_chunk(boxes, n))
            self._chunk_cache[key] = out
        return self._chunk_cache[key]


def split_by_video(dataset: Dataset, eval_fraction=0.5) -> tuple[Dataset, Dataset]:
    """Deterministic split: every k-th video (by sorted id) goes to evaluation."""
    vids = dataset.video_ids()
    n_eval = max(1, int(round(len(vids) * eval_fraction)))
    step = len(vids) / n_eval
    eval_ids = {vids[int(i * step)] for i in range(n_eval)}
    return dataset.subset([v for v in vids if v not in eval_ids]), dataset.subset(eval_ids)


# -- track files --------------------------------------------------------------

def _parse_float(value: str, path, line: int, name: str, lo=None, hi=None) -> float:
    try:
        x = float(value)
    except ValueError:
        raise DataFormatError(f"{path}:{line}: field {name!r}: not a number: {value!r}") from None
    if not np.isfinite(x):
        raise DataFormatError(f"{path}:{line}: field {name!r}: non-finite value {value!r}")
    if (lo is not None and x < lo) or (hi is not None and x > hi):
        raise DataFormatError(f"{path}:{line}: field {name!r}: {x} outside [{lo}, {hi}]")
    return x


def read_tracks(path) -> list[FaceBox]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != TRACK_HEADER:
        raise DataFormatError(f"{path}:1: header {header} != {TRACK_HEADER}")
    boxes, seen = [], set()
    for line, row in enumerate(reader, start=2):
        if len(row) != len(TRACK_HEADER):
            raise DataFormatError(f"{path}:{line}: expected {len(TRACK_HEADER)} fields, got {len(row)}")
        video_id, t, cx, cy, w, h, entity, label = row
        time = _parse_float(t, path, line, "time", lo=0)
        box = tuple(_parse_float(v, path, line, k, 0, 1) for k, v in zip("cx cy w h".split(), (cx, cy, w, h)))
        if box[2] <= 0 or box[3] <= 0:
            raise DataFormatError(f"{path}:{line}: field 'w'/'h': box must have positive size")
        if label == "":
            lab = None
        elif label in ("0", "1"):
            lab = int(label)
        else:
            raise DataFormatError(f"{path}:{line}: field 'label': expected 0, 1 or empty, got {label!r}")
        key = (video_id, time, entity)
        if key in seen:
            raise DataFormatError(f"{path}:{line}: duplicate key {key}")
        seen.add(key)
        boxes.append(FaceBox(video_id, time, entity, box, lab))
    return boxes


def write_tracks(boxes: list[FaceBox], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACK_HEADER)
    for b in boxes:
        w.writerow([b.video_id, fmt_float(b.time), *map(fmt_float, b.box), b.entity_id,
                    "" if b.label is None else str(b.label)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


# -- feature store ------------------------------------------------------------

def write_feature_store(features: np.ndarray, keys: list[tuple[str, float, str]], path) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2 or len(keys) != len(features):
        raise ValidationError(f"feature matrix {features.shape} vs {len(keys)} keys")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<II", *features.shape))
        fh.write(features.tobytes())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INDEX_HEADER)
    for row, (video_id, time, entity) in enumerate(keys):
        w.writerow([video_id, fmt_float(time), entity, row])
    index_path_for(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_feature_store(path) -> tuple[np.ndarray, dict[tuple[str, float, str], int]]:
    data = Path(path).read_bytes()
    head = len(FEAT_MAGIC) + 8
    if not data.startswith(FEAT_MAGIC):
        raise DataFormatError(f"{path}: offset 0: bad magic")
    if len(data) < head:
        raise DataFormatError(f"{path}: offset {len(FEAT_MAGIC)}: truncated header")
    n, d = struct.unpack_from("<II", data, len(FEAT_MAGIC))
    if len(data) != head + 4 * n * d:
        raise DataFormatError(f"{path}: length {len(data)} does not match header "
                              f"({n} x {d} floats needs {head + 4 * n * d} bytes)")
    feats = np.frombuffer(data, dtype="<f4", offset=head).reshape(n, d).astype(np.float32)
    ipath = index_path_for(path)
    reader = csv.reader(io.StringIO(ipath.read_text(encoding="utf-8")))
    header = next(reader, None)
    if header != INDEX_HEADER:
        raise DataFormatError(f"{ipath}:1: header {header} != {INDEX_HEADER}")
    index = {}
    for line, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise DataFormatError(f"{ipath}:{line}: expected 4 fields, got {len(row)}")
        time = _parse_float(row[1], ipath, line, "time", lo=0)
        try:
            r = int(row[3])
        except ValueError:
            raise DataFormatError(f"{ipath}:{line}: field 'row': not an integer: {row[3]!r}") from None
        if not 0 <= r < n:
            raise DataFormatError(f"{ipath}:{line}: field 'row': {r} outside [0, {n})")
        index[(row[0], time, row[2])] = r
    return feats, index


def load_dataset(tracks_path, features_path) -> Dataset:
    boxes = read_tracks(tracks_path)
    feats, index = read_feature_store(features_path)
    if feats.shape[1] != FEATURE_WIDTH:
        raise DataFormatError(f"{features_path}: feature width {feats.shape[1]} != {FEATURE_WIDTH}")
    rows = []
    for line, b in enumerate(boxes, start=2):
        r = index.get(b.key)
        if r is None:
            raise DataFormatError(f"{tracks_path}:{line}: no feature row for key {b.key}")
        rows.append(r)
    return Dataset(boxes, feats[rows])


def save_dataset(dataset: Dataset, tracks_path, features_path) -> None:
    write_tracks(dataset.boxes, tracks_path)
    write_feature_store(dataset.features, [b.key for b in dataset.boxes], features_path)


# -- predictions ----------------------------------------------------------------

def write_predictions(keys, scores, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for (video_id, time, entity), s in zip(keys, scores):
        w.writerow([video_id, fmt_float(time), entity, fmt_float(s)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_predictions(path) -> dict[tuple[str, float, str], float]:
    reader = csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8")))
    header = next(reader, None)
    if header != PREDICTION_HEADER:
        raise DataFormatError(f"{path}:1: header {header} != {PREDICTION_HEADER}")
    out = {}
    for line, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise DataFormatError(f"{path}:{line}: expected 4 fields, got {len(row)}")
        time = _parse_float(row[1], path, line, "time", lo=0)
        out[(row[0], time, row[2])] = _parse_float(row[3], path, line, "score", 0, 1)
    return out
