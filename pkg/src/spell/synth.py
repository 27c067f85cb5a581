"""Synthetic turn-taking conversations standing in for encoder features.

Each video shows ``identities`` faces in every frame. A turn process assigns
the speaker; visual and audio features carry the label along a fixed random
direction plus noise on that axis and in a fixed low-rank nuisance subspace.
Audio is treated as a face-conditioned embedding, so it is per node.

``separable`` mode uses high SNR and allows silent turns. The ``contextual``
preset lowers the SNR, adds a per-frame common-mode offset, and lags the
evidence behind the label, so a single node is ambiguous but its track
(especially the frames after it) and its frame-mates are not. Every frame has
exactly one speaker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FEATURE_WIDTH, Dataset
from .graph import FaceBox
from .tensor_core import ValidationError


@dataclass(frozen=True)
class SyntheticSpec:
    mode: str = "separable"
    n_videos: int = 16
    identities: int = 3
    duration: float = 20.0
    fps: float = 5.0
    mean_turn: float = 2.0
    min_turn: float = 0.6
    silence_prob: float = 0.0
    visual_snr: float = 4.0
    audio_snr: float = 4.0
    frame_noise: float = 0.0
    # features reflect the speaker this many seconds earlier (trailing encoder window)
    evidence_lag: float = 0.0
    # off-axis nuisance variation lives in a fixed subspace of this rank;
    # the on-axis noise always has unit std
    nuisance_rank: int = 16
    nuisance_std: float = 1.0
    box_jitter: float = 0.01
    # fixes the signal directions so differently seeded sets share one feature space
    world_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("separable", "contextual"):
            raise ValidationError(f"mode must be separable or contextual, got {self.mode!r}")
        if self.n_videos < 1 or self.identities < 1 or self.duration <= 0 or self.fps <= 0:
            raise ValidationError("n_videos, identities, duration and fps must be positive")
        if self.nuisance_rank < 0 or self.nuisance_std < 0 or self.frame_noise < 0:
            raise ValidationError("noise scales must be >= 0")
        if self.evidence_lag < 0:
            raise ValidationError(f"evidence_lag must be >= 0, got {self.evidence_lag}")
        if self.mean_turn <= 0 or self.min_turn < 0:
            raise ValidationError("turn lengths must be positive")
        if not 0 <= self.silence_prob < 1:
            raise ValidationError(f"silence_prob must be in [0, 1), got {self.silence_prob}")
        if self.mode == "contextual" and self.silence_prob > 0:
            raise ValidationError("contextual mode needs one speaker per frame; set silence_prob = 0")

    @classmethod
    def contextual(cls, **kw) -> "SyntheticSpec":
        base = dict(mode="contextual", visual_snr=0.9, audio_snr=0.6, frame_noise=0.3,
                    evidence_lag=0.6, nuisance_rank=0)
        base.update(kw)
        return cls(**base)


def signal_directions(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit visual and audio axes along which the label is embedded."""
    return tuple(b[:, 0] for b in _bases(spec.world_seed, spec.nuisance_rank))


def _bases(world_seed: int, rank: int) -> list[np.ndarray]:
    """Per modality: orthonormal 512 x (1 + rank), signal axis first."""
    rng = np.random.default_rng([world_seed, 7919])
    out = []
    for _ in range(2):
        q, _ = np.linalg.qr(rng.standard_normal((512, 1 + rank)))
        out.append(q.astype(np.float32))
    return out


def _speaker_track(spec: SyntheticSpec, n_frames: int, rng) -> np.ndarray:
    """Speaker index per frame, -1 for silence."""
    out = np.empty(n_frames, dtype=np.int64)
    k = spec.identities
    current = int(rng.integers(k))
    frame = 0
    while frame < n_frames:
        length = max(spec.min_turn, rng.exponential(spec.mean_turn))
        stop = min(n_frames, frame + max(1, int(round(length * spec.fps))))
        silent = spec.silence_prob > 0 and rng.random() < spec.silence_prob
        out[frame:stop] = -1 if silent else current
        frame = stop
        if k > 1:
            current = (current + 1 + int(rng.integers(k - 1))) % k
    return out


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    b_visual, b_audio = _bases(spec.world_seed, spec.nuisance_rank)
    r = spec.nuisance_rank
    k = spec.identities
    n_frames = max(1, int(round(spec.duration * spec.fps)))
    boxes: list[FaceBox] = []
    blocks = []
    for v in range(spec.n_videos):
        vid = f"s{seed}_v{v:03d}"
        speaker = _speaker_track(spec, n_frames, rng)
        labels = (speaker[:, None] == np.arange(k)[None, :]).astype(np.int64)
        lag = int(round(spec.evidence_lag * spec.fps))
        lagged = labels[np.maximum(np.arange(n_frames) - lag, 0)]
        y = lagged.reshape(-1).astype(np.float32) - 0.5
        frame_shift = np.repeat(rng.standard_normal(n_frames).astype(np.float32), k) * spec.frame_noise
        coords = []
        for snr in (spec.visual_snr, spec.audio_snr):
            c = rng.standard_normal((n_frames * k, 1 + r)).astype(np.float32)
            c[:, 1:] *= spec.nuisance_std
            c[:, 0] += snr * y + frame_shift
            coords.append(c)
        visual = coords[0] @ b_visual.T
        audio = coords[1] @ b_audio.T
        centers = (np.arange(k) + 0.5) / k
        jitter = rng.uniform(-spec.box_jitter, spec.box_jitter, size=(n_frames, k, 2))
        cx = np.clip(centers[None, :] + jitter[..., 0], 0, 1)
        cy = np.clip(0.45 + jitter[..., 1], 0, 1)
        w, h = min(0.6 / k, 0.25), 0.3
        spatial = np.stack([cx, cy, np.full_like(cx, w), np.full_like(cx, h)], axis=-1)
        blocks.append(np.concatenate([visual, audio, spatial.reshape(-1, 4).astype(np.float32)], axis=1))
        for f in range(n_frames):
            t = round(f / spec.fps, 6)
            for i in range(k):
                box = tuple(round(float(x), 6) for x in spatial[f, i])
                boxes.append(FaceBox(vid, t, f"{vid}_p{i}", box, int(labels[f, i])))
    feats = np.concatenate(blocks, axis=0).astype(np.float32)
    assert feats.shape[1] == FEATURE_WIDTH
    # keep the spatial columns identical to the rounded box values in the track file
    feats[:, -4:] = np.array([b.box for b in boxes], dtype=np.float32)
    return Dataset(boxes, feats)
