"""Objective metrics: Frechet audio distance, relevance scores, window statistics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .conditioning import EmbeddingStore, cosine
from .dsp import AudioClip, MelConfig, compute_mel

REPORT_MAGIC = "EVALREPORT"
REPORT_VERSION = 1
PSD_TOL = 1e-8
SCALE_FLOOR = 1e-2


class EvalError(ValueError):
    pass


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise EvalError(f"covariance shape {self.cov.shape} does not match mean dim {d}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(embeddings) -> GaussianStats:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise EvalError("embeddings must be a 2-D array (count, dim)")
    if x.shape[0] < 2:
        raise EvalError(f"need at least 2 embeddings, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, 0.5 * (cov + cov.T), x.shape[0])


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    tol = PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise EvalError(f"{what} is not positive semidefinite (min eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses (S_a S_b)^{1/2} ~ (sqrt(S_a) S_b sqrt(S_a))^{1/2},
    which is symmetric and has the same trace. The trace is averaged over both
    orders: near-singular covariances make each order accurate only to about
    sqrt(eps), and the average makes the distance exactly symmetric.
    """
    if a.dim != b.dim:
        raise EvalError(f"dimension mismatch: {a.dim} vs {b.dim}")
    root_a = _psd_sqrt(a.cov, "first covariance")
    root_b = _psd_sqrt(b.cov, "second covariance")
    cross_ab = np.trace(_psd_sqrt(root_a @ b.cov @ root_a, "covariance product"))
    cross_ba = np.trace(_psd_sqrt(root_b @ a.cov @ root_b, "covariance product"))
    diff = a.mean - b.mean
    value = float(diff @ diff + (np.trace(a.cov) + np.trace(b.cov)) - (cross_ab + cross_ba))
    return max(value, 0.0)


def frechet_audio_distance(reference, generated) -> float:
    return frechet_distance(fit_gaussian(reference), fit_gaussian(generated))


def relevance_score(audio_embedding, text_embedding) -> float:
    a = np.asarray(audio_embedding, dtype=np.float64)
    t = np.asarray(text_embedding, dtype=np.float64)
    if a.shape != t.shape:
        raise EvalError(f"dimension mismatch: {a.shape} vs {t.shape}")
    if not np.any(a) or not np.any(t):
        raise EvalError("relevance score is undefined for a zero vector")
    return float(np.clip(cosine(a, t), -1.0, 1.0))


def window_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        raise EvalError(f"clip ({n_samples} samples) is shorter than the window ({window} samples)")
    return (n_samples - window) // hop + 1


def sliding_window_scores(
    clip: AudioClip,
    text_embedding,
    scorer: Callable[[AudioClip, np.ndarray], float],
    window: float = 4.0,
    hop: float = 0.5,
) -> dict[str, float]:
    """Score every full window of ``clip``; returns max/mean/min plus the window count."""
    win = int(round(window * clip.sample_rate))
    step = int(round(hop * clip.sample_rate))
    n = window_count(len(clip.samples), win, step)
    scores = np.array(
        [scorer(AudioClip(clip.samples[i * step : i * step + win], clip.sample_rate), text_embedding)
         for i in range(n)]
    )
    return {"max": float(scores.max()), "mean": float(scores.mean()), "min": float(scores.min()), "windows": n}


def aggregate_window_scores(per_clip: Sequence[dict]) -> dict[str, float]:
    """Average each per-clip statistic over clips."""
    if not per_clip:
        raise EvalError("no clips to aggregate")
    return {key: float(np.mean([s[key] for s in per_clip])) for key in ("max", "mean", "min")}


def cosine_gap_table(variants: dict[str, tuple[Sequence, Sequence]]) -> list[dict]:
    """Mean cosine between query embeddings and their ground-truth image embeddings, per variant."""
    rows = []
    for name, (queries, truths) in variants.items():
        if len(queries) == 0 or len(queries) != len(truths):
            raise EvalError(f"variant {name!r}: need equally many non-zero query/truth pairs")
        cos = [cosine(q, g) for q, g in zip(queries, truths)]
        rows.append({
            "variant": name,
            "similarity": "sim(q_text, q_img)" if name.upper() == "ZS" else "sim(q_hat_img, q_img)",
            "mean_cosine": float(np.mean(cos)),
            "count": len(cos),
        })
    return rows


# ---------------------------------------------------------------------------
# audio embedding backbones


@dataclass(frozen=True)
class MelStatsBackbone:
    """Per mel band: mean, standard deviation and mean absolute frame delta."""

    mel: MelConfig = field(default_factory=MelConfig)
    name: str = "mel-stats"

    @property
    def dim(self) -> int:
        return 3 * self.mel.n_mels

    def embed_mel(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        delta = np.abs(np.diff(values, axis=1)).mean(axis=1) if values.shape[1] > 1 else np.zeros(values.shape[0])
        return np.concatenate([values.mean(axis=1), values.std(axis=1), delta])

    def __call__(self, clip: AudioClip) -> np.ndarray:
        return self.embed_mel(compute_mel(clip, self.mel).values)


@dataclass
class FileBackbone:
    """Looks up precomputed embeddings (EMB1, modality "image" slot unused) by clip id."""

    path: str
    fallback: MelStatsBackbone = field(default_factory=MelStatsBackbone)
    annotations: list[str] = field(default_factory=list)

    def __post_init__(self):
        try:
            self.store = EmbeddingStore.load(self.path)
            self.name = self.store.encoder_name
        except (OSError, ValueError) as exc:
            self.store = None
            self.name = self.fallback.name
            self.annotations.append(f"backbone file {self.path!r} unavailable ({exc}); used builtin {self.fallback.name}")

    def embed(self, clip_id: str, clip: AudioClip) -> np.ndarray:
        if self.store is not None:
            for modality in ("prior_generated", "image", "text"):
                if (clip_id, modality) in self.store.records:
                    return self.store.records[(clip_id, modality)]
            raise EvalError(f"no embedding for clip {clip_id!r} in {self.path}")
        return self.fallback(clip)


class CentroidRelevanceModel:
    """Toy stand-in for a language-audio model.

    Audio and label "text" share the backbone space: a label embeds as its
    class centroid and audio as itself, both centered on the corpus mean, so
    the cosine between them acts as a relevance score.
    """

    def __init__(self, embeddings, labels):
        x = np.asarray(embeddings, dtype=np.float64)
        self.center = x.mean(axis=0)
        # floor the scale so near-constant bands (silence at the dB floor) do not dominate
        self.scale = np.maximum(x.std(axis=0), SCALE_FLOOR)
        labels = list(labels)
        self.centroids = {
            lab: ((x[[i for i, l in enumerate(labels) if l == lab]] - self.center) / self.scale).mean(axis=0)
            for lab in sorted(set(labels))
        }

    def embed_audio(self, embedding) -> np.ndarray:
        return (np.asarray(embedding, dtype=np.float64) - self.center) / self.scale

    def embed_text(self, label: str) -> np.ndarray:
        return self.centroids[label]

    def score(self, embedding, label: str) -> float:
        return relevance_score(self.embed_audio(embedding), self.embed_text(label))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    fad: float
    relevance_mean: float = float("nan")
    relevance_stderr: float = float("nan")
    window_max: float = float("nan")
    window_mean: float = float("nan")
    window_min: float = float("nan")
    cosine_rows: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.fad):
            raise EvalError("FAD must be finite")
        if "sample_count" not in self.provenance:
            raise EvalError("report provenance must record sample_count")

    def to_text(self) -> str:
        lines = [f"{REPORT_MAGIC} {REPORT_VERSION}"]
        for key, value in asdict(self).items():
            if key in ("cosine_rows", "provenance"):
                continue
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("[provenance]")
        for key in sorted(self.provenance):
            lines.append(f"{key} = {json.dumps(self.provenance[key], sort_keys=True)}")
        lines.append("[cosine_table]")
        for row in self.cosine_rows:
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        if not lines or lines[0].split() != [REPORT_MAGIC, str(REPORT_VERSION)]:
            raise EvalError(f"not a version-{REPORT_VERSION} eval report")
        scalars, provenance, rows = {}, {}, []
        section = None
        for line in lines[1:]:
            if not line.strip():
                continue
            if line.startswith("["):
                section = line.strip("[]")
                continue
            if section == "cosine_table":
                rows.append(json.loads(line))
                continue
            key, _, raw = line.partition(" = ")
            (provenance if section == "provenance" else scalars)[key] = json.loads(raw)
        return cls(**scalars, cosine_rows=rows, provenance=provenance)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_text(Path(path).read_text())
