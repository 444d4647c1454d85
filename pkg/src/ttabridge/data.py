"""Dataset construction: video ingestion, the synthetic tone corpus, prompts, splits."""

from __future__ import annotations

import json
import math
import shutil
import subprocess
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .dsp import AudioClip, read_wav

PHOTO_TEMPLATE = "a photo of {label}"
SOUND_TEMPLATE = "the sound of {label}"
MANIFEST_FORMAT = "ttabridge-manifest"
MANIFEST_VERSION = 1


class DataError(ValueError):
    pass


class MediaToolUnavailableError(RuntimeError):
    pass


def make_pseudo_text(label: str, template: str = PHOTO_TEMPLATE) -> str:
    if not label or not label.strip():
        raise DataError("label must be non-empty")
    return template.format(label=label.strip())


@dataclass
class Example:
    id: str
    frame: str | dict
    audio: str | dict
    label: str
    split: str = "train"
    timestamp: float = 0.0

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    examples: list[Example]
    labels: list[str]
    split_ratio: float = 0.9
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise DataError("example ids must be unique")
        vocab = set(self.labels)
        for e in self.examples:
            if e.label not in vocab:
                raise DataError(f"example {e.id!r} has label {e.label!r} outside the vocabulary")

    def by_split(self, split: str) -> list[Example]:
        return [e for e in self.examples if e.split == split]

    @property
    def train(self) -> list[Example]:
        return self.by_split("train")

    @property
    def test(self) -> list[Example]:
        return self.by_split("test")

    def save(self, path) -> None:
        header = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "labels": self.labels,
            "split_ratio": self.split_ratio,
            "provenance": self.provenance,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(e.to_record(), sort_keys=True) for e in self.examples]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise DataError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT or header.get("version") != MANIFEST_VERSION:
            raise DataError(f"{path}: not a version-{MANIFEST_VERSION} manifest")
        examples = [Example(**json.loads(line)) for line in lines[1:] if line.strip()]
        return cls(examples, header["labels"], header["split_ratio"], header.get("provenance", {}))


def split(manifest: DatasetManifest, ratio: float = 0.9, seed: int = 0) -> DatasetManifest:
    """Seeded shuffle, then the first floor(ratio * n) items train and the rest test."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(manifest.examples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(ratio * n)
    train_idx = set(order[:n_train].tolist())
    examples = [replace(e, split="train" if i in train_idx else "test") for i, e in enumerate(manifest.examples)]
    provenance = dict(manifest.provenance, split_seed=seed)
    return DatasetManifest(examples, manifest.labels, ratio, provenance)


# ---------------------------------------------------------------------------
# synthetic tone corpus


@dataclass(frozen=True)
class ToneClass:
    label: str
    frequency: float
    harmonics: tuple[float, ...] = (1.0,)
    envelope: str = "sustain"  # sustain | decay | pulse


DEFAULT_CLASSES = (
    ToneClass("cello", 150.0, (1.0, 0.5, 0.3), "sustain"),
    ToneClass("piano", 260.0, (1.0, 0.4), "decay"),
    ToneClass("violin", 450.0, (1.0, 0.6, 0.3), "sustain"),
    ToneClass("trumpet", 700.0, (1.0, 0.7), "pulse"),
    ToneClass("flute", 1100.0, (1.0,), "sustain"),
    ToneClass("harp", 1700.0, (1.0, 0.3), "decay"),
    ToneClass("organ", 2600.0, (1.0,), "pulse"),
    ToneClass("bell", 4000.0, (1.0,), "decay"),
)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[ToneClass, ...] = DEFAULT_CLASSES
    per_class: int = 64
    seed: int = 0
    duration: float = 2.048
    sample_rate: int = 16000
    split_ratio: float = 0.9
    freq_jitter: float = 0.02
    amp_jitter_db: float = 3.0
    level_db: float = -12.0


def render_tone(descriptor: dict) -> AudioClip:
    """Deterministically synthesize the audio described by a synthetic example."""
    sr = descriptor["sample_rate"]
    n = int(round(descriptor["duration"] * sr))
    t = np.arange(n) / sr
    f0 = descriptor["frequency"] * (1.0 + descriptor["freq_offset"])
    nyquist = sr / 2
    wave = np.zeros(n)
    for h, amp in enumerate(descriptor["harmonics"], start=1):
        if amp and h * f0 < nyquist:
            wave += amp * np.sin(2 * np.pi * h * f0 * t + descriptor["phase"] * h)
    wave /= max(np.abs(wave).max(), 1e-12)
    env = descriptor["envelope"]
    if env == "decay":
        wave *= np.exp(-3.0 * t / descriptor["duration"])
    elif env == "pulse":
        wave *= 0.55 + 0.45 * np.cos(2 * np.pi * 4.0 * t)
    fade = min(n // 2, int(0.01 * sr))
    if fade:
        ramp = np.linspace(0.0, 1.0, fade)
        wave[:fade] *= ramp
        wave[-fade:] *= ramp[::-1]
    gain = 10.0 ** ((descriptor["level_db"] + descriptor["amp_offset_db"]) / 20.0)
    return AudioClip(wave * gain, sr)


def make_synthetic_dataset(spec: SyntheticSpec | None = None) -> DatasetManifest:
    spec = spec or SyntheticSpec()
    if len(spec.classes) < 2:
        raise DataError("a synthetic dataset needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    examples = []
    for cls in spec.classes:
        for i in range(spec.per_class):
            u_f, u_a = rng.uniform(-1.0, 1.0, 2)
            ex_seed = int(rng.integers(0, 2**31 - 1))
            audio = {
                "kind": "tone",
                "frequency": cls.frequency,
                "harmonics": list(cls.harmonics),
                "envelope": cls.envelope,
                "freq_offset": float(u_f * spec.freq_jitter),
                "amp_offset_db": float(u_a * spec.amp_jitter_db),
                "phase": float(rng.uniform(0, 2 * np.pi)),
                "level_db": spec.level_db,
                "duration": spec.duration,
                "sample_rate": spec.sample_rate,
            }
            # the synthetic "frame" sees the same per-example attributes as the audio
            frame = {"kind": "synthetic", "label": cls.label, "attributes": [float(u_f), float(u_a)], "seed": ex_seed}
            ex_id = f"{cls.label}-{i:04d}"
            frame["id"] = ex_id
            examples.append(Example(ex_id, frame, audio, cls.label))
    labels = [c.label for c in spec.classes]
    manifest = DatasetManifest(examples, labels, spec.split_ratio, {"source": "synthetic", "seed": spec.seed})
    return split(manifest, spec.split_ratio, spec.seed)


def load_audio(example: Example, base_dir: Path | None = None) -> AudioClip:
    if isinstance(example.audio, dict):
        return render_tone(example.audio)
    path = Path(example.audio)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return read_wav(path)


# ---------------------------------------------------------------------------
# video ingestion


class MediaTool(Protocol):
    def probe(self, video: Path) -> tuple[float, bool]:
        """(duration in seconds, has audio track)"""

    def extract_frame(self, video: Path, timestamp: float, out: Path) -> None: ...

    def extract_audio(self, video: Path, start: float, duration: float, sample_rate: int, out: Path) -> None: ...


class FFmpegTool:
    """MediaTool backed by the ``ffmpeg``/``ffprobe`` executables."""

    def __init__(self, ffmpeg: str = "ffmpeg", ffprobe: str = "ffprobe"):
        self.ffmpeg = ffmpeg
        self.ffprobe = ffprobe

    def _require(self, exe: str) -> None:
        if shutil.which(exe) is None:
            raise MediaToolUnavailableError(f"media tool {exe!r} not found on PATH")

    def probe(self, video: Path) -> tuple[float, bool]:
        self._require(self.ffprobe)
        out = subprocess.run(
            [self.ffprobe, "-v", "error", "-show_entries", "format=duration:stream=codec_type",
             "-of", "json", str(video)],
            capture_output=True, text=True, check=True,
        ).stdout
        info = json.loads(out)
        has_audio = any(s.get("codec_type") == "audio" for s in info.get("streams", []))
        return float(info["format"]["duration"]), has_audio

    def extract_frame(self, video: Path, timestamp: float, out: Path) -> None:
        self._require(self.ffmpeg)
        subprocess.run(
            [self.ffmpeg, "-y", "-v", "error", "-ss", f"{timestamp:.6f}", "-i", str(video), "-frames:v", "1", str(out)],
            check=True,
        )

    def extract_audio(self, video: Path, start: float, duration: float, sample_rate: int, out: Path) -> None:
        self._require(self.ffmpeg)
        subprocess.run(
            [self.ffmpeg, "-y", "-v", "error", "-ss", f"{start:.6f}", "-t", f"{duration:.6f}", "-i", str(video),
             "-vn", "-ac", "1", "-ar", str(sample_rate), "-acodec", "pcm_s16le", str(out)],
            check=True,
        )


def audio_window(timestamp: float, clip_seconds: float, video_seconds: float) -> float:
    """Start of a ``clip_seconds`` window centered on ``timestamp`` and clamped inside the video."""
    start = timestamp - clip_seconds / 2
    return float(min(max(start, 0.0), video_seconds - clip_seconds))


def ingest_video(
    video,
    out_dir,
    label: str,
    frames_per_video: int = 1,
    seed: int = 0,
    clip_seconds: float = 2.048,
    sample_rate: int = 16000,
    tool: MediaTool | None = None,
) -> list[Example]:
    video = Path(video)
    out_dir = Path(out_dir)
    tool = tool or FFmpegTool()
    duration, has_audio = tool.probe(video)
    if not has_audio:
        raise DataError(f"{video}: no audio track")
    if duration < clip_seconds:
        raise DataError(f"{video}: duration {duration:.3f} s is shorter than the {clip_seconds:.3f} s clip")
    rng = np.random.default_rng(seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    examples = []
    for i, ts in enumerate(rng.uniform(0.0, duration, frames_per_video)):
        ex_id = f"{video.stem}-{i:03d}"
        frame_path = out_dir / f"{ex_id}.png"
        audio_path = out_dir / f"{ex_id}.wav"
        tool.extract_frame(video, float(ts), frame_path)
        tool.extract_audio(video, audio_window(float(ts), clip_seconds, duration), clip_seconds, sample_rate,
                           audio_path)
        examples.append(Example(ex_id, str(frame_path), str(audio_path), label, "train", float(ts)))
    return examples
