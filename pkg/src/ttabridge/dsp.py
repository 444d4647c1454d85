"""Mel analysis, normalization and mel-to-waveform inversion.

Everything here is numpy-only and pure: no module-level mutable state, so the
functions are safe to call from several threads at once.
"""

from __future__ import annotations

import math
import os
import shutil
import struct
import subprocess
import tempfile
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize

MEL_MAGIC = b"MEL1"
_MEL_HEADER = struct.Struct("<4sIIII")


class DSPError(ValueError):
    pass


class VocoderUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    hop: int = 512
    fft_size: int = 2048
    n_mels: int = 64
    clip_frames: int = 64
    log_floor: float = -80.0
    # dB level mapped to the top of norm_range (the corpus maximum)
    ref_db: float = 40.0
    norm_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.sample_rate <= 0 or self.hop <= 0:
            raise DSPError("sample_rate and hop must be positive")
        if self.fft_size < self.hop:
            raise DSPError(f"fft_size ({self.fft_size}) must be >= hop ({self.hop})")
        if self.n_mels < 1 or self.n_mels > self.fft_size // 2 + 1:
            raise DSPError(f"n_mels must be in [1, {self.fft_size // 2 + 1}]")
        if self.log_floor >= 0:
            raise DSPError("log_floor must be negative (dB below ref_db)")
        lo, hi = self.norm_range
        if not lo < hi:
            raise DSPError("norm_range must be an increasing interval")

    @property
    def clip_seconds(self) -> float:
        return self.clip_frames * self.hop / self.sample_rate

    @property
    def clip_samples(self) -> int:
        return self.clip_frames * self.hop


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DSPError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DSPError("audio contains NaN or Inf samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self.samples) else 0.0


@dataclass
class MelSpectrogram:
    values: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.config.n_mels:
            raise DSPError(
                f"mel values must be (n_mels={self.config.n_mels}, frames), got {self.values.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# mel scale and filterbank (Slaney conventions)

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(hz):
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / _F_SP
    log_region = hz >= _MIN_LOG_HZ
    return np.where(
        log_region, _MIN_LOG_MEL + np.log(np.maximum(hz, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP, mel
    )


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    hz = _F_SP * mel
    log_region = mel >= _MIN_LOG_MEL
    return np.where(log_region, _MIN_LOG_HZ * np.exp(_LOGSTEP * (mel - _MIN_LOG_MEL)), hz)


def mel_band_edges(sample_rate: int, n_mels: int) -> np.ndarray:
    """Left edge, center and right edge frequencies (Hz) of every triangle, shape (n_mels + 2,)."""
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))


@lru_cache(maxsize=16)
def _filterbank(sample_rate: int, fft_size: int, n_mels: int) -> np.ndarray:
    n_bins = fft_size // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    edges = mel_band_edges(sample_rate, n_mels)
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.flags.writeable = False
    return weights


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Slaney-normalized triangular filters from 0 Hz to Nyquist, shape (n_mels, fft_size//2 + 1)."""
    return _filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels)


@lru_cache(maxsize=16)
def _filterbank_pinv(sample_rate: int, fft_size: int, n_mels: int) -> np.ndarray:
    pinv = np.linalg.pinv(_filterbank(sample_rate, fft_size, n_mels))
    pinv.flags.writeable = False
    return pinv


# ---------------------------------------------------------------------------
# STFT with center padding: frame k is centered on sample k * hop


def n_frames_for(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def _window(fft_size: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(fft_size) / fft_size)


def stft(samples: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Complex STFT, shape (fft_size//2 + 1, ceil(len / hop))."""
    samples = np.asarray(samples, dtype=np.float64)
    n = n_frames_for(len(samples), hop)
    pad = fft_size // 2
    padded = np.pad(samples, pad, mode="reflect" if len(samples) > pad else "constant")
    need = (n - 1) * hop + fft_size
    if len(padded) < need:
        padded = np.pad(padded, (0, need - len(padded)))
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n)[:, None]
    frames = padded[idx] * _window(fft_size)
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, fft_size: int, hop: int, length: int | None = None) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    n = spec.shape[1]
    win = _window(fft_size)
    frames = np.fft.irfft(spec.T, n=fft_size, axis=1) * win
    total = fft_size + hop * (n - 1)
    idx = (np.arange(fft_size)[None, :] + hop * np.arange(n)[:, None]).ravel()
    out = np.bincount(idx, weights=frames.ravel(), minlength=total)
    norm = np.bincount(idx, weights=np.tile(win**2, n), minlength=total)
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    pad = fft_size // 2
    length = n * hop if length is None else length
    out = out[pad : pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


# ---------------------------------------------------------------------------
# analysis and normalization


def mel_power(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    spec = np.abs(stft(samples, cfg.fft_size, cfg.hop)) ** 2
    return mel_filterbank(cfg) @ spec


def power_to_db(power: np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(power, 1e-20))


def normalize_db(db: np.ndarray, cfg: MelConfig) -> np.ndarray:
    rel = np.clip(np.asarray(db, dtype=np.float64) - cfg.ref_db, cfg.log_floor, 0.0)
    lo, hi = cfg.norm_range
    return lo + (rel - cfg.log_floor) / (-cfg.log_floor) * (hi - lo)


def denormalize_db(values: np.ndarray, cfg: MelConfig) -> np.ndarray:
    lo, hi = cfg.norm_range
    values = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return cfg.ref_db + cfg.log_floor + (values - lo) / (hi - lo) * (-cfg.log_floor)


def compute_mel(clip: AudioClip, cfg: MelConfig | None = None) -> MelSpectrogram:
    cfg = cfg or MelConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise DSPError(f"sample rate mismatch: clip {clip.sample_rate} Hz, config {cfg.sample_rate} Hz")
    if len(clip.samples) == 0:
        raise DSPError("cannot analyse an empty clip")
    values = normalize_db(power_to_db(mel_power(clip.samples, cfg)), cfg)
    return MelSpectrogram(values, cfg)


def fit_ref_db(clips, cfg: MelConfig) -> float:
    """Corpus maximum mel level in dB, for use as ``MelConfig.ref_db``."""
    return max(float(power_to_db(mel_power(c.samples, cfg)).max()) for c in clips)


def mel_magnitude(mel: MelSpectrogram) -> np.ndarray:
    """Linear mel magnitude (sqrt of mel power) after denormalization."""
    return np.sqrt(10.0 ** (denormalize_db(mel.values, mel.config) / 10.0))


def spectral_convergence(reference: MelSpectrogram, estimate: MelSpectrogram) -> float:
    """Frobenius-norm spectral convergence between two mels, on linear magnitudes."""
    ref = mel_magnitude(reference)
    est = mel_magnitude(estimate)
    frames = min(ref.shape[1], est.shape[1])
    ref, est = ref[:, :frames], est[:, :frames]
    return float(np.linalg.norm(ref - est) / max(np.linalg.norm(ref), 1e-12))


# ---------------------------------------------------------------------------
# inversion


def mel_to_linear_magnitude(mel: MelSpectrogram, refine_iterations: int = 50) -> np.ndarray:
    """Linear STFT magnitude whose mel projection matches ``mel``.

    Starts from the clamped pseudo-inverse, then refines with bounded
    least squares (the clamp alone loses most of the tonal detail).
    """
    cfg = mel.config
    power = 10.0 ** (denormalize_db(mel.values, cfg) / 10.0)
    fb = mel_filterbank(cfg)
    lin_power = np.maximum(_filterbank_pinv(cfg.sample_rate, cfg.fft_size, cfg.n_mels) @ power, 0.0)
    if refine_iterations > 0:
        lin_power = _nonneg_lstsq(fb, power, lin_power, refine_iterations)
    return np.sqrt(lin_power)


def _nonneg_lstsq(fb: np.ndarray, target: np.ndarray, init: np.ndarray, maxiter: int) -> np.ndarray:
    shape = init.shape
    scale = max(float(target.max()), 1e-20)
    target = target / scale

    def objective(v):
        resid = fb @ v.reshape(shape) - target
        return 0.5 * float(np.sum(resid * resid)), (fb.T @ resid).ravel()

    res = optimize.minimize(
        objective,
        init.ravel() / scale,
        jac=True,
        method="L-BFGS-B",
        bounds=optimize.Bounds(0.0, np.inf),
        options={"maxiter": maxiter},
    )
    return np.maximum(res.x.reshape(shape), 0.0) * scale


def griffin_lim(magnitude: np.ndarray, fft_size: int, hop: int, iterations: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    length = magnitude.shape[1] * hop
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    signal = istft(magnitude * phase, fft_size, hop, length)
    for _ in range(iterations):
        rebuilt = stft(signal, fft_size, hop)
        phase = np.exp(1j * np.angle(rebuilt))
        signal = istft(magnitude * phase, fft_size, hop, length)
    return signal


def invert_mel_griffin_lim(mel: MelSpectrogram, iterations: int = 64, seed: int = 0) -> AudioClip:
    if iterations < 1:
        raise DSPError("iterations must be >= 1")
    cfg = mel.config
    signal = griffin_lim(mel_to_linear_magnitude(mel), cfg.fft_size, cfg.hop, iterations, seed)
    return AudioClip(np.clip(signal, -1.0, 1.0), cfg.sample_rate)


# ---------------------------------------------------------------------------
# WAV and mel exchange files


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> AudioClip:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise DSPError(f"{path}: only 16-bit PCM is supported")
        channels = fh.getnchannels()
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2").astype(np.float64)
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return AudioClip(data / 32767.0, rate)


def write_mel_file(path, mel: MelSpectrogram) -> None:
    """Write the denormalized log-mel (dB) in the MEL1 exchange format."""
    cfg = mel.config
    db = denormalize_db(mel.values, cfg).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_MEL_HEADER.pack(MEL_MAGIC, cfg.n_mels, mel.n_frames, cfg.sample_rate, cfg.hop))
        fh.write(np.ascontiguousarray(db).tobytes())


def read_mel_file(path, cfg: MelConfig | None = None) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _MEL_HEADER.size:
        raise DSPError(f"{path}: truncated MEL1 header")
    magic, n_mels, n_frames, rate, hop = _MEL_HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise DSPError(f"{path}: bad magic {magic!r} at byte 0")
    expected = _MEL_HEADER.size + 4 * n_mels * n_frames
    if len(raw) != expected:
        raise DSPError(f"{path}: expected {expected} bytes, found {len(raw)}")
    db = np.frombuffer(raw, dtype="<f4", offset=_MEL_HEADER.size).reshape(n_mels, n_frames)
    cfg = cfg or MelConfig(sample_rate=rate, hop=hop, n_mels=n_mels)
    if (cfg.n_mels, cfg.sample_rate, cfg.hop) != (n_mels, rate, hop):
        raise DSPError(f"{path}: header (n_mels={n_mels}, sr={rate}, hop={hop}) does not match config")
    return MelSpectrogram(normalize_db(db.astype(np.float64), cfg), cfg)


# ---------------------------------------------------------------------------
# vocoder backends


@dataclass(frozen=True)
class GriffinLimBackend:
    iterations: int = 64
    seed: int = 0

    def __call__(self, mel: MelSpectrogram) -> AudioClip:
        return invert_mel_griffin_lim(mel, self.iterations, self.seed)


@dataclass(frozen=True)
class ExternalVocoderBackend:
    """Runs an out-of-process vocoder.

    ``command`` is an argv list; the tokens ``{mel}`` and ``{wav}`` are replaced
    with the input MEL1 path and the expected output WAV path.
    """

    command: tuple[str, ...]
    name: str = "external"
    timeout: float = 600.0

    def __call__(self, mel: MelSpectrogram) -> AudioClip:
        exe = self.command[0]
        if shutil.which(exe) is None and not os.access(exe, os.X_OK):
            raise VocoderUnavailableError(
                f"vocoder backend {self.name!r} unavailable: executable {exe!r} not found; "
                "use the builtin Griffin-Lim backend instead"
            )
        with tempfile.TemporaryDirectory() as tmp:
            mel_path = Path(tmp) / "in.mel"
            wav_path = Path(tmp) / "out.wav"
            write_mel_file(mel_path, mel)
            argv = [a.replace("{mel}", str(mel_path)).replace("{wav}", str(wav_path)) for a in self.command]
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0 or not wav_path.exists():
                raise VocoderUnavailableError(
                    f"vocoder backend {self.name!r} failed (exit {proc.returncode}): {proc.stderr.strip()}"
                )
            clip = read_wav(wav_path)
        if clip.sample_rate != mel.config.sample_rate:
            raise DSPError(f"vocoder returned {clip.sample_rate} Hz, expected {mel.config.sample_rate} Hz")
        return clip


def vocode(mel: MelSpectrogram, backend=None) -> AudioClip:
    backend = backend if backend is not None else GriffinLimBackend()
    return backend(mel)
