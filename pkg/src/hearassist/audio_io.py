"""WAV ingest, synthetic test signals and fixed-duration chunking.

Everything downstream works on mono float64 samples in [-1, 1] at a single
canonical rate (16 kHz by default).  Sources are deliberately simple: a WAV
file, a synthetic siren, white noise or silence.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_CHUNK_SECONDS = 2.0
SYNTH_PEAK = 0.9

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE

SOURCE_KINDS = ("wav_file", "synthetic_siren", "synthetic_noise", "silence")


class WavError(Exception):
    """Base class for WAV ingest failures."""


class WavNotFoundError(WavError, FileNotFoundError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedWavError(WavError):
    """Codec or bit depth the reader does not handle (e.g. 8-bit PCM)."""


@dataclass(frozen=True)
class AudioChunk:
    samples: np.ndarray
    sample_rate_hz: int
    seq_index: int
    capture_close_time: int  # time.monotonic_ns() when the last sample was available
    stream_id: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class AudioSourceConfig:
    kind: str = "wav_file"
    chunk_duration_s: float = DEFAULT_CHUNK_SECONDS
    target_sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    gain: float = 1.0
    path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if not self.chunk_duration_s > 0:
            raise ValueError("chunk_duration_s must be positive")
        if not self.target_sample_rate_hz > 0:
            raise ValueError("target_sample_rate_hz must be positive")
        if self.gain < 0:
            raise ValueError("gain must be non-negative")

    @property
    def chunk_len(self) -> int:
        return int(round(self.chunk_duration_s * self.target_sample_rate_hz))


# --------------------------------------------------------------------------
# WAV reading / writing


def _parse_chunks(data: bytes, path) -> dict[bytes, bytes]:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise MalformedWavError(f"{path}: truncated {cid!r} chunk")
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    return chunks


def read_wav(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a WAV file without resampling.

    Returns a ``(frames, channels)`` float64 array scaled to [-1, 1] and the
    file's sample rate.
    """
    path = Path(path)
    if not path.is_file():
        raise WavNotFoundError(f"{path}: no such file")
    chunks = _parse_chunks(path.read_bytes(), path)
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise MalformedWavError(f"{path}: fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedWavError(f"{path}: extensible fmt chunk too short")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: {channels} channels (only 1 or 2 supported)")
    if rate <= 0:
        raise MalformedWavError(f"{path}: sample rate {rate}")

    if tag == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag:#x} with {bits}-bit samples")
    if block_align != channels * dtype.itemsize:
        raise MalformedWavError(f"{path}: block align {block_align} inconsistent with format")

    raw = chunks[b"data"]
    n_frames = len(raw) // block_align
    frames = np.frombuffer(raw[: n_frames * block_align], dtype=dtype)
    frames = frames.astype(np.float64).reshape(n_frames, channels) * scale
    return np.clip(frames, -1.0, 1.0), int(rate)


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if src_rate == dst_rate or len(samples) == 0:
        return samples.copy()
    n_out = int(round(len(samples) * dst_rate / src_rate))
    positions = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(len(samples)), samples)


def load_wav(path: str | os.PathLike, target_sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> tuple[np.ndarray, int]:
    """Load a WAV file as mono float samples at ``target_sample_rate_hz``.

    Stereo is averaged per frame; any other rate is linearly resampled.
    """
    frames, rate = read_wav(path)
    mono = frames.mean(axis=1) if frames.shape[1] == 2 else frames[:, 0]
    if rate != target_sample_rate_hz:
        mono = resample_linear(mono, rate, target_sample_rate_hz)
        rate = target_sample_rate_hz
    return mono, rate


def quantize_pcm16(samples: Sequence[float]) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | os.PathLike, samples: Sequence[float], sample_rate_hz: int) -> None:
    """Write mono 16-bit PCM."""
    pcm = quantize_pcm16(samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, _FORMAT_PCM, 1, sample_rate_hz, sample_rate_hz * 2, 2, 16,
        b"data", len(pcm),
    )
    Path(path).write_bytes(header + pcm)


# --------------------------------------------------------------------------
# Synthetic signals


def synth_siren(
    duration_s: float,
    f_low_hz: float = 440.0,
    f_high_hz: float = 960.0,
    alt_period_s: float = 0.5,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
) -> np.ndarray:
    """Two-tone alternating siren, phase-continuous across tone switches."""
    nyquist = sample_rate_hz / 2
    if f_high_hz >= nyquist or f_low_hz >= nyquist:
        raise ValueError(f"siren frequency above Nyquist ({nyquist} Hz)")
    if not 0 < f_low_hz < f_high_hz:
        raise ValueError("need 0 < f_low_hz < f_high_hz")
    if alt_period_s <= 0:
        raise ValueError("alt_period_s must be positive")
    n = int(round(duration_s * sample_rate_hz))
    seg_len = max(1, int(round(alt_period_s * sample_rate_hz)))
    freqs = np.where((np.arange(n) // seg_len) % 2 == 0, f_low_hz, f_high_hz)
    # phase of sample k accumulates the frequencies of samples 0..k-1
    phase = np.concatenate(([0.0], np.cumsum(freqs[:-1]))) * (2 * np.pi / sample_rate_hz)
    return SYNTH_PEAK * np.sin(phase)


def synth_tone(
    duration_s: float,
    freq_hz: float,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
    harmonics: Sequence[float] = (1.0,),
) -> np.ndarray:
    """Steady tone with optional harmonic weights, scaled to a 0.9 peak bound."""
    if freq_hz * len(harmonics) >= sample_rate_hz / 2:
        raise ValueError("tone harmonics above Nyquist")
    t = np.arange(int(round(duration_s * sample_rate_hz))) / sample_rate_hz
    weights = np.asarray(harmonics, dtype=np.float64)
    out = sum(w * np.sin(2 * np.pi * freq_hz * (k + 1) * t) for k, w in enumerate(weights))
    return SYNTH_PEAK * np.asarray(out) / np.abs(weights).sum()


def synth_noise(duration_s: float, seed: int, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng(seed)
    return rng.uniform(-SYNTH_PEAK, SYNTH_PEAK, int(round(duration_s * sample_rate_hz)))


def silence(duration_s: float, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    return np.zeros(int(round(duration_s * sample_rate_hz)))


# --------------------------------------------------------------------------
# Gain and chunking


def scale_volume(samples: Sequence[float], gain: float) -> np.ndarray:
    if gain < 0:
        raise ValueError("gain must be non-negative")
    return np.clip(np.asarray(samples, dtype=np.float64) * gain, -1.0, 1.0)


def chunk_stream(samples: Sequence[float], config: AudioSourceConfig, stream_id: str = "") -> list[AudioChunk]:
    """Cut ``samples`` into consecutive full chunks; a short tail is discarded."""
    return list(iter_chunks(samples, config, stream_id=stream_id))


def iter_chunks(
    samples: Sequence[float],
    config: AudioSourceConfig,
    stream_id: str = "",
    speed: float = 0.0,
) -> Iterator[AudioChunk]:
    """Yield chunks lazily.

    With ``speed > 0`` the generator paces itself so that chunk ``k`` is
    emitted no earlier than ``(k + 1) * chunk_duration / speed`` seconds after
    the first call, imitating a live capture device.
    """
    samples = np.asarray(samples, dtype=np.float64)
    length = config.chunk_len
    if length < 1:
        raise ValueError("chunk duration shorter than one sample")
    start = time.monotonic_ns()
    for k in range(len(samples) // length):
        if speed > 0:
            due = start + int((k + 1) * config.chunk_duration_s / speed * 1e9)
            wait = due - time.monotonic_ns()
            if wait > 0:
                time.sleep(wait / 1e9)
        block = samples[k * length : (k + 1) * length]
        if config.gain != 1.0:
            block = scale_volume(block, config.gain)
        else:
            block = np.clip(block, -1.0, 1.0)
        yield AudioChunk(block, config.target_sample_rate_hz, k, time.monotonic_ns(), stream_id)


# --------------------------------------------------------------------------
# Sources


@dataclass
class AudioSource:
    """A finite audio stream that hands out chunks, optionally in real time.

    ``speed`` is the playback rate relative to wall-clock: 1.0 mimics a live
    microphone, 0 delivers chunks as fast as they can be cut.
    """

    samples: np.ndarray
    config: AudioSourceConfig = field(default_factory=AudioSourceConfig)
    speed: float = 1.0
    name: str = ""

    @property
    def sample_rate_hz(self) -> int:
        return self.config.target_sample_rate_hz

    def chunks(self, duration_s: float | None = None) -> Iterator[AudioChunk]:
        samples = self.samples
        if duration_s is not None:
            samples = samples[: int(round(duration_s * self.sample_rate_hz))]
        return iter_chunks(samples, self.config, stream_id=self.name, speed=self.speed)


def make_source(config: AudioSourceConfig, duration_s: float, speed: float = 1.0) -> AudioSource:
    rate = config.target_sample_rate_hz
    if config.kind == "wav_file":
        if not config.path:
            raise ValueError("wav_file source needs a path")
        samples, _ = load_wav(config.path, rate)
        samples = samples[: int(round(duration_s * rate))]
    elif config.kind == "synthetic_siren":
        samples = synth_siren(duration_s, sample_rate_hz=rate)
    elif config.kind == "synthetic_noise":
        samples = synth_noise(duration_s, config.seed, rate)
    else:
        samples = silence(duration_s, rate)
    return AudioSource(samples, config, speed=speed, name=config.path or config.kind)
