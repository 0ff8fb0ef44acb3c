"""Log-mel / MFCC spectrogram images from audio chunks.

Pipeline per chunk: frame -> periodic Hann -> zero-padded power spectrum ->
mel filterbank -> natural log with a floor -> optional orthonormal DCT-II.
The resulting feature matrix is resampled (nearest neighbour) onto a fixed
image grid and min-max quantized to 8 bits.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio_io import DEFAULT_SAMPLE_RATE, AudioChunk

MODES = ("log_mel", "mfcc")


class FeatureError(ValueError):
    pass


class PgmError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    frame_len: int = 400
    hop_len: int = 160
    fft_size: int = 512
    n_mels: int = 64
    n_mfcc: int = 13
    f_min_hz: float = 0.0
    f_max_hz: float | None = None  # None -> Nyquist
    log_floor: float = 1e-10
    image_height_px: int = 64
    image_width_px: int = 128
    mode: str = "log_mel"

    def __post_init__(self):
        if not 0 < self.hop_len <= self.frame_len <= self.fft_size:
            raise FeatureError("need 0 < hop_len <= frame_len <= fft_size")
        if self.fft_size & (self.fft_size - 1):
            raise FeatureError("fft_size must be a power of two")
        if self.n_mels < 1 or not 1 <= self.n_mfcc <= self.n_mels:
            raise FeatureError("need 1 <= n_mfcc <= n_mels")
        if self.f_min_hz < 0 or (self.f_max_hz is not None and self.f_max_hz <= self.f_min_hz):
            raise FeatureError("need 0 <= f_min_hz < f_max_hz")
        if self.log_floor <= 0:
            raise FeatureError("log_floor must be positive")
        if self.image_height_px < 1 or self.image_width_px < 1:
            raise FeatureError("image dimensions must be positive")
        if self.mode not in MODES:
            raise FeatureError(f"mode must be one of {MODES}")

    def upper_hz(self, sample_rate_hz: int) -> float:
        nyquist = sample_rate_hz / 2
        f_max = nyquist if self.f_max_hz is None else self.f_max_hz
        if f_max > nyquist:
            raise FeatureError(f"f_max_hz {f_max} above Nyquist {nyquist}")
        return f_max

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "FeatureConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise FeatureError(f"unknown feature keys: {sorted(unknown)}")
        return cls(**values)

    def to_text(self) -> str:
        """Flat ``key=value`` lines, one per field."""
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "FeatureConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in types:
                raise FeatureError(f"bad feature config line: {line!r}")
            values[key] = _coerce(types[key], raw)
        return cls(**values)


def _coerce(type_name, raw: str):
    type_name = str(type_name)
    if type_name == "int":
        return int(raw)
    if type_name == "str":
        return raw
    if "None" in type_name:
        return None if raw in ("", "None") else float(raw)
    return float(raw)


@dataclass(frozen=True)
class SpectrogramImage:
    pixels: np.ndarray  # (height, width) uint8; row 0 is the lowest band
    source_seq_index: int = 0
    mode: str = "log_mel"
    dynamic_range: tuple[float, float] = (0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, SpectrogramImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None


# --------------------------------------------------------------------------
# Primitive stages


def frame_signal(samples, frame_len: int, hop_len: int) -> np.ndarray:
    """Return a ``(n_frames, frame_len)`` array; frame k starts at ``k * hop_len``."""
    if frame_len < 1 or hop_len < 1:
        raise FeatureError("frame_len and hop_len must be >= 1")
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < frame_len:
        return np.zeros((0, frame_len))
    n_frames = 1 + (len(x) - frame_len) // hop_len
    view = np.lib.stride_tricks.sliding_window_view(x, frame_len)
    return view[: (n_frames - 1) * hop_len + 1 : hop_len]


@lru_cache(maxsize=16)
def _hann(n: int) -> np.ndarray:
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))
    w.setflags(write=False)
    return w


def hann_window(frame) -> np.ndarray:
    """Multiply by the periodic Hann window (works on the last axis)."""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[-1]
    if n < 2:
        raise FeatureError("Hann window needs at least 2 samples")
    return frame * _hann(n)


def power_spectrum(windowed, fft_size: int) -> np.ndarray:
    """One-sided ``|X[k]|**2`` for k = 0..fft_size/2 (frames zero-padded)."""
    windowed = np.asarray(windowed, dtype=np.float64)
    if windowed.shape[-1] > fft_size:
        raise FeatureError("frame longer than fft_size")
    bins = np.fft.rfft(windowed, n=fft_size, axis=-1)
    return bins.real**2 + bins.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges_hz(config: FeatureConfig, sample_rate_hz: int) -> np.ndarray:
    """The n_mels + 2 triangle corner frequencies, uniformly spaced in mel."""
    lo, hi = hz_to_mel(config.f_min_hz), hz_to_mel(config.upper_hz(sample_rate_hz))
    return mel_to_hz(np.linspace(lo, hi, config.n_mels + 2))


def mel_filterbank(config: FeatureConfig, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Triangular filters sampled at FFT bin centres, each scaled to peak 1.0."""
    return _filterbank_cached(config.n_mels, config.fft_size, config.f_min_hz,
                              config.upper_hz(sample_rate_hz), sample_rate_hz)


@lru_cache(maxsize=32)
def _filterbank_cached(n_mels, fft_size, f_min, f_max, sample_rate_hz) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(fft_size // 2 + 1) * (sample_rate_hz / fft_size)
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - left) / (centre - left)
    falling = (right - bins) / (right - centre)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    peaks = fb.max(axis=1)
    empty = np.flatnonzero(peaks <= 0)
    if empty.size:
        raise FeatureError(
            f"n_mels={n_mels} too large for fft_size={fft_size}: filter {int(empty[0])} covers no FFT bin"
        )
    fb /= peaks[:, None]
    fb.setflags(write=False)
    return fb


def log_compress(mel_energies, log_floor: float = 1e-10) -> np.ndarray:
    return np.log(np.maximum(np.asarray(mel_energies, dtype=np.float64), log_floor))


@lru_cache(maxsize=16)
def dct_matrix(m: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` with ``c = D @ x``."""
    k = np.arange(m)[:, None]
    n = np.arange(m)[None, :]
    d = np.cos(np.pi * k * (2 * n + 1) / (2 * m)) * np.sqrt(2.0 / m)
    d[0] = np.sqrt(1.0 / m)
    d.setflags(write=False)
    return d


def dct2(log_mel, n_mfcc: int) -> np.ndarray:
    """First ``n_mfcc`` orthonormal DCT-II coefficients along the last axis."""
    x = np.asarray(log_mel, dtype=np.float64)
    m = x.shape[-1]
    if n_mfcc > m:
        raise FeatureError("n_mfcc exceeds input length")
    return x @ dct_matrix(m)[:n_mfcc].T


# --------------------------------------------------------------------------
# Chunk -> feature matrix -> image


def feature_matrix(samples, config: FeatureConfig, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Pre-resampling features, shape ``(n_rows, n_frames)``.

    Rows are mel bands (log_mel) or cepstral coefficients (mfcc).
    """
    frames = frame_signal(samples, config.frame_len, config.hop_len)
    if len(frames) == 0:
        raise FeatureError(f"signal of {len(samples)} samples is shorter than one frame")
    power = power_spectrum(hann_window(frames), config.fft_size)
    log_mel = log_compress(power @ mel_filterbank(config, sample_rate_hz).T, config.log_floor)
    if config.mode == "mfcc":
        return dct2(log_mel, config.n_mfcc).T
    return log_mel.T


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def quantize(values: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8), (lo, hi)
    scaled = (values - lo) * (255.0 / (hi - lo))
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8), (lo, hi)


def features_to_image(features: np.ndarray, config: FeatureConfig, seq_index: int = 0) -> SpectrogramImage:
    rows = _nearest_index(config.image_height_px, features.shape[0])
    cols = _nearest_index(config.image_width_px, features.shape[1])
    grid = features[np.ix_(rows, cols)]
    pixels, dyn = quantize(grid)
    return SpectrogramImage(pixels, seq_index, config.mode, dyn)


def spectrogram_image(chunk: AudioChunk, config: FeatureConfig | None = None) -> SpectrogramImage:
    config = config or FeatureConfig()
    feats = feature_matrix(chunk.samples, config, chunk.sample_rate_hz)
    return features_to_image(feats, config, chunk.seq_index)


# --------------------------------------------------------------------------
# Image files


def export_image(img: SpectrogramImage, path: str | os.PathLike, format: str = "pgm") -> Path:
    """Write PGM (P5, lossless) or JPEG (needs Pillow).

    The low band is drawn at the bottom, so rows are flipped on disk.
    """
    path = Path(path)
    on_disk = np.ascontiguousarray(img.pixels[::-1])
    height, width = on_disk.shape
    if format == "pgm":
        path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + on_disk.tobytes())
    elif format in ("jpeg", "jpg"):
        from PIL import Image

        Image.fromarray(on_disk, mode="L").save(path, format="JPEG", quality=90)
    else:
        raise ValueError(f"unsupported image format {format!r}")
    return path


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte follows maxval


def import_image(path: str | os.PathLike, mode: str = "log_mel", seq_index: int = 0) -> SpectrogramImage:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise PgmError(f"{path}: not a binary PGM")
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PgmError(f"{path}: bad PGM header") from exc
    if maxval != 255 or width < 1 or height < 1:
        raise PgmError(f"{path}: unsupported PGM geometry/maxval")
    payload = data[offset : offset + width * height]
    if len(payload) != width * height:
        raise PgmError(f"{path}: truncated PGM payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)[::-1].copy()
    return SpectrogramImage(pixels, seq_index, mode, (float(pixels.min()), float(pixels.max())))

