"""Speech-to-text backends, a deterministic mock, and a trial-timing benchmark.

The mock maps an audio fingerprint (SHA-256 of the 16-bit PCM rendering) to
a transcript and sleeps a configurable, seeded latency, which is enough to
reproduce an offline-vs-cloud timing comparison on any machine.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import statistics
import tempfile
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .audio_io import DEFAULT_SAMPLE_RATE, quantize_pcm16, write_wav
from .device.display import paginate
from .pipeline import DisplayAck, push_to_display

log = logging.getLogger(__name__)

CANONICAL_PHRASE = "The quick brown fox jumps over the lazy dog"


class SttBackend(Protocol):
    name: str

    def transcribe(self, audio, sample_rate_hz: int) -> tuple[str, float]:
        ...


def fingerprint(audio) -> str:
    return "sha256:" + hashlib.sha256(quantize_pcm16(audio).tobytes()).hexdigest()


def phrase_audio(text: str = CANONICAL_PHRASE, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Deterministic stand-in recording of ``text``.

    Each letter becomes a 60 ms tone burst whose pitch depends on the
    letter; spaces become 40 ms gaps.  Only its fingerprint matters.
    """
    pieces = []
    burst = np.arange(int(0.06 * sample_rate_hz)) / sample_rate_hz
    envelope = np.hanning(len(burst))
    for ch in text.lower():
        if ch.isalpha():
            freq = 200.0 + 40.0 * (ord(ch) - ord("a"))
            pieces.append(0.5 * envelope * np.sin(2 * np.pi * freq * burst))
        else:
            pieces.append(np.zeros(int(0.04 * sample_rate_hz)))
    return np.concatenate(pieces)


@dataclass
class MockBackendConfig:
    transcript_map: dict[str, str] = field(default_factory=dict)
    base_latency_s: float = 0.0
    latency_jitter_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_latency_s < 0:
            raise ValueError("base_latency_s must be non-negative")
        if not 0 <= self.latency_jitter_s <= self.base_latency_s:
            raise ValueError("latency_jitter_s must lie in [0, base_latency_s]")

    @classmethod
    def from_text(cls, text: str) -> "MockBackendConfig":
        """Parse ``sha256:<hex>\\t<transcript>`` lines plus ``key=value`` latency lines."""
        mapping, values = {}, {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("sha256:"):
                key, sep, transcript = raw.strip("\n").partition("\t")
                if not sep:
                    raise ValueError(f"transcript line needs a tab separator: {line!r}")
                mapping[key.strip()] = transcript.strip()
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad mock config line: {line!r}")
            values[key.strip()] = value.strip()
        unknown = set(values) - {"base_latency_s", "latency_jitter_s", "seed", "name"}
        if unknown:
            raise ValueError(f"unknown mock config keys: {sorted(unknown)}")
        return cls(
            mapping,
            float(values.get("base_latency_s", 0.0)),
            float(values.get("latency_jitter_s", 0.0)),
            int(values.get("seed", 0)),
        )

    def to_text(self) -> str:
        lines = [f"base_latency_s={self.base_latency_s!r}", f"latency_jitter_s={self.latency_jitter_s!r}",
                 f"seed={self.seed}"]
        lines += [f"{k}\t{v}" for k, v in sorted(self.transcript_map.items())]
        return "\n".join(lines) + "\n"


@dataclass
class Transcription:
    transcript: str
    elapsed_s: float
    recognized: bool


class MockBackend:
    """Lookup-table backend with a seeded artificial latency."""

    def __init__(self, name: str, config: MockBackendConfig | None = None, sleep=time.sleep):
        self.name = name
        self.config = config or MockBackendConfig()
        self._rng = np.random.default_rng(self.config.seed)
        self._sleep = sleep

    def next_latency(self) -> float:
        jitter = self.config.latency_jitter_s
        offset = self._rng.uniform(-jitter, jitter) if jitter else 0.0
        return self.config.base_latency_s + offset

    def recognize(self, audio, sample_rate_hz: int) -> Transcription:
        t0 = time.perf_counter()
        delay = self.next_latency()
        if delay > 0:
            self._sleep(delay)
        transcript = self.config.transcript_map.get(fingerprint(audio))
        elapsed = time.perf_counter() - t0
        return Transcription(transcript or "", elapsed, transcript is not None)

    def transcribe(self, audio, sample_rate_hz: int) -> tuple[str, float]:
        result = self.recognize(audio, sample_rate_hz)
        return result.transcript, result.elapsed_s


def mock_transcribe(config: MockBackendConfig, audio, rate: int) -> Transcription:
    return MockBackend("mock", config).recognize(audio, rate)


def default_mock(name: str, base_latency_s: float, jitter_s: float = 0.0, seed: int = 0) -> MockBackend:
    """Mock that knows the canonical phrase clip."""
    mapping = {fingerprint(phrase_audio()): CANONICAL_PHRASE}
    return MockBackend(name, MockBackendConfig(mapping, base_latency_s, jitter_s, seed))


class HttpSttBackend:
    """Optional networked backend: POSTs WAV bytes, expects ``{"transcript": ...}``.

    The bearer token is read from ``credentials_path`` (first line) when given.
    """

    def __init__(self, name: str, url: str, credentials_path: str | None = None, timeout: float = 30.0):
        self.name = name
        self.url = url
        self.timeout = timeout
        self._token = Path(credentials_path).read_text().strip().splitlines()[0] if credentials_path else None

    def transcribe(self, audio, sample_rate_hz: int) -> tuple[str, float]:
        headers = {"Content-Type": "audio/wav"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        data = _wav_bytes(audio, sample_rate_hz)
        req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
        t0 = time.perf_counter()
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return str(payload.get("transcript", "")), time.perf_counter() - t0


def _wav_bytes(audio, sample_rate_hz: int) -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "clip.wav"
        write_wav(path, audio, sample_rate_hz)
        return path.read_bytes()


# --------------------------------------------------------------------------
# Benchmark


@dataclass
class BenchResult:
    backend_name: str
    trial_times_s: list[float]
    mean_s: float
    phrase: str
    failed_trials: list[int] = field(default_factory=list)
    transcripts: list[str] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.trial_times_s) + len(self.failed_trials)


def bench(backends: Sequence[SttBackend], audio, rate: int, trials: int = 5) -> list[BenchResult]:
    """Time ``trials`` sequential transcriptions per backend (wall clock around the call)."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    results = []
    for backend in backends:
        times, failed, transcripts = [], [], []
        for trial in range(trials):
            t0 = time.perf_counter()
            try:
                transcript, _ = backend.transcribe(audio, rate)
            except Exception as exc:
                log.warning("backend %s failed on trial %d: %s", backend.name, trial, exc)
                failed.append(trial)
                continue
            times.append(time.perf_counter() - t0)
            transcripts.append(transcript)
        mean = statistics.fmean(times) if times else float("nan")
        phrase = transcripts[0] if transcripts else ""
        results.append(BenchResult(backend.name, times, mean, phrase, failed, transcripts))
    return results


def bench_csv(results: Sequence[BenchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["backend", "trial", "seconds"])
    for r in results:
        times = iter(r.trial_times_s)
        for trial in range(r.trials):
            writer.writerow([r.backend_name, trial, "failed" if trial in r.failed_trials else repr(next(times))])
    return buf.getvalue()


def bench_summary(results: Sequence[BenchResult]) -> dict:
    ok = [r for r in results if r.trial_times_s]
    summary = {
        "backends": {
            r.backend_name: {
                "mean_s": r.mean_s,
                "trials": r.trials,
                "failures": len(r.failed_trials),
                "phrase": r.phrase,
            }
            for r in results
        },
        "ratios": {
            f"{a.backend_name}/{b.backend_name}": a.mean_s / b.mean_s
            for a in ok for b in ok if a is not b and b.mean_s > 0
        },
    }
    if len(ok) >= 2:
        slow = max(ok, key=lambda r: r.mean_s)
        fast = min(ok, key=lambda r: r.mean_s)
        summary.update(
            slowest=slow.backend_name,
            fastest=fast.backend_name,
            mean_ratio=slow.mean_s / fast.mean_s if fast.mean_s > 0 else float("inf"),
            mean_difference_s=slow.mean_s - fast.mean_s,
        )
    return summary


# --------------------------------------------------------------------------
# Caption output


def caption_sink(transcript: str, endpoint: str, push=push_to_display) -> list[DisplayAck]:
    """POST the transcript page by page, in order; failures are returned, not raised."""
    return [push(page, endpoint) for page in paginate(transcript)]
