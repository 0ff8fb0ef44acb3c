"""Deterministic desk-scale corpus: ``siren/``, ``tone/`` and ``noise/`` WAVs.

The classes are separable by construction: sirens alternate between two
tones in 600-1600 Hz, horn-like tones hold one low pitch (150-400 Hz), and
noise is broadband.  Every clip also carries faint background hiss so that
no mel band is exactly silent.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .audio_io import DEFAULT_SAMPLE_RATE, synth_noise, synth_siren, synth_tone, write_wav

CLASSES = ("siren", "tone", "noise")
EMERGENCY_CLASSES = ("siren",)
BACKGROUND_LEVEL = 0.02


def _clip(kind: str, rng: np.random.Generator, duration_s: float, rate: int) -> np.ndarray:
    if kind == "siren":
        f_low = rng.uniform(600.0, 900.0)
        f_high = min(f_low * rng.uniform(1.3, 1.8), 1600.0)
        samples = synth_siren(duration_s, f_low, f_high, rng.uniform(0.25, 0.6), rate)
        samples *= rng.uniform(0.4, 1.0)
    elif kind == "tone":
        samples = synth_tone(duration_s, rng.uniform(150.0, 400.0), rate) * rng.uniform(0.4, 1.0)
    elif kind == "noise":
        samples = synth_noise(duration_s, int(rng.integers(2**31)), rate) * rng.uniform(0.3, 1.0)
    else:
        raise ValueError(f"unknown synthetic class {kind!r}")
    hiss = synth_noise(duration_s, int(rng.integers(2**31)), rate) * (BACKGROUND_LEVEL / 0.9)
    return np.clip(samples + hiss, -1.0, 1.0)


def generate_corpus(
    out_dir: str | os.PathLike,
    per_class: int = 40,
    seed: int = 0,
    clip_duration_s: float = 6.0,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
) -> list[Path]:
    """Write ``per_class`` clips for each class; returns the paths written."""
    if per_class < 5:
        raise ValueError("per_class must be at least 5 so every split gets a clip")
    out_dir = Path(out_dir)
    written = []
    for class_index, kind in enumerate(CLASSES):
        class_dir = out_dir / kind
        class_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([seed, class_index])
        for i in range(per_class):
            path = class_dir / f"{kind}_{i:03d}.wav"
            write_wav(path, _clip(kind, rng, clip_duration_s, sample_rate_hz), sample_rate_hz)
            written.append(path)
    return written
