import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hearassist.audio_io import (
    AudioSource,
    AudioSourceConfig,
    MalformedWavError,
    UnsupportedWavError,
    WavNotFoundError,
    chunk_stream,
    iter_chunks,
    load_wav,
    make_source,
    quantize_pcm16,
    resample_linear,
    scale_volume,
    silence,
    synth_noise,
    synth_siren,
    synth_tone,
    write_wav,
)


def _wav_bytes(frames: np.ndarray, rate: int, tag: int, bits: int) -> bytes:
    """Hand-rolled RIFF writer, independent of write_wav."""
    frames = np.atleast_2d(frames.T).T
    channels = frames.shape[1]
    if tag == 1 and bits == 16:
        payload = np.round(frames * 32767).astype("<i2").tobytes()
    elif tag == 3:
        payload = frames.astype("<f4").tobytes()
    elif bits == 8:
        payload = (np.round(frames * 127) + 128).astype(np.uint8).tobytes()
    else:
        raise AssertionError
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_pcm16_two_seconds_gives_32000_samples(tmp_path):
    p = tmp_path / "a.wav"
    write_wav(p, synth_tone(2.0, 440.0), 16000)
    samples, rate = load_wav(p)
    assert rate == 16000 and len(samples) == 32000


def test_stereo_identical_channels_average(tmp_path):
    p = tmp_path / "s.wav"
    p.write_bytes(_wav_bytes(np.full((800, 2), 0.5), 16000, 3, 32))
    samples, _ = load_wav(p)
    assert np.all(samples == 0.5)


def test_float32_read(tmp_path):
    x = np.linspace(-0.75, 0.75, 1000)
    p = tmp_path / "f.wav"
    p.write_bytes(_wav_bytes(x, 16000, 3, 32))
    samples, _ = load_wav(p)
    np.testing.assert_allclose(samples, x.astype(np.float32), rtol=0, atol=0)


def test_eight_bit_is_unsupported(tmp_path):
    p = tmp_path / "u8.wav"
    p.write_bytes(_wav_bytes(np.zeros(100), 8000, 1, 8))
    with pytest.raises(UnsupportedWavError):
        load_wav(p)


def test_distinct_errors(tmp_path):
    with pytest.raises(WavNotFoundError):
        load_wav(tmp_path / "missing.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFX" + bytes(40))
    with pytest.raises(MalformedWavError):
        load_wav(bad)
    no_data = tmp_path / "nodata.wav"
    no_data.write_bytes(_wav_bytes(np.zeros(10), 16000, 1, 16)[:36])
    with pytest.raises(MalformedWavError):
        load_wav(no_data)


def test_resample_to_target(tmp_path):
    p = tmp_path / "8k.wav"
    p.write_bytes(_wav_bytes(np.linspace(0, 0.5, 8000), 8000, 3, 32))
    samples, rate = load_wav(p, 16000)
    assert rate == 16000 and len(samples) == 16000
    # linear interpolation of a ramp stays a ramp
    np.testing.assert_allclose(np.diff(samples[:-2]), np.diff(samples[:-2]).mean(), atol=1e-7)


def test_resample_identity():
    x = np.arange(5.0)
    assert np.array_equal(resample_linear(x, 16000, 16000), x)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=400))
def test_pcm16_round_trip_within_one_lsb(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("rt") / "x.wav"
    write_wav(p, values, 16000)
    back, _ = load_wav(p)
    assert np.max(np.abs(back - np.asarray(values))) <= 2**-15


def test_quantize_saturates():
    assert list(quantize_pcm16([1.0, -1.0, 2.0])) == [32767, -32768, 32767]


# -- synthesis ---------------------------------------------------------------


def test_siren_peak_and_segments():
    x = synth_siren(2.0, 440, 960, 0.5)
    assert np.max(np.abs(x)) <= 0.9
    seg = 8000
    peaks = []
    for k in range(4):
        block = x[k * seg : (k + 1) * seg]
        n = np.arange(seg)
        freqs = np.arange(0, 1500, 2.0)
        # naive DFT magnitude at 2 Hz spacing
        mags = [abs(np.sum(block * np.exp(-2j * np.pi * f * n / 16000))) for f in freqs]
        peaks.append(freqs[int(np.argmax(mags))])
    assert peaks == [440.0, 960.0, 440.0, 960.0]


def test_siren_phase_continuity():
    x = synth_siren(1.0, 440, 960, 0.5)
    # no jump at the switch bigger than the largest per-sample step of the high tone
    limit = 0.9 * 2 * np.pi * 960 / 16000 * 1.01
    assert np.max(np.abs(np.diff(x))) <= limit


@pytest.mark.parametrize("kw", [dict(f_low_hz=500, f_high_hz=9000), dict(f_low_hz=900, f_high_hz=400), dict(alt_period_s=0)])
def test_siren_rejects_bad_parameters(kw):
    with pytest.raises(ValueError):
        synth_siren(1.0, **kw)


def test_noise_determinism():
    a, b = synth_noise(1.0, 7), synth_noise(1.0, 7)
    assert len(a) == 16000 and np.array_equal(a, b)
    assert not np.array_equal(a, synth_noise(1.0, 8))
    assert np.max(np.abs(a)) <= 0.9
    with pytest.raises(ValueError):
        synth_noise(0, 1)


# -- gain and chunking ---------------------------------------------------------


def test_scale_volume_examples():
    x = np.array([0.6, -0.8])
    assert np.array_equal(scale_volume(x, 1.0), x)
    assert np.array_equal(scale_volume(x, 0.0), [0.0, 0.0])
    np.testing.assert_allclose(scale_volume(x, 0.5), [0.3, -0.4], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        scale_volume(x, -1)


def test_chunk_counts_and_indices():
    chunks = chunk_stream(np.zeros(5 * 16000), AudioSourceConfig())
    assert [c.seq_index for c in chunks] == [0, 1]
    assert all(len(c.samples) == 32000 for c in chunks)
    assert len(chunk_stream(np.zeros(32000), AudioSourceConfig())) == 1


def test_gain_then_clip():
    chunks = chunk_stream(np.full(32000, 0.8), AudioSourceConfig(gain=2.0))
    assert np.all(chunks[0].samples == 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 5 * 800), st.integers(1, 900))
def test_chunking_exhaustive_and_non_overlapping(n, L):
    x = np.random.default_rng(n).uniform(-1, 1, n)
    cfg = AudioSourceConfig(chunk_duration_s=L / 16000)
    chunks = chunk_stream(x, cfg)
    assert cfg.chunk_len == L
    joined = np.concatenate([c.samples for c in chunks]) if chunks else np.zeros(0)
    assert np.array_equal(joined, x[: (n // L) * L])
    assert [c.seq_index for c in chunks] == list(range(n // L))


def test_config_validation():
    for bad in (dict(chunk_duration_s=0), dict(target_sample_rate_hz=0), dict(gain=-1), dict(kind="mic")):
        with pytest.raises(ValueError):
            AudioSourceConfig(**bad)


def test_paced_source_spacing():
    src = AudioSource(np.zeros(3 * 1600), AudioSourceConfig(chunk_duration_s=0.1), speed=1.0)
    stamps = [c.capture_close_time for c in src.chunks()]
    gaps = np.diff(stamps) / 1e9
    assert len(stamps) == 3 and np.all(gaps > 0.08)


def test_unpaced_iter_is_lazy_and_complete():
    it = iter_chunks(np.zeros(64000), AudioSourceConfig())
    assert next(it).seq_index == 0
    assert sum(1 for _ in it) == 1


def test_make_source_kinds(tmp_path):
    p = tmp_path / "w.wav"
    write_wav(p, synth_tone(3.0, 300), 16000)
    assert len(list(make_source(AudioSourceConfig(path=str(p)), 3.0, speed=0).chunks())) == 1
    assert len(make_source(AudioSourceConfig(kind="synthetic_siren"), 4.0, 0).samples) == 64000
    assert np.all(make_source(AudioSourceConfig(kind="silence"), 2.0, 0).samples == silence(2.0))
    with pytest.raises(ValueError):
        make_source(AudioSourceConfig(kind="wav_file"), 1.0)
