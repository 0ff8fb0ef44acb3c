import socket
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from hearassist.audio_io import AudioSource, AudioSourceConfig, synth_noise, synth_siren, write_wav
from hearassist.classifier import ModelFormatError
from hearassist.pipeline import (
    ChunkTrace,
    DisplayAck,
    DropOldestQueue,
    PipelineConfig,
    PipelineError,
    latency_report,
    push_to_display,
    run_pipeline,
)


def siren_source(seconds=6.0, speed=0.0, chunk_s=2.0):
    return AudioSource(synth_siren(seconds), AudioSourceConfig(chunk_duration_s=chunk_s), speed=speed)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- queue ---------------------------------------------------------------------


def test_queue_drops_oldest():
    q = DropOldestQueue(2)
    assert q.put(1) is None and q.put(2) is None
    assert q.put(3) == 1
    assert len(q) == 2 and q.high_water == 2
    q.close()
    assert [q.get(), q.get(), q.get()] == [2, 3, None]
    with pytest.raises(PipelineError):
        q.put(4)


def test_queue_get_blocks_until_item():
    q = DropOldestQueue(1)
    threading.Timer(0.05, q.put, args=("x",)).start()
    assert q.get(timeout=2) == "x"
    assert q.get(timeout=0.01) is None


def test_config_validation():
    for bad in (dict(queue_capacity=0), dict(emit_threshold=1.5), dict(overflow_policy="block"), dict(chunk_duration_s=0)):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


# -- runs ------------------------------------------------------------------------


def test_file_source_three_predictions(tmp_path, small_model):
    wav = tmp_path / "s.wav"
    write_wav(wav, synth_siren(6.0), 16000)
    from hearassist.audio_io import make_source

    src = make_source(AudioSourceConfig(path=str(wav)), 6.0, speed=0)
    result = run_pipeline(src, None, small_model, PipelineConfig(queue_capacity=4))
    assert [s for s, _ in result.predictions] == [0, 1, 2]
    assert result.drops == 0 and result.error is None
    assert result.high_water <= 4


def test_trace_timestamps_monotone_and_after_preload(small_model):
    result = run_pipeline(siren_source(6.0, speed=50), None, small_model)
    for t in result.traces:
        assert not t.dropped
        assert result.model_loaded_ns <= t.t_capture_close <= t.t_inference_start <= t.t_inference_end
        assert t.t_display_acked is None


def test_overflow_drops_and_keeps_order(small_model):
    # 0.2 s chunks paced in real time, classifier held for 0.5 s each
    cfg = PipelineConfig(queue_capacity=1, chunk_duration_s=0.2)
    result = run_pipeline(siren_source(2.0, speed=1.0, chunk_s=0.2), None, small_model, cfg, inference_delay_s=0.5)
    seqs = [s for s, _ in result.predictions]
    assert result.drops >= 1
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
    assert len(seqs) + result.drops == 10
    assert result.high_water <= 1
    # capture never waited on inference
    assert result.max_put_block_ns < 0.2e9


def test_prediction_sequence_is_deterministic(small_model):
    runs = [run_pipeline(AudioSource(synth_noise(6.0, 3), speed=0), None, small_model, PipelineConfig(queue_capacity=8))
            for _ in range(2)]
    a, b = ([(s, p.entries) for s, p in r.predictions] for r in runs)
    assert a == b and len(a) == 3


def test_bad_model_means_no_capture(tmp_path):
    bad = tmp_path / "bad.hsm"
    bad.write_bytes(b"junk")
    pulled = []

    class Spy(AudioSource):
        def chunks(self, duration_s=None):
            pulled.append(1)
            return super().chunks(duration_s)

    with pytest.raises(ModelFormatError):
        run_pipeline(Spy(synth_siren(2.0), speed=0), None, bad)
    assert not pulled


def test_source_failure_returns_partial_results(small_model):
    class Flaky(AudioSource):
        def chunks(self, duration_s=None):
            it = super().chunks(duration_s)
            yield next(it)
            yield next(it)
            raise OSError("device unplugged")

    result = run_pipeline(Flaky(synth_siren(6.0), speed=0), None, small_model)
    assert [s for s, _ in result.predictions] == [0, 1]
    assert "device unplugged" in result.error


def test_duration_limits_audio(small_model):
    result = run_pipeline(siren_source(6.0), None, small_model, duration_s=4.0)
    assert len(result.predictions) == 2


# -- display push ------------------------------------------------------------------


class _Capture(BaseHTTPRequestHandler):
    bodies: list = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        type(self).bodies.append((self.path, self.headers["Content-Type"], body))
        self.send_response(200)
        self.send_header("Content-Length", "2")
        self.end_headers()
        self.wfile.write(b"OK")

    def log_message(self, *args):
        pass


@pytest.fixture
def capture_server():
    _Capture.bodies = []
    server = HTTPServer(("127.0.0.1", 0), _Capture)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield server, _Capture.bodies
    server.shutdown()
    server.server_close()


def test_wire_body_is_exact(capture_server):
    server, bodies = capture_server
    ack = push_to_display("EMERGENCY", f"127.0.0.1:{server.server_port}")
    assert ack.ok and ack.status == 200 and ack.t_acked is not None
    assert bodies == [("/display", "text/plain; charset=utf-8", b"EMERGENCY")]


def test_push_without_listener_never_raises():
    ack = push_to_display("EMERGENCY", f"127.0.0.1:{free_port()}")
    assert not ack.ok and ack.error
    assert not push_to_display("X", "no-port-here").ok


def test_pipeline_pushes_to_device(device, small_model):
    cfg = PipelineConfig(display_endpoint=device.endpoint, emit_threshold=0.0)
    result = run_pipeline(siren_source(4.0), None, small_model, cfg)
    assert result.display_calls == 2
    for t in result.traces:
        assert t.display_status == 200 and t.t_display_acked >= t.t_inference_end
    label = result.predictions[-1][1].label.upper()
    assert device.state.history == [label, label]
    assert not device.framebuffer.is_blank()


def test_pipeline_survives_missing_display(small_model):
    cfg = PipelineConfig(display_endpoint=f"127.0.0.1:{free_port()}", emit_threshold=0.0)
    result = run_pipeline(siren_source(4.0), None, small_model, cfg)
    assert len(result.predictions) == 2 and result.error is None
    assert all(t.display_error and t.t_display_acked is None for t in result.traces)


def test_threshold_gates_pushes(small_model):
    calls = []

    def fake(text, endpoint):
        calls.append(text)
        return DisplayAck(True, 200, t_acked=0)

    run_pipeline(siren_source(4.0), None, small_model, PipelineConfig(display_endpoint="x:1", emit_threshold=1.0), display=fake)
    assert calls == []
    run_pipeline(siren_source(4.0), None, small_model, PipelineConfig(display_endpoint="x:1", emit_threshold=0.0), display=fake)
    assert len(calls) == 2
    calls.clear()
    result = run_pipeline(siren_source(4.0), None, small_model, PipelineConfig(emit_threshold=0.0), display=fake)
    assert calls == [] and result.display_calls == 0


# -- latency report -------------------------------------------------------------------------


def test_latency_single_trace():
    t = ChunkTrace(0, 0, t_inference_start=0, t_inference_end=150_000_000)
    rep = latency_report([t])
    assert rep["mean_inference_ms"] == 150.0 and rep["median_inference_ms"] == 150.0
    assert rep["realtime_factor"] == 0.075 and rep["drops"] == 0 and rep["chunks"] == 1


def test_latency_excludes_drops():
    kept = ChunkTrace(1, 0, 10_000_000, 30_000_000, t_display_acked=40_000_000)
    dropped = ChunkTrace(0, 0, dropped=True)
    rep = latency_report([dropped, kept])
    assert rep["mean_inference_ms"] == 20.0 and rep["mean_e2e_ms"] == 40.0
    assert rep["drops"] == 1 and rep["chunks"] == 2
    assert set(rep) == {"mean_inference_ms", "median_inference_ms", "max_inference_ms", "mean_e2e_ms",
                        "realtime_factor", "drops", "chunks"}
    with pytest.raises(PipelineError):
        latency_report([dropped])


def test_report_from_real_run(small_model):
    result = run_pipeline(siren_source(6.0), None, small_model)
    rep = latency_report(result.traces)
    assert 0 < rep["realtime_factor"] < 1.0
    assert np.isfinite(rep["max_inference_ms"])
