"""Two-stage streaming classifier: capture -> bounded queue -> inference -> display.

The capture stage never waits on inference.  When the queue is full the
oldest waiting chunk is discarded and its trace marked ``dropped``: for a
live alerting device fresh audio beats a stale backlog.
"""

from __future__ import annotations

import http.client
import logging
import os
import statistics
import threading
import time
from collections import deque
from dataclasses import dataclass

from .audio_io import AudioSource
from .classifier import Prediction, load_model, predict
from .features import FeatureConfig, spectrogram_image

log = logging.getLogger(__name__)

DISPLAY_TIMEOUT_S = 1.0


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    queue_capacity: int = 4
    overflow_policy: str = "drop_oldest"
    display_endpoint: str | None = None
    emit_threshold: float = 0.5
    chunk_duration_s: float = 2.0

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be at least 1")
        if self.overflow_policy != "drop_oldest":
            raise ValueError("only the drop_oldest overflow policy is supported")
        if not 0.0 <= self.emit_threshold <= 1.0:
            raise ValueError("emit_threshold must lie in [0, 1]")
        if self.chunk_duration_s <= 0:
            raise ValueError("chunk_duration_s must be positive")


@dataclass
class ChunkTrace:
    seq_index: int
    t_capture_close: int
    t_inference_start: int | None = None
    t_inference_end: int | None = None
    t_display_acked: int | None = None
    dropped: bool = False
    display_status: int | None = None
    display_error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DisplayAck:
    ok: bool
    status: int | None = None
    error: str | None = None
    t_acked: int | None = None


@dataclass
class PipelineResult:
    predictions: list[tuple[int, Prediction]]
    traces: list[ChunkTrace]
    error: str | None = None
    high_water: int = 0
    max_put_block_ns: int = 0
    model_loaded_ns: int = 0
    display_calls: int = 0

    @property
    def drops(self) -> int:
        return sum(t.dropped for t in self.traces)


class DropOldestQueue:
    """Bounded FIFO whose ``put`` never blocks; overflow evicts the oldest item."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.high_water = 0

    def put(self, item):
        """Enqueue ``item``; returns the evicted item, if any."""
        with self._cond:
            if self._closed:
                raise PipelineError("put on a closed queue")
            evicted = self._items.popleft() if len(self._items) >= self.capacity else None
            self._items.append(item)
            self.high_water = max(self.high_water, len(self._items))
            self._cond.notify()
            return evicted

    def get(self, timeout: float | None = None):
        """Next item, or None once the queue is closed and drained."""
        with self._cond:
            while not self._items and not self._closed:
                if not self._cond.wait(timeout):
                    return None
            return self._items.popleft() if self._items else None

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._items)


def _split_endpoint(endpoint: str) -> tuple[str, int]:
    endpoint = endpoint.removeprefix("http://").rstrip("/")
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"display endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def push_to_display(label_text: str, endpoint: str, timeout: float = DISPLAY_TIMEOUT_S) -> DisplayAck:
    """POST ``label_text`` to ``http://endpoint/display``.  Never raises; no retries."""
    body = label_text.encode("utf-8")
    try:
        host, port = _split_endpoint(endpoint)
        conn = http.client.HTTPConnection(host, port, timeout=timeout)
        try:
            conn.request("POST", "/display", body=body,
                         headers={"Content-Type": "text/plain; charset=utf-8"})
            resp = conn.getresponse()
            resp.read()
        finally:
            conn.close()
    except (OSError, ValueError, http.client.HTTPException) as exc:
        log.warning("display push to %s failed: %s", endpoint, exc)
        return DisplayAck(False, error=str(exc) or type(exc).__name__)
    if 200 <= resp.status < 300:
        return DisplayAck(True, resp.status, t_acked=time.monotonic_ns())
    log.warning("display at %s answered %d", endpoint, resp.status)
    return DisplayAck(False, resp.status, error=f"HTTP {resp.status}")


def run_pipeline(
    source: AudioSource,
    feature_config: FeatureConfig | None,
    model_path: str | os.PathLike,
    config: PipelineConfig = PipelineConfig(),
    duration_s: float | None = None,
    *,
    inference_delay_s: float = 0.0,
    display=push_to_display,
    stop: threading.Event | None = None,
) -> PipelineResult:
    """Stream ``source`` through the classifier saved at ``model_path``.

    The model is loaded before the capture stage starts, so a bad model file
    raises here and nothing runs.  ``inference_delay_s`` is a test hook that
    slows every classification down to provoke overflow.  If the source
    fails mid-stream, chunks already queued are still classified and the
    partial result carries ``error``.  Setting ``stop`` ends capture early;
    queued chunks are still drained.
    """
    model = load_model(model_path)
    if feature_config is None:
        feature_config = FeatureConfig.from_dict(model.meta.get("feature_config", {}))
    loaded_ns = time.monotonic_ns()

    queue = DropOldestQueue(config.queue_capacity)
    traces: dict[int, ChunkTrace] = {}
    predictions: list[tuple[int, Prediction]] = []
    errors: list[str] = []
    stats = {"max_put_block_ns": 0, "display_calls": 0}

    def capture():
        try:
            for chunk in source.chunks(duration_s):
                if stop is not None and stop.is_set():
                    break
                traces[chunk.seq_index] = ChunkTrace(chunk.seq_index, chunk.capture_close_time)
                t0 = time.monotonic_ns()
                evicted = queue.put(chunk)
                stats["max_put_block_ns"] = max(stats["max_put_block_ns"], time.monotonic_ns() - t0)
                if evicted is not None:
                    traces[evicted.seq_index].dropped = True
        except Exception as exc:  # source failure: drain what we have
            log.error("audio source failed: %s", exc)
            errors.append(f"source failure: {exc}")
        finally:
            queue.close()

    def infer():
        while (chunk := queue.get()) is not None:
            trace = traces[chunk.seq_index]
            trace.t_inference_start = time.monotonic_ns()
            try:
                pred = predict(model, spectrogram_image(chunk, feature_config))
            except Exception as exc:
                errors.append(f"inference failure on chunk {chunk.seq_index}: {exc}")
                log.error("%s", errors[-1])
                continue
            if inference_delay_s:
                time.sleep(inference_delay_s)
            trace.t_inference_end = time.monotonic_ns()
            predictions.append((chunk.seq_index, pred))
            if config.display_endpoint and pred.score >= config.emit_threshold:
                stats["display_calls"] += 1
                ack = display(pred.label.upper(), config.display_endpoint)
                trace.display_status = ack.status
                if ack.ok:
                    trace.t_display_acked = ack.t_acked
                else:
                    trace.display_error = ack.error

    workers = [threading.Thread(target=capture, name="capture"), threading.Thread(target=infer, name="inference")]
    for w in workers:
        w.start()
    for w in workers:
        w.join()

    return PipelineResult(
        predictions=predictions,
        traces=[traces[k] for k in sorted(traces)],
        error="; ".join(errors) or None,
        high_water=queue.high_water,
        max_put_block_ns=stats["max_put_block_ns"],
        model_loaded_ns=loaded_ns,
        display_calls=stats["display_calls"],
    )


def latency_report(traces, chunk_duration_s: float = 2.0) -> dict:
    """Summary statistics in milliseconds over the chunks that were classified."""
    done = [t for t in traces if not t.dropped and t.t_inference_end is not None]
    if not done:
        raise PipelineError("no classified chunks to report on (all dropped?)")
    inference = [(t.t_inference_end - t.t_inference_start) / 1e6 for t in done]
    e2e = [((t.t_display_acked or t.t_inference_end) - t.t_capture_close) / 1e6 for t in done]
    mean_inf = statistics.fmean(inference)
    return {
        "mean_inference_ms": mean_inf,
        "median_inference_ms": statistics.median(inference),
        "max_inference_ms": max(inference),
        "mean_e2e_ms": statistics.fmean(e2e),
        "realtime_factor": mean_inf / (chunk_duration_s * 1e3),
        "drops": sum(1 for t in traces if t.dropped),
        "chunks": len(traces),
    }

