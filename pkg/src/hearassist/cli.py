"""``hearassist`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every subcommand
accepts ``--seed``, ``--verbose`` and ``--config FILE``; the config file holds
``key=value`` lines naming the subcommand's flags (dashes or underscores) and
sits between the built-in defaults and explicit flags in precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import __version__
from .audio_io import DEFAULT_SAMPLE_RATE, AudioSource, AudioSourceConfig, WavError, chunk_stream, load_wav, make_source
from .classifier import ModelError, TrainConfig, load_model, save_model, train, write_history_csv
from .device.server import DeviceStartError, start_server
from .device.display import load_font
from .evaluation import (
    BINARY_LABELS,
    BinaryGrouping,
    DatasetError,
    apply_grouping,
    chunk_dataset,
    emit_report,
    evaluate,
    scan_dataset,
    select,
    split_dataset,
    sweep_to_csv,
    volume_sweep,
)
from .features import FeatureConfig, FeatureError, PgmError, export_image, spectrogram_image
from .pipeline import PipelineConfig, PipelineError, latency_report, run_pipeline
from .stt import HttpSttBackend, MockBackend, MockBackendConfig, bench, bench_csv, bench_summary, caption_sink, default_mock, phrase_audio
from .synthdata import EMERGENCY_CLASSES, generate_corpus

log = logging.getLogger("hearassist")

RUNTIME_ERRORS = (OSError, ValueError, ModelError, WavError, DatasetError, PipelineError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_at_least(low: int):
    def convert(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if value < low:
            raise argparse.ArgumentTypeError(f"must be at least {low}, got {value}")
        return value

    convert.__name__ = f"int>={low}"
    return convert


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


# --------------------------------------------------------------------------
# Parser construction


def _feature_flags(p: argparse.ArgumentParser) -> None:
    d = FeatureConfig()
    g = p.add_argument_group("feature extraction")
    g.add_argument("--mode", choices=("log_mel", "mfcc"), default=d.mode, help="image type (default %(default)s)")
    g.add_argument("--frame-len", type=_int_at_least(1), default=d.frame_len, help="STFT frame in samples (default %(default)s)")
    g.add_argument("--hop-len", type=_int_at_least(1), default=d.hop_len, help="STFT hop in samples (default %(default)s)")
    g.add_argument("--fft-size", type=_int_at_least(1), default=d.fft_size, help="FFT length (default %(default)s)")
    g.add_argument("--n-mels", type=_int_at_least(1), default=d.n_mels, help="mel bands (default %(default)s)")
    g.add_argument("--n-mfcc", type=_int_at_least(1), default=d.n_mfcc, help="cepstral coefficients kept in mfcc mode (default %(default)s)")
    g.add_argument("--f-min", type=_non_negative_float, default=d.f_min_hz, help="lowest filter edge in Hz (default %(default)s)")
    g.add_argument("--f-max", type=_positive_float, default=None, help="highest filter edge in Hz (default Nyquist)")
    g.add_argument("--height", type=_int_at_least(1), default=d.image_height_px, help="image height in px (default %(default)s)")
    g.add_argument("--width", type=_int_at_least(1), default=d.image_width_px, help="image width in px (default %(default)s)")


def _feature_config(args) -> FeatureConfig:
    return FeatureConfig(
        frame_len=args.frame_len,
        hop_len=args.hop_len,
        fft_size=args.fft_size,
        n_mels=args.n_mels,
        n_mfcc=args.n_mfcc,
        f_min_hz=args.f_min,
        f_max_hz=args.f_max,
        image_height_px=args.height,
        image_width_px=args.width,
        mode=args.mode,
    )


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default %(default)s)")
    g.add_argument("--config", metavar="FILE", help="key=value file of flag defaults; explicit flags win")
    g.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="hearassist", description="Emergency-sound classifier and caption display toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", parents=[common], help="turn WAV clips into spectrogram images")
    p.add_argument("--in", dest="input", required=True, help="a WAV file or a directory of WAVs (layout is mirrored)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("pgm", "jpeg"), default="pgm", help="image format (default %(default)s)")
    p.add_argument("--chunk-seconds", type=_positive_float, default=2.0, help="chunk length (default %(default)s)")
    _feature_flags(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic siren/tone/noise corpus")
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--per-class", type=_int_at_least(5), default=40, help="clips per class, at least 5 (default %(default)s)")
    p.add_argument("--clip-seconds", type=_positive_float, default=6.0, help="clip duration (default %(default)s)")
    p.set_defaults(func=cmd_synth_data)

    d = TrainConfig()
    p = sub.add_parser("train", parents=[common], help="train the classifier on a class-directory corpus")
    p.add_argument("--data", required=True, help="corpus root (<root>/<class>/*.wav)")
    p.add_argument("--grouping", help="file listing emergency classes, one per line (default: siren)")
    p.add_argument("--model-out", required=True, help="where to write the model file")
    p.add_argument("--history-out", help="training history CSV (default: <model-out>.history.csv)")
    p.add_argument("--lr", type=_positive_float, default=d.learning_rate, help="learning rate (default %(default)s)")
    p.add_argument("--steps", type=_int_at_least(1), default=d.training_steps, help="training steps (default %(default)s)")
    p.add_argument("--decay", type=_non_negative_float, default=d.weight_decay, help="weight decay (default %(default)s)")
    p.add_argument("--batch-size", type=_int_at_least(1), default=d.batch_size, help="minibatch size (default %(default)s)")
    p.add_argument("--eval-every", type=_int_at_least(1), default=d.eval_every, help="validation interval in steps (default %(default)s)")
    p.add_argument("--chunk-seconds", type=_positive_float, default=2.0, help="chunk length (default %(default)s)")
    _feature_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "report accuracy and false-positive rate on a split"),
        ("sweep", cmd_sweep, "evaluate a split at several input gains"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True, help="corpus root used for training")
        p.add_argument("--model", required=True, help="model file")
        p.add_argument("--split", choices=("test", "val"), default="test", help="which split (default %(default)s)")
        p.add_argument("--grouping", help="emergency class file (default: the grouping stored in the model)")
        if name == "eval":
            p.add_argument("--report", help="report path; .csv selects CSV, anything else JSON (default: stdout)")
        else:
            p.add_argument("--gains", required=True, help="comma-separated gains, e.g. 0.25,0.5,1.0")
            p.add_argument("--out", help="sweep CSV path (default: stdout)")
        p.set_defaults(func=func)

    p = sub.add_parser("run", parents=[common], help="stream audio through the classifier to the display")
    p.add_argument("--source", required=True, help="WAV path, or synth (siren), synth-noise, silence")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--display", default="none", help="device endpoint host:port, or none (default %(default)s)")
    p.add_argument("--duration", type=_positive_float, default=6.0, help="seconds of audio (default %(default)s)")
    p.add_argument("--speed", type=_non_negative_float, default=1.0, help="playback speed vs real time; 0 = unpaced (default %(default)s)")
    p.add_argument("--queue-capacity", type=_int_at_least(1), default=4, help="bounded queue size (default %(default)s)")
    p.add_argument("--threshold", type=float, default=0.5, help="minimum top score to display (default %(default)s)")
    p.add_argument("--log", dest="log_path", help="predictions log, JSON lines (default: stdout)")
    p.add_argument("--latency-out", help="latency report JSON (default: stdout)")
    p.add_argument("--inference-delay", type=_non_negative_float, default=0.0, help="testing hook: extra seconds per classification")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("device-sim", parents=[common], help="run the HTTP display simulator until interrupted")
    p.add_argument("--port", type=_int_at_least(0), default=8080, help="TCP port, 0 = any free port (default %(default)s)")
    p.add_argument("--host", default="127.0.0.1", help="bind address (default %(default)s)")
    p.add_argument("--font-path", help="XBM font strip (default: bundled 5x7 font)")
    p.add_argument("--no-mirror", action="store_true", help="render unmirrored text")
    p.set_defaults(func=cmd_device_sim)

    p = sub.add_parser("bench-stt", parents=[common], help="time speech-to-text backends over repeated trials")
    p.add_argument(
        "--backends",
        default="cloud=mock:1.5,offline=mock:10.5",
        help="comma-separated name=kind entries; kinds: mock:BASE[:JITTER], mockfile:PATH, http:URL (default %(default)s)",
    )
    p.add_argument("--audio", help="WAV to transcribe (default: the bundled phrase clip)")
    p.add_argument("--trials", type=_int_at_least(1), default=5, help="trials per backend (default %(default)s)")
    p.add_argument("--csv-out", help="per-trial CSV (default: stdout)")
    p.add_argument("--summary-out", help="summary JSON (default: stdout)")
    p.add_argument("--credentials", help="token file for http backends")
    p.add_argument("--display", default="none", help="send the fastest transcript to host:port, or none")
    p.set_defaults(func=cmd_bench_stt)
    return parser


# --------------------------------------------------------------------------
# Config files


def _read_config(path: str) -> dict[str, str]:
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install a ``--config`` file's values as defaults of the chosen subcommand.

    Runs before the real parse so the file can also satisfy required flags.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if not config_path or command is None:
        return
    subparser = choices[command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config", "func")}
    try:
        values = _read_config(config_path)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for {command}")
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r} must be one of {sorted(action.choices)}")
        defaults[key] = value
    subparser.set_defaults(**defaults)
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False


# --------------------------------------------------------------------------
# Subcommands


def _wav_inputs(root: Path) -> list[tuple[Path, Path]]:
    """(wav path, output subdirectory relative to --out) pairs."""
    if root.is_file():
        return [(root, Path())]
    if not root.is_dir():
        raise FileNotFoundError(f"no such file or directory: {root}")
    wavs = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".wav")
    if not wavs:
        raise DatasetError(f"{root}: no WAV files found")
    return [(p, p.parent.relative_to(root)) for p in wavs]


def cmd_featurize(args) -> int:
    fc = _feature_config(args)
    out = Path(args.out)
    ext = "jpg" if args.format == "jpeg" else "pgm"
    source_cfg = AudioSourceConfig(chunk_duration_s=args.chunk_seconds)
    count = 0
    for wav, rel in _wav_inputs(Path(args.input)):
        samples, _ = load_wav(wav, DEFAULT_SAMPLE_RATE)
        target = out / rel
        target.mkdir(parents=True, exist_ok=True)
        for chunk in chunk_stream(samples, source_cfg, stream_id=str(wav)):
            img = spectrogram_image(chunk, fc)
            export_image(img, target / f"{wav.stem}_{chunk.seq_index}.{ext}", args.format)
            count += 1
    print(f"wrote {count} images to {out}")
    return 0


def cmd_synth_data(args) -> int:
    paths = generate_corpus(args.out, args.per_class, args.seed, args.clip_seconds)
    print(f"wrote {len(paths)} clips to {args.out}")
    return 0


def _grouping(path: str | None, fallback) -> BinaryGrouping:
    if path:
        return BinaryGrouping.from_file(path)
    return BinaryGrouping(frozenset(fallback))


def _prepared_clips(data: str, grouping: BinaryGrouping, split_seed: int):
    return apply_grouping(split_dataset(scan_dataset(data), split_seed), grouping)


def cmd_train(args) -> int:
    fc = _feature_config(args)
    grouping = _grouping(args.grouping, EMERGENCY_CLASSES)
    config = TrainConfig(
        learning_rate=args.lr,
        training_steps=args.steps,
        weight_decay=args.decay,
        batch_size=args.batch_size,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    print(
        f"training: lr={config.learning_rate} steps={config.training_steps} decay={config.weight_decay} "
        f"batch_size={config.batch_size} seed={config.seed}",
        flush=True,
    )
    clips = _prepared_clips(args.data, grouping, args.seed)
    train_set = chunk_dataset(select(clips, "train"), fc, BINARY_LABELS, args.chunk_seconds)
    val_set = chunk_dataset(select(clips, "val"), fc, BINARY_LABELS, args.chunk_seconds)
    log.info("%d training chunks, %d validation chunks", len(train_set), len(val_set))
    model, history = train(train_set, val_set, BINARY_LABELS, config, log=log.info)
    model.meta.update(
        feature_config=fc.to_dict(),
        positive_classes=sorted(grouping.positive_classes),
        split_seed=args.seed,
        chunk_duration_s=args.chunk_seconds,
        train_config={
            "learning_rate": config.learning_rate,
            "training_steps": config.training_steps,
            "weight_decay": config.weight_decay,
            "batch_size": config.batch_size,
            "seed": config.seed,
        },
    )
    save_model(model, args.model_out)
    history_path = args.history_out or f"{args.model_out}.history.csv"
    write_history_csv(history, history_path)
    best = max((r.val_accuracy for r in history), default=float("nan"))
    print(f"saved {args.model_out} (best val accuracy {best:.4f}, checksum {model.checksum()[:12]})")
    return 0


def _eval_context(args):
    model = load_model(args.model)
    meta = model.meta
    grouping = _grouping(args.grouping, meta.get("positive_classes", EMERGENCY_CLASSES))
    split_seed = meta.get("split_seed", args.seed)
    clips = select(_prepared_clips(args.data, grouping, split_seed), args.split)
    fc = FeatureConfig.from_dict(meta.get("feature_config", {}))
    return model, clips, fc, grouping, meta.get("chunk_duration_s", 2.0)


def cmd_eval(args) -> int:
    model, clips, fc, grouping, chunk_s = _eval_context(args)
    report = evaluate(model, clips, fc, grouping=grouping, chunk_duration_s=chunk_s)
    if args.report:
        fmt = "csv" if args.report.lower().endswith(".csv") else "json"
        emit_report(report, args.report, fmt)
    c = report.confusion
    print(
        f"{args.split}: accuracy={report.accuracy:.4f} fpr={report.false_positive_rate:.4f} "
        f"tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn} n={report.n_samples}"
    )
    if not args.report:
        print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_sweep(args) -> int:
    tokens = [t.strip() for t in args.gains.split(",") if t.strip()]
    try:
        gains = [float(t) for t in tokens]
    except ValueError:
        raise UsageError(f"--gains must be comma-separated numbers, got {args.gains!r}") from None
    if not gains or any(g < 0 for g in gains):
        raise UsageError("--gains needs at least one non-negative value")
    model, clips, fc, grouping, chunk_s = _eval_context(args)
    rows = volume_sweep(model, clips, gains, fc, grouping, chunk_s)
    text = sweep_to_csv(rows, tokens)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


_SYNTH_SOURCES = {"synth": "synthetic_siren", "synth-noise": "synthetic_noise", "silence": "silence"}


def _make_source(args) -> AudioSource:
    kind = _SYNTH_SOURCES.get(args.source)
    if kind is None:
        config = AudioSourceConfig(kind="wav_file", path=args.source, seed=args.seed)
    else:
        config = AudioSourceConfig(kind=kind, seed=args.seed)
    return make_source(config, args.duration, speed=args.speed)


def _write_or_print(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    display = None if args.display.lower() == "none" else args.display
    config = PipelineConfig(queue_capacity=args.queue_capacity, display_endpoint=display, emit_threshold=args.threshold)
    source = _make_source(args)
    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        result = run_pipeline(
            source, None, args.model, config, args.duration, inference_delay_s=args.inference_delay, stop=stop
        )
    finally:
        signal.signal(signal.SIGINT, previous)
    traces = {t.seq_index: t for t in result.traces}
    lines = []
    for seq, pred in result.predictions:
        trace = traces[seq]
        lines.append(json.dumps({
            "seq_index": seq,
            "label": pred.label,
            "score": pred.score,
            "emitted": pred.score >= config.emit_threshold,
            "display_status": trace.display_status,
            "display_error": trace.display_error,
        }) + "\n")
    _write_or_print(args.log_path, "".join(lines))
    report = latency_report(result.traces, config.chunk_duration_s) if result.predictions else {"drops": result.drops, "chunks": len(result.traces)}
    if result.error:
        report["error"] = result.error
    _write_or_print(args.latency_out, json.dumps(report, indent=2) + "\n")
    if result.error:
        log.error("%s", result.error)
        return 2
    return 0


def cmd_device_sim(args) -> int:
    font = load_font(args.font_path)
    stop = threading.Event()
    server = None

    # installed before binding: a background shell starts us with SIGINT ignored
    def request_stop(*_):
        stop.set()
        if server is not None:  # shutdown() blocks until serve_forever returns
            threading.Thread(target=server.shutdown, daemon=True).start()

    previous = {sig: signal.signal(sig, request_stop) for sig in (signal.SIGINT, signal.SIGTERM)}
    announce = lambda msg: print(msg, flush=True)  # noqa: E731
    try:
        server = start_server(args.port, args.host, font, not args.no_mirror, announce=announce, background=False)
        try:
            if not stop.is_set():
                server.serve_forever()
        finally:
            server.server_close()
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    print("device-sim stopped", flush=True)
    return 0


def _parse_backends(text: str, credentials: str | None) -> list:
    backends = []
    for entry in (e.strip() for e in text.split(",")):
        if not entry:
            continue
        name, sep, kind = entry.partition("=")
        if not sep or not name:
            raise UsageError(f"backend entry must be name=kind, got {entry!r}")
        scheme, _, rest = kind.partition(":")
        if scheme == "mock":
            parts = rest.split(":") if rest else []
            try:
                numbers = [float(x) for x in parts]
            except ValueError:
                raise UsageError(f"bad mock latency in {entry!r}") from None
            if len(numbers) not in (1, 2):
                raise UsageError(f"mock backend needs mock:BASE[:JITTER], got {entry!r}")
            try:
                backends.append(default_mock(name, numbers[0], numbers[1] if len(numbers) > 1 else 0.0))
            except ValueError as exc:
                raise UsageError(f"{entry!r}: {exc}") from None
        elif scheme == "mockfile":
            backends.append(MockBackend(name, MockBackendConfig.from_text(Path(rest).read_text())))
        elif scheme == "http":
            backends.append(HttpSttBackend(name, rest, credentials))
        else:
            raise UsageError(f"unknown backend kind {scheme!r} in {entry!r}")
    if not backends:
        raise UsageError("--backends names no backends")
    if len({b.name for b in backends}) != len(backends):
        raise UsageError("backend names must be unique")
    return backends


def cmd_bench_stt(args) -> int:
    backends = _parse_backends(args.backends, args.credentials)
    if args.audio:
        audio, rate = load_wav(args.audio, DEFAULT_SAMPLE_RATE)
    else:
        audio, rate = phrase_audio(), DEFAULT_SAMPLE_RATE
    results = bench(backends, audio, rate, args.trials)
    summary = bench_summary(results)
    _write_or_print(args.csv_out, bench_csv(results))
    _write_or_print(args.summary_out, json.dumps(summary, indent=2) + "\n")
    if args.display.lower() != "none":
        ok = [r for r in results if r.trial_times_s]
        if ok:
            fastest = min(ok, key=lambda r: r.mean_s)
            acks = caption_sink(fastest.phrase, args.display)
            log.info("sent %d caption pages, %d acknowledged", len(acks), sum(a.ok for a in acks))
    return 0


# --------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except UsageError as exc:
        print(f"hearassist: error: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hearassist {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except DeviceStartError as exc:
        print(f"hearassist {args.command}: {exc}", file=sys.stderr)
        return 2
    except (*RUNTIME_ERRORS, FeatureError, PgmError) as exc:
        print(f"hearassist {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
