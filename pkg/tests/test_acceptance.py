"""Acceptance criteria 1-9, one test each.

Every test records its verdict in ``conftest.ACCEPTANCE`` so the terminal
summary prints a single pass/fail line per criterion.
"""

import csv
import hashlib
import io
import json
import math
import os
import signal
import subprocess
import sys
import time
import urllib.request
from collections import Counter
from pathlib import Path

import numpy as np

import conftest
import oracles
from conftest import DATA
from hearassist import cli
from hearassist.audio_io import AudioChunk
from hearassist.classifier import Arch, init_model, load_model, loss_and_grad
from hearassist.device import display as D
from hearassist.evaluation import (
    EMERGENCY,
    NON_EMERGENCY,
    BinaryGrouping,
    Confusion,
    MetricsReport,
    apply_grouping,
    evaluate,
    metrics_from_labels,
    predict_clips,
    scan_dataset,
    split_dataset,
)
from hearassist.features import FeatureConfig, dct2, feature_matrix, power_spectrum
from hearassist.pipeline import push_to_display


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root):
    root = Path(root)
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_1_protocol_substitutes_for_published_numbers(desk_run, tmp_path):
    # The published Inception-v4 / VGG16 accuracy and FPR figures need transfer learning on
    # ESC plus private field recordings; what is checked here is the protocol itself.
    clips = split_dataset(scan_dataset(desk_run["corpus"]), load_model(desk_run["model"]).meta["split_seed"])
    per = Counter((c.class_name, c.split) for c in clips)
    split_ok = all((per[k, "train"], per[k, "val"], per[k, "test"]) == (24, 8, 8) for k in ("siren", "tone", "noise"))
    grouped = apply_grouping(clips, BinaryGrouping(frozenset({"siren"})))
    grouping_ok = {c.class_name: c.label for c in grouped} == {
        "siren": EMERGENCY, "tone": NON_EMERGENCY, "noise": NON_EMERGENCY}
    report = desk_run["report"]
    report_ok = {"accuracy", "false_positive_rate", "confusion", "n_samples"} <= set(report)
    sweep = tmp_path / "sweep.csv"
    code = cli.main(["sweep", "--data", str(desk_run["corpus"]), "--model", str(desk_run["model"]),
                     "--gains", "0.25,0.5,1.0", "--out", str(sweep)])
    rows = list(csv.reader(io.StringIO(sweep.read_text()))) if code == 0 else []
    sweep_ok = code == 0 and [r[0] for r in rows[1:]] == ["0.25", "0.5", "1.0"]
    record(1, split_ok and grouping_ok and report_ok and sweep_ok,
           "published 92%/82% and 84%/70% accuracy figures are not reproducible at desk scale; "
           f"protocol checked: 60/20/20 split={split_ok} grouping={grouping_ok} "
           f"accuracy+fpr report={report_ok} volume sweep={sweep_ok}")


def test_criterion_2_dsp_matches_naive_reference():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cfg = FeatureConfig()
    worst = 0.0
    for i in range(50):
        x = rng.uniform(-1, 1, 8000)
        chunk = AudioChunk(x, 16000, i, 0)
        ours = feature_matrix(chunk.samples, cfg)
        ref = oracles.log_mel(x)
        assert ours.shape == ref.shape
        worst = max(worst, float(np.max(np.abs(ours - ref) / np.abs(ref))))
    dct_worst = 0.0
    for _ in range(20):
        v = rng.standard_normal(64)
        dct_worst = max(dct_worst, float(np.max(np.abs(dct2(v, 64) - oracles.dct2(v)))))
    parseval_worst = 0.0
    for _ in range(20):
        frame = rng.standard_normal(512)
        energy = 512 * float(np.sum(frame**2))
        full = float(np.sum(np.abs(oracles.naive_dft(frame, 512)) ** 2))
        p = power_spectrum(frame, 512)
        half = float(p[0] + p[256] + 2 * p[1:256].sum())
        parseval_worst = max(parseval_worst, abs(full - energy) / energy, abs(half - energy) / energy)
    seconds = time.perf_counter() - t0
    record(2, worst <= 1e-6 and dct_worst <= 1e-9 and parseval_worst <= 1e-9 and seconds < 60,
           f"log-mel max rel err {worst:.2e} (<=1e-6), DCT max err {dct_worst:.2e} (<=1e-9), "
           f"Parseval rel err {parseval_worst:.2e} (<=1e-9), {seconds:.1f} s (<60)")


def test_criterion_3_gradients_match_finite_differences():
    t0 = time.perf_counter()
    model = init_model(Arch(8, 8, 2, 2, 2), [EMERGENCY, NON_EMERGENCY], seed=7)
    rng = np.random.default_rng(8)
    for name, tensor in model.params.items():
        if name.endswith("_b"):
            tensor[:] = rng.uniform(-0.1, 0.1, tensor.shape)
    batch = [(rng.uniform(0, 1, (8, 8)), i % 2) for i in range(4)]
    assert all(v.dtype == np.float64 for v in model.params.values())
    _, grads = loss_and_grad(model, batch)
    rows = oracles.finite_difference_report(lambda: loss_and_grad(model, batch)[0], model.params, grads, eps=1e-5)
    bad = [r for r in rows if not r[4]]
    seconds = time.perf_counter() - t0
    record(3, not bad and seconds < 120,
           f"{len(rows) - len(bad)}/{len(rows)} coordinates within 1e-4 rel (1e-7 abs for |g|<1e-3), "
           f"{seconds:.1f} s (<120)")


def test_criterion_4_desk_scale_learning(desk_run):
    r = desk_run["report"]
    acc, fpr, seconds = r["accuracy"], r["false_positive_rate"], desk_run["seconds"]
    record(4, acc >= 0.90 and fpr <= 0.10 and seconds < 600,
           f"test accuracy {acc:.4f} (>=0.90), FPR {fpr:.4f} (<=0.10), n={r['n_samples']}, "
           f"synth+train(2000 steps)+eval {seconds:.0f} s (<600)")


def test_criterion_5_real_time_contract(desk_run, tmp_path):
    model = str(desk_run["model"])
    lat = tmp_path / "lat.json"
    code = cli.main(["run", "--source", "synth", "--model", model, "--duration", "60", "--speed", "1",
                     "--log", str(tmp_path / "a.jsonl"), "--latency-out", str(lat)])
    rtf = json.loads(lat.read_text())["realtime_factor"] if code == 0 else math.inf

    log, lat2 = tmp_path / "b.jsonl", tmp_path / "lat2.json"
    code2 = cli.main(["run", "--source", "synth", "--model", model, "--duration", "10", "--speed", "1",
                      "--inference-delay", "5", "--queue-capacity", "1",
                      "--log", str(log), "--latency-out", str(lat2)])
    seqs = [json.loads(line)["seq_index"] for line in log.read_text().splitlines()] if code2 == 0 else []
    drops = json.loads(lat2.read_text())["drops"] if code2 == 0 else 0
    ordered = seqs == sorted(seqs) and len(seqs) == len(set(seqs)) > 0
    record(5, rtf < 1.0 and drops >= 1 and ordered,
           f"60 s live run realtime_factor {rtf:.4f} (<1.0); 5 s/chunk with capacity 1: "
           f"{drops} drops, outputs {seqs} in order={ordered}")


def test_criterion_6_wire_render_conformance():
    golden = (DATA / "emergency_mirrored.pbm").read_bytes()
    proc = subprocess.Popen([sys.executable, "-m", "hearassist.cli", "device-sim", "--port", "0"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
                            env=dict(os.environ, PYTHONUNBUFFERED="1"))
    try:
        url = proc.stdout.readline().strip().rsplit(" ", 1)[1]
        ack = push_to_display("EMERGENCY", url.removeprefix("http://"))
        with urllib.request.urlopen(url + "/framebuffer", timeout=5) as resp:
            wire = resp.read()
        proc.send_signal(signal.SIGINT)
        proc.communicate(timeout=10)
    finally:
        proc.kill()
    golden_ok = ack.ok and wire == golden and golden.decode() == oracles.mirrored_word_pbm("EMERGENCY")

    rng = np.random.default_rng(6)
    failures = 0
    for _ in range(200):
        text = "".join(chr(c) for c in rng.integers(32, 127, rng.integers(0, 120)))
        plain = D.rendered(text, mirrored=False)
        fb = D.FrameBuffer(rng.integers(0, 2, (32, 128)))
        ok = (D.rendered(text) == D.mirror(plain)
              and D.mirror(D.mirror(plain)) == plain
              and D.mirror(D.mirror(fb)) == fb
              and D.mirror(fb).lit_count() == fb.lit_count())
        failures += not ok
    record(6, golden_ok and failures == 0,
           f"GET /framebuffer byte-exact vs golden={golden_ok}; {200 - failures}/200 fuzz cases pass "
           "mirror involution and render equivalence")


def test_criterion_7_stt_benchmark(tmp_path):
    csv_out, summary_out = tmp_path / "bench.csv", tmp_path / "bench.json"
    code = cli.main(["bench-stt", "--backends", "cloud=mock:1.5,offline=mock:10.5", "--trials", "5",
                     "--csv-out", str(csv_out), "--summary-out", str(summary_out)])
    assert code == 0
    rows = list(csv.reader(io.StringIO(csv_out.read_text())))[1:]
    s = json.loads(summary_out.read_text())
    ratio, diff = s["mean_ratio"], s["mean_difference_s"]
    ok = abs(ratio - 7.0) <= 0.35 and len(rows) == 10 and abs(diff - 9.0) <= 0.45 and s["slowest"] == "offline"
    record(7, ok, f"mean ratio {ratio:.4f} (7.0+-5%), {len(rows)} CSV rows (10), "
                  f"slow-fast difference {diff:.4f} s (9.0+-5%)")


def test_criterion_8_metrics_oracle(small_corpus, small_model):
    rng = np.random.default_rng(88)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 200))
        truth = [EMERGENCY if b else NON_EMERGENCY for b in rng.integers(0, 2, n)]
        pred = [EMERGENCY if b else NON_EMERGENCY for b in rng.integers(0, 2, n)]
        r = metrics_from_labels(truth, pred)
        (tp, fp, tn, fn), acc, fpr = oracles.tally(truth, pred)
        c = r.confusion
        mismatches += (c.tp, c.fp, c.tn, c.fn) != (tp, fp, tn, fn) or r.accuracy != acc or r.false_positive_rate != fpr
    hand = MetricsReport.from_confusion(Confusion(tp=4, fp=3, tn=7, fn=1))
    hand_ok = hand.accuracy == 11 / 15 and hand.false_positive_rate == 0.3

    model = load_model(small_model)
    clips = apply_grouping(split_dataset(scan_dataset(small_corpus), 0), BinaryGrouping(frozenset({"siren"})))
    fc = FeatureConfig()
    outcomes = predict_clips(model, clips, fc)
    (tp, fp, tn, fn), acc, fpr = oracles.tally([o.truth for o in outcomes], [o.predicted for o in outcomes])
    full = evaluate(model, clips, fc)
    eval_ok = (full.confusion.tp, full.confusion.fp, full.confusion.tn, full.confusion.fn) == (tp, fp, tn, fn) \
        and (full.accuracy, full.false_positive_rate) == (acc, fpr)
    record(8, mismatches == 0 and hand_ok and eval_ok,
           f"{100 - mismatches}/100 random sets agree exactly; hand case acc {hand.accuracy:.4f} FPR "
           f"{hand.false_positive_rate:.2f}; model evaluation agrees={eval_ok}")


def _pipeline_outputs(root: Path, runner):
    corpus = root / "corpus"
    steps = [
        ["synth-data", "--out", str(corpus), "--per-class", "5", "--clip-seconds", "4", "--seed", "5"],
        ["train", "--data", str(corpus), "--model-out", str(root / "model.hsm"), "--steps", "30",
         "--eval-every", "10", "--seed", "5"],
        ["eval", "--data", str(corpus), "--model", str(root / "model.hsm"), "--report", str(root / "report.json")],
        ["sweep", "--data", str(corpus), "--model", str(root / "model.hsm"), "--gains", "0.5,1",
         "--out", str(root / "sweep.csv")],
        ["featurize", "--in", str(corpus), "--out", str(root / "images")],
    ]
    for argv in steps:
        assert runner(argv) == 0, argv
    return tree_digest(root)


def test_criterion_9_determinism(tmp_path):
    def in_process(argv):
        return cli.main(argv)

    def fresh_process(argv):
        return subprocess.run([sys.executable, "-m", "hearassist.cli", *argv], capture_output=True).returncode

    a = _pipeline_outputs(tmp_path / "a", in_process)
    b = _pipeline_outputs(tmp_path / "b", fresh_process)
    differing = sorted(k for k in a if a[k] != b.get(k))
    kinds = Counter(Path(k).suffix for k in a)
    record(9, a.keys() == b.keys() and not differing,
           f"{len(a)} files bit-identical across two runs (one in a fresh process): "
           f"{kinds['.hsm']} model, {kinds['.pgm']} images, {kinds['.json'] + kinds['.csv']} reports; "
           f"differing={differing[:3]}")
