from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from hearassist import cli
from hearassist.classifier import TrainConfig, save_model, train
from hearassist.device.server import start_server
from hearassist.evaluation import BINARY_LABELS, BinaryGrouping, apply_grouping, chunk_dataset, scan_dataset, select, split_dataset
from hearassist.features import FeatureConfig
from hearassist.synthdata import generate_corpus

DATA = Path(__file__).parent / "data"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("small_corpus")
    generate_corpus(root, per_class=5, seed=3)
    return root


@pytest.fixture(scope="session")
def small_model(small_corpus, tmp_path_factory):
    """A briefly trained binary model on the small corpus, saved with the CLI's meta keys."""
    fc = FeatureConfig()
    clips = apply_grouping(split_dataset(scan_dataset(small_corpus), 0), BinaryGrouping(frozenset({"siren"})))
    tr = chunk_dataset(select(clips, "train"), fc)
    va = chunk_dataset(select(clips, "val"), fc)
    model, _ = train(tr, va, BINARY_LABELS, TrainConfig(training_steps=40, eval_every=20, seed=0))
    model.meta.update(feature_config=fc.to_dict(), positive_classes=["siren"], split_seed=0, chunk_duration_s=2.0)
    path = tmp_path_factory.mktemp("small_model") / "small.hsm"
    save_model(model, path)
    return path


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """synth-data (40 per class) -> train (2000 steps) -> eval on the test split, all via the CLI."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    corpus, model, report = root / "corpus", root / "model.hsm", root / "report.json"
    assert cli.main(["synth-data", "--out", str(corpus), "--per-class", "40"]) == 0
    assert cli.main(["train", "--data", str(corpus), "--model-out", str(model), "--steps", "2000"]) == 0
    assert cli.main(["eval", "--data", str(corpus), "--model", str(model), "--split", "test", "--report", str(report)]) == 0
    seconds = time.perf_counter() - t0
    return {"corpus": corpus, "model": model, "report": json.loads(report.read_text()), "seconds": seconds}


@pytest.fixture
def device():
    server = start_server(port=0, announce=None)
    yield server
    server.stop()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
