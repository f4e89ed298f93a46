"""Shared fixtures for tests."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

# Ensure tests don't read real .env
os.environ["ENV_FILE"] = "/dev/null"

from emomoe.config import RunConfig, reset_settings
from emomoe.fec import EMOTIONS, FaceObservation, FrameRecord, ScriptedScorer
from emomoe.tensor import constant

SMALL_CONFIG = {
    "model": {
        "d_v": 6, "d_t": 8, "d_h": 8, "d_ff": 8, "n1": 8, "m": 3,
        "classes": 4, "k": 2, "patch": 2, "vocab": 8,
    },
    "data": {"n": 64, "n_eval": 32, "face_tokens": 2},
    "optimizer": {"batch_size": 16},
    "schedule": {"epochs_stage1": 1, "epochs_stage2": 1, "epochs_stage3": 1, "epochs_finetune": 1},
    "lora": {"rank": 2, "alpha": 2.0, "adapters": "ver,dfew"},
}

SMALL_INI = """\
[model]
d_v = 6
d_t = 8
d_h = 8
d_ff = 8
n1 = 8
m = 3
classes = 4
k = 2
patch = 2
vocab = 8

[data]
n = 64
n_eval = 32
face_tokens = 2

[schedule]
epochs_stage1 = 1
epochs_stage2 = 1
epochs_stage3 = 1
epochs_finetune = 1

[lora]
rank = 2
alpha = 2
adapters = ver,dfew
"""


@pytest.fixture(autouse=True)
def _clean_settings():
    """Reset cached settings between tests."""
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def small_cfg() -> RunConfig:
    return RunConfig.model_validate(SMALL_CONFIG)


@pytest.fixture
def small_ini(tmp_path: Path) -> Path:
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI, encoding="utf-8")
    return path


@pytest.fixture
def tmp_ledger(tmp_path: Path):
    """Return a Ledger backed by a temp file."""
    from emomoe.db import Ledger

    ledger = Ledger(tmp_path / "ledger.db")
    yield ledger
    ledger.close()


@pytest.fixture
def cli_env(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Point the default output directory and ledger into ``tmp_path``."""
    monkeypatch.setenv("EMOMOE_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("EMOMOE_LEDGER_PATH", str(tmp_path / "runs" / "ledger.db"))
    return tmp_path


def probs(top: float, emotion: str) -> tuple[float, ...]:
    """Seven-way distribution with ``top`` on ``emotion`` and the rest spread evenly."""
    rest = (1.0 - top) / (len(EMOTIONS) - 1)
    return tuple(top if e == emotion else rest for e in EMOTIONS)


# Frames 2 and 7 are the only ones with a face at or above 0.7.
CORPUS_FACES = {
    2: [{"bbox": (0, 0, 2, 2), "probs": probs(0.95, "happy")}],
    4: [{"bbox": (1, 0, 3, 2), "probs": probs(0.6, "fear")}],
    5: [
        {"bbox": (0, 2, 2, 2), "probs": probs(0.55, "angry")},
        {"bbox": (2, 2, 2, 2), "probs": probs(0.5, "neutral")},
    ],
    7: [{"bbox": (1, 1, 2, 3), "probs": probs(0.75, "sad")}],
}


@pytest.fixture
def fec_corpus() -> tuple[list[FrameRecord], ScriptedScorer]:
    """Scripted 10-frame, 4x4 pixel corpus."""
    rng = np.random.default_rng(11)
    frames = [
        FrameRecord(i, round(i * 0.04, 2), constant(rng.uniform(size=(4, 4, 3)))) for i in range(10)
    ]
    observations = {
        index: [FaceObservation.model_validate(f) for f in faces] for index, faces in CORPUS_FACES.items()
    }
    return frames, ScriptedScorer(observations)
