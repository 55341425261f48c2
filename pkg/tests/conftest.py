import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prosody_vc.config import ModelConfig, TrainingConfig  # noqa: E402
from prosody_vc.data import synthetic_corpus  # noqa: E402
from prosody_vc.training import Trainer, model_from_checkpoint, pretrain  # noqa: E402

OVERFIT_MODEL = ModelConfig.mini(mel_dim=80)
OVERFIT_TRAINING = TrainingConfig(batch_size=10, warmup_steps=200, max_steps=2000, seed=0)


def masked_l1(ckpt, corpus):
    """Eval-mode teacher-forced masked mel L1 of a checkpoint on a corpus."""
    model = model_from_checkpoint(ckpt)
    return Trainer(model, TrainingConfig(), ckpt.speakers).evaluate(corpus)


@dataclass
class OverfitRun:
    corpus: object
    initial: object
    final: object
    l1_initial: float
    l1_final: float
    seconds: float
    path: Path


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    corpus = synthetic_corpus(2, 5, seed=0)
    start = time.perf_counter()
    initial = pretrain(corpus, OVERFIT_MODEL, TrainingConfig(**{**OVERFIT_TRAINING.__dict__, "max_steps": 0}))
    final = pretrain(corpus, OVERFIT_MODEL, OVERFIT_TRAINING)
    seconds = time.perf_counter() - start
    path = tmp_path_factory.mktemp("overfit") / "pretrain.ckpt"
    final.save(path)
    return OverfitRun(corpus, initial, final, masked_l1(initial, corpus), masked_l1(final, corpus), seconds, path)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A few steps of pretraining: cheap, deterministic, not meant to sound like anything."""
    corpus = synthetic_corpus(2, 2, seed=3)
    ckpt = pretrain(corpus, OVERFIT_MODEL, TrainingConfig(batch_size=2, warmup_steps=5, max_steps=3))
    path = tmp_path_factory.mktemp("tiny") / "tiny.ckpt"
    ckpt.save(path)
    return ckpt, path, corpus


# -- acceptance report ---------------------------------------------------------

_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, name: str, passed: bool, detail: str = ""):
        _RESULTS[number] = (name, bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        name, ok, detail = _RESULTS[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
