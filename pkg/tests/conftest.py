import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import time  # noqa: E402
from dataclasses import dataclass  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from reallm.model import ModelConfig, ReaLLM, init_params  # noqa: E402
from reallm.synthdata import SynthSpec, generate_split  # noqa: E402
from reallm.training import TrainConfig, fit  # noqa: E402

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")

TRAIN_UTTS = 2000
DEV_UTTS = 200
LONG_UTTS = 50
LONG_FACTOR = 3

_ACCEPTANCE: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=6, decoder_layers=1, decoder_dim=8, decoder_heads=2, decoder_ffn_dim=16,
                encoder_layers=1, encoder_dim=8, encoder_heads=2, encoder_ffn_dim=16, raw_frame_dim=2,
                chunk_ms=120, encoder_right_context_chunks=1, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_spec(**kw) -> SynthSpec:
    base = dict(vocab_words=3, raw_frame_dim=2, min_word_ms=60, max_word_ms=120, min_silence_ms=20,
                max_silence_ms=60, min_words=1, max_words=3, signature_frames=3, min_utterance_ms=120, seed=0)
    base.update(kw)
    return SynthSpec(**base)


@pytest.fixture
def tiny_model():
    return ReaLLM(tiny_config())


@pytest.fixture(scope="session")
def default_model():
    return ReaLLM(ModelConfig())


@pytest.fixture(scope="session")
def dev_utts():
    return generate_split(SynthSpec(), DEV_UTTS, start_index=TRAIN_UTTS, split="dev")


@dataclass
class Trained:
    model: ReaLLM
    mode: str
    train_seconds: float


def _train(mode: str) -> Trained:
    spec = SynthSpec()
    train = generate_split(spec, TRAIN_UTTS, split="train")
    model = ReaLLM(ModelConfig())
    t0 = time.perf_counter()
    fit(model, train, TrainConfig(mode=mode))
    return Trained(model, mode, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def trained_realm() -> Trained:
    return _train("realm")


@pytest.fixture(scope="session")
def trained_speech_llm() -> Trained:
    return _train("speech_llm")


@pytest.fixture(scope="session")
def long_utts():
    return generate_split(SynthSpec().scaled_lengths(LONG_FACTOR), LONG_UTTS, split="long")


def float64_model(config: ModelConfig) -> ReaLLM:
    return ReaLLM(config, init_params(config, np.float64))
