"""Real-time factor measurement and the cost-model comparison report."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .inference import DecodeStats, decode_chunks, forced_decode
from .metrics import CostParams, cost_common, cost_estimate, predicted_steps
from .model import ReaLLM, decoder_extend
from .synthdata import Utterance


@dataclass
class ModeRun:
    mode: str
    forced: bool
    audio_seconds: float
    chunks: int
    words: int
    decode_seconds: float
    encode_seconds: float
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def rtf(self) -> float:
        return (self.decode_seconds + self.encode_seconds) / self.audio_seconds

    @property
    def decoder_steps(self) -> int:
        """Frame and word-token positions; BOS and the EOS embedding are framing."""
        return self.counts["positions_frame"] + self.counts["positions_token"]

    @property
    def output_evals(self) -> int:
        """Output-layer evaluations minus the one per utterance that predicts EOS."""
        return self.counts["outputs"] - self.counts["utterances"]


def run_mode(model: ReaLLM, corpus: Sequence[Utterance], mode: str, *, forced: bool = False,
             encoded: Sequence[np.ndarray] | None = None) -> ModeRun:
    """Decode the corpus in ``mode``; ``forced`` replays the reference transcripts instead of searching."""
    if not corpus:
        raise ValueError("benchmark corpus is empty")
    t0 = time.perf_counter()
    enc = list(encoded) if encoded is not None else [model.encode(u.frames) for u in corpus]
    t_enc = time.perf_counter() - t0 if encoded is None else 0.0
    totals: dict[str, int] = {"utterances": len(corpus)}
    words = 0
    t0 = time.perf_counter()
    for u, chunks in zip(corpus, enc):
        stats = DecodeStats()
        if forced:
            res = forced_decode(model, chunks, u.alignment, mode, stats=stats)
        else:
            res = decode_chunks(model, chunks, mode, stats=stats)
        words += len(res.emissions)
        for k, v in stats.counter.as_dict().items():
            totals[k] = totals.get(k, 0) + v
    t_dec = time.perf_counter() - t0
    audio = sum(u.duration_ms for u in corpus) / 1000.0
    return ModeRun(mode, forced, audio, sum(len(c) for c in enc), words, t_dec, t_enc, totals)


@dataclass(frozen=True)
class UnitCosts:
    """Seconds per audio second (encoder), per decoder position, per output evaluation."""

    enc: float
    dec: float
    out: float


def fit_unit_costs(model: ReaLLM, corpus: Sequence[Utterance], positions: int = 64, reps: int = 3) -> UnitCosts:
    """Time the encoder, a single-position decoder step and the output head separately (best of ``reps``)."""
    audio = sum(u.duration_ms for u in corpus) / 1000.0
    enc = min(_timed(lambda: [model.encode(u.frames) for u in corpus]) for _ in range(reps)) / audio
    dim = model.config.decoder_dim
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((positions, dim)).astype(model.dtype)

    def steps(mode):
        st = model.new_state()
        for v in vecs:
            decoder_extend(st, v[None], model.np, model.config, mode)

    bare = min(_timed(lambda: steps("none")) for _ in range(reps)) / positions
    with_out = min(_timed(lambda: steps("last")) for _ in range(reps)) / positions
    return UnitCosts(enc, bare, max(with_out - bare, 0.0))


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


@dataclass
class CostReport:
    runs: dict[str, ModeRun]
    units: UnitCosts
    chunk_ms: int

    def params(self, run: ModeRun) -> CostParams:
        return CostParams(T=run.audio_seconds, U=run.words, f=1000.0 / self.chunk_ms,
                          enc_cost=self.units.enc, dec_cost=self.units.dec, out_cost=self.units.out)

    def step_rows(self) -> list[tuple[str, str, float, int]]:
        """(mode, quantity, predicted, measured), using T*f = chunks consumed."""
        rows = []
        f = 1000.0 / self.chunk_ms
        for mode, run in self.runs.items():
            if mode not in ("realm", "speech_llm"):
                continue
            pred = predicted_steps(mode, run.chunks / f, run.words, f)
            rows.append((mode, "decoder_steps", pred["decoder_steps"], run.decoder_steps))
            rows.append((mode, "output_evals", pred["output_evals"], run.output_evals))
        return rows

    def formula_rows(self) -> list[tuple[str, float]]:
        """Every cost formula evaluated per audio second on the realm run's T and U."""
        run = self.runs.get("realm") or next(iter(self.runs.values()))
        p = self.params(run)
        rows = [("common", cost_common(p) / p.T)]
        for arch in ("realm", "speech_llm", "rnnt"):
            rows.append((arch, cost_estimate(arch, p) / p.T))
        return rows
