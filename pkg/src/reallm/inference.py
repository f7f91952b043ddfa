"""Decoding: BLANK-driven streaming greedy search, a push/finish session,
frame-synchronous beam search, and the prompt-style baselines.

Greedy streaming decode::

    h <- [BOS]
    for each chunk embedding e:            # blocks on real-time input
        h.add(e)
        while (w <- argmax p(.|h)) != BLANK:
            h.add(w); emit w
    h.add(EOS embedding)
    while (w <- argmax p(.|h)) != EOS:
        h.add(w); emit w

BLANK is never added to the history. A per-chunk cap forces BLANK after
``max_emissions_per_chunk`` words, and a tail cap forces EOS, so every
decode terminates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .model import BOS_ITEM, EOS_ITEM, DecoderState, InputItem, ItemKind, OpCounter, ReaLLM
from .targets import build_sample
from .vocab import BLANK, EOS, FIRST_WORD

TAIL_CAP = 200


class SessionStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class Emission:
    token: int
    chunk: int
    logprob: float = 0.0
    wall_time_ns: int | None = None
    in_tail: bool = False


@dataclass
class DecodeStats:
    """Diagnostics of one decode."""

    predicted_blanks: int = 0
    forced_blanks: int = 0
    tail_capped: bool = False
    counter: OpCounter = field(default_factory=OpCounter)

    def blank_count(self, implicit_bos_blank: bool = True) -> int:
        """BLANK labels on the decode path, counting the request for the first
        chunk that follows BOS (never queried at inference time)."""
        return self.predicted_blanks + (1 if implicit_bos_blank else 0)


@dataclass
class DecodeResult:
    emissions: list[Emission]
    blank_count: int | None
    n_chunks: int
    stats: DecodeStats
    logprob: float = 0.0

    @property
    def tokens(self) -> list[int]:
        return [e.token for e in self.emissions]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max()
    return z - np.log(np.exp(z).sum())


def _allowed(vocab_size: int, *extra: int) -> np.ndarray:
    return np.array(sorted(set(extra) | set(range(FIRST_WORD, vocab_size))), dtype=np.int64)


def _pick(lp: np.ndarray, allowed: np.ndarray) -> int:
    return int(allowed[np.argmax(lp[allowed])])


class _Greedy:
    """Shared mechanics of the greedy decoders; holds one history."""

    def __init__(self, model: ReaLLM, stats: DecodeStats | None, tail_cap: int):
        self.model = model
        self.stats = stats if stats is not None else DecodeStats()
        self.tail_cap = tail_cap
        self.state = model.new_state()
        self.chunks = 0
        self.logprob = 0.0
        v = model.config.vocab_size
        self.chunk_allowed = _allowed(v, BLANK)
        self.tail_allowed = _allowed(v, EOS)
        model.feed(self.state, [BOS_ITEM], counter=self.stats.counter, want_logits=False)

    def inner_loop(self, logits: np.ndarray, chunk: int) -> list[Emission]:
        out = []
        cap = self.model.config.max_emissions_per_chunk
        counter = self.stats.counter
        while True:
            lp = log_softmax(logits)
            w = _pick(lp, self.chunk_allowed)
            if w == BLANK or len(out) >= cap:
                if w == BLANK:
                    self.stats.predicted_blanks += 1
                else:
                    self.stats.forced_blanks += 1
                self.logprob += lp[BLANK]
                counter.blank_outputs += 1
                return out
            self.logprob += lp[w]
            out.append(Emission(w, chunk, float(lp[w]), time.perf_counter_ns()))
            logits = self.model.step(self.state, InputItem.token(w), counter=counter)

    def consume(self, vector: np.ndarray, streaming: bool = True) -> list[Emission]:
        k = self.chunks
        self.chunks += 1
        item = InputItem.frame(k, vector)
        if not streaming:
            self.model.feed(self.state, [item], counter=self.stats.counter, want_logits=False)
            return []
        logits = self.model.step(self.state, item, counter=self.stats.counter)
        return self.inner_loop(logits, k)

    def tail(self) -> list[Emission]:
        out = []
        chunk = self.chunks - 1
        logits = self.model.step(self.state, EOS_ITEM, counter=self.stats.counter)
        while True:
            lp = log_softmax(logits)
            w = _pick(lp, self.tail_allowed)
            if w == EOS or len(out) >= self.tail_cap:
                self.stats.tail_capped = w != EOS
                self.logprob += lp[EOS]
                return out
            self.logprob += lp[w]
            out.append(Emission(w, chunk, float(lp[w]), time.perf_counter_ns(), in_tail=True))
            logits = self.model.step(self.state, InputItem.token(w), counter=self.stats.counter)


def greedy_decode(model: ReaLLM, chunk_source: Iterable[np.ndarray], *, streaming: bool = True,
                  stats: DecodeStats | None = None, tail_cap: int = TAIL_CAP) -> list[Emission]:
    """Greedy decode over a pull-based source of chunk embeddings.

    With ``streaming=False`` the per-chunk generation loop is skipped and
    every word comes out after the EOS embedding (non-streaming decode).
    """
    g = _Greedy(model, stats, tail_cap)
    emissions: list[Emission] = []
    for vec in chunk_source:
        emissions.extend(g.consume(vec, streaming))
    emissions.extend(g.tail())
    return emissions


class StreamSession:
    """Incremental greedy decoding: ``push`` chunks as they arrive, then ``finish``."""

    def __init__(self, model: ReaLLM, stats: DecodeStats | None = None, tail_cap: int = TAIL_CAP):
        self._g = _Greedy(model, stats, tail_cap)
        self._finished = False
        self.push_latency_ns: list[int] = []

    @property
    def stats(self) -> DecodeStats:
        return self._g.stats

    @property
    def chunks_consumed(self) -> int:
        return self._g.chunks

    def push(self, chunks: np.ndarray) -> list[Emission]:
        """Consume one chunk embedding [D] or several [n, D]; return new emissions."""
        if self._finished:
            raise SessionStateError("push() after finish()")
        arr = np.asarray(chunks)
        if arr.ndim == 1:
            arr = arr[None]
        t0 = time.perf_counter_ns()
        out = []
        for vec in arr:
            out.extend(self._g.consume(vec))
        self.push_latency_ns.append(time.perf_counter_ns() - t0)
        return out

    def finish(self) -> list[Emission]:
        if self._finished:
            raise SessionStateError("finish() called twice")
        self._finished = True
        return self._g.tail()


def stream_session(model: ReaLLM, stats: DecodeStats | None = None) -> StreamSession:
    return StreamSession(model, stats)


def prompt_decode(model: ReaLLM, chunks: np.ndarray, *, allow_blank: bool, stats: DecodeStats | None = None,
                  tail_cap: int | None = None) -> DecodeResult:
    """Decode with all speech in the prompt (BOS, chunks, EOS embedding), prefilled in one pass.

    With ``allow_blank`` the answer is a BLANK-interleaved string: each BLANK
    is fed back as a token and advances the implied chunk position.
    """
    stats = stats if stats is not None else DecodeStats()
    counter = stats.counter
    n = len(chunks)
    cap = tail_cap if tail_cap is not None else TAIL_CAP + (2 * n + 2 if allow_blank else 0)
    state = model.new_state()
    items = [BOS_ITEM] + [InputItem.frame(i, chunks[i]) for i in range(n)] + [EOS_ITEM]
    logits = model.feed(state, items, counter=counter)
    allowed = _allowed(model.config.vocab_size, EOS, *((BLANK,) if allow_blank else ()))
    emissions: list[Emission] = []
    blanks = 0
    total = 0.0
    generated = 0
    while True:
        lp = log_softmax(logits)
        if generated >= cap:
            stats.tail_capped = True
            total += lp[EOS]
            break
        w = _pick(lp, allowed)
        total += lp[w]
        if w == EOS:
            break
        generated += 1
        if w == BLANK:
            blanks += 1
            stats.predicted_blanks += 1
            counter.blank_outputs += 1
        else:
            chunk = min(blanks - 1, n - 1) if allow_blank else n - 1
            emissions.append(Emission(w, chunk, float(lp[w]), time.perf_counter_ns(), in_tail=not allow_blank))
        logits = model.step(state, InputItem.token(w), counter=counter)
    return DecodeResult(emissions, blanks if allow_blank else None, n, stats, total)


def forced_decode(model: ReaLLM, chunks: np.ndarray, alignment, mode: str = "realm", *,
                  delay_chunks: int = 0, stats: DecodeStats | None = None) -> DecodeResult:
    """Replay the decode that would produce the reference transcript.

    Makes the same model calls (prefill, steps, output evaluations) as a free
    decode whose argmax matched the reference, so counts and timings
    measure the mode's sequencing at a fixed output length.
    """
    stats = stats if stats is not None else DecodeStats()
    counter = stats.counter
    n = len(chunks)
    sample = build_sample(mode, alignment, n, model.config.chunk_ms, delay_chunks)
    items, targets = sample.inputs, sample.targets
    prompt = 1 if mode == "realm" else items.index(EOS_ITEM) + 1
    state = model.new_state()
    logits = model.feed(state, items[:prompt], chunks, counter=counter, want_logits=mode != "realm")
    emissions: list[Emission] = []
    total = 0.0
    chunk = n - 1 if mode == "speech_llm" else -1
    start = prompt if mode == "realm" else prompt - 1
    for pos in range(start, len(items)):
        if pos >= prompt:
            item = items[pos]
            if item.kind is ItemKind.FRAME:
                chunk = item.value
            logits = model.step(state, item, chunks, counter=counter)
        lp = log_softmax(logits)
        target = targets[pos]
        total += lp[target]
        if target == BLANK:
            stats.predicted_blanks += 1
            counter.blank_outputs += 1
            if mode == "time_aligned_llm":
                chunk += 1
        elif target != EOS:
            emissions.append(Emission(target, min(max(chunk, 0), n - 1), float(lp[target]), time.perf_counter_ns(),
                                      in_tail=pos >= items.index(EOS_ITEM)))
    blanks = stats.blank_count() if mode == "realm" else stats.predicted_blanks if mode == "time_aligned_llm" else None
    return DecodeResult(emissions, blanks, n, stats, total)


# ---------------------------------------------------------------- beam search


@dataclass
class Hypothesis:
    emissions: list[Emission]
    logprob: float
    state: DecoderState
    emissions_in_current_chunk: int = 0
    logits: np.ndarray | None = None
    blanks: int = 0

    @property
    def tokens(self) -> list[int]:
        return [e.token for e in self.emissions]

    def score(self, length_norm: bool = False) -> float:
        if length_norm:
            return self.logprob / max(1, len(self.emissions) + self.blanks)
        return self.logprob


def _expand_round(model: ReaLLM, active: list[Hypothesis], done: list[Hypothesis], beam: int, terminator: int,
                  cap: int, chunk: int, in_tail: bool, counter: OpCounter, length_norm: bool):
    """One token of expansion for every active hypothesis, then prune (done + extensions) to the beam."""
    allowed = _allowed(model.config.vocab_size)
    cands = []  # (score, order, kind, hyp, token, lp)
    order = 0
    for h in done:
        cands.append((h.score(length_norm), order, "done", h, None, 0.0))
        order += 1
    for h in active:
        lp = log_softmax(h.logits)
        cands.append((None, order, "end", h, terminator, lp[terminator]))
        order += 1
        if h.emissions_in_current_chunk < cap:
            for w in allowed:
                cands.append((None, order, "tok", h, int(w), lp[w]))
                order += 1
    scored = []
    for score, o, kind, h, w, lp in cands:
        if kind != "done":
            n_labels = len(h.emissions) + h.blanks + 1
            total = h.logprob + lp
            score = total / n_labels if length_norm else total
        scored.append((-score, o, kind, h, w, lp))
    scored.sort(key=lambda c: (c[0], c[1]))
    new_done, new_active = [], []
    for _, _, kind, h, w, lp in scored[:beam]:
        if kind == "done":
            new_done.append(h)
        elif kind == "end":
            new_done.append(Hypothesis(h.emissions, h.logprob + lp, h.state, h.emissions_in_current_chunk,
                                       None, h.blanks + (terminator == BLANK)))
            counter.blank_outputs += terminator == BLANK
        else:
            st = h.state.copy()
            em = Emission(w, chunk, float(lp), time.perf_counter_ns(), in_tail)
            logits = model.step(st, InputItem.token(w), counter=counter)
            new_active.append(Hypothesis(h.emissions + [em], h.logprob + lp, st, h.emissions_in_current_chunk + 1,
                                         logits, h.blanks))
    return new_done, new_active


def beam_decode(model: ReaLLM, chunks, beam_size: int, *, stats: DecodeStats | None = None,
                tail_cap: int = TAIL_CAP, length_norm: bool = False) -> Hypothesis:
    """Frame-synchronous beam search with BLANK as the chunk barrier.

    Every hypothesis consumes chunk k before any consumes k+1. Within a
    chunk, hypotheses grow one token per round until they predict BLANK
    (its log-probability is added) or hit the per-chunk cap; after every
    round the union of finished and growing hypotheses is pruned to
    ``beam_size``. The EOS tail runs under the same discipline.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    stats = stats if stats is not None else DecodeStats()
    counter = stats.counter
    cap = model.config.max_emissions_per_chunk
    state = model.new_state()
    model.feed(state, [BOS_ITEM], counter=counter, want_logits=False)
    hyps = [Hypothesis([], 0.0, state)]
    chunks = list(chunks)
    for k, vec in enumerate(chunks):
        # surviving hypotheses own distinct states, so each can advance in place
        for i, h in enumerate(hyps):
            logits = model.step(h.state, InputItem.frame(k, vec), counter=counter)
            hyps[i] = Hypothesis(h.emissions, h.logprob, h.state, 0, logits, h.blanks)
        done: list[Hypothesis] = []
        active = hyps
        while active:
            done, active = _expand_round(model, active, done, beam_size, BLANK, cap, k, False, counter, length_norm)
        hyps = done
    for i, h in enumerate(hyps):
        logits = model.step(h.state, EOS_ITEM, counter=counter)
        hyps[i] = Hypothesis(h.emissions, h.logprob, h.state, 0, logits, h.blanks)
    done = []
    active = hyps
    last = len(chunks) - 1
    while active:
        done, active = _expand_round(model, active, done, beam_size, EOS, tail_cap, last, True, counter, length_norm)
    best = max(done, key=lambda h: h.score(length_norm))
    stats.predicted_blanks += best.blanks
    return best


# ---------------------------------------------------------------- dispatch

MODES = ("realm", "speech_llm", "time_aligned_llm")


def decode_chunks(model: ReaLLM, chunks: np.ndarray, mode: str = "realm", *, beam: int | None = None,
                  streaming: bool = True, stats: DecodeStats | None = None) -> DecodeResult:
    """Decode one utterance's chunk embeddings under a training mode's sequencing."""
    stats = stats if stats is not None else DecodeStats()
    n = len(chunks)
    if mode == "realm":
        if beam is not None:
            best = beam_decode(model, chunks, beam, stats=stats)
            return DecodeResult(best.emissions, stats.blank_count(), n, stats, best.logprob)
        g = _Greedy(model, stats, TAIL_CAP)
        emissions = [e for vec in chunks for e in g.consume(vec, streaming)] + g.tail()
        return DecodeResult(emissions, stats.blank_count() if streaming else None, n, stats, g.logprob)
    if mode == "speech_llm":
        return prompt_decode(model, chunks, allow_blank=False, stats=stats)
    if mode == "time_aligned_llm":
        return prompt_decode(model, chunks, allow_blank=True, stats=stats)
    raise ValueError(f"unknown decode mode {mode!r}; expected one of {MODES}")


def format_emission_log(utt_id: str, emissions: Iterable[Emission], vocab=None) -> str:
    lines = []
    for e in emissions:
        tok = vocab.name(e.token) if vocab is not None else str(e.token)
        lines.append(f"{utt_id}\t{tok}\t{e.chunk}\t{e.logprob:.6f}\n")
    return "".join(lines)


def parse_emission_log(text: str) -> dict[str, list[tuple[str, int, float]]]:
    out: dict[str, list[tuple[str, int, float]]] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        utt, tok, chunk, lp = line.split("\t")
        out.setdefault(utt, []).append((tok, int(chunk), float(lp)))
    return out
