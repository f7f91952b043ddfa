"""Scoring (WER, AER, LER), the analytic inference-cost model and RTF timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .targets import AlignedUtterance, expected_words_per_chunk


@dataclass(frozen=True)
class WerResult:
    rate: float
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_ops(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum unit-cost Levenshtein alignment."""
    n, m = len(ref), len(hyp)
    d = [list(range(m + 1))] + [[i] + [0] * m for i in range(1, n + 1)]
    for i in range(1, n + 1):
        ri = ref[i - 1]
        prev, row = d[i - 1], d[i]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), ins, dele


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    return sum(edit_ops(ref, hyp))


def wer(ref: Sequence, hyp: Sequence) -> WerResult:
    """Word error rate; an empty reference divides by 1 so insertions still count."""
    s, i, d = edit_ops(ref, hyp)
    return WerResult((s + i + d) / max(1, len(ref)), s, i, d, len(ref))


def corpus_wer(pairs) -> WerResult:
    s = i = d = n = 0
    for ref, hyp in pairs:
        r = wer(ref, hyp)
        s, i, d, n = s + r.substitutions, i + r.insertions, d + r.deletions, n + r.ref_words
    return WerResult((s + i + d) / max(1, n), s, i, d, n)


def aer_counts(ref: AlignedUtterance, chunk_ms: int, emissions, n_chunks: int | None = None) -> tuple[int, int]:
    """(per-chunk edit distance summed over chunks, reference word count).

    Decoded words are grouped by ``emission.chunk``; words decoded before the
    first chunk count toward chunk 0 and tail words toward the final chunk.
    """
    expected = expected_words_per_chunk(ref, chunk_ms, n_chunks)
    decoded: list[list[int]] = [[] for _ in expected]
    last = len(expected) - 1
    for e in emissions:
        decoded[min(max(e.chunk, 0), last)].append(e.token)
    errors = sum(edit_distance(exp, dec) for exp, dec in zip(expected, decoded))
    return errors, len(ref.words)


def aer(ref: AlignedUtterance, chunk_ms: int, emissions, n_chunks: int | None = None) -> float:
    errors, n = aer_counts(ref, chunk_ms, emissions, n_chunks)
    return errors / max(1, n)


def ler(samples: Sequence[tuple[int, int]]) -> float:
    """Fraction of (predicted BLANK count, reference frame count) pairs with count != frames + 1."""
    if not samples:
        return 0.0
    for blanks, frames in samples:
        if blanks < 0 or frames < 0:
            raise ValueError("counts must be non-negative")
    return sum(1 for blanks, frames in samples if blanks != frames + 1) / len(samples)


# ---------------------------------------------------------------- cost model

ARCHITECTURES = ("realm", "speech_llm", "rnnt")


@dataclass(frozen=True)
class CostParams:
    """T seconds of audio, U output tokens, f chunks/s (f_prime frames/s for
    RNN-T, default 4f), and unit costs: encoder per second, decoder per
    token step, output layer per evaluation."""

    T: float
    U: float
    f: float = 1000.0 / 240.0
    f_prime: float | None = None
    enc_cost: float = 0.0
    dec_cost: float = 0.0
    out_cost: float = 0.0

    def __post_init__(self):
        if self.f_prime is None:
            object.__setattr__(self, "f_prime", 4.0 * self.f)
        for name in ("T", "U", "f", "f_prime", "enc_cost", "dec_cost", "out_cost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def cost_common(p: CostParams) -> float:
    return p.T * p.enc_cost + p.U * p.dec_cost + p.U * p.out_cost


def cost_estimate(arch: str, p: CostParams) -> float:
    common = cost_common(p)
    if arch == "realm":
        return common + p.T * p.f * p.dec_cost + p.T * p.f * p.out_cost
    if arch == "speech_llm":
        return common + p.T * p.f * p.dec_cost
    if arch == "rnnt":
        return common + p.T * p.f_prime * p.out_cost
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def predicted_steps(arch: str, T: float, U: int, f: float) -> dict[str, float]:
    """Token-step counts implied by the cost formulas (decoder steps, output evaluations)."""
    if arch == "realm":
        return {"decoder_steps": T * f + U, "output_evals": T * f + U}
    if arch == "speech_llm":
        return {"decoder_steps": T * f + U, "output_evals": U}
    raise ValueError(f"no step-count model for {arch!r}")


# ---------------------------------------------------------------- RTF


@dataclass
class RtfReport:
    rtf: float
    wall_seconds: float
    audio_seconds: float
    stages: dict[str, float] = field(default_factory=dict)

    def stage_rtf(self) -> dict[str, float]:
        return {k: v / self.audio_seconds for k, v in self.stages.items()}


class StageTimer:
    """Accumulates wall time per named stage."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    def time(self, stage: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.seconds[stage] = timer.seconds.get(stage, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def measure_rtf(decode: Callable[[object, StageTimer], object], corpus: Sequence, audio_seconds: float) -> RtfReport:
    """Wall-clock decode time over the corpus divided by its audio duration."""
    if not corpus:
        raise ValueError("RTF needs a non-empty corpus")
    if audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    timer = StageTimer()
    t0 = time.perf_counter()
    for utt in corpus:
        decode(utt, timer)
    wall = time.perf_counter() - t0
    return RtfReport(wall / audio_seconds, wall, audio_seconds, dict(timer.seconds))


# ---------------------------------------------------------------- length buckets


def length_buckets(durations: Sequence[float], longest: int = 100) -> dict[str, list[int]]:
    """Indices per bucket: duration terciles (short/medium/long) and the longest N."""
    order = sorted(range(len(durations)), key=lambda i: (durations[i], i))
    n = len(order)
    a, b = n // 3, (2 * n) // 3
    return {
        "short": order[:a],
        "medium": order[a:b],
        "long": order[b:],
        f"longest{longest}": order[max(0, n - longest):],
    }


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned-column plain-text table."""
    cells = [[str(h) for h in header]] + [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)
