"""Time-aligned transcripts to interleaved training samples.

A word becomes due after chunk ``k(w) = min(ceil(t_end / chunk_ms) + delay, K)``
(1-based, K = number of chunks). The ReaLLM sample walks the chunks in
order: after every consumed input it emits the due words, otherwise it
predicts BLANK and consumes the next chunk (or the EOS embedding once
the chunks run out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import BOS_ITEM, EOS_ITEM, InputItem, ItemKind
from .vocab import BLANK, EOS, IGNORE, SPECIAL_NAMES, Vocabulary


class AlignmentError(ValueError):
    pass


class InvariantError(ValueError):
    pass


@dataclass(frozen=True)
class AlignedWord:
    token: int
    start: int
    end: int


@dataclass
class AlignedUtterance:
    words: list[AlignedWord]
    end_ms: int
    utt_id: str = ""

    def __post_init__(self):
        self.words = [w if isinstance(w, AlignedWord) else AlignedWord(*w) for w in self.words]
        self.validate()

    def validate(self) -> None:
        prev_end = 0
        for i, w in enumerate(self.words):
            if not w.start < w.end:
                raise InvariantError(f"{self.utt_id or 'utterance'}: word {i} has start {w.start} >= end {w.end}")
            if w.end > self.end_ms:
                raise InvariantError(
                    f"{self.utt_id or 'utterance'}: word {i} ends at {w.end} ms after utterance end {self.end_ms} ms")
            if w.start < prev_end:
                raise InvariantError(f"{self.utt_id or 'utterance'}: word {i} overlaps its predecessor")
            prev_end = w.end

    @property
    def tokens(self) -> list[int]:
        return [w.token for w in self.words]

    def chunk_count(self, chunk_ms: int) -> int:
        return self.end_ms // chunk_ms


@dataclass
class InterleavedSample:
    inputs: list[InputItem]
    targets: list[int]
    frames: np.ndarray | None = None
    mode: str = "realm"
    utt_id: str = ""
    emission_chunks: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def n_frames(self) -> int:
        return sum(1 for it in self.inputs if it.kind is ItemKind.FRAME)

    def loss_weights(self) -> np.ndarray:
        return np.array([0.0 if t == IGNORE else 1.0 for t in self.targets])

    def render(self, vocab: Vocabulary | None = None) -> list[tuple[str, str]]:
        """(input label, target label) per position, for dumps."""

        def tok(t):
            if t == IGNORE:
                return "·"
            if vocab is not None:
                return vocab.name(t)
            return SPECIAL_NAMES.get(t, str(t))

        rows = []
        for item, target in zip(self.inputs, self.targets):
            label = tok(item.value) if item.kind is ItemKind.TOKEN else item.label()
            rows.append((label, tok(target)))
        return rows


def _chunks_arg(chunks) -> tuple[int, np.ndarray | None]:
    if isinstance(chunks, (int, np.integer)):
        return int(chunks), None
    arr = np.asarray(chunks)
    return arr.shape[0], arr


def _check_chunks(a: AlignedUtterance, n: int, chunk_ms: int) -> None:
    a.validate()
    expected = a.chunk_count(chunk_ms)
    if n != expected:
        raise AlignmentError(
            f"{a.utt_id or 'utterance'}: got {n} chunk embeddings but {a.end_ms} ms at "
            f"{chunk_ms} ms/chunk implies {expected}")


def emission_chunk(end_ms: int, chunk_ms: int, n_chunks: int, delay_chunks: int = 0) -> int:
    """1-based chunk after which a word ending at ``end_ms`` is emitted."""
    return min(math.ceil(end_ms / chunk_ms) + delay_chunks, n_chunks)


def build_realm_sample(a: AlignedUtterance, chunks, chunk_ms: int, delay_chunks: int = 0) -> InterleavedSample:
    if delay_chunks < 0:
        raise ValueError("delay_chunks must be >= 0")
    n, frames = _chunks_arg(chunks)
    _check_chunks(a, n, chunk_ms)
    due = [emission_chunk(w.end, chunk_ms, n, delay_chunks) for w in a.words]
    inputs = [BOS_ITEM]
    targets: list[int] = []
    consumed = 0
    nxt = 0
    while True:
        while nxt < len(a.words) and due[nxt] <= consumed:
            targets.append(a.words[nxt].token)
            inputs.append(InputItem.token(a.words[nxt].token))
            nxt += 1
        targets.append(BLANK)
        if consumed == n:
            inputs.append(EOS_ITEM)
            break
        inputs.append(InputItem.frame(consumed))
        consumed += 1
    for w in a.words[nxt:]:
        targets.append(w.token)
        inputs.append(InputItem.token(w.token))
    targets.append(EOS)
    return InterleavedSample(inputs, targets, frames, "realm", a.utt_id, [d - 1 for d in due])


def build_speech_llm_sample(a: AlignedUtterance, chunks, chunk_ms: int) -> InterleavedSample:
    """Prompt = BOS, every chunk, EOS embedding; then the plain transcript."""
    n, frames = _chunks_arg(chunks)
    _check_chunks(a, n, chunk_ms)
    inputs = [BOS_ITEM] + [InputItem.frame(i) for i in range(n)] + [EOS_ITEM]
    inputs += [InputItem.token(t) for t in a.tokens]
    targets = [IGNORE] * (n + 1) + a.tokens + [EOS]
    return InterleavedSample(inputs, targets, frames, "speech_llm", a.utt_id)


def build_time_aligned_llm_sample(a: AlignedUtterance, chunks, chunk_ms: int, delay_chunks: int = 0) -> InterleavedSample:
    """Same prompt as the speech-LLM sample, but the answer is the BLANK-interleaved ReaLLM target string."""
    n, frames = _chunks_arg(chunks)
    realm = build_realm_sample(a, n, chunk_ms, delay_chunks)
    answer = realm.targets
    inputs = [BOS_ITEM] + [InputItem.frame(i) for i in range(n)] + [EOS_ITEM]
    inputs += [InputItem.token(t) for t in answer[:-1]]
    targets = [IGNORE] * (n + 1) + answer
    return InterleavedSample(inputs, targets, frames, "time_aligned_llm", a.utt_id, realm.emission_chunks)


BUILDERS = {
    "realm": build_realm_sample,
    "speech_llm": lambda a, chunks, chunk_ms, delay_chunks=0: build_speech_llm_sample(a, chunks, chunk_ms),
    "time_aligned_llm": build_time_aligned_llm_sample,
}


def build_sample(mode: str, a: AlignedUtterance, chunks, chunk_ms: int, delay_chunks: int = 0) -> InterleavedSample:
    try:
        builder = BUILDERS[mode]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(BUILDERS)}") from None
    return builder(a, chunks, chunk_ms, delay_chunks=delay_chunks)


def expected_words_per_chunk(a: AlignedUtterance, chunk_ms: int, n_chunks: int | None = None,
                             delay_chunks: int = 0) -> list[list[int]]:
    """Reference tokens grouped by 0-based emission chunk."""
    n = a.chunk_count(chunk_ms) if n_chunks is None else n_chunks
    groups: list[list[int]] = [[] for _ in range(max(n, 1))]
    for w in a.words:
        k = emission_chunk(w.end, chunk_ms, n, delay_chunks)
        groups[max(k - 1, 0)].append(w.token)
    return groups


# ---------------------------------------------------------------- file format


def format_alignment(a: AlignedUtterance, vocab: Vocabulary | None = None) -> str:
    def name(t):
        return vocab.name(t) if vocab is not None else str(t)

    words = ",".join(f"{name(w.token)}:{w.start}:{w.end}" for w in a.words)
    return f"{a.utt_id}\t{a.end_ms}\t{words}"


def parse_alignment(line: str, vocab: Vocabulary | None = None) -> AlignedUtterance:
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (2, 3):
        raise AlignmentError(f"malformed alignment line: {line!r}")
    utt_id, end = parts[0], int(parts[1])
    words = []
    if len(parts) == 3 and parts[2]:
        for chunk in parts[2].split(","):
            tok, start, stop = chunk.rsplit(":", 2)
            tid = vocab.id(tok) if vocab is not None else int(tok)
            words.append(AlignedWord(tid, int(start), int(stop)))
    return AlignedUtterance(words, end, utt_id)


def read_alignments(path, vocab: Vocabulary | None = None) -> list[AlignedUtterance]:
    with open(path) as fh:
        return [parse_alignment(line, vocab) for line in fh if line.strip()]


def write_alignments(path, utts, vocab: Vocabulary | None = None) -> None:
    Path(path).write_text("".join(format_alignment(a, vocab) + "\n" for a in utts))


EXAMPLE_WORDS = ["and", "hand", "it", "over", "to", "you"]
EXAMPLE_TIMES = [(140, 380), (460, 740), (740, 860), (900, 1180), (1180, 1380), (1380, 1700)]
EXAMPLE_END_MS = 2180


def worked_example() -> tuple[AlignedUtterance, Vocabulary]:
    """The six-word utterance ending at 2180 ms used as a worked example."""
    vocab = Vocabulary(EXAMPLE_WORDS)
    words = [AlignedWord(vocab.id(w), s, e) for w, (s, e) in zip(EXAMPLE_WORDS, EXAMPLE_TIMES)]
    return AlignedUtterance(words, EXAMPLE_END_MS, "example"), vocab
