"""Synthetic "speech" with exact word alignments.

Every vocabulary word owns a fixed random signature of a few raw frames.
An utterance concatenates silences and time-stretched signatures, then
adds Gaussian noise. Because the generator places the signatures itself,
its alignments are exact.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .targets import AlignedUtterance, AlignedWord, read_alignments, write_alignments
from .vocab import FIRST_WORD, Vocabulary

FRAMES_MAGIC = b"RLFR"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class SynthSpec:
    vocab_words: int = 20
    raw_frame_dim: int = 8
    raw_frame_ms: int = 20
    min_word_ms: int = 120
    max_word_ms: int = 480
    min_silence_ms: int = 40
    max_silence_ms: int = 320
    noise_sigma: float = 0.1
    min_words: int = 2
    max_words: int = 8
    signature_frames: int = 6
    min_utterance_ms: int = 240
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.vocab_words < 1:
            problems.append("vocab_words must be >= 1")
        for lo, hi in (("min_word_ms", "max_word_ms"), ("min_silence_ms", "max_silence_ms"),
                       ("min_words", "max_words")):
            if getattr(self, lo) > getattr(self, hi):
                problems.append(f"{lo} > {hi}")
        for name in ("min_word_ms", "max_word_ms", "min_silence_ms", "max_silence_ms", "min_utterance_ms"):
            if getattr(self, name) % self.raw_frame_ms:
                problems.append(f"{name} must be a multiple of raw_frame_ms")
        if self.min_word_ms <= 0 or self.min_silence_ms < 0 or self.min_words < 0:
            problems.append("durations must be positive and word counts non-negative")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if problems:
            raise ValueError("invalid synth spec: " + "; ".join(problems))

    def scaled_lengths(self, factor: int) -> "SynthSpec":
        """Same voices, utterances with ``factor`` times as many words."""
        return replace(self, min_words=self.max_words * factor, max_words=self.max_words * factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.synthetic(self.vocab_words)


def word_signatures(spec: SynthSpec) -> np.ndarray:
    """[vocab_words, signature_frames, raw_frame_dim], fixed by the seed."""
    rng = np.random.default_rng((spec.seed, 0))
    return rng.standard_normal((spec.vocab_words, spec.signature_frames, spec.raw_frame_dim))


def stretch(signature: np.ndarray, n_frames: int) -> np.ndarray:
    """Linear time-stretch of a [S, F] signature to n_frames frames."""
    s = signature.shape[0]
    pos = np.linspace(0.0, s - 1.0, n_frames)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, s - 1)
    frac = (pos - lo)[:, None]
    return signature[lo] * (1.0 - frac) + signature[hi] * frac


def gen_utterance(spec: SynthSpec, utt_index: int, utt_id: str | None = None,
                  signatures: np.ndarray | None = None) -> tuple[np.ndarray, AlignedUtterance]:
    if utt_index < 0:
        raise ValueError("utt_index must be >= 0")
    sig = word_signatures(spec) if signatures is None else signatures
    rng = np.random.default_rng((spec.seed, 1, spec.min_words, spec.max_words, utt_index))
    rf = spec.raw_frame_ms

    def frames_between(lo_ms, hi_ms):
        return int(rng.integers(lo_ms // rf, hi_ms // rf + 1))

    n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
    pieces = []
    words = []
    t = 0
    for i in range(n_words):
        gap = frames_between(spec.min_silence_ms, spec.max_silence_ms)
        pieces.append(np.zeros((gap, spec.raw_frame_dim)))
        t += gap
        token = int(rng.integers(spec.vocab_words))
        dur = frames_between(spec.min_word_ms, spec.max_word_ms)
        pieces.append(stretch(sig[token], dur))
        words.append(AlignedWord(FIRST_WORD + token, t * rf, (t + dur) * rf))
        t += dur
    tail = frames_between(spec.min_silence_ms, spec.max_silence_ms)
    tail = max(tail, spec.min_utterance_ms // rf - t)
    pieces.append(np.zeros((tail, spec.raw_frame_dim)))
    t += tail
    clean = np.concatenate(pieces, axis=0)
    noise = rng.standard_normal(clean.shape) * spec.noise_sigma
    frames = (clean + noise).astype(np.float32)
    return frames, AlignedUtterance(words, t * rf, utt_id if utt_id is not None else f"utt{utt_index:06d}")


def write_frames(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FRAMES_MAGIC, frames.shape[1], frames.shape[0]))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dim, count = _HEADER.unpack_from(blob)
    if magic != FRAMES_MAGIC:
        raise ValueError(f"{path}: bad frames magic {magic!r}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if data.size != dim * count:
        raise ValueError(f"{path}: expected {dim * count} floats, found {data.size}")
    return data.reshape(count, dim).astype(np.float32)


@dataclass
class SplitManifest:
    split: str
    start_index: int
    count: int
    utt_ids: list[str]
    total_ms: int

    def summary(self) -> str:
        return f"{self.split}: {self.count} utterances, {self.total_ms / 1000:.1f} s audio, indices {self.start_index}..{self.start_index + self.count - 1}"


def gen_corpus(spec: SynthSpec, n: int, out_path, split: str = "train", start_index: int = 0) -> SplitManifest:
    """Write ``n`` utterances with indices start_index.. as one split under out_path."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    out = Path(out_path)
    frames_dir = out / "frames"
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
        spec.vocabulary.save(out / "vocab.txt")
        sig = word_signatures(spec)
        utts = []
        lines = []
        for idx in range(start_index, start_index + n):
            utt_id = f"{split}-{idx:06d}"
            frames, ali = gen_utterance(spec, idx, utt_id, sig)
            write_frames(frames_dir / f"{utt_id}.rlfr", frames)
            utts.append(ali)
            lines.append(f"{utt_id}\t{idx}\t{frames.shape[0]}\t{ali.end_ms}\t{len(ali.words)}\n")
        write_alignments(out / f"{split}.align", utts, spec.vocabulary)
        (out / f"{split}.manifest").write_text("".join(lines))
    except OSError as exc:
        raise OSError(f"writing corpus under {out}: {exc}") from exc
    return SplitManifest(split, start_index, n, [a.utt_id for a in utts], sum(a.end_ms for a in utts))


@dataclass
class Utterance:
    utt_id: str
    frames: np.ndarray
    alignment: AlignedUtterance

    @property
    def duration_ms(self) -> int:
        return self.alignment.end_ms


def load_split(corpus_dir, split: str) -> list[Utterance]:
    root = Path(corpus_dir)
    vocab = Vocabulary.load(root / "vocab.txt")
    align_path = root / f"{split}.align"
    if not align_path.exists():
        raise FileNotFoundError(f"no split {split!r} in {root} (missing {align_path.name})")
    return [Utterance(a.utt_id, read_frames(root / "frames" / f"{a.utt_id}.rlfr"), a)
            for a in read_alignments(align_path, vocab)]


def generate_split(spec: SynthSpec, n: int, start_index: int = 0, split: str = "mem") -> list[Utterance]:
    """In-memory equivalent of gen_corpus + load_split."""
    sig = word_signatures(spec)
    out = []
    for idx in range(start_index, start_index + n):
        frames, ali = gen_utterance(spec, idx, f"{split}-{idx:06d}", sig)
        out.append(Utterance(ali.utt_id, frames, ali))
    return out
