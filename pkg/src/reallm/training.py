"""Teacher-forced cross-entropy training with a warmup/hold/decay schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .inference import DecodeResult, decode_chunks
from .metrics import aer_counts, corpus_wer, length_buckets, ler
from .model import ReaLLM, assemble_inputs, decode_batch, encode_batch, stack_chunks
from .numerics import Tensor
from .synthdata import Utterance
from .targets import build_sample
from .vocab import BLANK, IGNORE

log = logging.getLogger(__name__)

MODES = ("realm", "speech_llm", "time_aligned_llm")


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_lr: float = 2e-3
    warmup_epochs: int = 4
    hold_epochs: int = 8
    decay_epochs: int = 16
    batch_size: int = 32
    max_epochs: int = 28
    eval_every: int = 0
    mode: str = "realm"
    delay_chunks: int = 0
    checkpoint_dir: str = ""
    grad_clip: float = 1.0
    blank_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ValueError("max_lr must be > 0")
        for name in ("warmup_epochs", "hold_epochs", "decay_epochs", "max_epochs", "delay_chunks", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to max_lr, hold, linear decay to zero, then zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = cfg.warmup_epochs * steps_per_epoch
    h = cfg.hold_epochs * steps_per_epoch
    d = cfg.decay_epochs * steps_per_epoch
    if step < w:
        return cfg.max_lr * step / w
    if step < w + h:
        return cfg.max_lr
    if step < w + h + d:
        return cfg.max_lr * (1.0 - (step - w - h) / d)
    return 0.0


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    tokens_per_s: float
    steps: int
    seconds: float


@dataclass
class _Prepared:
    utt: Utterance
    chunks: np.ndarray
    targets: list
    inputs: list
    weights: np.ndarray


class Trainer:
    """Holds parameters, Adam moments and the global step for one training run."""

    def __init__(self, model: ReaLLM, corpus: Sequence[Utterance], cfg: TrainConfig):
        if not corpus:
            raise ValueError("training corpus is empty")
        self.model = model
        self.cfg = cfg
        self.params = model.params
        self.names = list(self.params)
        self.first = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.second = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.step = 0
        self.history: list[EpochStats] = []
        self.data = [self._prepare(u) for u in corpus]
        self.lengths = np.array([len(p.inputs) for p in self.data])

    def _prepare(self, utt: Utterance) -> _Prepared:
        mc = self.model.config
        chunks = stack_chunks(utt.frames, mc)
        s = build_sample(self.cfg.mode, utt.alignment, len(chunks), mc.chunk_ms, self.cfg.delay_chunks)
        w = s.loss_weights()
        if self.cfg.blank_weight != 1.0:
            w = np.where(np.array(s.targets) == BLANK, w * self.cfg.blank_weight, w)
        return _Prepared(utt, chunks, s.targets, s.inputs, w)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.data) / self.cfg.batch_size)

    def batches(self, epoch: int) -> list[np.ndarray]:
        """Seeded shuffle, then length-bucketing inside windows of 8 batches."""
        rng = np.random.default_rng((self.cfg.seed, epoch))
        order = rng.permutation(len(self.data))
        bs = self.cfg.batch_size
        window = 8 * bs
        out = []
        for start in range(0, len(order), window):
            part = order[start:start + window]
            part = part[np.argsort(self.lengths[part], kind="stable")]
            out.extend(part[i:i + bs] for i in range(0, len(part), bs))
        perm = rng.permutation(len(out))
        return [out[i] for i in perm]

    def batch_loss(self, idxs) -> Tensor:
        mc = self.model.config
        items = [self.data[i] for i in idxs]
        dtype = self.params["tok_emb"].dtype
        counts = [len(p.chunks) for p in items]
        kmax = max(counts)
        x = np.zeros((len(items), kmax, mc.chunk_input_dim), dtype=dtype)
        for b, p in enumerate(items):
            x[b, : counts[b]] = p.chunks
        enc = encode_batch(self.params, mc, x, counts)
        rows = np.concatenate([b * kmax + np.arange(c) for b, c in enumerate(counts)])
        flat = nx.gather_rows(nx.reshape(enc, (len(items) * kmax, mc.decoder_dim)), rows)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        inputs, lengths = assemble_inputs(self.params, [p.inputs for p in items], flat, offsets)
        logits = decode_batch(self.params, mc, inputs, lengths)
        length = inputs.shape[1]
        tgt = np.zeros((len(items), length), dtype=np.int64)
        wts = np.zeros((len(items), length))
        for b, p in enumerate(items):
            n = len(p.targets)
            t = np.array(p.targets)
            tgt[b, :n] = np.where(t == IGNORE, 0, t)
            wts[b, :n] = p.weights
        return nx.cross_entropy_loss(nx.reshape(logits, (-1, mc.vocab_size)), tgt.reshape(-1), wts.reshape(-1))

    def train_step(self, idxs) -> float:
        for p in self.params.values():
            p.zero_grad()
        loss = self.batch_loss(idxs)
        value = loss.item()
        if not math.isfinite(value):
            ids = [self.data[i].utt.utt_id for i in idxs]
            raise NumericFailure(f"non-finite loss {value} at step {self.step}; utterances {ids}")
        nx.backward(loss)
        grads = [self.params[k].grad for k in self.names]
        if self.cfg.grad_clip > 0:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
            if norm > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / norm
                grads = [g * scale for g in grads]
        lr = lr_at(self.step, self.steps_per_epoch, self.cfg)
        nx.adam_step([self.params[k].data for k in self.names], grads,
                     ([self.first[k] for k in self.names], [self.second[k] for k in self.names]),
                     self.step + 1, lr)
        self.step += 1
        return value

    def train_epoch(self, epoch: int, start_batch: int = 0) -> EpochStats:
        t0 = time.perf_counter()
        losses, weights, tokens = [], [], 0
        for idxs in self.batches(epoch)[start_batch:]:
            losses.append(self.train_step(idxs))
            n = int(sum(self.data[i].weights.astype(bool).sum() for i in idxs))
            weights.append(n)
            tokens += n
        self.model.refresh()
        dt = time.perf_counter() - t0
        mean = float(np.average(losses, weights=weights)) if losses else float("nan")
        stats = EpochStats(epoch, mean, tokens / dt if dt > 0 else 0.0, len(losses), dt)
        self.history.append(stats)
        return stats

    def resume_position(self) -> tuple[int, int]:
        return divmod(self.step, self.steps_per_epoch)

    def train_steps(self, n: int) -> list[float]:
        """Run ``n`` optimizer steps continuing the epoch schedule from ``self.step``."""
        out = []
        for _ in range(n):
            epoch, offset = self.resume_position()
            out.append(self.train_step(self.batches(epoch)[offset]))
        self.model.refresh()
        return out

    def save(self, path, meta=None) -> Path:
        return save_checkpoint(path, self.model.config, self.params, self.step, (self.first, self.second), meta)

    def restore(self, ck: Checkpoint) -> None:
        for k, v in ck.params.items():
            self.params[k].data[...] = v
        for k in self.names:
            if k in ck.first_moments:
                self.first[k][...] = ck.first_moments[k]
                self.second[k][...] = ck.second_moments[k]
        self.step = ck.step
        self.model.refresh()


def train_epoch(trainer: Trainer, epoch: int) -> EpochStats:
    return trainer.train_epoch(epoch)


# ---------------------------------------------------------------- evaluation


@dataclass
class UttResult:
    utt_id: str
    ref: list[int]
    result: DecodeResult
    n_chunks: int
    duration_ms: int


@dataclass
class EvalReport:
    wer: float
    aer: float | None
    ler: float | None
    results: list[UttResult] = field(default_factory=list)
    buckets: dict[str, float] = field(default_factory=dict)
    bucket_sizes: dict[str, int] = field(default_factory=dict)

    def line(self, epoch, split: str, loss: float = float("nan")) -> str:
        def f(x):
            return "nan" if x is None else f"{x:.6f}"

        return f"{epoch}\t{split}\t{f(self.wer)}\t{f(self.aer)}\t{f(self.ler)}\t{f(loss)}"


def score_results(results: Sequence[UttResult], alignments, chunk_ms: int, mode: str, longest: int = 100) -> EvalReport:
    """WER, AER, LER and per-length-bucket WER for decoded utterances."""
    w = corpus_wer((r.ref, r.result.tokens) for r in results)
    aer_value = ler_value = None
    if mode != "speech_llm":
        errs = words = 0
        for r, a in zip(results, alignments):
            e, n = aer_counts(a, chunk_ms, r.result.emissions, r.n_chunks)
            errs, words = errs + e, words + n
        aer_value = errs / max(1, words)
        counts = [(r.result.blank_count, r.n_chunks) for r in results if r.result.blank_count is not None]
        ler_value = ler(counts) if counts else None
    buckets = length_buckets([r.duration_ms for r in results], longest)
    bucket_wer = {name: corpus_wer((results[i].ref, results[i].result.tokens) for i in idx).rate
                  for name, idx in buckets.items()}
    return EvalReport(w.rate, aer_value, ler_value, list(results), bucket_wer,
                      {k: len(v) for k, v in buckets.items()})


def evaluate(model: ReaLLM, corpus: Sequence[Utterance], mode: str = "realm", *, beam: int | None = None,
             longest: int = 100, decoder=None) -> EvalReport:
    """Decode every utterance (greedy unless ``beam``) and score it.

    ``decoder(utt) -> DecodeResult`` replaces the model decode, e.g. with a stub.
    """
    results = []
    for utt in corpus:
        if decoder is not None:
            res = decoder(utt)
            n = res.n_chunks
        else:
            chunks = model.encode(utt.frames)
            n = len(chunks)
            res = decode_chunks(model, chunks, mode, beam=beam)
        results.append(UttResult(utt.utt_id, utt.alignment.tokens, res, n, utt.duration_ms))
    return score_results(results, [u.alignment for u in corpus], model.config.chunk_ms if model else 240, mode, longest)


def fit(model: ReaLLM, train: Sequence[Utterance], cfg: TrainConfig, dev: Sequence[Utterance] = (),
        metrics_log=None, trainer: Trainer | None = None, on_epoch=None) -> Trainer:
    """Train for cfg.max_epochs, evaluating on ``dev`` every cfg.eval_every epochs and at the end.

    Writes ``last`` and ``best`` (by dev WER) checkpoints when cfg.checkpoint_dir is set.
    """
    trainer = trainer or Trainer(model, train, cfg)
    best = math.inf
    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    start_epoch, offset = trainer.resume_position()
    for epoch in range(start_epoch, cfg.max_epochs):
        stats = trainer.train_epoch(epoch, offset)
        offset = 0
        log.info("epoch %d loss %.4f (%.0f tok/s)", epoch, stats.mean_loss, stats.tokens_per_s)
        last = epoch == cfg.max_epochs - 1
        if dev and ((cfg.eval_every and (epoch + 1) % cfg.eval_every == 0) or last):
            report = evaluate(model, dev, cfg.mode)
            if metrics_log is not None:
                metrics_log.write(report.line(epoch, "dev", stats.mean_loss) + "\n")
                metrics_log.flush()
            if ckdir is not None and report.wer < best:
                best = report.wer
                trainer.save(ckdir / "best", {"dev_wer": f"{report.wer:.6f}", "epoch": epoch})
        if ckdir is not None:
            trainer.save(ckdir / "last", {"epoch": epoch})
        if on_epoch is not None:
            on_epoch(stats)
    return trainer


def load_into(model: ReaLLM, path) -> Checkpoint:
    ck = load_checkpoint(path, model.config)
    for k, v in ck.params.items():
        model.params[k].data[...] = v
    model.refresh()
    return ck
