"""``realm`` command line: gen-data, build-targets, train, decode, bench.

Every command takes ``--config FILE`` plus ``--key value`` overrides for
any config key. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import plotting
from .bench import CostReport, fit_unit_costs, run_mode
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigFileError, RunConfig
from .inference import DecodeResult, StreamSession, decode_chunks, format_emission_log
from .metrics import format_table
from .model import ConfigError, ReaLLM
from .synthdata import gen_corpus, load_split
from .targets import AlignmentError, build_realm_sample, worked_example, read_alignments
from .training import NumericFailure, Trainer, UttResult, fit, load_into, score_results
from .vocab import Vocabulary

log = logging.getLogger("realm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GOLDEN_INPUTS = "BOS f1 f2 and f3 f4 hand it f5 over f6 to f7 f8 you f9 EOS_EMB"
GOLDEN_TARGETS = "␣ ␣ and ␣ ␣ hand it ␣ over ␣ to ␣ ␣ you ␣ ␣ EOS"

DIGEST_NAME = "corpus.sha256"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="realm", description="Streaming speech recognition with a BLANK-driven decoder-only model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat key = value config file")
        return sp

    g = command("gen-data", "write train/dev/test/long synthetic splits")
    g.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    g.add_argument("--verify", action="store_true", help="regenerate in a scratch dir and compare bytes")

    b = command("build-targets", "dump an interleaved training sample")
    b.add_argument("--worked-example", "--paper-example", dest="worked_example", action="store_true", help="the six-word worked example, checked against its golden form")
    b.add_argument("--utt", help="utterance id from the corpus")
    b.add_argument("--delay", type=int, default=None, help="emission delay in chunks")

    t = command("train", "train a model and write checkpoints plus a metrics log")
    t.add_argument("--resume", action="store_true", help="continue from out_dir/checkpoints/last")

    d = command("decode", "decode a split, score it and write the emission log")
    how = d.add_mutually_exclusive_group()
    how.add_argument("--greedy", action="store_true", help="greedy search (default)")
    how.add_argument("--beam", type=int, help="frame-synchronous beam search of this width")
    d.add_argument("--stream", action="store_true", help="push chunks through a streaming session")
    d.add_argument("--realtime", action="store_true", help="with --stream, pace pushes at one chunk per chunk_ms")
    d.add_argument("--buckets", action="store_true", help="print WER per length bucket")
    d.add_argument("--push-max", type=int, default=1, help="with --stream, random push sizes in 1..N")

    c = command("bench", "real-time factor and cost-model report")
    c.add_argument("--baseline-checkpoint", help="speech_llm checkpoint; without it the baseline replays references")
    return p


def split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"--{key} needs a value")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        cfg = RunConfig.load(args.config, split_overrides(extra))
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigFileError, ConfigError) as exc:
        print(f"realm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, AlignmentError, FileNotFoundError, OSError) as exc:
        print(f"realm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"realm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


# ---------------------------------------------------------------- gen-data


def corpus_digest(root) -> str:
    """sha256 over every corpus file (path and bytes), excluding the digest and resolved config."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel in (DIGEST_NAME, "resolved.cfg"):
            continue
        h.update(rel.encode() + b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def _write_corpus(cfg: RunConfig, out: Path) -> list:
    run, spec = cfg.run, cfg.synth
    manifests = []
    start = 0
    for split, n in (("train", run.train_utts), ("dev", run.dev_utts), ("test", run.test_utts)):
        manifests.append(gen_corpus(spec, n, out, split, start))
        start += n
    if run.long_utts:
        manifests.append(gen_corpus(spec.scaled_lengths(run.long_factor), run.long_utts, out, "long", 0))
    return manifests


def _clear_corpus(out: Path) -> None:
    for pattern in ("frames/*.rlfr", "*.align", "*.manifest", "vocab.txt", DIGEST_NAME, "resolved.cfg"):
        for path in out.glob(pattern):
            path.unlink()


def cmd_gen_data(cfg: RunConfig, args) -> int:
    run = cfg.run
    for name in ("train_utts", "dev_utts", "test_utts"):
        if getattr(run, name) < 1:
            raise UsageError(f"{name} must be >= 1")
    if run.long_utts < 0 or run.long_factor < 1:
        raise UsageError("long_utts must be >= 0 and long_factor >= 1")
    out = Path(run.corpus_dir)
    if args.verify:
        if not (out / DIGEST_NAME).exists():
            raise DataError(f"no corpus digest under {out}; generate the corpus first")
        with tempfile.TemporaryDirectory() as tmp:
            _write_corpus(cfg, Path(tmp))
            same = corpus_digest(tmp) == (out / DIGEST_NAME).read_text().strip() == corpus_digest(out)
        print(f"byte-identical\t{'yes' if same else 'no'}")
        return EXIT_OK if same else EXIT_DATA
    previous = None
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty; pass --force to overwrite")
        if (out / DIGEST_NAME).exists():
            previous = (out / DIGEST_NAME).read_text().strip()
        _clear_corpus(out)
    manifests = _write_corpus(cfg, out)
    digest = corpus_digest(out)
    (out / DIGEST_NAME).write_text(digest + "\n")
    cfg.write(out)
    for m in manifests:
        print(f"split\t{m.split}\t{m.count}\t{m.total_ms / 1000:.1f}s")
    print(f"digest\t{digest}")
    if previous is not None:
        print(f"byte-identical\t{'yes' if previous == digest else 'no'}")
    return EXIT_OK


# ---------------------------------------------------------------- build-targets


def _find_alignment(corpus_dir: Path, utt_id: str):
    vocab_path = corpus_dir / "vocab.txt"
    if not vocab_path.exists():
        raise DataError(f"no corpus at {corpus_dir}")
    vocab = Vocabulary.load(vocab_path)
    for path in sorted(corpus_dir.glob("*.align")):
        for a in read_alignments(path, vocab):
            if a.utt_id == utt_id:
                return a, vocab
    raise DataError(f"unknown utterance id {utt_id!r} in {corpus_dir}")


def _print_sample(sample, vocab) -> None:
    rows = sample.render(vocab)
    print("pos\tinput\ttarget")
    for i, (inp, tgt) in enumerate(rows):
        print(f"{i}\t{inp}\t{tgt}")
    print("inputs\t" + " ".join(r[0] for r in rows))
    print("targets\t" + " ".join(r[1] for r in rows))


def cmd_build_targets(cfg: RunConfig, args) -> int:
    chunk_ms = cfg["chunk_ms"]
    delay = cfg["delay_chunks"] if args.delay is None else args.delay
    if delay < 0:
        raise UsageError("--delay must be >= 0")
    if args.worked_example:
        a, vocab = worked_example()
        sample = build_realm_sample(a, a.chunk_count(chunk_ms), chunk_ms, delay)
        _print_sample(sample, vocab)
        if delay == 0 and chunk_ms == 240:
            rows = sample.render(vocab)
            got = (" ".join(r[0] for r in rows), " ".join(r[1] for r in rows))
            if got != (GOLDEN_INPUTS, GOLDEN_TARGETS):
                raise DataError("worked example does not match its golden sequence")
            print("golden\tmatch")
        return EXIT_OK
    if not args.utt:
        raise UsageError("build-targets needs --utt ID or --worked-example")
    a, vocab = _find_alignment(Path(cfg["corpus_dir"]), args.utt)
    sample = build_realm_sample(a, a.chunk_count(chunk_ms), chunk_ms, delay)
    _print_sample(sample, vocab)
    print("emission_chunks\t" + " ".join(str(k + 1) for k in sample.emission_chunks))
    return EXIT_OK


# ---------------------------------------------------------------- train


def _load(cfg: RunConfig, split: str):
    try:
        return load_split(cfg["corpus_dir"], split)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg["out_dir"])
    cfg.write(out)
    train = _load(cfg, "train")
    dev = _load(cfg, "dev")
    tcfg = cfg.train
    if not tcfg.checkpoint_dir:
        tcfg.checkpoint_dir = str(out / "checkpoints")
    model = ReaLLM(cfg.model)
    trainer = Trainer(model, train, tcfg)
    file_mode = "w"
    if args.resume:
        trainer.restore(load_checkpoint(Path(tcfg.checkpoint_dir) / "last", cfg.model))
        log.info("resumed at step %d", trainer.step)
        file_mode = "a"
    with open(out / "metrics.tsv", file_mode) as metrics, open(out / "epochs.tsv", file_mode) as epochs:
        def on_epoch(stats):
            epochs.write(f"{stats.epoch}\t{stats.mean_loss:.6f}\t{stats.tokens_per_s:.1f}\t{stats.seconds:.3f}\n")
            epochs.flush()
            print(f"epoch\t{stats.epoch}\tloss\t{stats.mean_loss:.6f}\tstep\t{trainer.step}")

        fit(model, train, tcfg, dev, metrics, trainer, on_epoch)
    _plot_training(out)
    print(f"checkpoints\t{tcfg.checkpoint_dir}")
    return EXIT_OK


def _plot_training(out: Path) -> None:
    rows = [line.split("\t") for line in (out / "epochs.tsv").read_text().splitlines() if line]
    dev = [line.split("\t") for line in (out / "metrics.tsv").read_text().splitlines() if line]
    plotting.training_curves([int(r[0]) for r in rows], [float(r[1]) for r in rows], out / "training.png",
                             [int(r[0]) for r in dev], [float(r[2]) for r in dev])


# ---------------------------------------------------------------- decode


def _checkpoint_path(cfg: RunConfig) -> Path:
    if cfg["checkpoint"]:
        return Path(cfg["checkpoint"])
    return Path(cfg["out_dir"]) / "checkpoints" / "best"


def _load_model(cfg: RunConfig, path=None) -> ReaLLM:
    model = ReaLLM(cfg.model)
    load_into(model, path or _checkpoint_path(cfg))
    return model


def _stream_decode(model: ReaLLM, chunks: np.ndarray, rng, push_max: int, realtime: bool):
    session = StreamSession(model)
    emissions = []
    pos = 0
    t_start = time.perf_counter()
    while pos < len(chunks):
        n = int(rng.integers(1, push_max + 1))
        if realtime:
            due = t_start + (pos + n) * model.config.chunk_ms / 1000.0
            time.sleep(max(0.0, due - time.perf_counter()))
        emissions.extend(session.push(chunks[pos:pos + n]))
        pos += n
    emissions.extend(session.finish())
    stats = session.stats
    return DecodeResult(emissions, stats.blank_count(), len(chunks), stats), session.push_latency_ns


def cmd_decode(cfg: RunConfig, args) -> int:
    mode = cfg["mode"]
    if (args.stream or args.beam is not None) and mode != "realm":
        raise UsageError("--stream and --beam apply to mode realm only")
    if args.beam is not None and args.beam < 1:
        raise UsageError("--beam must be >= 1")
    if args.stream and args.beam is not None:
        raise UsageError("--stream decodes greedily; drop --beam")
    if args.push_max < 1:
        raise UsageError("--push-max must be >= 1")
    split = cfg["split"]
    corpus = _load(cfg, split)
    model = _load_model(cfg)
    vocab = Vocabulary.load(Path(cfg["corpus_dir"]) / "vocab.txt")
    rng = np.random.default_rng(cfg["seed"])
    results, latencies = [], []
    for utt in corpus:
        chunks = model.encode(utt.frames)
        if args.stream:
            res, lat = _stream_decode(model, chunks, rng, args.push_max, args.realtime)
            latencies.extend(lat)
        else:
            res = decode_chunks(model, chunks, mode, beam=args.beam)
        results.append(UttResult(utt.utt_id, utt.alignment.tokens, res, len(chunks), utt.duration_ms))
    report = score_results(results, [u.alignment for u in corpus], model.config.chunk_ms, mode, cfg["longest"])
    out = Path(cfg["out_dir"]) / "decode"
    cfg.write(out)
    tag = f"{split}.{'stream' if args.stream else f'beam{args.beam}' if args.beam else 'greedy'}"
    log_path = out / f"{tag}.emissions"
    log_path.write_text("".join(format_emission_log(r.utt_id, r.result.emissions, vocab) for r in results))
    print(report.line("-", split))
    print(f"emissions\t{log_path}")
    if latencies:
        ms = np.array(latencies) / 1e6
        print(f"push_latency_ms\tmedian\t{np.median(ms):.3f}\tp95\t{np.percentile(ms, 95):.3f}")
    if args.buckets:
        rows = [(name, report.bucket_sizes[name], report.buckets[name]) for name in report.buckets]
        print(format_table(("bucket", "utts", "wer"), rows))
        plotting.bucket_wer_bars({mode: report.buckets}, out / f"{tag}.buckets.png")
    first = corpus[0]
    plotting.emission_timeline([(vocab.name(w.token), w.start, w.end) for w in first.alignment.words],
                               [(vocab.name(e.token), e.chunk) for e in results[0].result.emissions],
                               model.config.chunk_ms, first.duration_ms, out / f"{tag}.timeline.png")
    return EXIT_OK


# ---------------------------------------------------------------- bench


def cmd_bench(cfg: RunConfig, args) -> int:
    n = cfg["bench_utts"]
    if n < 1:
        raise UsageError("bench_utts must be >= 1")
    corpus = _load(cfg, cfg["split"])[:n]
    if not corpus:
        raise UsageError(f"split {cfg['split']!r} is empty")
    model = _load_model(cfg)
    runs = {"realm": run_mode(model, corpus, "realm")}
    if args.baseline_checkpoint:
        runs["speech_llm"] = run_mode(_load_model(cfg, args.baseline_checkpoint), corpus, "speech_llm")
    else:
        runs["speech_llm"] = run_mode(model, corpus, "speech_llm", forced=True)
    units = fit_unit_costs(model, corpus)
    report = CostReport(runs, units, model.config.chunk_ms)
    out = Path(cfg["out_dir"]) / "bench"
    cfg.write(out)
    print(format_table(("mode", "forced", "audio_s", "chunks", "words", "encode_s", "decode_s", "rtf"),
                       [(m, str(r.forced), r.audio_seconds, r.chunks, r.words, r.encode_seconds, r.decode_seconds,
                         r.rtf) for m, r in runs.items()]))
    print()
    print(f"unit_costs\tenc_per_audio_s\t{units.enc:.3e}\tdec_per_step\t{units.dec:.3e}\tout_per_eval\t{units.out:.3e}")
    print(format_table(("formula", "seconds_per_audio_s"), report.formula_rows()))
    print()
    steps = report.step_rows()
    print(format_table(("mode", "count", "cost_model", "measured", "ratio"),
                       [(m, q, float(p), c, c / p if p else float("nan")) for m, q, p, c in steps]))
    rt, sl = runs["realm"].rtf, runs["speech_llm"].rtf
    print(f"rtf_ratio\trealm/speech_llm\t{rt / sl:.3f}")
    with open(out / "bench.tsv", "w") as fh:
        for m, q, p, c in steps:
            fh.write(f"{m}\t{q}\t{p:.3f}\t{c}\n")
        for m, r in runs.items():
            fh.write(f"{m}\trtf\t{r.rtf:.6f}\t{int(r.forced)}\n")
    plotting.cost_counts([(f"{m} {q}", p, c) for m, q, p, c in steps], out / "cost_counts.png")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-targets": cmd_build_targets,
    "train": cmd_train,
    "decode": cmd_decode,
    "bench": cmd_bench,
}


if __name__ == "__main__":
    entry()
