import time
from pathlib import Path

import pytest

from reallm import cli
from reallm.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from reallm.config import SEED_ENV, ConfigFileError, RunConfig, parse_config_text
from reallm.inference import parse_emission_log
from reallm.training import NumericFailure

ROOT = Path(__file__).resolve().parents[1]
SMOKE = str(ROOT / "configs" / "smoke.cfg")


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def paths(base: Path, name: str = "run"):
    return ["--corpus_dir", str(base / "corpus"), "--out_dir", str(base / name)]


# ---------------------------------------------------------------- config


def test_parse_config_text_comments_and_types():
    v = parse_config_text("# header\nmax_lr = 0.01  # trailing\n\nmode = speech_llm\nbatch_size=8\n")
    assert v == {"max_lr": 0.01, "mode": "speech_llm", "batch_size": 8}


def test_unknown_key_and_bad_lines_rejected():
    with pytest.raises(ConfigFileError, match=r"cfg:2: unknown key 'depth'"):
        parse_config_text("seed = 1\ndepth = 3\n", "cfg")
    with pytest.raises(ConfigFileError, match="expected 'key = value'"):
        parse_config_text("seed 1\n")
    with pytest.raises(ConfigFileError, match="cannot parse"):
        parse_config_text("batch_size = many\n")


def test_precedence_defaults_file_env_override(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("seed = 3\nmax_epochs = 5\n")
    assert RunConfig.load(path, env={})["seed"] == 3
    c = RunConfig.load(path, env={SEED_ENV: "7"})
    assert c["seed"] == 7 and c.model.seed == 7 and c.synth.seed == 7 and c.train.seed == 7
    c = RunConfig.load(path, {"seed": "9", "max_epochs": "6"}, env={SEED_ENV: "7"})
    assert c["seed"] == 9 and c.train.max_epochs == 6
    assert RunConfig.load(env={})["max_epochs"] == 28


def test_sections_validated():
    with pytest.raises(ConfigFileError, match="vocab_size"):
        RunConfig.load(overrides={"vocab_words": "30"}, env={})
    with pytest.raises(ConfigFileError):
        RunConfig.load(overrides={"mode": "ctc"}, env={})
    with pytest.raises(ConfigFileError):
        RunConfig.load(overrides={"chunk_ms": "250"}, env={})


def test_resolved_config_reloads_identically(tmp_path):
    c = RunConfig.load(SMOKE, {"seed": "4"}, env={})
    path = c.write(tmp_path)
    again = RunConfig.load(path, env={})
    assert again.values == c.values
    assert again.model == c.model and again.train == c.train and again.synth == c.synth


def test_shipped_configs_load():
    for name in ("default.cfg", "smoke.cfg"):
        RunConfig.load(ROOT / "configs" / name, env={})


# ---------------------------------------------------------------- gen-data / build-targets


def test_gen_data_writes_splits_and_refuses_overwrite(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--config", SMOKE, *paths(tmp_path))
    assert code == EXIT_OK
    assert "split\ttrain\t64" in out and "split\tdev\t16" in out and "split\ttest\t16" in out
    assert (tmp_path / "corpus" / "resolved.cfg").exists()
    code, _, err = run(capsys, "gen-data", "--config", SMOKE, *paths(tmp_path))
    assert code == EXIT_USAGE and "--force" in err
    code, out, _ = run(capsys, "gen-data", "--config", SMOKE, *paths(tmp_path), "--force")
    assert code == EXIT_OK and "byte-identical\tyes" in out
    code, out, _ = run(capsys, "gen-data", "--config", SMOKE, *paths(tmp_path), "--verify")
    assert code == EXIT_OK and "byte-identical\tyes" in out


def test_gen_data_zero_utterances_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--config", SMOKE, *paths(tmp_path), "--train_utts", "0")
    assert code == EXIT_USAGE and "train_utts" in err


def test_build_targets_worked_example(capsys):
    code, out, _ = run(capsys, "build-targets", "--worked-example")
    assert code == EXIT_OK
    assert "golden\tmatch" in out
    rows = [line for line in out.splitlines() if line[:1].isdigit()]
    assert len(rows) == 17 and rows[2] == "2\tf2\tand"


def test_build_targets_long_flag_alias(capsys):
    assert run(capsys, "build-targets", "--paper-example") == run(capsys, "build-targets", "--worked-example")


def test_build_targets_empty_transcript(tmp_path, capsys):
    base = paths(tmp_path) + ["--min_words", "0", "--max_words", "0"]
    assert run(capsys, "gen-data", "--config", SMOKE, *base)[0] == EXIT_OK
    code, out, _ = run(capsys, "build-targets", "--config", SMOKE, *base, "--utt", "dev-000064")
    assert code == EXIT_OK
    targets = next(line for line in out.splitlines() if line.startswith("targets\t")).split("\t")[1].split()
    assert targets[-1] == "EOS" and set(targets[:-1]) == {"␣"}


def test_build_targets_delay_shifts_emissions(tmp_path, capsys):
    assert run(capsys, "gen-data", "--config", SMOKE, *paths(tmp_path))[0] == EXIT_OK

    def chunks(delay):
        code, out, _ = run(capsys, "build-targets", "--config", SMOKE, *paths(tmp_path), "--utt", "train-000003",
                           "--delay", str(delay))
        assert code == EXIT_OK
        line = next(x for x in out.splitlines() if x.startswith("emission_chunks"))
        n_frames = sum(1 for x in out.splitlines() if x.split("\t")[1:2] and x.split("\t")[1].startswith("f"))
        return [int(k) for k in line.split("\t")[1].split()], n_frames

    base, n = chunks(0)
    shifted, _ = chunks(2)
    assert base and shifted == [min(k + 2, n) for k in base]
    code, _, err = run(capsys, "build-targets", "--config", SMOKE, *paths(tmp_path), "--utt", "nope")
    assert code == EXIT_DATA and "nope" in err


def test_usage_errors(capsys):
    assert run(capsys)[0] == EXIT_USAGE
    assert run(capsys, "bogus")[0] == EXIT_USAGE
    assert run(capsys, "build-targets")[0] == EXIT_USAGE
    assert run(capsys, "build-targets", "--worked-example", "--no_such_key", "1")[0] == EXIT_USAGE
    assert run(capsys, "build-targets", "--worked-example", "--seed")[0] == EXIT_USAGE
    assert run(capsys, "train", "--config", "/nonexistent.cfg")[0] == EXIT_USAGE


def test_missing_corpus_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", SMOKE, *paths(tmp_path))
    assert code == EXIT_DATA and "data error" in err


# ---------------------------------------------------------------- train / decode / bench


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    assert main(["gen-data", "--config", SMOKE, *paths(base)]) == EXIT_OK
    t0 = time.perf_counter()
    assert main(["train", "--config", SMOKE, *paths(base)]) == EXIT_OK
    return base, time.perf_counter() - t0


def epoch_losses(out_dir: Path):
    return [float(line.split("\t")[1]) for line in (out_dir / "epochs.tsv").read_text().splitlines()]


def test_smoke_training_run(trained_run):
    base, seconds = trained_run
    out = base / "run"
    losses = epoch_losses(out)
    assert len(losses) == 30 and seconds < 300
    assert losses[-1] < losses[0] / 2
    assert (out / "resolved.cfg").exists() and (out / "training.png").stat().st_size > 0
    assert (out / "checkpoints" / "best" / "manifest.txt").exists()
    metrics = (out / "metrics.tsv").read_text().splitlines()
    assert [line.split("\t")[:2] for line in metrics] == [["9", "dev"], ["19", "dev"], ["29", "dev"]]


def test_speech_llm_mode_trains(trained_run, capsys):
    base, _ = trained_run
    code, _, _ = run(capsys, "train", "--config", SMOKE, *paths(base, "sllm"), "--mode", "speech_llm",
                     "--max_epochs", "3", "--eval_every", "0")
    assert code == EXIT_OK
    (line,) = (base / "sllm" / "metrics.tsv").read_text().splitlines()
    assert line.split("\t")[3:5] == ["nan", "nan"]  # no AER or LER for a BLANK-free model


def test_resume_continues_step_count(trained_run, capsys):
    base, _ = trained_run
    args = ["train", "--config", SMOKE, *paths(base, "resume"), "--eval_every", "0"]
    assert run(capsys, *args, "--max_epochs", "2")[0] == EXIT_OK
    code, out, _ = run(capsys, *args, "--max_epochs", "4", "--resume")
    assert code == EXIT_OK
    epochs = [line.split("\t") for line in out.splitlines() if line.startswith("epoch\t")]
    assert [e[1] for e in epochs] == ["2", "3"]
    assert [int(e[5]) for e in epochs] == [12, 16]  # 4 steps per epoch
    assert len(epoch_losses(base / "resume")) == 4


def decode_log(base, capsys, *flags):
    code, out, _ = run(capsys, "decode", "--config", SMOKE, *paths(base), *flags)
    assert code == EXIT_OK, out
    path = Path(next(line.split("\t")[1] for line in out.splitlines() if line.startswith("emissions")))
    return path.read_text(), out


def test_decode_greedy_and_beam_one_logs_identical(trained_run, capsys):
    base, _ = trained_run
    greedy, out = decode_log(base, capsys, "--greedy")
    beam1, _ = decode_log(base, capsys, "--beam", "1")
    assert greedy == beam1 and greedy
    assert out.splitlines()[0].startswith("-\tdev\t")
    assert (base / "run" / "decode" / "dev.greedy.timeline.png").exists()


def test_decode_stream_matches_batch(trained_run, capsys):
    base, _ = trained_run
    greedy, _ = decode_log(base, capsys)
    stream, out = decode_log(base, capsys, "--stream", "--push-max", "3")
    strip = {u: [(t, c) for t, c, _ in v] for u, v in parse_emission_log(greedy).items()}
    assert strip == {u: [(t, c) for t, c, _ in v] for u, v in parse_emission_log(stream).items()}
    assert "push_latency_ms" in out


def test_decode_buckets_table(trained_run, capsys):
    base, _ = trained_run
    _, out = decode_log(base, capsys, "--buckets", "--split", "test")
    for bucket in ("short", "medium", "long", "longest100"):
        assert any(line.startswith(bucket) for line in out.splitlines())
    assert (base / "run" / "decode" / "test.greedy.buckets.png").exists()


def test_decode_checkpoint_mismatch_is_explicit(trained_run, capsys):
    base, _ = trained_run
    code, _, err = run(capsys, "decode", "--config", SMOKE, *paths(base), "--decoder_ffn_dim", "64")
    assert code == EXIT_DATA and "shape mismatch" in err
    code, _, _ = run(capsys, "decode", "--config", SMOKE, *paths(base), "--beam", "0")
    assert code == EXIT_USAGE


def test_bench_report(trained_run, capsys):
    base, _ = trained_run
    code, out, _ = run(capsys, "bench", "--config", SMOKE, *paths(base))
    assert code == EXIT_OK
    for name in ("common", "realm", "speech_llm", "rnnt"):
        assert any(line.split()[:1] == [name] for line in out.splitlines())
    ratios = [float(line.split()[-1]) for line in out.splitlines()
              if line.split()[1:2] in (["decoder_steps"], ["output_evals"])]
    assert len(ratios) == 4 and all(0.9 <= r <= 1.1 for r in ratios)
    assert "rtf_ratio" in out and (base / "run" / "bench" / "cost_counts.png").exists()
    code, _, _ = run(capsys, "bench", "--config", SMOKE, *paths(base), "--bench_utts", "0")
    assert code == EXIT_USAGE


def test_numeric_failure_exit_code(trained_run, capsys, monkeypatch):
    base, _ = trained_run

    def explode(*a, **kw):
        raise NumericFailure("non-finite loss nan at step 0; utterances ['x']")

    monkeypatch.setattr(cli, "fit", explode)
    code, _, err = run(capsys, "train", "--config", SMOKE, *paths(base, "nan"))
    assert code == EXIT_NUMERIC and "non-finite" in err
