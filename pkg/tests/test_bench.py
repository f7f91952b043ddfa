import numpy as np
import pytest

from reallm.bench import CostReport, UnitCosts, fit_unit_costs, run_mode
from reallm.metrics import cost_estimate
from reallm.model import ModelConfig, ReaLLM
from reallm.synthdata import SynthSpec, generate_split


@pytest.fixture(scope="module")
def corpus():
    return generate_split(SynthSpec(), 12, start_index=5000)


@pytest.fixture(scope="module")
def model():
    return ReaLLM(ModelConfig())


def test_forced_runs_match_step_formulas_exactly(model, corpus):
    runs = {m: run_mode(model, corpus, m, forced=True) for m in ("realm", "speech_llm")}
    words = sum(len(u.alignment.words) for u in corpus)
    for r in runs.values():
        assert r.words == words and r.chunks == sum(len(model.encode(u.frames)) for u in corpus)
    report = CostReport(runs, UnitCosts(1.0, 1.0, 1.0), model.config.chunk_ms)
    rows = report.step_rows()
    assert len(rows) == 4
    for _, _, predicted, measured in rows:
        assert measured == pytest.approx(predicted, abs=1e-9)
    realm = runs["realm"]
    assert realm.counts["blank_outputs"] == realm.chunks
    assert runs["speech_llm"].counts["blank_outputs"] == 0


def test_free_decode_counts_follow_the_formulas(model, corpus):
    """Untrained free decoding emits arbitrary words; the identities still hold for what it emitted."""
    run = run_mode(model, corpus[:4], "realm")
    report = CostReport({"realm": run}, UnitCosts(0, 0, 0), model.config.chunk_ms)
    for _, _, predicted, measured in report.step_rows():
        assert measured == pytest.approx(predicted, abs=1e-9)


def test_formula_rows_cover_every_architecture(model, corpus):
    runs = {"realm": run_mode(model, corpus[:3], "realm", forced=True)}
    units = UnitCosts(0.5, 0.25, 0.125)
    report = CostReport(runs, units, model.config.chunk_ms)
    rows = dict(report.formula_rows())
    assert set(rows) == {"common", "realm", "speech_llm", "rnnt"}
    p = report.params(runs["realm"])
    assert rows["realm"] == pytest.approx(cost_estimate("realm", p) / p.T)
    assert rows["realm"] - rows["speech_llm"] == pytest.approx(p.f * units.out)


def test_unit_costs_are_positive(model, corpus):
    u = fit_unit_costs(model, corpus[:3], positions=16, reps=2)
    assert u.enc > 0 and u.dec > 0 and u.out >= 0


def test_empty_corpus_refused(model):
    with pytest.raises(ValueError):
        run_mode(model, [], "realm")


def test_rtf_drops_as_decoder_layers_are_halved(corpus):
    """Same forced decode, fewer decoder layers, less wall time (best of three runs each)."""
    rtfs = []
    for layers in (4, 2, 1):
        m = ReaLLM(ModelConfig(decoder_layers=layers))
        encoded = [m.encode(u.frames) for u in corpus]
        rtfs.append(min(run_mode(m, corpus, "realm", forced=True, encoded=encoded).rtf for _ in range(3)))
    assert rtfs[0] > rtfs[1] > rtfs[2]
    assert np.all(np.isfinite(rtfs))
