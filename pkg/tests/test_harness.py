import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steerlab.errors import BatchTooSmall, DuplicateId, MissingArtifact, ParseError, SchemaViolation
from steerlab.harness import cli
from steerlab.harness.config import ExperimentConfig, dump_config, load_config, parse_config_text
from steerlab.harness.corpus import SPLITS, BenchRecord, Vocab, generate_corpus, load_dataset, save_dataset
from steerlab.harness.pipeline import (
    ABLATIONS,
    DEFAULT_TAUS,
    PCA_GROUPS,
    Artifacts,
    Experiment,
    ablation_csv,
    ablation_variants,
    check_split_hygiene,
    dump_report,
    eval_report,
    export_pca,
    metrics_table,
    pca_2d,
    pca_csv,
    sweep_csv,
    sweep_tau,
    tradeoff_csv,
    tradeoff_rows,
)
from steerlab.tensorcore import rank_by_energy

from conftest import SMALL_CONFIG


# ----- corpus -----

@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(400, 0.05, 0)


def test_corpus_split_sizes(corpus):
    counts = {s: sum(r.split == s for r in corpus) for s in SPLITS}
    assert len(corpus) == 400
    assert counts["forget"] == counts["test"] == 20
    assert counts["retain"] + counts["celebrity"] == 360
    assert len({r.id for r in corpus}) == 400
    check_split_hygiene(corpus, 0.05)


def test_corpus_is_seeded(corpus):
    assert generate_corpus(400, 0.05, 0) == corpus
    assert generate_corpus(400, 0.05, 1) != corpus


def test_forget_and_test_share_facts(corpus):
    forget = {r.id: r for r in corpus if r.split == "forget"}
    for r in corpus:
        if r.split == "test":
            twin = forget[r.id.removesuffix("-para")]
            assert r.answer == twin.answer and r.question != twin.question
            assert r.forgotten_attrs == twin.forgotten_attrs


def test_dataset_round_trip(tmp_path, corpus):
    path = tmp_path / "c.jsonl"
    save_dataset(path, corpus)
    assert load_dataset(path) == corpus


def test_dataset_errors(tmp_path, corpus):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert load_dataset(empty) == []

    qa = json.loads(corpus[0].to_json())
    vqa = dict(qa, modality="vqa", image_features=None)
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps(vqa) + "\n")
    with pytest.raises(SchemaViolation):
        load_dataset(bad)

    bad.write_text(json.dumps(qa) + "\n{not json\n")
    with pytest.raises(ParseError) as info:
        load_dataset(bad)
    assert info.value.line == 2

    bad.write_text(json.dumps(qa) + "\n" + json.dumps(qa) + "\n")
    with pytest.raises(DuplicateId):
        load_dataset(bad)

    bad.write_text(json.dumps({"id": "x"}) + "\n")
    with pytest.raises(SchemaViolation):
        load_dataset(bad)


def test_record_schema_rules(corpus):
    rec = next(r for r in corpus if r.split == "retain")
    with pytest.raises(SchemaViolation):
        BenchRecord.from_dict(dict(json.loads(rec.to_json()), split="holdout"))
    forget = next(r for r in corpus if r.split == "forget")
    with pytest.raises(SchemaViolation):
        BenchRecord.from_dict(dict(json.loads(forget.to_json()), split="retain"))


def test_split_hygiene_violations(corpus):
    clash = BenchRecord.from_dict(dict(json.loads(corpus[0].to_json()), split="retain", forgotten_attrs=[]))
    with pytest.raises(SchemaViolation):
        check_split_hygiene(corpus + [clash])
    with pytest.raises(SchemaViolation):
        check_split_hygiene(corpus, 0.10)


def test_vocab_round_trip(corpus):
    vocab = Vocab.for_corpus(corpus)
    for r in corpus[:50]:
        assert vocab.decode(vocab.encode(r.question)) == r.question
    with pytest.raises(SchemaViolation):
        vocab.encode("zzzunknown")


# ----- config -----

def test_config_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nseed = 3\ntau=0.7\nuse_rrs=false\n")
    cfg = load_config(str(path), {"tau": 0.9}, env={})
    assert (cfg.seed, cfg.tau, cfg.use_rrs) == (3, 0.9, False)
    cfg = load_config(str(path), {"seed": 5}, env={"STEERLAB_SEED": "11"})
    assert cfg.seed == 11
    assert load_config(None, None, env={}) == ExperimentConfig()


def test_config_parse_errors():
    with pytest.raises(ValueError):
        parse_config_text("nonsense")
    with pytest.raises(ValueError):
        parse_config_text("unknown_key=1")
    with pytest.raises(ValueError):
        parse_config_text("use_rrs=maybe")
    with pytest.raises(ValueError):
        ExperimentConfig(forget_ratio=1.5)


@given(st.integers(0, 99), st.floats(0.05, 1.0), st.sampled_from(["acs", "additive", "off"]), st.booleans())
def test_config_dump_round_trip(seed, tau, mode, use_rrs):
    cfg = ExperimentConfig(seed=seed, tau=tau, mode=mode, use_rrs=use_rrs)
    assert ExperimentConfig(**parse_config_text(dump_config(cfg))) == cfg


def test_default_layers():
    cfg = ExperimentConfig()
    assert cfg.layers() == (2, 3, 4) and cfg.scoring() == 4
    assert ExperimentConfig(steering_layers="1,3", scoring_layer=5).layers() == (1, 3)


# ----- build -----

def test_build_is_deterministic(small_experiment, small_artifacts, tmp_path):
    again = small_experiment.build()
    assert again.digests() == small_artifacts.digests()
    small_artifacts.save(tmp_path / "a.bin")
    again.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    loaded = Artifacts.load(tmp_path / "a.bin")
    assert loaded.digests() == small_artifacts.digests()


def test_build_ranks_follow_energy_rule(small_artifacts):
    for key, art in small_artifacts.subspaces.items():
        energy = np.cumsum(art.spectrum**2) / np.sum(art.spectrum**2)
        brute = next(i + 1 for i, e in enumerate(energy) if e >= art.eta or i == len(energy) - 1)
        assert art.rank == brute == rank_by_energy(art.spectrum, art.eta), key
        assert art.basis.shape == (SMALL_CONFIG.d, art.rank)


def test_build_covers_layers_and_modalities(small_experiment, small_artifacts):
    layers = small_experiment.layers
    for layer in layers:
        for kind in ("unlearn_qa", "unlearn_vqa", "retain"):
            assert (kind, layer) in small_artifacts.subspaces
        for modality in ("qa", "vqa"):
            assert len(small_artifacts.prototypes[(modality, layer)]) <= SMALL_CONFIG.n_prototypes
    assert ("retain", small_experiment.scoring_layer) in small_artifacts.subspaces


def test_build_needs_two_forget_records(small_experiment):
    one = [r for r in small_experiment.records if r.split != "forget"] + small_experiment.split("forget")[:1]
    ex = Experiment(SMALL_CONFIG, records=one, model=small_experiment.model)
    with pytest.raises(BatchTooSmall):
        ex.build()


def test_planted_model_answers_its_records(small_experiment):
    assert small_experiment.answer_reproduction(small_experiment.model) >= 0.95


# ----- evaluation -----

def test_mode_off_matches_vanilla(small_experiment, small_artifacts):
    rep = eval_report(small_experiment, small_artifacts, small_experiment.policy(mode="off"))
    assert rep["steered"] == rep["vanilla"]


def test_report_round_trips(small_experiment, small_artifacts):
    rep = eval_report(small_experiment, small_artifacts)
    text = dump_report(rep)
    assert json.loads(text) == json.loads(dump_report(json.loads(text)))
    assert dump_report(json.loads(text)) == text
    assert set(rep["provenance"]) == {"config_hash", "corpus_hash", "model_hash", "artifact_hashes"}


def test_open_gate_changes_forget_answers(small_experiment, small_artifacts):
    policy = small_experiment.policy()
    forget = small_experiment.split("forget")
    changed = opened = 0
    for rec in forget:
        out = small_experiment.run_record(rec, policy, small_artifacts)
        if out.gate_open:
            opened += 1
            changed += out.answer != small_experiment.vocab.decode(small_experiment.vanilla(rec).answer_tokens())
    assert opened > 0
    assert changed >= 0.9 * opened


def test_steering_log_records_every_hooked_step(small_experiment, small_artifacts):
    rec = small_experiment.split("forget")[0]
    sink = []
    out = small_experiment.run_record(rec, small_experiment.policy(), small_artifacts, log_sink=sink)
    if out.gate_open:
        assert {r.layer for r in sink} == set(small_experiment.layers)
        assert all(r.query_id == rec.id for r in sink)
    else:
        assert not sink


def test_tau_sweep(small_experiment, small_artifacts):
    taus = (0.05, 0.3, 0.5, 0.7, 0.9, 1.0)
    rows = sweep_tau(small_experiment, small_artifacts, taus)
    rates = {}
    for tau, split, metric, value in rows:
        if metric == "gate_open_rate":
            rates.setdefault(split, []).append(value)
    for split, r in rates.items():
        assert r == sorted(r), split
    scores = np.concatenate([small_experiment.gate_scores(small_artifacts, s) for s in SPLITS])
    assert all(r[-1] == 1.0 for r in rates.values()) == bool(np.all(scores < 1.0))
    if scores.min() > 0.05:
        never = metrics_table(small_experiment.run(small_experiment.policy(tau=0.05), small_artifacts))
        vanilla = metrics_table(small_experiment.run(None, small_artifacts))
        for split in SPLITS:
            assert never[split] | {"gate_open_rate": 0.0} == vanilla[split] | {"gate_open_rate": 0.0}


def test_ablation_variants(small_experiment, small_artifacts):
    variants = ablation_variants(small_experiment, small_artifacts)
    assert tuple(variants) == ABLATIONS
    assert variants["wo_acs"][0].mode == "additive" and variants["wo_acs"][0].lambda_fixed == 1.5
    assert not variants["wo_rrs"][0].use_rrs
    assert variants["wo_reasoning_span"][1].subspaces[("unlearn_qa", 3)].view == "answer_only"
    assert variants["wo_answer_span"][1].subspaces[("unlearn_qa", 3)].view == "cot_only"
    assert variants["full"][1] is small_artifacts


# ----- tables -----

def parse_csv(text):
    return list(csv.reader(io.StringIO(text)))


def test_csv_formats():
    rows = parse_csv(sweep_csv([(0.85, "forget", "ril", 0.125)]))
    assert rows == [["tau", "split", "metric", "value"], ["0.8500", "forget", "ril", "0.125000"]]
    text = ablation_csv({"full": {"forget": {"answer_accuracy": 0.5}}})
    assert text == "variant,split,metric,value\nfull,forget,answer_accuracy,0.500000\n"


def test_pca_planar_and_gram(rng):
    plane = np.linalg.qr(rng.standard_normal((9, 2)))[0]
    coords = rng.standard_normal((30, 2)) * [3.0, 1.0]
    pts = coords @ plane.T + 5.0
    proj, basis, mean = pca_2d(pts, pts)
    np.testing.assert_allclose(proj @ basis.T + mean, pts, atol=1e-8)
    c = pts - pts.mean(axis=0)
    np.testing.assert_allclose(proj @ proj.T, c @ c.T, atol=1e-8)


def test_export_pca_groups(small_experiment, small_artifacts):
    rows = export_pca(small_experiment, small_artifacts)
    labels = [r[0] for r in rows]
    assert tuple(dict.fromkeys(labels)) == PCA_GROUPS
    assert labels.count("forget_vanilla") == len(small_experiment.split("forget"))
    assert parse_csv(pca_csv(rows))[0] == ["group", "pc1", "pc2"]


def test_tradeoff_rows():
    rep = {
        "vanilla": {"forget": {"answer_accuracy": 1.0}, "retain": {"answer_accuracy": 0.9}},
        "steered": {"forget": {"answer_accuracy": 0.2}, "retain": {"answer_accuracy": 0.8}},
    }
    assert tradeoff_rows({"a": rep}) == [("a", 0.2, 0.8)]
    rows = tradeoff_rows({"a": rep, "b": rep}, include_vanilla=True)
    assert rows[0] == ("vanilla", 1.0, 0.9) and len(rows) == 3
    assert tradeoff_csv(rows).splitlines()[0] == "label,forget_acc,retain_acc"


# ----- command line -----

def test_cli_end_to_end(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    assert cli.main(["gen-corpus", "--out", str(corpus), "--n-records", "120", "--forget-ratio", "0.1"]) == 0
    assert len(load_dataset(corpus)) == 120
    out = tmp_path / "run"
    common = ["--out-dir", str(out), "--set", f"corpus={corpus}", "--set", "d=128", "--set", "plant_steps=500",
              "--set", "forget_ratio=0.1", "--set", "n_records=120"]
    assert cli.main(["eval", *common]) == 1
    assert cli.main(["build", *common]) == 0
    first = (out / "artifacts.bin").read_bytes()
    assert cli.main(["build", *common]) == 0
    assert (out / "artifacts.bin").read_bytes() == first
    assert cli.main(["eval", *common]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"provenance", "config", "policy", "vanilla", "steered"}
    assert cli.main(["sweep-tau", *common, "--taus", "0.5,1.0", "--out", str(tmp_path / "sweep.csv")]) == 0
    assert parse_csv((tmp_path / "sweep.csv").read_text())[0] == ["tau", "split", "metric", "value"]
    assert cli.main(["tradeoff", str(out / "report.json"), "--labels", "full", "--with-vanilla"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "label,forget_acc,retain_acc" and len(lines) == 3


def test_cli_reports_missing_model(tmp_path):
    assert cli.main(["theory-check", "--out-dir", str(tmp_path / "nothing")]) == 1
    with pytest.raises(MissingArtifact):
        cli._experiment(ExperimentConfig(out_dir=str(tmp_path / "nothing")))
