import csv
import json
import logging
import statistics
from collections import Counter

import numpy as np
import pytest

from metakd import cli, data as D
from metakd.harness import (MAIN_CONDITIONS, S_META, S_SINGLE, Experiment, ExperimentConfig, HarnessError,
                            RecordStore, ResultRecord, emit_report, improvement_curve, run, run_ablation_gamma2,
                            run_fewshot, run_main, run_zeroshot)

TINY = {
    "seeds": [0, 1, 2, 3, 4],
    "synth": {"num_domains": 3, "train_size": 40, "dev_size": 20, "test_size": 20},
    "teacher_model": {"num_layers": 2, "hidden_dim": 16, "num_heads": 2, "ffn_dim": 32},
    "student_model": {"num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 16},
    "teacher": {"epochs": 1, "min_steps": 4},
    "distill": {"int_epochs": 1, "pred_epochs": 1, "min_steps": 2},
    "rates": [0.25, 1.0],
    "gamma2_grid": [0.0, 0.3],
}


def tiny(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**TINY, **kw})


@pytest.fixture(scope="module")
def main_store():
    cfg = tiny()
    return run_main(cfg, experiment=Experiment(cfg))


def rec(condition, domain, seed, metric, **kw):
    return ResultRecord("main", condition, domain, seed, metric, 0.1, "abc", **kw)


# ----------------------------------------------------------------- config
def test_config_round_trip(tmp_path):
    cfg = tiny(protocol="fewshot")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.load(path)
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_config_rejects_bad_input():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"sedes": [0]})
    with pytest.raises(ValueError):
        tiny(seeds=[])
    with pytest.raises(ValueError):
        tiny(protocol="fewshot", rates=[0.0])
    with pytest.raises(ValueError):
        tiny(protocol="ablation-g2", gamma2_grid=[])


def test_hash_ignores_seed_roster_but_not_settings():
    assert tiny(seeds=[0]).config_hash() == tiny(seeds=[3, 4]).config_hash()
    assert tiny(gamma2=0.1).config_hash() != tiny().config_hash()


# ---------------------------------------------------------------- records
def test_record_store_rejects_duplicates_and_bad_metrics():
    store = RecordStore([rec("a", "d0", 0, 0.5)])
    with pytest.raises(KeyError):
        store.add(rec("a", "d0", 0, 0.7))
    store.add(rec("a", "d0", 0, 0.7, rate=0.1))
    with pytest.raises(ValueError):
        store.add(rec("b", "d0", 0, 1.5))


def test_record_csv_round_trip(tmp_path):
    store = RecordStore([rec("a", "d0", 0, 0.5), rec("a", "d0", 1, 0.25, rate=0.05),
                         rec("a", "d1", 0, 1 / 3, gamma2=0.2)])
    store.to_csv(tmp_path / "r.csv")
    assert RecordStore.from_csv(tmp_path / "r.csv").records == store.records


# ----------------------------------------------------------------- report
def test_report_two_domains_two_conditions_one_seed(tmp_path):
    records = [rec(c, d, 0, m) for c, d, m in
               [("x", "d0", 0.5), ("x", "d1", 0.7), ("y", "d0", 0.6), ("y", "d1", 0.8)]]
    emit_report(records, tmp_path)
    table = [l for l in (tmp_path / "report.md").read_text().splitlines() if l.startswith("| ")]
    assert table[0] == "| condition | d0 | d1 | avg |"
    assert table[1] == "| x | 0.5000 ± 0.0000 | 0.7000 ± 0.0000 | 0.6000 ± 0.0000 |"
    assert len(table) == 3


def test_report_matches_independent_recomputation(tmp_path):
    rng = np.random.default_rng(0)
    records = [rec(c, d, s, float(rng.uniform())) for c in ("x", "y") for d in ("d0", "d1", "d2")
               for s in range(4)]
    emit_report(records, tmp_path)
    text = (tmp_path / "report.md").read_text()
    assert "config hash: abc" in text and "seeds: [0, 1, 2, 3]" in text
    with open(tmp_path / "records.csv", newline="") as fh:
        raw = list(csv.DictReader(fh))
    vals = [float(r["metric"]) for r in raw if r["condition"] == "y" and r["domain"] == "d2"]
    expected = f"{statistics.mean(vals):.4f} ± {statistics.stdev(vals):.4f}"
    row = next(l for l in text.splitlines() if l.startswith("| y |"))
    assert row.split(" | ")[3] == expected


def test_report_requires_records(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


# --------------------------------------------------------------- protocols
def test_main_emits_135_records(main_store):
    assert len(main_store) == 9 * 3 * 5
    assert {r.config_hash for r in main_store} == {tiny().config_hash()}
    counts = Counter((r.condition, r.domain, r.seed) for r in main_store)
    assert set(counts.values()) == {1}
    assert {r.condition for r in main_store} == set(MAIN_CONDITIONS)


def test_main_never_reads_test_inside_training():
    cfg = tiny(seeds=[0])
    exp = Experiment(cfg)
    for protocol in ("main", "fewshot", "zeroshot", "ablation-g2"):
        exp.run_seed(protocol, 0)
    for corpus in exp.corpora.values():
        assert not [e for e in corpus.access_log if e[0] == "test" and e[2]]
        assert any(e[0] == "test" for e in corpus.access_log)


def test_main_needs_two_domains():
    cfg = tiny(synth={**TINY["synth"], "num_domains": 1})
    with pytest.raises(HarnessError):
        run_main(cfg)


def test_seed_isolation(main_store):
    alone = run_main(tiny(seeds=[3]))
    for r in alone:
        (twin,) = main_store.select(condition=r.condition, domain=r.domain, seed=3)
        assert twin.metric == r.metric


def test_parallel_workers_match_sequential(main_store, monkeypatch):
    monkeypatch.setenv("MKD_THREADS", "2")
    par = run_main(tiny(seeds=[0, 1]))
    for r in par:
        (twin,) = main_store.select(condition=r.condition, domain=r.domain, seed=r.seed)
        assert twin.metric == r.metric


def test_failure_keeps_partial_records(monkeypatch):
    cfg = tiny(seeds=[0, 1])
    exp = Experiment(cfg)
    real = exp.run_main

    def flaky(seed):
        if seed == 1:
            raise RuntimeError("boom")
        return real(seed)

    monkeypatch.setattr(exp, "run_main", flaky)
    with pytest.raises(HarnessError) as info:
        run(cfg, experiment=exp)
    assert len(info.value.records) == 27 and {r.seed for r in info.value.records} == {0}


def test_fewshot_full_rate_reproduces_main(main_store):
    store = run_fewshot(tiny(seeds=[0]))
    curve = improvement_curve(store)
    assert len(curve) == 2 * 3
    for r in store.select(rate=1.0):
        label = S_SINGLE if r.condition.endswith(S_SINGLE) else S_META
        (twin,) = main_store.select(condition=label, domain=r.domain, seed=0)
        assert twin.metric == r.metric


def test_fewshot_skips_unsampleable_rate(caplog):
    with caplog.at_level(logging.WARNING):
        store = run_fewshot(tiny(seeds=[0], rates=[0.01, 1.0]))
    assert {r.rate for r in store} == {1.0}
    assert "skipping rate 0.01" in caplog.text


def test_zeroshot_hides_held_out_labels(monkeypatch):
    cfg = tiny(seeds=[0], held_out="domain1")
    exp = Experiment(cfg)
    seen = []
    real = exp.distill_student

    def spy(teacher, table, domain, seed, train, meta, *a, **kw):
        seen.append((domain, train.has_labels))
        return real(teacher, table, domain, seed, train, meta, *a, **kw)

    monkeypatch.setattr(exp, "distill_student", spy)
    store = run_zeroshot(cfg, experiment=exp)
    assert {r.domain for r in store} == {"domain1"}
    assert sorted(seen) == [("domain1", False)] * 3 + [("domain1", True)]
    labels = {r.condition for r in store}
    assert {"meta-teacher(w/o domain1)->meta-distillation", "teacher-single(domain0)->TinyBERT-KD",
            "teacher-single(domain2)->TinyBERT-KD", "teacher-single(domain1)->TinyBERT-KD"} <= labels


def test_zeroshot_guard_catches_label_reads(monkeypatch):
    cfg = tiny(seeds=[0])
    exp = Experiment(cfg)

    def cheat(teacher, table, domain, seed, train, meta, *a, **kw):
        exp.corpora[domain].get("train")
        raise AssertionError("unreachable")

    monkeypatch.setattr(exp, "distill_student", cheat)
    with pytest.raises(HarnessError) as info:
        run_zeroshot(cfg, experiment=exp)
    assert isinstance(info.value.__cause__, D.HygieneError)


def test_zeroshot_needs_three_domains():
    with pytest.raises(HarnessError):
        run_zeroshot(tiny(seeds=[0], synth={**TINY["synth"], "num_domains": 2}))


def test_ablation_covers_grid_and_matches_main(main_store):
    store = run_ablation_gamma2(tiny(seeds=[0]), grid=[0.0, 0.3])
    assert sorted((r.domain, r.gamma2) for r in store) == [(d, g) for d in ("domain0", "domain1", "domain2")
                                                           for g in (0.0, 0.3)]
    for r in store.select(gamma2=0.3):
        (twin,) = main_store.select(condition=S_META, domain=r.domain, seed=0)
        assert twin.metric == r.metric


def test_rerun_is_deterministic():
    cfg = tiny(seeds=[1])
    a, b = run_zeroshot(cfg), run_zeroshot(cfg)
    assert [(r.key(), r.metric) for r in a] == [(r.key(), r.metric) for r in b]


# -------------------------------------------------------------------- cli
def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["gen-data", "--out", str(tmp_path / "corpus"), "--config", str(cfg)]) == 0
    assert (tmp_path / "corpus" / "manifest.json").exists()
    meta = tmp_path / "meta.mkd"
    assert cli.main(["train-teacher", "--mode", "meta", "--config", str(cfg), "--out", str(meta)]) == 0
    assert cli.sidecar(meta).exists()
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"layer_map": [[2, 1]], "gamma2": 0.2}))
    out = tmp_path / "student.mkd"
    assert cli.main(["distill", "--teacher", str(meta), "--domain", "domain2", "--plan", str(plan),
                     "--config", str(cfg), "--out", str(out)]) == 0
    assert out.exists()
    res = tmp_path / "res"
    assert cli.main(["run", "--protocol", "zeroshot", "--config", str(cfg), "--seeds", "0",
                     "--out", str(res)]) == 0
    assert (res / "report.md").exists() and (res / "records.csv").exists()
    assert cli.main(["report", str(res), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "report.md").read_text() == (res / "report.md").read_text()


def test_cli_failures_exit_nonzero(tmp_path):
    assert cli.main(["distill", "--teacher", str(tmp_path / "none.mkd"), "--domain", "domain0",
                     "--out", str(tmp_path / "x.mkd")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "synth": {**TINY["synth"], "num_domains": 2}}))
    assert cli.main(["run", "--protocol", "zeroshot", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["run", "--protocol", "nope"])
