import csv
import json
import os
import shutil

import pytest
import yaml

from tracemia import baselines as bl
from tracemia import pipeline
from tracemia.errors import ConfigError, MissingReports, UnparseableJudgement
from tracemia.pipeline import (
    ATTACK_IDS,
    EXIT_OK,
    EXIT_PARTIAL,
    RunConfig,
    emit_report,
    output_lock,
    run_pipeline,
    write_demo_workspace,
)
from tracemia.simulator import SimulationSettings


def _artifact_bytes(out):
    return {str(p.relative_to(out)): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name not in ("manifest.json", ".lock")}


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    d = tmp_path_factory.mktemp("demo")
    cfg_path = write_demo_workspace(d, seed=3, n_member=24, n_non_member=24)
    result = run_pipeline(RunConfig.load(cfg_path))
    return d, cfg_path, result


def test_demo_writes_every_artifact(demo):
    d, _, result = demo
    out = result.output_dir
    assert result.exit_code == EXIT_OK
    assert (out / "axis.json").exists() and (out / "report.txt").exists() and (out / "pca.csv").exists()
    for a in ATTACK_IDS:
        lines = (out / "scores" / f"{a}.jsonl").read_text().splitlines()
        assert len(lines) == 48
        for level in ("", ".document"):
            m = json.loads((out / "metrics" / f"{a}{level}.json").read_text())
            assert m["attack_id"] == a and 0.0 <= m["auc"] <= 1.0
            assert m["level"] == ("document" if level else "sequence")
            rows = list(csv.reader(open(out / "roc" / f"{a}{level}.csv")))
            assert rows[0] == ["threshold", "fpr", "tpr"]
    groups = {r["group"] for r in csv.DictReader(open(out / "pca.csv"))}
    assert groups == {"recall_anchor", "inference_anchor", "member", "non_member"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["network_calls"] == 0 and manifest["skipped"] == {}
    axis = json.loads((out / "axis.json").read_text())
    assert axis["distance"] > 0


def test_offline_rerun_is_byte_identical(demo, tmp_path):
    d, cfg_path, result = demo
    before = _artifact_bytes(result.output_dir)
    out2 = tmp_path / "again"
    again = run_pipeline(RunConfig.load(cfg_path, offline=True, output_dir=out2))
    assert _artifact_bytes(out2) == before
    assert again.manifest["network_calls"] == 0
    assert again.manifest["cache"]["misses"] == 0


def test_stage_by_stage_matches_full_run(demo, tmp_path):
    d, cfg_path, result = demo
    out = tmp_path / "staged"
    cfg = RunConfig.load(cfg_path, output_dir=out)
    for stage in ("anchors", "attack", "eval", "report"):
        run_pipeline(cfg, (stage,))
    staged, full = _artifact_bytes(out), _artifact_bytes(result.output_dir)
    # pca.csv needs the anchor vectors of the same run, so a split run skips it
    full.pop("pca.csv")
    assert staged == full


def test_report_ordering(demo):
    text = emit_report(demo[2].output_dir)
    seq_part = text.split("Document-level results")[0]
    rows = [line.split() for line in seq_part.splitlines()[4:] if line.strip()]
    aucs = [float(r[2]) for r in rows]
    assert aucs == sorted(aucs, reverse=True) and len(rows) == len(ATTACK_IDS)
    assert "optimistic" in text


def test_missing_reports(tmp_path):
    with pytest.raises(MissingReports):
        emit_report(tmp_path)


def _raw(cfg_path):
    return yaml.safe_load(cfg_path.read_text())


def test_unknown_attack_fails_before_io(tmp_path):
    raw = {"attacks": ["blackspectrum", "no_such_attack"], "dataset_path": "missing.jsonl"}
    with pytest.raises(ConfigError, match="no_such_attack"):
        RunConfig.from_dict(raw, base_dir=tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_unknown_config_key(demo):
    raw = _raw(demo[1])
    raw["colour"] = "blue"
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_dict(raw, base_dir=demo[0])


def test_config_hash_tracks_semantic_fields(demo):
    d, cfg_path, _ = demo
    base = RunConfig.from_dict(_raw(cfg_path), base_dir=d).config_hash()

    def variant(mutate):
        raw = _raw(cfg_path)
        mutate(raw)
        return RunConfig.from_dict(raw, base_dir=d).config_hash()

    # operational knobs leave the hash alone
    assert variant(lambda r: r["provider"].update(max_in_flight=1, timeout_s=5.0)) == base
    assert variant(lambda r: r["provider"].update(retry={"max_attempts": 9})) == base
    assert variant(lambda r: r["encoder"].update(batch_size=3)) == base
    assert variant(lambda r: r.update(output_dir="elsewhere", cache_root="c2")) == base
    assert RunConfig.from_dict(_raw(cfg_path), base_dir=d, output_dir=d / "x").config_hash() == base
    # anything that can change a score moves it
    for mutate in (
        lambda r: r.update(seed=99),
        lambda r: r.update(samples_per_sequence=2),
        lambda r: r.update(fpr_budget=0.1),
        lambda r: r["provider"].update(model_id="other"),
        lambda r: r["provider"].update(sampling={"temperature": 0.2}),
        lambda r: r["anchors"].update(gamma=4),
        lambda r: r["simulation"].update(mix_member=0.3),
        lambda r: r.update(attacks=["blackspectrum"]),
        lambda r: r.update(defense={"level": "mild"}),
    ):
        assert variant(mutate) != base


def test_config_hash_follows_file_contents(demo, tmp_path):
    d, cfg_path, _ = demo
    ws = tmp_path / "ws"
    shutil.copytree(d, ws, ignore=shutil.ignore_patterns("out", "cache"))
    h1 = RunConfig.load(ws / "config.yaml").config_hash()
    # same contents at a different location: same hash
    assert h1 == RunConfig.load(cfg_path).config_hash()
    with open(ws / "recall.txt", "a") as f:
        f.write("A stitch in time saves nine.\n")
    assert RunConfig.load(ws / "config.yaml").config_hash() != h1


def test_config_validation_errors(demo):
    d, cfg_path, _ = demo
    cases = [
        lambda r: r.update(dataset_path="nope.jsonl"),
        lambda r: r["anchors"].pop("synthetic_candidates_path"),
        lambda r: r["anchors"].update(generator={"provider_id": "x", "model_id": "y"}),
        lambda r: r.update(samples_per_sequence=0),
        lambda r: r.update(fpr_budget=2.0),
        lambda r: r.update(attacks=[{"attack_id": "tr_consistency_char", "k": 1}]),
        lambda r: r.update(defense={"level": "extreme"}),
        lambda r: r["provider"].update(backend="carrier-pigeon"),
    ]
    for mutate in cases:
        raw = _raw(cfg_path)
        mutate(raw)
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw, base_dir=d)


def test_no_secret_reaches_disk(tmp_path, monkeypatch):
    secret = "sk-test-very-secret-value-123"
    monkeypatch.setenv("TRACEMIA_TEST_KEY", secret)
    cfg_path = write_demo_workspace(tmp_path, seed=1, n_member=8, n_non_member=8, attacks=["blackspectrum"])
    raw = _raw(cfg_path)
    raw["provider"]["auth"] = "TRACEMIA_TEST_KEY"
    cfg_path.write_text(yaml.safe_dump(raw))
    run_pipeline(RunConfig.load(cfg_path))
    for p in tmp_path.rglob("*"):
        if p.is_file():
            assert secret.encode() not in p.read_bytes(), p


def test_lock_blocks_concurrent_runs(tmp_path):
    with output_lock(tmp_path):
        assert (tmp_path / ".lock").read_text() == str(os.getpid())
        with pytest.raises(ConfigError, match="in use"):
            with output_lock(tmp_path):
                pass
    assert not (tmp_path / ".lock").exists()


def test_stale_lock_is_taken_over(tmp_path):
    # pid far above any pid_max
    (tmp_path / ".lock").write_text("999999999")
    with output_lock(tmp_path):
        assert (tmp_path / ".lock").read_text() == str(os.getpid())


def test_skipped_sequences_give_partial_exit(tmp_path, monkeypatch):
    cfg_path = write_demo_workspace(tmp_path, seed=2, n_member=8, n_non_member=8,
                                    attacks=["blackspectrum", "llm_judgement"])
    real = bl.llm_judgement_score

    def flaky(trace, judge, template):
        if trace.sequence_id.startswith("mem-doc000"):
            raise UnparseableJudgement("judge said nothing useful")
        return real(trace, judge, template)

    monkeypatch.setattr(pipeline.bl, "llm_judgement_score", flaky)
    result = run_pipeline(RunConfig.load(cfg_path))
    assert result.exit_code == EXIT_PARTIAL
    skipped = result.manifest["skipped"]["llm_judgement"]
    assert len(skipped) == 4 and all(k.startswith("mem-doc000") for k in skipped)
    judged = (result.output_dir / "scores" / "llm_judgement.jsonl").read_text().splitlines()
    assert len(judged) == 12
    # blackspectrum is unaffected
    assert len((result.output_dir / "scores" / "blackspectrum.jsonl").read_text().splitlines()) == 16


def test_strong_compression_lowers_auc(tmp_path):
    aucs = {}
    for defense in (None, "strong"):
        d = tmp_path / (defense or "none")
        cfg_path = write_demo_workspace(d, seed=0, n_member=40, n_non_member=40,
                                        attacks=["blackspectrum"], defense=defense)
        out = run_pipeline(RunConfig.load(cfg_path)).output_dir
        aucs[defense] = json.loads((out / "metrics" / "blackspectrum.json").read_text())["auc"]
    assert aucs["strong"] < aucs[None]


def test_equal_mix_gives_chance_auc(tmp_path):
    settings = SimulationSettings(seed=0, mix_member=0.5, mix_non_member=0.5)
    cfg_path = write_demo_workspace(tmp_path, seed=0, settings=settings, attacks=["blackspectrum"])
    out = run_pipeline(RunConfig.load(cfg_path)).output_dir
    assert 0.35 <= json.loads((out / "metrics" / "blackspectrum.json").read_text())["auc"] <= 0.65
