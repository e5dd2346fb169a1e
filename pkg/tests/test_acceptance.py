"""Acceptance criteria, one test each.

Each test prints a single ``PASS``/``FAIL criterion N`` line; the lines are
repeated in the terminal summary.
"""

import json
import math
import random
import time

import numpy as np
import pytest
from scipy import stats

from tracemia import baselines as bl
from tracemia.anchors import NextTokenDistribution, build_anchor, build_axis, next_token_entropy, select_top_gamma
from tracemia.attack import decide, membership_score, project_onto_axis
from tracemia.dataset import Dataset, QuerySequence, load_dataset, save_dataset, segment_text, validate_dataset
from tracemia.embedding import cosine_similarity, denoise
from tracemia.errors import DegenerateAxis, InsufficientSamples, MixedLabelsWithinDocument, UnparseableJudgement
from tracemia.evaluation import (
    LabeledEntry,
    LabeledScores,
    aggregate_documents,
    auc,
    auc_trapezoid,
    balanced_accuracy,
    effect_size,
    tpr_at_fpr,
    welch_t_test,
)
from tracemia.lm import NgramLM
from tracemia.pipeline import ATTACK_IDS, RunConfig, run_pipeline, write_demo_workspace
from tracemia.simulator import SimulationSettings

TOL = 1e-9
ls = LabeledScores.from_arrays


def _close(a, b, tol=TOL):
    return abs(a - b) <= tol


def _raises(exc, fn, *args):
    try:
        fn(*args)
    except exc:
        return True
    return False


def _levenshtein_reference(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def test_criterion_1_formula_fixtures(criterion):
    start = time.perf_counter()
    checks = {}
    ax = build_axis(np.zeros(2), np.array([2.0, 0.0]))
    checks["score at recall anchor"] = membership_score(ax.anchor_recall, ax).score == 1.0
    checks["score at inference anchor"] = _close(membership_score(ax.anchor_inference, ax).score, 0.0)
    checks["score at midpoint"] = _close(membership_score(np.array([1.0, 0.0]), ax).score, 0.5)
    checks["projection endpoints"] = (project_onto_axis(ax.anchor_recall, ax) == 0.0
                                      and _close(project_onto_axis(ax.anchor_inference, ax), 2.0))
    checks["off-axis projection"] = _close(project_onto_axis(np.array([1.0, 5.0]), ax), 1.0)
    checks["decision rule"] = [decide(s, 0.5) for s in (0.7, 0.5, 0.3)] == ["member", "member", "non_member"]
    ax345 = build_axis(np.zeros(2), np.array([3.0, 4.0]))
    checks["3-4-5 axis"] = _close(ax345.distance, 5.0) and np.allclose(ax345.direction, [0.6, 0.8], atol=TOL)
    checks["degenerate axis"] = _raises(DegenerateAxis, build_axis, np.ones(2), np.ones(2))
    checks["anchor means"] = (np.allclose(build_anchor([np.zeros(2), np.array([2.0, 2.0])]), [1, 1])
                              and np.allclose(build_anchor([np.eye(2)[0], np.eye(2)[1], -np.eye(2)[0],
                                                            -np.eye(2)[1]]), [0, 0]))
    checks["denoise"] = (np.allclose(denoise(np.array([1.0, 1.0]), np.array([1.0, 0.0])), [0, 1], atol=TOL)
                         and np.allclose(denoise(np.array([0.0, 3.0]), np.array([1.0, 0.0])), [0, 3], atol=TOL)
                         and np.allclose(denoise(np.array([2.0, 0.0]), np.array([1.0, 0.0])), [0, 0], atol=TOL))
    checks["cosine"] = (_close(cosine_similarity(np.array([1.0, 2, 3]), np.array([1.0, 2, 3])), 1.0)
                        and _close(cosine_similarity(np.array([1.0, 0]), np.array([0.0, 1])), 0.0)
                        and _close(cosine_similarity(np.array([1.0, 0]), np.array([-1.0, 0])), -1.0))
    checks["entropy point mass"] = next_token_entropy(NextTokenDistribution({"a": 1.0}, 4)) == 0.0
    checks["entropy uniform"] = _close(next_token_entropy(NextTokenDistribution({t: 0.25 for t in "abcd"}, 4)),
                                       math.log(4))
    checks["entropy two tokens"] = _close(next_token_entropy(NextTokenDistribution({"a": 0.5, "b": 0.5}, 2)),
                                          math.log(2))
    cands = [(QuerySequence(f"c{i}", f"t{i}", 1, "d"), NextTokenDistribution(p, 4))
             for i, p in enumerate([{"a": 1.0}, {"a": 0.5, "b": 0.5}, {t: 0.25 for t in "abcd"}])]
    checks["top-gamma argmax"] = [s.id for s in select_top_gamma(cands, 1).sequences] == ["c2"]
    checks["edit distance"] = (bl.edit_distance("", "abc") == 3 and bl.edit_distance("kitten", "sitting") == 3
                               and bl.edit_distance("xyz", "xyz") == 0)
    checks["consistency"] = (bl.trace_consistency(["same text"] * 3) == 0.0
                             and _close(bl.trace_consistency(["abc", "abd"]), 1 / 3))
    checks["uniform NLL"] = _close(bl.mean_token_nll("any words at all here",
                                                     bl.BuiltinReferenceScorer(NgramLM.uniform(8))), math.log(8))
    checks["judge parse"] = (bl.parse_judgement("Certainty: 9/10") == 9
                             and _raises(UnparseableJudgement, bl.parse_judgement, "no digits"))
    checks["AUC degenerate"] = (auc(ls([1.0], [0.0])) == 1.0 and auc(ls([0.5] * 3, [0.5] * 3)) == 0.5
                                and auc(ls([0.9, 0.4], [0.6, 0.1])) == 0.75)
    checks["balanced ACC"] = (balanced_accuracy(ls([1.0], [0.0]))[0] == 1.0
                              and balanced_accuracy(ls([0.5] * 2, [0.5] * 2))[0] == 0.5
                              and balanced_accuracy(ls([0.9, 0.4], [0.6, 0.1]))[0] == 0.75)
    checks["TPR@FPR"] = (tpr_at_fpr(ls([1.0], [0.0]), 0.05) == 1.0
                         and tpr_at_fpr(ls([0.9, 0.8, 0.2], [0.7, 0.1]), 0.5) == 1.0)
    t, p = welch_t_test([1, 2, 3], [1, 2, 3])
    checks["Welch equal means"] = t == 0.0 and p == 1.0
    checks["Welch too small"] = _raises(InsufficientSamples, welch_t_test, [1.0], [1.0, 2.0])
    checks["Cohen d"] = (effect_size([1, 2, 3], [1, 2, 3]) == 0.0
                         and _close(effect_size([1, 2, 3], [0, 1, 2]), 1.0)
                         and _close(effect_size([2, 4], [0, 2]), math.sqrt(2)))
    docs = LabeledScores([LabeledEntry("a", 0.2, "member", "d"), LabeledEntry("b", 0.4, "member", "d"),
                          LabeledEntry("c", 0.7, "non_member", "e")])
    agg = {e.sequence_id: e.score for e in aggregate_documents(docs).entries}
    checks["document mean"] = _close(agg["d"], 0.3) and agg["e"] == 0.7
    checks["mixed document"] = _raises(MixedLabelsWithinDocument, aggregate_documents, LabeledScores(
        [LabeledEntry("a", 0.2, "member", "d"), LabeledEntry("b", 0.4, "non_member", "d")]))
    elapsed = time.perf_counter() - start
    failed = [k for k, ok in checks.items() if not ok]
    criterion(1, not failed and elapsed < 1.0,
              f"{len(checks) - len(failed)}/{len(checks)} formula fixtures exact at 1e-9, {elapsed:.3f} s "
              f"(limit 1 s){'; failed: ' + ', '.join(failed) if failed else ''}")


def test_criterion_2_oracle_equivalence(criterion):
    start = time.perf_counter()
    r = np.random.default_rng(2)
    worst_auc = 0.0
    for _ in range(200):
        n1, n0 = r.integers(1, 30, size=2)
        pos, neg = np.round(r.normal(0.5, 1, n1), 1), np.round(r.normal(0, 1, n0), 1)
        pairs = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (n1 * n0)
        s = ls(pos, neg)
        worst_auc = max(worst_auc, abs(auc_trapezoid(s) - pairs), abs(auc(s) - pairs))
    rnd = random.Random(3)
    edit_mismatch = 0
    for _ in range(500):
        a = "".join(rnd.choice("abc") for _ in range(rnd.randint(0, 12)))
        b = "".join(rnd.choice("abc") for _ in range(rnd.randint(0, 12)))
        edit_mismatch += bl.edit_distance(a, b) != _levenshtein_reference(a, b)
    worst_p = 0.0
    vr = np.random.default_rng(50)
    for _ in range(50):
        a = vr.normal(vr.normal(), vr.uniform(0.2, 2), vr.integers(2, 40))
        b = vr.normal(vr.normal(), vr.uniform(0.2, 2), vr.integers(2, 40))
        worst_p = max(worst_p, abs(welch_t_test(a, b)[1] - stats.ttest_ind(a, b, equal_var=False).pvalue))
    elapsed = time.perf_counter() - start
    ok = worst_auc <= 1e-9 and edit_mismatch == 0 and worst_p <= 1e-6 and elapsed < 30
    criterion(2, ok, f"AUC max dev {worst_auc:.1e} over 200 sets, edit-distance mismatches {edit_mismatch}/500, "
                     f"Welch p max dev {worst_p:.1e} over 50 vectors, {elapsed:.2f} s (limit 30 s)")


def test_criterion_3_geometry_invariants(criterion):
    start = time.perf_counter()
    r = np.random.default_rng(7)
    worst = {"orthogonality": 0.0, "idempotence": 0.0, "scale": 0.0, "off-axis": 0.0, "affine": 0.0,
             "global scaling": 0.0}
    order_flips = 0
    n = 0
    for dim in (8, 64, 384):
        for _ in range(1000):
            n += 1
            e_r, e_s = r.normal(size=dim), r.normal(size=dim)
            d = denoise(e_r, e_s)
            worst["orthogonality"] = max(worst["orthogonality"], abs(d @ e_s) / (np.linalg.norm(e_s) * max(
                np.linalg.norm(e_r), 1.0)))
            worst["idempotence"] = max(worst["idempotence"], float(np.abs(denoise(d, e_s) - d).max()))
            c = r.uniform(0.01, 100) * r.choice([-1, 1])
            worst["scale"] = max(worst["scale"], float(np.abs(denoise(e_r, c * e_s) - d).max()))
            a_m, a_n = r.normal(size=dim), r.normal(size=dim)
            ax = build_axis(a_m, a_n)
            t = r.normal() * 2
            point = a_m + t * ax.distance * ax.direction
            off = r.normal(size=dim)
            off -= (off @ ax.direction) * ax.direction
            s_on = membership_score(point, ax).score
            worst["affine"] = max(worst["affine"], abs(s_on - (1 - t)))
            worst["off-axis"] = max(worst["off-axis"], abs(membership_score(point + off, ax).score - s_on))
            g = r.uniform(0.01, 100)
            axg = build_axis(g * a_m, g * a_n)
            pts = r.normal(size=(4, dim))
            s = [membership_score(p, ax).score for p in pts]
            sg = [membership_score(g * p, axg).score for p in pts]
            worst["global scaling"] = max(worst["global scaling"], max(abs(x - y) for x, y in zip(s, sg)))
            order_flips += sum((s[i] < s[j]) != (sg[i] < sg[j])
                               for i in range(4) for j in range(4) if abs(s[i] - s[j]) > 1e-9)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and order_flips == 0 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(3, ok, f"{n} instances in dims 8/64/384, max deviations: {detail}; ranking flips {order_flips}; "
                     f"{elapsed:.2f} s (limit 30 s)")


# criteria 4 to 7 share the simulator benchmark

def _metrics(out, attack):
    return json.loads((out / "metrics" / f"{attack}.json").read_text())


def _artifacts(out):
    return {str(p.relative_to(out)): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name not in ("manifest.json", ".lock")}


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    cfg_path = write_demo_workspace(root / "main", seed=0, n_member=100, n_non_member=100,
                                    n_recall=5, gamma=5)
    start = time.perf_counter()
    result = run_pipeline(RunConfig.load(cfg_path))
    elapsed = time.perf_counter() - start
    return root, cfg_path, result, elapsed


def test_criterion_4_simulator_separation(benchmark, criterion):
    root, _, result, elapsed = benchmark
    m = _metrics(result.output_dir, "blackspectrum")
    settings = SimulationSettings(seed=0, mix_member=0.5, mix_non_member=0.5)
    eq_cfg = write_demo_workspace(root / "equal", seed=0, settings=settings, attacks=["blackspectrum"])
    start = time.perf_counter()
    eq = _metrics(run_pipeline(RunConfig.load(eq_cfg, offline=True)).output_dir, "blackspectrum")
    elapsed += time.perf_counter() - start
    ok = m["auc"] >= 0.90 and m["tpr_at_fpr"] >= 0.50 and 0.40 <= eq["auc"] <= 0.60 and elapsed < 120
    criterion(4, ok, f"BlackSpectrum AUC {m['auc']:.4f} (>= 0.90), TPR@5%FPR {m['tpr_at_fpr']:.3f} (>= 0.50), "
                     f"equal-mix AUC {eq['auc']:.4f} (in [0.40, 0.60]), {m['n_member']}+{m['n_non_member']} "
                     f"sequences, 5+5 anchors x 3 traces, {elapsed:.1f} s (limit 120 s)")


def test_criterion_5_attack_ordering(benchmark, criterion):
    out = benchmark[2].output_dir
    aucs = {a: _metrics(out, a)["auc"] for a in ATTACK_IDS}
    ours = aucs.pop("blackspectrum")
    beaten = [a for a, v in aucs.items() if v > ours]
    summary = ", ".join(f"{a} {v:.3f}" for a, v in sorted(aucs.items(), key=lambda kv: -kv[1]))
    criterion(5, not beaten, f"BlackSpectrum AUC {ours:.4f} vs baselines: {summary}"
                             + (f"; exceeded by {beaten}" if beaten else ""))


def test_criterion_6_compression_defense(benchmark, criterion):
    root, _, result, _ = benchmark
    base = _metrics(result.output_dir, "blackspectrum")["auc"]
    cfg = write_demo_workspace(root / "strong", seed=0, n_member=100, n_non_member=100, n_recall=5, gamma=5,
                               attacks=["blackspectrum"], defense="strong")
    compressed = _metrics(run_pipeline(RunConfig.load(cfg)).output_dir, "blackspectrum")["auc"]
    drop = base - compressed
    criterion(6, drop >= 0.05, f"strong compression AUC {base:.4f} -> {compressed:.4f}, drop {drop:.4f} (>= 0.05)")


def test_criterion_7_determinism(benchmark, criterion):
    root, cfg_path, result, _ = benchmark
    rerun = run_pipeline(RunConfig.load(cfg_path, offline=True, output_dir=root / "rerun"))
    first, second = _artifacts(result.output_dir), _artifacts(rerun.output_dir)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    m = rerun.manifest
    ok = not differing and m["network_calls"] == 0 and m["cache"]["misses"] == 0
    criterion(7, ok, f"offline warm-cache rerun: {len(first)} artifacts, {len(differing)} differ, "
                     f"network calls {m['network_calls']}, cache misses {m['cache']['misses']}")


def test_criterion_8_dataset_round_trip(criterion, tmp_path):
    checks = {}
    words = [f"t{i}" for i in range(128)]
    checks["70 tokens -> 2"] = len(segment_text(" ".join(words[:70]), "d", (32,))) == 2
    segs = segment_text(" ".join(words[:32]), "d", (32, 64))
    checks["32 tokens, lengths 32/64"] = [s.token_length for s in segs] == [32]
    four = segment_text(" ".join(words), "d", (32,))
    checks["128 tokens rejoin"] = len(four) == 4 and [t for s in four for t in s.text.split()] == words
    seqs = [QuerySequence(f"s{i}", f"text {i} café 日本", 3, f"doc{i // 2}",
                          None if i % 3 == 0 else ("member" if i % 2 else "non_member")) for i in range(10)]
    p = tmp_path / "ds.jsonl"
    save_dataset(Dataset(seqs), p)
    first = p.read_bytes()
    back = load_dataset(p)
    save_dataset(back, p)
    checks["byte-stable save"] = p.read_bytes() == first
    checks["exact reload"] = list(back.sequences) == seqs
    checks["unset labels omitted"] = all('"label"' not in line
                                         for line in first.decode().splitlines()[0::3])
    balanced = [QuerySequence(f"b{i}", "x y", 2, "d", "member" if i < 50 else "non_member") for i in range(100)]
    checks["50/50 ratio"] = validate_dataset(Dataset(balanced)).imbalance_ratio == 1.0
    table = [QuerySequence(f"m{i}", "x y", 32, f"m{i}", "member") for i in range(761)]
    table += [QuerySequence(f"n{i}", "x y", 64, f"n{i}", "non_member") for i in range(844)]
    ratio = validate_dataset(Dataset(table)).imbalance_ratio
    checks["761/844 ratio"] = _close(ratio, 761 / 844) and round(ratio, 3) == 0.902
    failed = [k for k, ok in checks.items() if not ok]
    criterion(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} dataset checks, 761/844 ratio {ratio:.4f}"
                             + (f"; failed: {failed}" if failed else ""))
