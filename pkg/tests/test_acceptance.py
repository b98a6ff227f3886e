"""Acceptance criteria: one test each, each reporting a PASS/FAIL line."""

import json
import math
import time
from contextlib import contextmanager
from itertools import product

import numpy as np
import pytest

import oracles
import scenario
from conftest import VERDICTS
from emoflow.backends import ROUTES, connect
from emoflow.backends.client import BackendProfile
from emoflow.backends.mock import MockBackend, MockScript, ScriptEntry
from emoflow.backends.protocol import canonical_json, schema_key, validation_errors
from emoflow.editing import default_registry
from emoflow.errors import BackendUnavailable, CorruptRunDirectory, JobInterrupted
from emoflow.images import blank_png
from emoflow.knowledge import ClusterParams, EmotionFactorTree, agglomerate, build_tree, l2_distance, retrieve
from emoflow.labels import MIKELS, EmotionDistribution, EmotionLabel
from emoflow.metrics import clip_i, emo_s, kl_divergence, sem_d
from emoflow.orchestrator import edit_call_bound, run_job
from emoflow.planning import analyze, generate_plans
from test_backends import sweep
from test_knowledge import _partitions, clustered, describe, items_for, random_nodes
from test_orchestrator import ASSESS_FAIL, by_branch, check_golden, simple_run


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        line = f"FAIL  {name}"
        print(line)
        VERDICTS.append(line)
        raise
    line = f"PASS  {name}"
    print(line)
    VERDICTS.append(line)


def test_retrieval_matches_exhaustive_oracle():
    with criterion("retrieval: 200 queries over 1,000 nodes match sort-then-cap oracle in < 5 s"):
        rng = np.random.default_rng(2024)
        nodes = random_nodes(rng, 1000)
        tree = EmotionFactorTree(nodes, 8)
        queries = [(tuple(rng.normal(size=8).tolist()), MIKELS[int(rng.integers(8))]) for _ in range(200)]
        start = time.perf_counter()
        got = [[n.id for n in retrieve(tree, q, EmotionLabel(e), k=5, per_kind_cap=2)] for q, e in queries]
        elapsed = time.perf_counter() - start
        want = [oracles.retrieve(nodes, q, e, 5, 2) for q, e in queries]
        mismatches = sum(g != w for g, w in zip(got, want))
        assert mismatches == 0
        assert elapsed < 5.0


def test_l2_metric_suite():
    with criterion("L2: metric axioms over 10,000 triples (1e-9), analytic cases exact (1e-12)"):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            a, b, c = (rng.normal(scale=10, size=8).tolist() for _ in range(3))
            ab = l2_distance(a, b)
            assert ab >= 0
            assert abs(ab - l2_distance(b, a)) <= 1e-9
            assert l2_distance(a, c) <= ab + l2_distance(b, c) + 1e-9
            assert abs(ab - oracles.l2(a, b)) <= 1e-9
        v = rng.normal(size=8).tolist()
        assert abs(l2_distance(v, v) - 0.0) <= 1e-12
        assert abs(l2_distance((1.0, 0.0), (0.0, 1.0)) - math.sqrt(2)) <= 1e-12


def test_clustering_matches_naive_average_linkage():
    with criterion("clustering: 50 instances match naive average-linkage oracle; size filter drops exactly < 5"):
        rng = np.random.default_rng(11)
        seen_kept = seen_dropped = 0
        for _ in range(50):
            n = int(rng.integers(2, 51))
            vectors = clustered(rng, n, centers=int(rng.integers(1, 6)))
            history, clusters = agglomerate(vectors, 0.89)
            steps, final = oracles.average_linkage([list(v) for v in vectors], 0.89)
            assert _partitions(history, n) == steps
            assert sorted(tuple(c) for c in clusters) == final
            tree = build_tree(items_for(vectors), ClusterParams(merge_threshold=0.89), describe)
            kept = sorted(n.cluster_size for n in tree.nodes)
            assert kept == sorted(len(c) for c in final if len(c) >= 5)
            seen_kept += len(kept)
            seen_dropped += len(final) - len(kept)
        assert seen_kept and seen_dropped


def test_metric_kernels_match_brute_force():
    with criterion("metric kernels: KL, Sem-D, Emo-S, CLIP-I match brute force (1e-9) on 1,000 inputs; identities exact"):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            p = EmotionDistribution(tuple(rng.dirichlet(np.ones(8) * rng.uniform(0.1, 3)).tolist()))
            q = EmotionDistribution(tuple(rng.dirichlet(np.ones(8)).tolist()))
            t = EmotionLabel(MIKELS[int(rng.integers(8))])
            vs = [rng.normal(size=8).tolist() for _ in range(int(rng.integers(2, 7)))]
            assert abs(kl_divergence(p, q) - oracles.kl(p.probs, q.probs)) <= 1e-9
            assert abs(emo_s(p, q, t) - (q.probs[MIKELS.index(t.value)] - p.probs[MIKELS.index(t.value)])) <= 1e-9
            assert abs(sem_d(vs) - oracles.sem_d(vs)) <= 1e-9
            assert abs(clip_i(vs[0], vs[1]) - oracles.cosine(vs[0], vs[1])) <= 1e-9
            assert kl_divergence(p, p) == 0.0
            assert emo_s(p, p, t) == 0.0
            assert sem_d([vs[0]] * 3) == 0.0
            assert clip_i(vs[0], vs[0]) == 1.0


def test_plan_distinctness(store):
    with criterion("plans: 100 seeded runs with K=5 give pairwise-distinct (element, method) multisets"):
        source = store.put(blank_png(color=(10, 20, 30)))
        violations = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            tree = EmotionFactorTree(random_nodes(rng, 60), 8)
            backends, _ = connect(BackendProfile(), store, MockScript(seed=seed))
            target = EmotionLabel(MIKELS[seed % 8])
            cues = analyze(source, store, backends)
            pool = retrieve(tree, cues.cue_embedding, target)
            plans = generate_plans(cues, target, pool, backends, k=5, n_max=4, seed=seed)
            bags = [tuple(sorted((i.element.id, i.method.value) for i in p.instructions)) for p in plans.plans]
            assert len(bags) == 5
            violations += sum(bags[i] == bags[j] for i in range(5) for j in range(i + 1, 5))
        assert violations == 0


def test_retry_and_termination_bounds(tmp_path):
    with criterion("budgets: edit calls <= N_max(1+R)(1+M) for R in {0,1,2}, M in {0,1,3}; runs terminate with full history"):
        always_fail = MockScript(seed=3, entries=(ScriptEntry("/validate", response={"verdict": "failed", "reason": "nothing changed"}), ASSESS_FAIL))
        for r, m in product((0, 1, 2), (0, 1, 3)):
            work = tmp_path / f"r{r}m{m}"
            work.mkdir()
            job, backends, mock, store = simple_run(work, always_fail, retry_budget=r, max_opt_iters=m)
            record = run_job(job, scenario.tree(), default_registry(), backends, store, work / "run")
            assert record.status == "completed"
            assert sum(b.edit_calls for b in record.branches) == mock.calls("/edit")
            for b in record.branches:
                assert b.edit_calls <= job.n_max * (1 + r) * (1 + m) == edit_call_bound(job)
                assert b.status == "rejected"
                assert [h.iteration for h in b.history] == list(range(m + 1))
                assert all(len(h.diagnoses) >= 1 for h in b.history[1:])


def test_end_to_end_scenario(tmp_path):
    with criterion("end-to-end: scripted K=3 run, 3 accepted, golden audit log, < 10 s"):
        start = time.perf_counter()
        record, _ = scenario.run(tmp_path / "w", tmp_path / "run")
        elapsed = time.perf_counter() - start
        b1, b2, b3 = record.branches
        val = [a for a in b1.last_traces[0][1].attempts if a.stage == "val"]
        edits = [a for a in b1.last_traces[0][1].attempts if a.stage == "edit"]
        assert [a.status for a in val] == ["failed", "ok"] and edits[0].tool != edits[1].tool
        assert [h.assessment.verdict for h in b2.history] == ["fail", "pass"]
        assert len(b3.history) == 1
        assert len(record.outputs) == 3
        check_golden("scenario_audit.log", (tmp_path / "run" / "audit.log").read_bytes())
        assert elapsed < 10.0


def test_reproducibility_and_isolation(tmp_path):
    with criterion("reproducibility: parallelism 1 and 4 give identical logs; perturbing branch 2 leaves 1 and 3 unchanged"):
        one, _ = scenario.run(tmp_path / "w1", tmp_path / "p1", parallelism=1)
        four, _ = scenario.run(tmp_path / "w4", tmp_path / "p4", parallelism=4)
        assert (tmp_path / "p1" / "audit.log").read_bytes() == (tmp_path / "p4" / "audit.log").read_bytes()
        _, script, _ = scenario.build(tmp_path / "w2")
        probe = ScriptEntry(
            "/critique",
            match={"mode": "assess", "image": {"content_hash": one.branch(2).history[0].image_hash}},
            response={"distribution": ASSESS_FAIL.response["distribution"], "verdict": None, "rationale": ["perturbed"], "source_similarity": 0.4},
        )
        other, _ = scenario.run(tmp_path / "w2", tmp_path / "perturbed", script=script.plus(probe))
        assert by_branch(other.audit_log, 2) != by_branch(one.audit_log, 2)
        for k in (1, 3):
            assert by_branch(other.audit_log, k) == by_branch(one.audit_log, k)
            assert other.branch(k) == one.branch(k)


def test_persistence(tmp_path):
    with criterion("persistence: kill-and-resume equals uninterrupted; corrupted trace detected by hash"):
        full, _ = scenario.run(tmp_path / "w", tmp_path / "full")
        with pytest.raises(JobInterrupted):
            scenario.run(tmp_path / "w2", tmp_path / "cut", stop_after="pre_creation")
        resumed, _ = scenario.resume(tmp_path / "w2", tmp_path / "cut")
        assert (tmp_path / "cut" / "audit.log").read_bytes() == (tmp_path / "full" / "audit.log").read_bytes()
        assert resumed.branches == full.branches and resumed.outputs == full.outputs
        with pytest.raises(JobInterrupted):
            scenario.run(tmp_path / "w3", tmp_path / "bad", stop_after="pre_creation")
        trace = tmp_path / "bad" / "branches" / "1" / "step_1" / "trace.json"
        data = json.loads(trace.read_text())
        data["final_status"] = "failed"
        trace.write_text(json.dumps(data))
        with pytest.raises(CorruptRunDirectory):
            scenario.resume(tmp_path / "w3", tmp_path / "bad")


def test_protocol_conformance(store):
    with criterion("protocol: mock responses validate on all 10 routes; /edit injection raises after configured retries"):
        source = store.put(blank_png())
        backends, mock = connect(BackendProfile(), store, MockScript())
        sweep(backends, source)
        assert set(ROUTES) <= {r.route for r in mock.request_log}
        assert len(ROUTES) == 10
        replay = MockBackend(MockScript(), store)
        for req in mock.request_log:
            reply = replay.handle(req.route, canonical_json(req.body))
            assert validation_errors("response", schema_key(req.route, req.body), json.loads(reply.body)) == []
        for retries in range(4):
            b, m = connect(BackendProfile(retries=retries), store, MockScript(entries=(ScriptEntry("/edit", error={"status": 500}),)))
            with pytest.raises(BackendUnavailable):
                b.edit(source, "add a dog to the scene", "magicbrush", "text_guided", None, 0)
            assert m.calls("/edit") == 1 + retries
