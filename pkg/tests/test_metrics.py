import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sidehead.data import PlantedSpec, generate_planted
from sidehead.heads import INFODISENT, SIDE, ScoresSheet, forward, init_infodisent_head, init_side_head
from sidehead.losses import ocla_metric as losses_ocla
from sidehead.metrics import (
    accuracy,
    companion_paths,
    emit_report,
    evaluate,
    explain,
    global_size,
    local_size,
    local_sizes,
    ocla_metric,
    weight_histogram,
)
from sidehead.pipeline import PruneConfig, StageConfig, prune_params, run_stage


def sheet(w, mask=None):
    w = np.asarray(w, dtype=float)
    return ScoresSheet(w, np.ones_like(w, bool) if mask is None else np.asarray(mask, bool))


def brute_local(probs, w, mask, t):
    c = len(probs)
    act = [k for k in range(c) if probs[k] > t] or [int(np.argmax(probs))]
    return len({j for k in act for j in range(w.shape[1]) if mask[k, j] and w[k, j] > 0})


def brute_global(w, mask):
    return sum(any(mask[k, j] and w[k, j] > 0 for k in range(w.shape[0])) for j in range(w.shape[1]))


@pytest.fixture(scope="module")
def trained():
    spec = PlantedSpec(num_classes=6, num_concepts=10, channel_dim=10, height=4, width=4)
    _, _, truth, tr, te = generate_planted(spec, 200, 100, seed=9)
    p = init_side_head(10, 16, 6, seed=9)
    p, _ = run_stage(p, tr, StageConfig("pretrain", 5, 32, 3e-2, seed=1))
    return p, tr, te


class TestAccuracy:
    def test_examples(self):
        assert accuracy([[0.2, 0.8], [0.6, 0.4]], [1, 1]) == 0.5
        assert accuracy([[0.1, 0.9], [0.7, 0.3]], [1, 0]) == 1.0

    def test_tie_lowest_index(self):
        assert accuracy([[0.25] * 4], [0]) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy(np.zeros((0, 3)), [])


class TestSizes:
    def test_global_examples(self):
        assert global_size(sheet([[0, 1.2, 0], [0, 0, 2.0]])) == 2
        assert global_size(sheet(np.ones((2, 3)), np.zeros((2, 3)))) == 0

    def test_global_fresh_init(self):
        assert global_size(init_side_head(4, 64, 10, seed=0).sheet) == 64

    def test_local_examples(self):
        s = sheet([[0, 1, 1, 1, 0], [0, 0, 0, 1, 1]])
        assert local_sizes([[0.9, 0.1]], s, 0.5)[0] == 3
        assert local_sizes([[0.9, 0.8]], s, 0.5)[0] == 4
        # fallback to argmax
        assert local_sizes([[0.1, 0.3]], s, 0.5)[0] == 2

    def test_local_single_sample(self):
        p = init_side_head(3, 5, 2, seed=0)
        p.sheet.weights[:] = 0
        p.sheet.weights[1, [0, 2, 4]] = 1.0
        out = forward(np.ones((1, 3, 2, 2)), p)
        out.probs[:] = [[0.1, 0.9]]
        assert local_size(out, p.sheet, 0.5) == (3, {0, 2, 4})

    def test_brute_force_trained_sheets(self, trained):
        params, _, te = trained
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = params.copy()
            # perturb a trained sheet: random pruning plus some killed entries
            keep = rng.uniform(size=p.sheet.weights.shape) < rng.uniform(0.05, 1.0)
            p.sheet.mask &= keep
            p.sheet.weights[rng.uniform(size=keep.shape) < 0.1] *= -1
            idx = rng.choice(len(te), size=5, replace=False)
            out = forward(te.features[idx], p)
            t = float(rng.uniform(0.1, 0.9))
            sizes = local_sizes(out.probs, p.sheet, t)
            w, m = p.sheet.weights, p.sheet.mask
            g = brute_global(w, m)
            assert global_size(p.sheet) == g
            for k in range(5):
                assert sizes[k] == brute_local(out.probs[k], w, m, t)
                assert sizes[k] <= g <= p.n_protos

    def test_min_activation_variant(self):
        s = sheet([[1.0, 1.0, 1.0]])
        pooled = np.array([[0.5, 0.1, -2.0]])
        assert local_sizes([[0.9]], s, 0.5, pooled=pooled, min_activation=0.2)[0] == 1
        with pytest.raises(ValueError):
            local_sizes([[0.9]], s, 0.5, min_activation=0.2)

    def test_infodisent_dense(self):
        p = init_infodisent_head(6, 4, seed=0)
        out = forward(np.random.default_rng(0).normal(size=(10, 6, 3, 3)), p)
        assert np.all(local_sizes(out.probs, p.sheet, 0.5, INFODISENT) == 6)

    def test_ocla_shared_definition(self):
        assert ocla_metric is losses_ocla


class TestExplain:
    def test_single_prototype(self):
        p = init_side_head(2, 3, 1, seed=0)
        p.sheet.weights[:] = [[0.0, 1.5, -1.0]]
        x = np.random.default_rng(1).normal(size=(2, 3, 3))
        ex = explain(x, p, 0.5)
        (cls,) = ex.classes
        assert [r["proto"] for r in cls["prototypes"]] == [1]
        assert cls["prototypes"][0]["contribution"] == cls["logit"]

    def test_reconstruction(self, trained):
        params, _, te = trained
        p = prune_params(params, PruneConfig(3.0))
        for i in range(len(te)):
            ex = explain(te.features[i], p, 0.5, sample_id=i)
            out = forward(te.features[i:i + 1], p)
            assert ex.classes
            for c in ex.classes:
                total = sum(r["contribution"] for r in c["prototypes"])
                assert abs(total - out.logits[0, c["class"]]) < 1e-9
                contribs = [r["contribution"] for r in c["prototypes"]]
                assert contribs == sorted(contribs, reverse=True)
            n, protos = local_size(out, p.sheet, 0.5)
            assert ex.prototypes == protos and len(ex.prototypes) == n

    def test_listed_entries_active(self, trained):
        params, _, te = trained
        ex = explain(te.features[0], params, 0.5)
        eff = params.sheet.effective(SIDE)
        for c in ex.classes:
            for r in c["prototypes"]:
                assert eff[c["class"], r["proto"]] > 0 and r["sign"] in (-1, 0, 1)

    def test_json(self, trained):
        params, _, te = trained
        doc = json.loads(explain(te.features[3], params, 0.5, sample_id=3).to_json())
        assert doc["sample_id"] == 3 and doc["activated_classes"]


class TestHistogramAndReport:
    def test_empty(self):
        edges, counts = weight_histogram(sheet(-np.ones((2, 2))), 5)
        assert len(edges) == 6 and not counts.any()

    def test_uniform(self):
        _, counts = weight_histogram(sheet(np.ones((3, 4))), 7)
        assert np.count_nonzero(counts) == 1 and counts.sum() == 12

    def test_conservation(self, trained):
        params, _, _ = trained
        _, counts = weight_histogram(params.sheet, 13)
        assert counts.sum() == int(params.sheet.active(SIDE).sum())

    def test_bins(self):
        with pytest.raises(ValueError):
            weight_histogram(sheet(np.ones((1, 1))), 0)

    def test_emit(self, trained, tmp_path):
        params, _, te = trained
        rep = evaluate(params, te, 0.5)
        emit_report(rep, tmp_path / "r.json")
        first = [(tmp_path / "r.json").read_bytes()] + [p.read_bytes() for p in companion_paths(tmp_path / "r.json")]
        emit_report(evaluate(params, te, 0.5), tmp_path / "r.json")
        second = [(tmp_path / "r.json").read_bytes()] + [p.read_bytes() for p in companion_paths(tmp_path / "r.json")]
        assert first == second
        doc = json.loads(first[0])
        assert doc["accuracy"] == rep.accuracy and doc["ocla"] == rep.ocla
        assert doc["global_size"] == rep.global_size and doc["threshold"] == 0.5
        hist_path, local_path = companion_paths(tmp_path / "r.json")
        rows = list(csv.DictReader(local_path.open()))
        assert len(rows) == len(te)
        assert abs(np.mean([int(r["local_size"]) for r in rows]) - doc["local_size_mean"]) < 1e-9
        hist = list(csv.DictReader(hist_path.open()))
        assert sum(int(r["count"]) for r in hist) == int(params.sheet.active(SIDE).sum())

    def test_report_bounds(self, trained):
        params, _, te = trained
        rep = evaluate(params, te)
        assert 0 <= rep.accuracy <= 1 and 0 <= rep.ocla <= 1
        assert rep.local_sizes.max() <= rep.global_size <= params.n_protos


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-1, 1)),
       st.integers(0, 2**31), st.floats(0.05, 0.95))
def test_size_ordering(w, seed, t):
    rng = np.random.default_rng(seed)
    s = ScoresSheet(w, rng.uniform(size=w.shape) < 0.7)
    probs = rng.uniform(size=(4, w.shape[0]))
    sizes = local_sizes(probs, s, t)
    assert np.all(sizes <= global_size(s)) and global_size(s) <= w.shape[1]
