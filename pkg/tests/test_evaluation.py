import itertools
import math

import numpy as np
import pytest
import scipy.stats

from rgpl import data, dense_index, encoder, evaluation
from rgpl.evaluation import (
    MetricReport,
    RunFile,
    ndcg_at_k,
    produce_run,
    success_at_k,
    wilcoxon_one_sided,
    wilcoxon_reports,
)


def oracle_ndcg(hits, grades, k):
    """Brute-force NDCG@k straight from the definition (full-set ideal)."""
    dcg = 0.0
    for i, (doc_id, _) in enumerate(hits[:k]):
        dcg += (2 ** grades.get(doc_id, 0) - 1) / math.log2(i + 2)
    ideal = sorted(grades.values(), reverse=True)
    idcg = sum((2**g - 1) / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else None


def oracle_success(hits, grades, k):
    return 1.0 if any(grades.get(d, 0) >= 1 for d, _ in hits[:k]) else 0.0


def oracle_wilcoxon_enumeration(a, b):
    """Exact one-sided p-value by enumerating all 2^n sign assignments."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0.0]
    n = len(d)
    ranks = scipy.stats.rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    at_least = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for s, r in zip(signs, ranks) if s)
        if w >= w_obs - 1e-12:
            at_least += 1
    return at_least / 2.0**n


def random_run_and_qrels(rng, num_queries=8, num_docs=30, depth=15):
    doc_ids = [f"d{i:03d}" for i in range(num_docs)]
    rankings = {}
    judgments = {}
    for qi in range(num_queries):
        qid = f"q{qi}"
        scores = rng.normal(size=num_docs)
        order = np.argsort(-scores)
        rankings[qid] = [(doc_ids[i], float(scores[i])) for i in order[:depth]]
        grades = {}
        for doc_id in rng.choice(doc_ids, size=rng.integers(0, 6), replace=False):
            grades[str(doc_id)] = int(rng.integers(1, 3))
        judgments[qid] = grades
    return RunFile(rankings), data.Qrels(judgments)


class TestRunFile:
    def test_rejects_duplicate_doc(self):
        with pytest.raises(ValueError, match="duplicate doc"):
            RunFile({"q1": [("d1", 2.0), ("d1", 1.0)]})

    def test_rejects_increasing_scores(self):
        with pytest.raises(ValueError, match="non-increasing"):
            RunFile({"q1": [("d1", 1.0), ("d2", 2.0)]})

    def test_trec_round_trip(self, tmp_path):
        run = RunFile({"q1": [("d1", 2.0), ("d2", 0.5)], "q2": [("d3", -1.25)]})
        path = tmp_path / "run.trec"
        run.save_trec(path, tag="unit")
        text = path.read_text()
        assert "q1 Q0 d1 1 2.0 unit" in text
        loaded = RunFile.load_trec(path)
        assert loaded.hits("q1") == run.hits("q1")
        assert loaded.hits("q2") == run.hits("q2")


class TestProduceRun:
    def make_setup(self):
        spec = data.SyntheticDomainSpec(32, 40, 2, (8, 16), 0.9, seed=31)
        corpus, _ = data.generate_synthetic_corpus(spec)
        queries = data.generate_pseudo_queries(corpus, 1, noise=0.0, seed=32,
                                               doc_ids=corpus.doc_ids()[:10])
        params = encoder.init_params(len(corpus.vocab), 8, 4, seed=33)
        index = dense_index.build_index(params, corpus, step=0)
        return params, index, queries

    def test_depth_one(self):
        params, index, queries = self.make_setup()
        run = produce_run(params, index, queries, depth=1)
        for qid in run.query_ids():
            assert len(run.hits(qid)) == 1

    def test_basis_vector_docs(self):
        index = dense_index.IndexSnapshot(
            ["da", "db", "dc"], np.eye(3), 0, "h")
        vocab = data.Vocabulary.synthetic(4)
        queries = data.QuerySet([data.Query("q1", "w0000", "da")], vocab)
        params = encoder.init_params(7, 4, 3, seed=0)
        run = produce_run(params, index, queries, depth=3)
        q_emb = encoder.encode(params, queries.tokens("q1"))
        best = int(np.argmax(q_emb))
        assert run.hits("q1")[0][0] == ["da", "db", "dc"][best]

    def test_matches_per_query_brute_force(self):
        # oracle: full sort of all document scores per query
        rng = np.random.default_rng(34)
        doc_ids = [f"d{i:03d}" for i in range(300)]
        embeddings = rng.normal(size=(300, 5))
        index = dense_index.IndexSnapshot(doc_ids, embeddings, 0, "h")
        for _ in range(5):
            q = rng.normal(size=5)
            got = dense_index.search(index, q, k=25)
            scores = embeddings @ q
            order = sorted(range(300), key=lambda i: (-scores[i], doc_ids[i]))
            expected = [(doc_ids[i], float(scores[i])) for i in order[:25]]
            assert got == expected


class TestNdcg:
    def test_perfect_single_relevant(self):
        run = RunFile({"q1": [("d1", 1.0), ("d2", 0.5)]})
        qrels = data.Qrels({"q1": {"d1": 1}})
        report = ndcg_at_k(run, qrels, k=10)
        assert report.per_query["q1"] == pytest.approx(1.0)
        assert report.aggregate == pytest.approx(1.0)

    def test_rank_two_value(self):
        run = RunFile({"q1": [("d2", 1.0), ("d1", 0.5)]})
        qrels = data.Qrels({"q1": {"d1": 1}})
        report = ndcg_at_k(run, qrels, k=10)
        # frozen from DCG/IDCG by hand: 1/log2(3)
        assert report.per_query["q1"] == pytest.approx(0.6309297535714575, abs=1e-12)

    def test_nothing_relevant_in_topk(self):
        run = RunFile({"q1": [(f"d{i}", float(-i)) for i in range(10)]})
        qrels = data.Qrels({"q1": {"d99": 2}})
        report = ndcg_at_k(run, qrels, k=10)
        assert report.per_query["q1"] == 0.0

    def test_all_zero_qrels_excluded(self):
        run = RunFile({"q1": [("d1", 1.0)], "q2": [("d2", 1.0)]})
        qrels = data.Qrels({"q1": {"d1": 1}, "q2": {"d9": 0}})
        report = ndcg_at_k(run, qrels, k=10)
        assert "q2" in report.excluded
        assert list(report.per_query) == ["q1"]

    def test_missing_qrels_query_excluded_with_warning(self, caplog):
        run = RunFile({"q1": [("d1", 1.0)], "qX": [("d2", 1.0)]})
        qrels = data.Qrels({"q1": {"d1": 1}})
        with caplog.at_level("WARNING", logger="rgpl.evaluation"):
            report = ndcg_at_k(run, qrels, k=10)
        assert "qX" in report.excluded
        assert any("qX" in rec.message for rec in caplog.records)

    def test_matches_brute_force_on_random_instances(self):
        # oracle: independent brute-force NDCG implementation
        rng = np.random.default_rng(35)
        for _ in range(30):
            run, qrels = random_run_and_qrels(rng)
            report = ndcg_at_k(run, qrels, k=10)
            for qid in run.query_ids():
                expected = oracle_ndcg(run.hits(qid), qrels.grades_for(qid), 10)
                if expected is None:
                    assert qid in report.excluded
                else:
                    assert report.per_query[qid] == pytest.approx(expected, abs=1e-9)


class TestSuccess:
    def test_rank_five_inclusive(self):
        hits = [(f"d{i}", float(10 - i)) for i in range(10)]
        run = RunFile({"q1": hits})
        qrels = data.Qrels({"q1": {"d4": 1}})
        assert success_at_k(run, qrels, k=5).per_query["q1"] == 1.0

    def test_rank_six_exclusive(self):
        hits = [(f"d{i}", float(10 - i)) for i in range(10)]
        run = RunFile({"q1": hits})
        qrels = data.Qrels({"q1": {"d5": 1}})
        assert success_at_k(run, qrels, k=5).per_query["q1"] == 0.0

    def test_aggregate_mean(self):
        run = RunFile({f"q{i}": [(f"d{i}", 1.0)] for i in range(4)})
        qrels = data.Qrels({
            "q0": {"d0": 1}, "q1": {"dX": 1}, "q2": {"d2": 2}, "q3": {"d3": 1},
        })
        report = success_at_k(run, qrels, k=5)
        assert report.aggregate == pytest.approx(0.75)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(36)
        for _ in range(30):
            run, qrels = random_run_and_qrels(rng)
            report = success_at_k(run, qrels, k=5)
            for qid, value in report.per_query.items():
                expected = oracle_success(run.hits(qid), qrels.grades_for(qid), 5)
                assert value == pytest.approx(expected, abs=1e-12)


class TestWilcoxon:
    def test_identical_vectors(self):
        with pytest.warns(UserWarning, match="all paired differences are zero"):
            result = wilcoxon_one_sided([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert result.p_value == 1.0
        assert result.n == 0

    def test_uniformly_greater_ten_pairs(self):
        a = np.arange(10, dtype=float) + 1.0
        b = np.arange(10, dtype=float)
        result = wilcoxon_one_sided(a, b)
        # frozen from exact enumeration: only the all-positive assignment
        assert result.p_value == pytest.approx(1.0 / 2**10, abs=1e-15)
        assert result.n == 10

    def test_matches_scipy_exact_no_ties(self):
        # oracle: reference statistics package, exact method
        rng = np.random.default_rng(37)
        for _ in range(10):
            a = rng.normal(size=12)
            b = rng.normal(size=12)
            result = wilcoxon_one_sided(a, b)
            expected = scipy.stats.wilcoxon(a, b, alternative="greater", method="exact")
            assert result.p_value == pytest.approx(expected.pvalue, abs=1e-12)

    def test_matches_enumeration_with_ties(self):
        # oracle: exact enumeration of sign assignments over tied ranks
        a = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0])
        b = np.array([2.0, 2.0, 3.0, 0.0, 3.0, 8.0, 4.0, 6.5])
        result = wilcoxon_one_sided(a, b)
        assert result.p_value == pytest.approx(oracle_wilcoxon_enumeration(a, b), abs=1e-12)

    def test_zero_differences_dropped(self):
        a = np.array([1.0, 2.0, 5.0, 4.0])
        b = np.array([1.0, 2.0, 3.0, 1.0])
        result = wilcoxon_one_sided(a, b)
        assert result.n == 2
        expected = scipy.stats.wilcoxon(
            a, b, alternative="greater", method="exact", zero_method="wilcox"
        )
        assert result.p_value == pytest.approx(expected.pvalue, abs=1e-12)

    def test_normal_approximation_above_25(self):
        # oracle: scipy approx with continuity correction; forced ties keep
        # scipy on the same approximation branch as our convention
        rng = np.random.default_rng(38)
        a = np.round(rng.normal(size=40), 1)
        b = np.round(rng.normal(size=40), 1)
        diff = a - b
        a = a[diff != 0]
        b = b[diff != 0]
        assert len(a) > 25
        result = wilcoxon_one_sided(a, b)
        expected = scipy.stats.wilcoxon(
            a, b, alternative="greater", method="approx", correction=True
        )
        assert result.p_value == pytest.approx(expected.pvalue, abs=1e-9)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            wilcoxon_one_sided([1.0, 2.0], [1.0])

    def test_antisymmetry_with_point_mass(self):
        rng = np.random.default_rng(39)
        a = rng.normal(size=14)
        b = rng.normal(size=14)
        forward = wilcoxon_one_sided(a, b)
        backward = wilcoxon_one_sided(b, a)
        diff = a - b
        diff = diff[diff != 0]
        ranks = evaluation._average_ranks(np.abs(diff))
        ways = evaluation._exact_rank_sum_counts(ranks)
        point_mass = ways[int(round(2 * forward.statistic))] / 2.0 ** len(diff)
        assert backward.p_value == pytest.approx(
            1.0 - forward.p_value + point_mass, abs=1e-12
        )

    def test_report_pairing(self):
        ra = MetricReport("ndcg", 10, {"q1": 0.9, "q2": 0.8, "q3": 0.7}, 0.8, [])
        rb = MetricReport("ndcg", 10, {"q2": 0.1, "q3": 0.2, "q4": 0.5}, 0.27, [])
        result = wilcoxon_reports(ra, rb)
        assert result.n == 2


class TestMetricReportIO:
    def test_save_and_reload_per_query(self, tmp_path):
        report = MetricReport("ndcg", 10, {"q1": 0.5, "q2": 0.25}, 0.375, ["q3"])
        prefix = tmp_path / "ndcg10"
        report.save(prefix)
        values = MetricReport.load_per_query(f"{prefix}.tsv")
        assert values == {"q1": 0.5, "q2": 0.25}
        import json

        summary = json.loads((tmp_path / "ndcg10.json").read_text())
        assert summary["aggregate"] == 0.375
        assert summary["excluded"] == ["q3"]
