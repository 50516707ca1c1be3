import json
import os

import numpy as np
import pytest

from rgpl import data
from rgpl.bm25 import bm25_search, build_bm25


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


class TestLoadBeirCorpus:
    def test_three_well_formed_lines(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        write_lines(path, [
            json.dumps({"_id": "d1", "title": "Alpha", "text": "beta gamma"}),
            json.dumps({"_id": "d2", "text": "delta"}),
            json.dumps({"_id": "d3", "title": "", "text": "epsilon"}),
        ])
        corpus = data.load_beir_corpus(path)
        assert len(corpus) == 3
        assert corpus.doc_ids() == ["d1", "d2", "d3"]
        assert corpus.get("d1").text == "Alpha beta gamma"
        assert corpus.get("d3").text == "epsilon"

    def test_missing_id_names_line(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        write_lines(path, [
            json.dumps({"_id": "d1", "text": "x"}),
            json.dumps({"text": "no id here"}),
        ])
        with pytest.raises(data.DataFormatError, match="missing id at line 2"):
            data.load_beir_corpus(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text('{"_id": "d1", "text": "x"}\n{not json\n', encoding="utf-8")
        with pytest.raises(data.DataFormatError, match="line 2"):
            data.load_beir_corpus(path)

    def test_duplicate_id_names_id(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        write_lines(path, [
            json.dumps({"_id": "d1", "text": "x"}),
            json.dumps({"_id": "d1", "text": "y"}),
        ])
        with pytest.raises(data.DataFormatError, match="duplicate id d1"):
            data.load_beir_corpus(path)

    def test_latent_topic_round_trip(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        write_lines(path, [
            json.dumps({"_id": "d1", "text": "x", "latent_topic": [0.6, 0.8]}),
        ])
        corpus = data.load_beir_corpus(path)
        np.testing.assert_allclose(corpus.get("d1").latent_topic, [0.6, 0.8])

    @pytest.mark.skipif(
        "RGPL_SCIFACT_CORPUS" not in os.environ,
        reason="set RGPL_SCIFACT_CORPUS to a downloaded SciFact corpus.jsonl",
    )
    def test_scifact_corpus_parses(self):
        path = os.environ["RGPL_SCIFACT_CORPUS"]
        with open(path, encoding="utf-8") as fh:
            expected = sum(1 for line in fh if line.strip())
        corpus = data.load_beir_corpus(path)
        assert len(corpus) == expected


class TestLoadQrels:
    def test_single_row(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        write_lines(path, ["q1\t0\td1\t2"])
        qrels = data.load_qrels(path)
        assert qrels.grades_for("q1") == {"d1": 2}

    def test_empty_file(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("", encoding="utf-8")
        assert len(data.load_qrels(path)) == 0

    def test_duplicate_pair_last_wins_with_warning(self, tmp_path, caplog):
        path = tmp_path / "qrels.tsv"
        write_lines(path, ["q1\t0\td1\t1", "q1\t0\td1\t0"])
        with caplog.at_level("WARNING", logger="rgpl.data"):
            qrels = data.load_qrels(path)
        assert qrels.grade("q1", "d1") == 0
        assert sum("duplicate qrels entry" in rec.message for rec in caplog.records) == 1

    def test_non_integer_grade_names_line(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        write_lines(path, ["q1\t0\td1\t2", "q1\t0\td2\tx"])
        with pytest.raises(data.DataFormatError, match="line 2"):
            data.load_qrels(path)

    def test_round_trip(self, tmp_path):
        qrels = data.Qrels({"q1": {"d1": 2, "d2": 1}, "q2": {"d3": 1}})
        path = tmp_path / "qrels.tsv"
        qrels.save(path)
        loaded = data.load_qrels(path)
        assert loaded.grades_for("q1") == {"d1": 2, "d2": 1}
        assert loaded.grades_for("q2") == {"d3": 1}


class TestTokenize:
    def test_empty_text(self, tiny_vocab):
        seq = data.tokenize("", tiny_vocab)
        assert len(seq) == 2
        assert seq.ids[0] == tiny_vocab.cls_id
        assert seq.ids[-1] == tiny_vocab.sep_id
        assert len(seq.content_ids()) == 0

    def test_truncation_to_350_with_final_sep(self, tiny_vocab):
        text = " ".join(["alpha"] * 400)
        seq = data.tokenize(text, tiny_vocab)
        assert len(seq) == data.MAX_SEQ_LEN == 350
        assert seq.ids[0] == tiny_vocab.cls_id
        assert seq.ids[-1] == tiny_vocab.sep_id

    def test_oov_maps_to_unk(self, tiny_vocab):
        seq = data.tokenize("Zyzzyva runs", tiny_vocab)
        assert seq.ids.tolist() == [
            tiny_vocab.cls_id,
            tiny_vocab.unk_id,
            tiny_vocab.id_of("runs"),
            tiny_vocab.sep_id,
        ]

    def test_lowercasing_and_punctuation_split(self, tiny_vocab):
        seq = data.tokenize("Alpha, BETA! gamma?delta", tiny_vocab)
        expected = [tiny_vocab.id_of(w) for w in ("alpha", "beta", "gamma", "delta")]
        assert seq.content_ids().tolist() == expected

    def test_idempotent_on_detokenized_output(self, small_corpus):
        corpus, _ = small_corpus
        for doc_id in corpus.doc_ids()[:10]:
            seq = corpus.tokens(doc_id)
            text = data.detokenize(seq, corpus.vocab)
            again = data.tokenize(text, corpus.vocab)
            assert again.ids.tolist() == seq.ids.tolist()


class TestSyntheticCorpus:
    def test_same_seed_identical(self):
        spec = data.SyntheticDomainSpec(64, 30, 3, (8, 16), 0.8, seed=5)
        corpus_a, _ = data.generate_synthetic_corpus(spec)
        corpus_b, _ = data.generate_synthetic_corpus(spec)
        for a, b in zip(corpus_a, corpus_b):
            assert a.id == b.id and a.text == b.text
            np.testing.assert_array_equal(a.latent_topic, b.latent_topic)

    def test_single_topic_shares_latent(self):
        spec = data.SyntheticDomainSpec(32, 20, 1, (8, 16), 0.8, seed=5)
        corpus, _ = data.generate_synthetic_corpus(spec)
        for doc in corpus:
            np.testing.assert_allclose(doc.latent_topic, [1.0])

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            data.SyntheticDomainSpec(4, 10, 8, (8, 16), 0.8, seed=0).validate()
        with pytest.raises(ValueError):
            data.SyntheticDomainSpec(32, 10, 2, (1, 16), 0.8, seed=0).validate()
        with pytest.raises(ValueError):
            data.SyntheticDomainSpec(32, 10, 2, (8, 360), 0.8, seed=0).validate()
        with pytest.raises(ValueError):
            data.SyntheticDomainSpec(32, 10, 2, (8, 16), 0.0, seed=0).validate()

    def test_within_topic_overlap_exceeds_cross_topic(self):
        # oracle: token histograms computed directly on the generated corpus
        spec = data.SyntheticDomainSpec(64, 120, 2, (16, 32), 0.9, seed=9)
        corpus, _ = data.generate_synthetic_corpus(spec)
        vocab_size = len(corpus.vocab)
        hists, topics = [], []
        for doc in corpus:
            ids = corpus.content_ids(doc.id)
            hist = np.bincount(ids, minlength=vocab_size).astype(float)
            hists.append(hist / hist.sum())
            topics.append(int(np.argmax(doc.latent_topic)))
        hists = np.array(hists)
        topics = np.array(topics)
        within, cross = [], []
        for i in range(len(hists)):
            for j in range(i + 1, len(hists)):
                overlap = np.minimum(hists[i], hists[j]).sum()
                (within if topics[i] == topics[j] else cross).append(overlap)
        assert np.mean(within) > np.mean(cross)


class TestPseudoQueries:
    def test_no_noise_tokens_all_from_source(self, small_corpus):
        corpus, _ = small_corpus
        queries = data.generate_pseudo_queries(corpus, 2, noise=0.0, seed=3)
        for query in queries:
            source_words = set(corpus.get(query.source_doc_id).text.split())
            assert set(query.text.split()) <= source_words

    def test_query_count_arithmetic(self, small_corpus):
        corpus, _ = small_corpus
        sub = corpus.doc_ids()[:10]
        queries = data.generate_pseudo_queries(corpus, 3, noise=0.1, seed=3, doc_ids=sub)
        assert len(queries) == 30

    def test_source_linkage(self, small_corpus):
        corpus, _ = small_corpus
        queries = data.generate_pseudo_queries(corpus, 1, noise=0.3, seed=3)
        for query in queries:
            assert query.source_doc_id in corpus

    def test_determinism(self, small_corpus):
        corpus, _ = small_corpus
        a = data.generate_pseudo_queries(corpus, 1, noise=0.5, seed=4)
        b = data.generate_pseudo_queries(corpus, 1, noise=0.5, seed=4)
        assert [(q.id, q.text) for q in a] == [(q.id, q.text) for q in b]

    def test_empty_corpus_rejected(self, tiny_vocab):
        corpus = data.Corpus([], tiny_vocab)
        with pytest.raises(ValueError):
            data.generate_pseudo_queries(corpus, 1, noise=0.0, seed=0)

    def test_bm25_retrieves_source_at_rank_one(self):
        # oracle: the in-repo BM25 over a 1k-doc synthetic corpus
        spec = data.SyntheticDomainSpec(256, 1000, 4, (16, 48), 0.9, seed=21)
        corpus, _ = data.generate_synthetic_corpus(spec)
        queries = data.generate_pseudo_queries(corpus, 1, noise=0.1, seed=22)
        index = build_bm25(corpus, corpus.vocab)
        hits_at_one = 0
        for query in queries:
            top = bm25_search(index, queries.tokens(query.id), k=1)
            hits_at_one += top[0][0] == query.source_doc_id
        assert hits_at_one / len(queries) >= 0.8
