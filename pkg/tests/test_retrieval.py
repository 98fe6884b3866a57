"""Search vs full-sort oracle, metric oracle, index persistence, run files."""

import numpy as np
import pytest

from rom_lab.corpus import CLS, SEP, Judgment, TokenSequence
from rom_lab.errors import EmptyInputError, InvalidInputError
from rom_lab.model import ModelConfig, init_parameters
from rom_lab.retrieval import (
    EmbeddingIndex,
    RetrievalRun,
    encode_corpus,
    evaluate_run,
    load_index,
    load_run,
    save_index,
    save_metrics,
    save_run,
    search_topk,
)


def make_seq(seq_id, content_ids):
    n = len(content_ids)
    return TokenSequence(
        seq_id,
        [CLS] + list(content_ids) + [SEP],
        ["[CLS]"] + [f"w{i}" for i in content_ids] + ["[SEP]"],
        [True] + [False] * n + [True],
        [False] * (n + 2),
    )


def oracle_topk(ids, vectors, query, k):
    """Naive reference: python-float dot products, full sort, same tie rule."""
    scored = []
    for pid, row in zip(ids, vectors):
        s = 0.0
        for a, b in zip(row.tolist(), query.tolist()):
            s += a * b
        scored.append((pid, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def oracle_metrics(results, judgments):
    """Loop-and-count reference implementation of MRR@10 and R@k."""
    rel = {}
    for j in judgments:
        rel.setdefault(j.qid, set()).add(j.pid)
    qids = [q for q in results if q in rel]
    out = {"MRR@10": 0.0, "R@5": 0.0, "R@20": 0.0, "R@100": 0.0, "R@1000": 0.0}
    for qid in qids:
        pids = [pid for pid, _ in results[qid]]
        rr = 0.0
        for i in range(min(10, len(pids))):
            if pids[i] in rel[qid]:
                rr = 1.0 / (i + 1)
                break
        out["MRR@10"] += rr
        for k in (5, 20, 100, 1000):
            hits = sum(1 for pid in pids[:k] if pid in rel[qid])
            out[f"R@{k}"] += hits / len(rel[qid])
    return {name: v / len(qids) for name, v in out.items()}


class TestSearch:
    def test_hand_ranked_pair(self):
        index = EmbeddingIndex(ids=("p1", "p2"), vectors=np.array([[1.0, 0.0], [0.0, 1.0]]))
        ranked = search_topk(index, np.array([1.0, 0.1]), k=2)
        assert ranked == [("p1", pytest.approx(1.0)), ("p2", pytest.approx(0.1))]

    def test_self_similarity_wins(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(50, 8))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        index = EmbeddingIndex(ids=tuple(f"p{i:02d}" for i in range(50)), vectors=vectors)
        top = search_topk(index, vectors[17], k=1)
        assert top[0][0] == "p17"

    def test_identical_rows_ordered_by_id(self):
        vectors = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        index = EmbeddingIndex(ids=("pz", "pa", "pm"), vectors=vectors)
        ranked = search_topk(index, np.array([1.0, 0.0]), k=3)
        assert [pid for pid, _ in ranked] == ["pa", "pz", "pm"]

    def test_k_beyond_corpus_returns_full_ranking(self):
        index = EmbeddingIndex(ids=("a", "b"), vectors=np.eye(2))
        assert len(search_topk(index, np.array([1.0, 0.5]), k=99)) == 2

    def test_dimension_mismatch_rejected(self):
        index = EmbeddingIndex(ids=("a",), vectors=np.ones((1, 4)))
        with pytest.raises(InvalidInputError):
            search_topk(index, np.ones(3), k=1)

    def test_matches_full_sort_oracle_on_random_instances(self):
        # integer-valued vectors keep oracle arithmetic exact and force ties
        rng = np.random.default_rng(42)
        for trial in range(200):
            n = int(rng.integers(1, 60))
            d = int(rng.integers(1, 16))
            vectors = rng.integers(-3, 4, size=(n, d)).astype(np.float64)
            query = rng.integers(-3, 4, size=d).astype(np.float64)
            ids = tuple(f"p{i:03d}" for i in rng.permutation(n))
            k = int(rng.integers(1, n + 5))
            index = EmbeddingIndex(ids=ids, vectors=vectors)
            got = search_topk(index, query, k)
            want = oracle_topk(ids, vectors, query, k)
            assert got == want

    def test_cosine_flag(self):
        vectors = np.array([[10.0, 0.0], [0.0, 1.0]])
        index = EmbeddingIndex(ids=("big", "unit"), vectors=vectors)
        by_dot = search_topk(index, np.array([0.1, 1.0]), k=1, score="dot")
        by_cos = search_topk(index, np.array([0.1, 1.0]), k=1, score="cosine")
        assert by_dot[0][0] == "big"
        assert by_cos[0][0] == "unit"


class TestEncodeCorpus:
    CONFIG = ModelConfig(layers=1, heads=2, hidden=16, ffn=32, vocab_size=32, max_seq_len=12)

    def test_shape_and_order(self):
        params = init_parameters(self.CONFIG, seed=0)
        seqs = [make_seq(f"p{i}", [5 + i, 6 + i]) for i in range(10)]
        index = encode_corpus(params, self.CONFIG, seqs)
        assert index.vectors.shape == (10, 16)
        assert index.ids == tuple(f"p{i}" for i in range(10))

    def test_duplicate_texts_identical_rows(self):
        params = init_parameters(self.CONFIG, seed=1)
        seqs = [make_seq("a", [7, 8, 9]), make_seq("b", [7, 8, 9])]
        index = encode_corpus(params, self.CONFIG, seqs)
        assert np.array_equal(index.vectors[0], index.vectors[1])

    def test_parallel_matches_serial_bitwise(self):
        params = init_parameters(self.CONFIG, seed=2)
        rng = np.random.default_rng(0)
        seqs = [
            make_seq(f"p{i}", rng.integers(5, 32, size=int(rng.integers(1, 9))).tolist())
            for i in range(24)
        ]
        serial = encode_corpus(params, self.CONFIG, seqs, workers=1)
        parallel = encode_corpus(params, self.CONFIG, seqs, workers=4)
        assert np.array_equal(serial.vectors, parallel.vectors)
        assert serial.ids == parallel.ids

    def test_empty_corpus_rejected(self):
        params = init_parameters(self.CONFIG, seed=0)
        with pytest.raises(EmptyInputError):
            encode_corpus(params, self.CONFIG, [])


class TestEvaluate:
    def test_first_relevant_at_rank_three(self):
        run = RetrievalRun({"q1": [("a", 3.0), ("b", 2.0), ("c", 1.0)]})
        metrics = evaluate_run(run, [Judgment("q1", "c", 1)])
        assert metrics["MRR@10"] == pytest.approx(1 / 3)

    def test_relevant_at_rank_eleven_scores_zero(self):
        ranked = [(f"p{i:02d}", float(20 - i)) for i in range(11)]
        run = RetrievalRun({"q1": ranked})
        metrics = evaluate_run(run, [Judgment("q1", "p10", 1)])
        assert metrics["MRR@10"] == 0.0

    def test_hand_computed_mixture(self):
        run = RetrievalRun(
            {
                "q1": [("r", 5.0), ("x", 4.0), ("y", 3.0), ("z", 2.0)],
                "q2": [("x", 5.0), ("y", 4.0), ("z", 3.0), ("r", 2.0)],
            }
        )
        judged = [Judgment("q1", "r", 1), Judgment("q2", "r", 1)]
        metrics = evaluate_run(run, judged)
        assert metrics["MRR@10"] == pytest.approx(0.625)

    def test_recall_with_partial_coverage(self):
        ranked = [(f"p{i:02d}", float(30 - i)) for i in range(25)]
        run = RetrievalRun({"q1": ranked})
        judged = [Judgment("q1", "p03", 1), Judgment("q1", "zz", 1)]
        metrics = evaluate_run(run, judged)
        assert metrics["R@20"] == pytest.approx(0.5)

    def test_unjudged_query_skipped_with_warning(self):
        run = RetrievalRun({"q1": [("a", 1.0)], "q9": [("a", 1.0)]})
        with pytest.warns(UserWarning, match="q9"):
            metrics = evaluate_run(run, [Judgment("q1", "a", 1)])
        assert metrics["MRR@10"] == 1.0

    def test_empty_judgments_rejected(self):
        run = RetrievalRun({"q1": [("a", 1.0)]})
        with pytest.raises(EmptyInputError):
            evaluate_run(run, [])

    def test_matches_independent_scorer_on_random_runs(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            n_q = int(rng.integers(1, 8))
            n_p = int(rng.integers(5, 40))
            pids = [f"p{i:03d}" for i in range(n_p)]
            results = {}
            judgments = []
            for qi in range(n_q):
                qid = f"q{qi}"
                depth = int(rng.integers(1, n_p + 1))
                order = rng.permutation(n_p)[:depth]
                results[qid] = [(pids[j], float(depth - r)) for r, j in enumerate(order)]
                n_rel = int(rng.integers(1, 4))
                for pid in rng.choice(pids, size=n_rel, replace=False):
                    judgments.append(Judgment(qid, str(pid), 1))
            run = RetrievalRun(results)
            got = evaluate_run(run, judgments)
            want = oracle_metrics(results, judgments)
            for name in want:
                assert got[name] == pytest.approx(want[name], abs=1e-9)

    def test_recall_monotone_in_cutoff(self):
        rng = np.random.default_rng(9)
        ranked = [(f"p{i:04d}", float(2000 - i)) for i in range(1200)]
        rel_ids = rng.choice([pid for pid, _ in ranked], size=20, replace=False)
        run = RetrievalRun({"q": ranked})
        metrics = evaluate_run(run, [Judgment("q", str(p), 1) for p in rel_ids])
        assert metrics["R@5"] <= metrics["R@20"] <= metrics["R@100"] <= metrics["R@1000"]


class TestRunFile:
    def test_round_trip(self, tmp_path):
        run = RetrievalRun({"q2": [("a", 2.0), ("b", 1.0)], "q1": [("c", 9.0)]}, tag="t1")
        path = tmp_path / "run.trec"
        save_run(run, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "q1 Q0 c 1 9.000000 t1"
        assert lines[1] == "q2 Q0 a 1 2.000000 t1"
        loaded = load_run(path)
        assert loaded.results["q2"] == [("a", 2.0), ("b", 1.0)]

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "run.trec"
        path.write_text("q1 c 1 9.0\n")
        with pytest.raises(InvalidInputError):
            load_run(path)

    def test_metrics_file_has_four_decimals(self, tmp_path):
        path = tmp_path / "metrics.json"
        save_metrics({"MRR@10": 1 / 3}, path)
        assert '"MRR@10": 0.3333' in path.read_text()


class TestIndexPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        index = EmbeddingIndex(
            ids=("a", "b", "c"), vectors=rng.normal(size=(3, 8)).astype(np.float32)
        )
        save_index(index, tmp_path / "idx")
        loaded = load_index(tmp_path / "idx")
        assert loaded.ids == index.ids
        assert np.array_equal(loaded.vectors, index.vectors)

    def test_reruns_byte_identical(self, tmp_path):
        rng = np.random.default_rng(2)
        index = EmbeddingIndex(
            ids=("x", "y"), vectors=rng.normal(size=(2, 4)).astype(np.float32)
        )
        save_index(index, tmp_path / "one")
        save_index(index, tmp_path / "two")
        for name in ("meta.json", "vectors.bin"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_truncated_blob_rejected(self, tmp_path):
        index = EmbeddingIndex(ids=("a",), vectors=np.ones((1, 4), dtype=np.float32))
        save_index(index, tmp_path / "idx")
        blob = tmp_path / "idx" / "vectors.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        from rom_lab.errors import CorruptCheckpointError

        with pytest.raises(CorruptCheckpointError):
            load_index(tmp_path / "idx")
