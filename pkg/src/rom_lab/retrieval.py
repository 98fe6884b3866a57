"""Corpus encoding, exact top-k dense search, MRR/Recall scoring, run files."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Judgment, TokenSequence
from .errors import (
    CorruptCheckpointError,
    EmptyInputError,
    InvalidConfigError,
    InvalidInputError,
)
from .model import ModelConfig, ModelParameters, encode_text

RECALL_CUTOFFS = (5, 20, 100, 1000)
MRR_CUTOFF = 10
_VECTORS_NAME = "vectors.bin"
_META_NAME = "meta.json"


@dataclass(frozen=True)
class EmbeddingIndex:
    """Dense passage vectors with an aligned id list."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # (count, d)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise InvalidInputError("index vectors must be a 2-d matrix")
        if len(self.ids) != self.vectors.shape[0]:
            raise InvalidInputError(
                f"{len(self.ids)} ids vs {self.vectors.shape[0]} vector rows"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("index contains non-finite entries")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class RetrievalRun:
    """Per-query ranked result lists, scores non-increasing."""

    results: dict[str, list[tuple[str, float]]]
    tag: str = "rom-lab"

    def __post_init__(self):
        for qid, ranked in self.results.items():
            pids = [pid for pid, _ in ranked]
            if len(set(pids)) != len(pids):
                raise InvalidInputError(f"query {qid!r}: duplicate passage in ranking")
            scores = [s for _, s in ranked]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise InvalidInputError(f"query {qid!r}: scores increase down the ranking")


def encode_corpus(
    params: ModelParameters,
    config: ModelConfig,
    sequences: Sequence[TokenSequence],
    workers: int = 1,
) -> EmbeddingIndex:
    """One [CLS] vector per sequence, in input order.

    Each sequence is encoded independently (batch of one), so the result is
    bitwise identical no matter how many workers run.
    """
    if len(sequences) == 0:
        raise EmptyInputError("no sequences to encode")

    def one(seq: TokenSequence) -> np.ndarray:
        return encode_text(params, config, seq)

    if workers <= 1:
        rows = [one(s) for s in sequences]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, sequences))
    return EmbeddingIndex(
        ids=tuple(s.seq_id for s in sequences), vectors=np.stack(rows, axis=0)
    )


def search_topk(
    index: EmbeddingIndex,
    query_vector: np.ndarray,
    k: int,
    score: str = "dot",
) -> list[tuple[str, float]]:
    """Exhaustive exact top-k by dot product (or cosine), ties by smaller id."""
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    q = np.asarray(query_vector)
    if q.shape != (index.dim,):
        raise InvalidInputError(f"query dimension {q.shape} vs index dim {index.dim}")
    if score == "dot":
        scores = index.vectors @ q
    elif score == "cosine":
        norms = np.linalg.norm(index.vectors, axis=1) * np.linalg.norm(q)
        scores = (index.vectors @ q) / np.where(norms == 0, 1.0, norms)
    else:
        raise InvalidConfigError(f"unknown score function {score!r}")
    order = sorted(range(len(index.ids)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


def evaluate_run(run: RetrievalRun, judgments: Sequence[Judgment]) -> dict[str, float]:
    """MRR@10 and Recall at the standard cutoffs, averaged over judged queries."""
    if len(judgments) == 0:
        raise EmptyInputError("no judgments")
    relevant: dict[str, set[str]] = {}
    for j in judgments:
        relevant.setdefault(j.qid, set()).add(j.pid)
    scored = []
    for qid, ranked in run.results.items():
        if qid not in relevant:
            warnings.warn(f"query {qid!r} has no judgments; skipped", stacklevel=2)
            continue
        scored.append((qid, [pid for pid, _ in ranked], relevant[qid]))
    if not scored:
        raise EmptyInputError("no judged query appears in the run")

    mrr = 0.0
    recalls = {k: 0.0 for k in RECALL_CUTOFFS}
    for qid, pids, rel in scored:
        for rank, pid in enumerate(pids[:MRR_CUTOFF], start=1):
            if pid in rel:
                mrr += 1.0 / rank
                break
        for k in RECALL_CUTOFFS:
            recalls[k] += len(rel.intersection(pids[:k])) / len(rel)
    n = len(scored)
    metrics = {f"MRR@{MRR_CUTOFF}": mrr / n}
    for k in RECALL_CUTOFFS:
        metrics[f"R@{k}"] = recalls[k] / n
    return metrics


def save_run(run: RetrievalRun, path: str | Path) -> None:
    """TREC format: qid Q0 pid rank score tag; queries in sorted order."""
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(run.results):
            for rank, (pid, score) in enumerate(run.results[qid], start=1):
                f.write(f"{qid} Q0 {pid} {rank} {score:.6f} {run.tag}\n")


def load_run(path: str | Path) -> RetrievalRun:
    results: dict[str, list[tuple[str, float]]] = {}
    tag = "rom-lab"
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) != 6 or parts[1] != "Q0":
                raise InvalidInputError(f"{path}:{lineno}: not a TREC run line")
            qid, _, pid, rank, score, tag = parts
            results.setdefault(qid, []).append((pid, float(score)))
    return RetrievalRun(results=results, tag=tag)


def save_metrics(metrics: Mapping[str, float], path: str | Path) -> None:
    rounded = {name: round(float(v), 4) for name, v in metrics.items()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rounded, f, indent=2, sort_keys=True)
        f.write("\n")


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    """Directory with meta.json + raw little-endian f32 rows.

    A plain blob keeps reruns byte-identical; archive formats embed
    timestamps.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = np.ascontiguousarray(index.vectors, dtype="<f4").tobytes()
    meta = {
        "count": len(index.ids),
        "dim": index.dim,
        "dtype": "f32",
        "ids": list(index.ids),
    }
    with open(path / _META_NAME, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    (path / _VECTORS_NAME).write_bytes(blob)


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    meta_path = path / _META_NAME
    if not meta_path.exists():
        raise FileNotFoundError(f"no index at {path}")
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    for key in ("count", "dim", "dtype", "ids"):
        if key not in meta:
            raise CorruptCheckpointError(f"index meta missing {key!r}")
    if meta["dtype"] != "f32":
        raise CorruptCheckpointError(f"unsupported index dtype {meta['dtype']!r}")
    if len(meta["ids"]) != meta["count"]:
        raise CorruptCheckpointError("index id list does not match count")
    blob = (path / _VECTORS_NAME).read_bytes()
    expected = meta["count"] * meta["dim"] * 4
    if len(blob) != expected:
        raise CorruptCheckpointError(
            f"index blob holds {len(blob)} bytes, expected {expected}"
        )
    vectors = np.frombuffer(blob, dtype="<f4").reshape(meta["count"], meta["dim"])
    return EmbeddingIndex(ids=tuple(meta["ids"]), vectors=vectors.astype(np.float32))
