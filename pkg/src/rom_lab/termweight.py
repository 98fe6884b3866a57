"""Per-token importance distributions and their rescaling for masking.

Three estimators produce the same record shape: a contrastive distribution
computed from averaged [CLS] attention, a tf-idf fallback needing nothing
but corpus statistics, and straight import of externally supplied weights.
Weights live over the non-special positions of a sequence and sum to 1.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .corpus import TokenSequence, word_tokens
from .errors import EmptyInputError, InvalidInputError, SchemaError

ESTIMATORS = ("contrastive", "imported", "tfidf")

ATTENTION_CLAMP = 1e-12
SUM_TOL = 1e-6


@dataclass(frozen=True)
class AttentionDumpRecord:
    """Averaged last-layer [CLS] attention over the non-special tokens."""

    seq_id: str
    tokens: list[str]
    cls_attention: list[float]


@dataclass(frozen=True)
class TermWeightRecord:
    """Importance distribution over a sequence's non-special positions."""

    seq_id: str
    weights: tuple[float, ...]
    estimator: str

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.estimator not in ESTIMATORS:
            raise InvalidInputError(f"unknown estimator {self.estimator!r}")
        if any(w < 0 for w in self.weights):
            raise InvalidInputError(f"record {self.seq_id!r}: negative weight")
        if self.weights and abs(sum(self.weights) - 1.0) > SUM_TOL:
            raise InvalidInputError(
                f"record {self.seq_id!r}: weights sum to {sum(self.weights)!r}, expected 1"
            )


def validate_attention_record(rec: AttentionDumpRecord) -> None:
    """Raise unless the record satisfies the dump invariants."""
    if len(rec.tokens) == 0 or len(rec.cls_attention) == 0:
        raise EmptyInputError(f"record {rec.seq_id!r}: empty token/attention list")
    if len(rec.tokens) != len(rec.cls_attention):
        raise SchemaError(
            f"record {rec.seq_id!r}: {len(rec.tokens)} tokens vs "
            f"{len(rec.cls_attention)} attention values"
        )
    if any(a < 0 for a in rec.cls_attention):
        raise InvalidInputError(f"record {rec.seq_id!r}: negative attention weight")
    total = sum(rec.cls_attention)
    if abs(total - 1.0) > 1e-4:
        raise InvalidInputError(f"record {rec.seq_id!r}: attention sums to {total!r}, expected 1")


def contrastive_term_distribution(attn: AttentionDumpRecord) -> TermWeightRecord:
    """Contrast attention against the uniform reference.

    p_w = softmax_i(a_i * ln(n * a_i)) with a_i clamped to >= 1e-12 before
    the log. Tokens holding more than the uniform 1/n share of attention
    get positive contrast and therefore above-uniform weight; a perfectly
    uniform attention row degenerates to the uniform distribution.
    """
    validate_attention_record(attn)
    a = np.maximum(np.asarray(attn.cls_attention, dtype=np.float64), ATTENTION_CLAMP)
    n = a.shape[0]
    scores = a * np.log(n * a)
    p = _softmax(scores)
    return TermWeightRecord(seq_id=attn.seq_id, weights=p.tolist(), estimator="contrastive")


def document_frequencies(corpus: Iterable[str]) -> tuple[dict[str, int], int]:
    """Count, per word token, the number of corpus documents containing it."""
    df: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        df.update(set(word_tokens(text)))
    return dict(df), n_docs


def tfidf_term_distribution(
    seq: TokenSequence, doc_freq: Mapping[str, int], n_docs: int
) -> TermWeightRecord:
    """Corpus-statistical fallback: tf * smoothed idf, normalized to sum 1.

    Unknown tokens are treated as df=0; an all-zero raw vector (every token
    in every document) falls back to the uniform distribution.
    """
    positions = seq.maskable_positions()
    if not positions:
        raise EmptyInputError(f"sequence {seq.seq_id!r} has no maskable tokens")
    toks = [seq.surface[i] for i in positions]
    tf = Counter(toks)
    raw = np.array(
        [tf[t] * math.log((n_docs + 1) / (doc_freq.get(t, 0) + 1)) for t in toks],
        dtype=np.float64,
    )
    total = raw.sum()
    if total <= 0.0:
        weights = np.full(len(toks), 1.0 / len(toks))
    else:
        weights = raw / total
    return TermWeightRecord(seq_id=seq.seq_id, weights=weights.tolist(), estimator="tfidf")


def renormalize_imported(seq_id: str, weights: list[float]) -> TermWeightRecord:
    """Turn raw imported weights into a distribution (all-zero -> uniform)."""
    if len(weights) == 0:
        raise EmptyInputError(f"record {seq_id!r}: empty weight list")
    if any(w < 0 for w in weights):
        raise InvalidInputError(f"record {seq_id!r}: negative weight")
    total = float(sum(weights))
    if total <= 0.0:
        norm = [1.0 / len(weights)] * len(weights)
    else:
        norm = [w / total for w in weights]
    return TermWeightRecord(seq_id=seq_id, weights=norm, estimator="imported")


def import_term_weights(
    path: str | Path, expected_lengths: Mapping[str, int] | None = None
) -> list[TermWeightRecord]:
    """Read a term-weights JSONL file, renormalizing each record to sum 1.

    When expected_lengths supplies the non-special token count of the
    referenced sequences, any length mismatch is a SchemaError.
    """
    records: list[TermWeightRecord] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: not valid JSON: {e}") from e
            if not isinstance(obj, dict) or "id" not in obj or "weights" not in obj:
                raise SchemaError(f"{path}:{lineno}: expected object with 'id' and 'weights'")
            seq_id = str(obj["id"])
            weights = obj["weights"]
            if not isinstance(weights, list) or not all(
                isinstance(w, (int, float)) for w in weights
            ):
                raise SchemaError(f"{path}:{lineno}: 'weights' must be a list of numbers")
            if expected_lengths is not None:
                expected = expected_lengths.get(seq_id)
                if expected is not None and expected != len(weights):
                    raise SchemaError(
                        f"{path}:{lineno}: record {seq_id!r} has {len(weights)} weights, "
                        f"sequence has {expected} maskable tokens"
                    )
            records.append(renormalize_imported(seq_id, [float(w) for w in weights]))
    return records


def minmax_rescale(record: TermWeightRecord) -> np.ndarray:
    """Rescale a weight distribution to [0, 1] per sequence.

    w' = (w - min) / (max - min). A degenerate all-equal record rescales
    to all zeros, which makes weight-biased masking coincide exactly with
    random masking: no information, no bias.
    """
    w = np.asarray(record.weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.zeros_like(w)
    return (w - lo) / (hi - lo)


def top_weight_tokens(
    seq: TokenSequence, record: TermWeightRecord, k: int
) -> list[tuple[str, float]]:
    """The k highest-weight non-special tokens of a sequence.

    Ties break toward the earlier position; duplicate surface forms are
    reported once at their maximum weight. k beyond the number of distinct
    tokens returns what exists.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    positions = seq.maskable_positions()
    if len(positions) != len(record.weights):
        raise SchemaError(
            f"sequence {seq.seq_id!r} has {len(positions)} maskable tokens, "
            f"record has {len(record.weights)} weights"
        )
    best: dict[str, tuple[float, int]] = {}
    for pos, w in zip(positions, record.weights):
        tok = seq.surface[pos]
        if tok not in best or w > best[tok][0]:
            best[tok] = (w, pos)
    ranked = sorted(best.items(), key=lambda item: (-item[1][0], item[1][1]))
    return [(tok, w) for tok, (w, _) in ranked[:k]]


def save_term_weights(records: Iterable[TermWeightRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(
                json.dumps(
                    {"id": rec.seq_id, "weights": rec.weights, "estimator": rec.estimator}
                )
                + "\n"
            )


def load_term_weights(path: str | Path) -> list[TermWeightRecord]:
    records: list[TermWeightRecord] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: not valid JSON: {e}") from e
            try:
                records.append(
                    TermWeightRecord(
                        seq_id=str(obj["id"]),
                        weights=[float(w) for w in obj["weights"]],
                        estimator=str(obj.get("estimator", "imported")),
                    )
                )
            except (KeyError, TypeError) as e:
                raise SchemaError(f"{path}:{lineno}: malformed record: {e}") from e
    return records


def load_attention_dump(path: str | Path) -> list[AttentionDumpRecord]:
    """Read and validate an attention dump JSONL file."""
    records: list[AttentionDumpRecord] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: not valid JSON: {e}") from e
            if (
                not isinstance(obj, dict)
                or "id" not in obj
                or "tokens" not in obj
                or "cls_attention" not in obj
            ):
                raise SchemaError(
                    f"{path}:{lineno}: expected object with 'id', 'tokens', 'cls_attention'"
                )
            rec = AttentionDumpRecord(
                seq_id=str(obj["id"]),
                tokens=[str(t) for t in obj["tokens"]],
                cls_attention=[float(a) for a in obj["cls_attention"]],
            )
            validate_attention_record(rec)
            records.append(rec)
    return records


def merge_wordpieces(rec: AttentionDumpRecord) -> AttentionDumpRecord:
    """Collapse subword pieces into whole words by summing attention mass.

    External encoders dump their own tokens; a "##"-prefixed piece continues
    the preceding word. Summation preserves total mass, and the result is
    renormalized so downstream estimators always see a distribution.
    """
    validate_attention_record(rec)
    words: list[str] = []
    mass: list[float] = []
    for token, a in zip(rec.tokens, rec.cls_attention):
        if token.startswith("##") and words:
            words[-1] += token[2:]
            mass[-1] += a
        else:
            words.append(token)
            mass.append(a)
    total = sum(mass)
    if total <= 0:
        raise InvalidInputError(f"record {rec.seq_id!r}: no attention mass to merge")
    return AttentionDumpRecord(
        seq_id=rec.seq_id, tokens=words, cls_attention=[a / total for a in mass]
    )


def validate_attention_dump_file(path: str | Path) -> list[str]:
    """Collect every schema/invariant violation in a dump file.

    Returns an empty list when the file is fully valid; used to vet
    externally produced dumps before they feed the weight estimators.
    """
    problems: list[str] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                problems.append(f"line {lineno}: not valid JSON: {e}")
                continue
            if (
                not isinstance(obj, dict)
                or "id" not in obj
                or "tokens" not in obj
                or "cls_attention" not in obj
            ):
                problems.append(f"line {lineno}: missing 'id'/'tokens'/'cls_attention'")
                continue
            try:
                rec = AttentionDumpRecord(
                    seq_id=str(obj["id"]),
                    tokens=[str(t) for t in obj["tokens"]],
                    cls_attention=[float(a) for a in obj["cls_attention"]],
                )
                validate_attention_record(rec)
            except Exception as e:  # noqa: BLE001 - report, don't raise
                problems.append(f"line {lineno}: {e}")
    return problems


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max()
    e = np.exp(z)
    return e / e.sum()
