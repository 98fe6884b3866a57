"""Corpus ingestion: vocabulary, word-level tokenization, stop/punct flagging.

The tokenizer is deliberately word-level (lowercase, punctuation split into
standalone tokens): subword modeling is orthogonal to the masking mechanism
this lab studies, and whole words keep the masking statistics interpretable.
"""

from __future__ import annotations

import json
import unicodedata
from collections import Counter
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import EmptyInputError, InvalidConfigError, SchemaError

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

STOPWORDS_ASSET = "stopwords_en_v1.txt"


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token<->id map with the five special tokens at fixed ids."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def __post_init__(self):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(tok) != i:
                raise InvalidConfigError(f"special token {tok} must map to id {i}")
        if self.size < 6:
            raise InvalidConfigError(f"vocabulary size {self.size} < 6")
        if len(self.token_to_id) != len(self.id_to_token):
            raise InvalidConfigError("token_to_id and id_to_token disagree in size")


@dataclass(frozen=True)
class TokenSequence:
    """A tokenized passage or query: ids plus per-position flags."""

    seq_id: str
    token_ids: list[int]
    surface: list[str]
    is_special: list[bool]
    is_stop_or_punct: list[bool]

    def __len__(self) -> int:
        return len(self.token_ids)

    def maskable_positions(self) -> list[int]:
        return [i for i, sp in enumerate(self.is_special) if not sp]


@dataclass(frozen=True)
class PassageRecord:
    pid: str
    text: str


@dataclass(frozen=True)
class QueryRecord:
    qid: str
    text: str


@dataclass(frozen=True)
class Judgment:
    qid: str
    pid: str
    relevance: int


def _is_punct_char(ch: str) -> bool:
    # ASCII punctuation ranges plus Unicode P* categories; the ranges
    # pull in symbol characters like "$" and "`" as punctuation too.
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def is_punct_token(token: str) -> bool:
    """True when every character of the token is punctuation."""
    return len(token) > 0 and all(_is_punct_char(c) for c in token)


def word_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace, peeling punctuation into
    standalone single-character tokens."""
    out: list[str] = []
    for chunk in text.lower().split():
        buf = []
        for ch in chunk:
            if _is_punct_char(ch):
                if buf:
                    out.append("".join(buf))
                    buf = []
                out.append(ch)
            else:
                buf.append(ch)
        if buf:
            out.append("".join(buf))
    return out


def build_vocab(corpus: Iterable[str], target_size: int, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary over a passage text stream.

    Tokens are ranked by frequency then lexicographically (deterministic
    across platforms) and truncated to target_size including the five
    special tokens.
    """
    if target_size < 6:
        raise InvalidConfigError(f"target_size must be >= 6, got {target_size}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(word_tokens(text))
    if n_texts == 0:
        raise EmptyInputError("corpus is empty")
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    id_to_token = list(SPECIAL_TOKENS) + ranked[: target_size - len(SPECIAL_TOKENS)]
    if len(id_to_token) < 6:
        raise EmptyInputError("corpus yields no vocabulary tokens above min_freq")
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(token_to_id=token_to_id, id_to_token=id_to_token)


def tokenize(text: str, vocab: Vocabulary, max_seq_len: int, seq_id: str = "") -> TokenSequence:
    """Wrap word tokens as [CLS] ... [SEP], truncating to max_seq_len.

    Truncation keeps the head of the passage and always keeps [SEP] last.
    Out-of-vocabulary words map to [UNK] but retain their surface form.
    """
    if max_seq_len < 3:
        raise InvalidConfigError(f"max_seq_len must be >= 3, got {max_seq_len}")
    words = word_tokens(text)[: max_seq_len - 2]
    surface = ["[CLS]"] + words + ["[SEP]"]
    token_ids = [CLS] + [vocab.id_of(w) for w in words] + [SEP]
    n = len(token_ids)
    is_special = [True] + [False] * (n - 2) + [True]
    return TokenSequence(
        seq_id=seq_id,
        token_ids=token_ids,
        surface=surface,
        is_special=is_special,
        is_stop_or_punct=[False] * n,
    )


def flag_stop_and_punct(seq: TokenSequence, stoplist: frozenset[str]) -> TokenSequence:
    """Mark positions whose surface form is a stop word or all punctuation.

    Special positions ([CLS]/[SEP]/[PAD]) are never flagged.
    """
    flags = [
        (not sp) and (tok in stoplist or is_punct_token(tok))
        for tok, sp in zip(seq.surface, seq.is_special)
    ]
    return replace(seq, is_stop_or_punct=flags)


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Read a stop-word file (one lowercase word per line).

    With no path, returns the bundled list (union of two standard public
    English lists, shipped as a versioned asset so measured statistics
    are reproducible).
    """
    if path is None:
        text = resources.files("rom_lab").joinpath(f"assets/{STOPWORDS_ASSET}").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


# ---------------------------------------------------------------------------
# File formats: passages JSONL, queries/judgments TSV, vocabulary JSON.


def load_passages(path: str | Path) -> list[PassageRecord]:
    records: list[PassageRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: not valid JSON: {e}") from e
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise SchemaError(f"{path}:{lineno}: expected object with 'id' and 'text'")
            pid = str(obj["id"])
            if pid in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate passage id {pid!r}")
            seen.add(pid)
            records.append(PassageRecord(pid=pid, text=str(obj["text"])))
    return records


def load_queries(path: str | Path) -> list[QueryRecord]:
    records: list[QueryRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise SchemaError(f"{path}:{lineno}: expected 'qid<TAB>text'")
            qid, text = parts
            if qid in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate query id {qid!r}")
            seen.add(qid)
            records.append(QueryRecord(qid=qid, text=text))
    return records


def load_judgments(
    path: str | Path,
    known_qids: set[str] | None = None,
    known_pids: set[str] | None = None,
) -> list[Judgment]:
    """Parse 'qid<TAB>pid<TAB>rel' lines, validating referenced ids."""
    records: list[Judgment] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise SchemaError(f"{path}:{lineno}: expected 'qid<TAB>pid<TAB>rel'")
            qid, pid, rel_s = parts
            try:
                rel = int(rel_s)
            except ValueError as e:
                raise SchemaError(f"{path}:{lineno}: relevance {rel_s!r} is not an integer") from e
            if rel < 1:
                raise SchemaError(f"{path}:{lineno}: relevance must be >= 1")
            if known_qids is not None and qid not in known_qids:
                raise SchemaError(f"{path}:{lineno}: unknown query id {qid!r}")
            if known_pids is not None and pid not in known_pids:
                raise SchemaError(f"{path}:{lineno}: unknown passage id {pid!r}")
            records.append(Judgment(qid=qid, pid=pid, relevance=rel))
    return records


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(vocab.token_to_id, f, ensure_ascii=False, sort_keys=True)
        f.write("\n")


def load_vocab(path: str | Path) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        token_to_id = json.load(f)
    if not isinstance(token_to_id, dict):
        raise SchemaError(f"{path}: expected a JSON object mapping token to id")
    ids = sorted(token_to_id.values())
    if ids != list(range(len(ids))):
        raise SchemaError(f"{path}: ids must be exactly 0..{len(ids) - 1}")
    id_to_token = [""] * len(token_to_id)
    for tok, i in token_to_id.items():
        id_to_token[i] = tok
    return Vocabulary(token_to_id={t: int(i) for t, i in token_to_id.items()}, id_to_token=id_to_token)
