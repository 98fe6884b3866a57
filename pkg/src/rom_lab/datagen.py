"""Synthetic English corpus generator for masking and retrieval experiments.

Passages are template sentences over common word banks, tuned so that the
stop-word/punctuation fraction of a tokenized passage lands near 0.40, the
density reported for natural English. Every passage carries one unique rare
key term (plus shared topic terms); queries repeat the unique key, so
relevance hinges on rare content words rather than the stop-word scaffold.

Run `python -m rom_lab.datagen --out DIR` to materialize the standard file
set: passages.jsonl, queries_train.tsv, queries_eval.tsv, pairs_train.tsv,
judgments_eval.tsv.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Judgment, PassageRecord, QueryRecord, load_stopwords
from .errors import ConfigError

ADJECTIVES = (
    "ancient bright broad calm dense early fresh gentle grand heavy hollow keen "
    "late lean loud mild narrow pale plain quick quiet rough round sharp shallow "
    "silent smooth steep stern swift tall thick thin warm wide young"
).split()

NOUNS = (
    "anchor basin beacon bridge canal cellar channel column current engine furnace "
    "garden glacier harbor hillside journal kettle ladder lantern ledger machine "
    "market meadow mill orchard pillar quarry reservoir ridge river saddle shelter "
    "signal spring stable station summit terrace tower trail tunnel valley vessel "
    "village wharf workshop"
).split()

VERBS = (
    "carries crosses describes draws feeds fills follows guards guides holds joins "
    "keeps lifts links marks measures meets moves passes reaches records rests "
    "serves shapes shelters spans stores supplies supports turns"
).split()

# Scaffold words below must sit on the bundled stop-list; the mix of
# templates sets the corpus flagged-token rate near 0.40.
_SENTENCES = (
    "the {a1} {n1} {v1} the {n2} of the {n3} .",
    "a {a1} {n1} and a {a2} {n2} {v1} the {x1} .",
    "{a1} {n1} {v1} {x1} under the {a2} {n2} .",
    "{n1} with {x1} {v1} the {n2} .",
    "{a1} {n1} , {a2} {n2} , and {x1} {v1} there .",
    "{x1} {v1} the {n1} below {a1} {n2} .",
    "{a1} {x1} {v1} a {n1} above the {n2} .",
    "{a1} {n1} {v1} {a2} {n2} of {x1} .",
)

_QUERY_SENTENCES = (
    "which {n1} {v1} the {u} ?",
    "what {v1} the {u} {n1} ?",
    "where is the {u} {n1} ?",
)

_CONSONANTS = "b c d f g l m n p r s t v z".split()
_VOWELS = "a e i o u".split()
_CODAS = ["n", "r", "l", "x", "s"]


def _pseudo_word(rng: np.random.Generator, reserved: set[str]) -> str:
    """Pronounceable rare term that collides with nothing else in use."""
    while True:
        parts = []
        for i in range(int(rng.integers(2, 4))):
            parts.append(_CONSONANTS[rng.integers(len(_CONSONANTS))])
            parts.append(_VOWELS[rng.integers(len(_VOWELS))])
        if rng.random() < 0.5:
            parts.append(_CODAS[rng.integers(len(_CODAS))])
        word = "".join(parts)
        if len(word) >= 5 and word not in reserved:
            reserved.add(word)
            return word


@dataclass(frozen=True)
class DatasetSpec:
    """Shape of one synthetic dataset; everything derives from the seed."""

    n_passages: int = 6000
    n_topics: int = 40
    keys_per_topic: int = 3
    n_train_pairs: int = 300
    n_eval_queries: int = 100
    sentences_low: int = 2
    sentences_high: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_passages < 1:
            raise ConfigError("n_passages must be >= 1")
        if self.n_topics < 1 or self.keys_per_topic < 1:
            raise ConfigError("topics/keys must be >= 1")
        if self.n_train_pairs + self.n_eval_queries > self.n_passages:
            raise ConfigError("more queries than passages to target")
        if not 1 <= self.sentences_low <= self.sentences_high:
            raise ConfigError("bad sentence count range")


@dataclass(frozen=True)
class Dataset:
    passages: list[PassageRecord]
    queries_train: list[QueryRecord]
    queries_eval: list[QueryRecord]
    pairs_train: list[tuple[str, str]]
    judgments_eval: list[Judgment]


def _fill(template: str, rng: np.random.Generator, keys: list[str]) -> str:
    slots = {}
    for tag, bank in (("a", ADJECTIVES), ("n", NOUNS), ("v", VERBS)):
        for i in (1, 2, 3):
            slots[f"{tag}{i}"] = bank[rng.integers(len(bank))]
    slots["x1"] = keys[rng.integers(len(keys))]
    return template.format(**slots)


def _passage_text(rng: np.random.Generator, spec: DatasetSpec, unique_key: str,
                  topic_keys: list[str]) -> str:
    n_sent = int(rng.integers(spec.sentences_low, spec.sentences_high + 1))
    sentences = []
    for s in range(n_sent):
        template = _SENTENCES[rng.integers(len(_SENTENCES))]
        # the unique key anchors the first sentence; later ones draw topic keys
        keys = [unique_key] if s == 0 else topic_keys + [unique_key]
        sentences.append(_fill(template, rng, keys))
    return " ".join(sentences)


def _query_text(rng: np.random.Generator, unique_key: str) -> str:
    template = _QUERY_SENTENCES[rng.integers(len(_QUERY_SENTENCES))]
    slots = {
        "u": unique_key,
        "n1": NOUNS[rng.integers(len(NOUNS))],
        "v1": VERBS[rng.integers(len(VERBS))],
    }
    return template.format(**{k: v for k, v in slots.items() if f"{{{k}}}" in template})


def generate_dataset(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    # a key term that happened to be a stop-word would sabotage both the
    # masking statistic and the relevance design
    reserved = set(ADJECTIVES) | set(NOUNS) | set(VERBS) | set(load_stopwords())
    topic_keys = [
        [_pseudo_word(rng, reserved) for _ in range(spec.keys_per_topic)]
        for _ in range(spec.n_topics)
    ]
    passages = []
    unique_keys = []
    for i in range(spec.n_passages):
        topic = i % spec.n_topics
        ukey = _pseudo_word(rng, reserved)
        unique_keys.append(ukey)
        text = _passage_text(rng, spec, ukey, topic_keys[topic])
        passages.append(PassageRecord(pid=f"p{i:05d}", text=text))

    targets = rng.permutation(spec.n_passages)[: spec.n_train_pairs + spec.n_eval_queries]
    queries_train, pairs_train = [], []
    queries_eval, judgments_eval = [], []
    for j, passage_idx in enumerate(targets):
        text = _query_text(rng, unique_keys[passage_idx])
        pid = passages[passage_idx].pid
        if j < spec.n_train_pairs:
            qid = f"tq{j:04d}"
            queries_train.append(QueryRecord(qid=qid, text=text))
            pairs_train.append((qid, pid))
        else:
            qid = f"eq{j - spec.n_train_pairs:04d}"
            queries_eval.append(QueryRecord(qid=qid, text=text))
            judgments_eval.append(Judgment(qid=qid, pid=pid, relevance=1))
    return Dataset(passages, queries_train, queries_eval, pairs_train, judgments_eval)


def write_dataset(dataset: Dataset, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "passages": out / "passages.jsonl",
        "queries_train": out / "queries_train.tsv",
        "queries_eval": out / "queries_eval.tsv",
        "pairs_train": out / "pairs_train.tsv",
        "judgments_eval": out / "judgments_eval.tsv",
    }
    with open(paths["passages"], "w", encoding="utf-8") as f:
        for p in dataset.passages:
            f.write(json.dumps({"id": p.pid, "text": p.text}) + "\n")
    with open(paths["queries_train"], "w", encoding="utf-8") as f:
        for q in dataset.queries_train:
            f.write(f"{q.qid}\t{q.text}\n")
    with open(paths["queries_eval"], "w", encoding="utf-8") as f:
        for q in dataset.queries_eval:
            f.write(f"{q.qid}\t{q.text}\n")
    with open(paths["pairs_train"], "w", encoding="utf-8") as f:
        for qid, pid in dataset.pairs_train:
            f.write(f"{qid}\t{pid}\n")
    with open(paths["judgments_eval"], "w", encoding="utf-8") as f:
        for j in dataset.judgments_eval:
            f.write(f"{j.qid}\t{j.pid}\t{j.relevance}\n")
    return paths


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m rom_lab.datagen",
        description="Generate a synthetic passage/query/judgment dataset.",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--passages", type=int, default=6000)
    parser.add_argument("--topics", type=int, default=40)
    parser.add_argument("--train-pairs", type=int, default=300)
    parser.add_argument("--eval-queries", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    spec = DatasetSpec(
        n_passages=args.passages,
        n_topics=args.topics,
        n_train_pairs=args.train_pairs,
        n_eval_queries=args.eval_queries,
        seed=args.seed,
    )
    paths = write_dataset(generate_dataset(spec), args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
