"""Command-line pipeline: config handling, stage orchestration, manifests.

One JSON config file drives every subcommand; the flags --config, --out,
--seed, --strategy, --weights and --threads override individual values
(ROM_LAB_THREADS is the fallback for --threads). Every successful run
writes its merged effective config into manifest-<command>.json, so a
run is reproducible from its output directory alone.

Exit codes: 0 success, 2 invalid config (unknown keys, bad values,
missing required fields), 3 missing input file, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .corpus import (
    TokenSequence,
    Vocabulary,
    build_vocab,
    flag_stop_and_punct,
    load_judgments,
    load_passages,
    load_queries,
    load_stopwords,
    load_vocab,
    save_vocab,
    tokenize,
)
from .errors import ConfigError, InvalidConfigError, RomLabError, SchemaError
from .masking import MaskingPolicy, mask_sequence, masking_statistics, sequence_rng
from .model import ModelConfig, encode_text
from .retrieval import (
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
from .termweight import (
    TermWeightRecord,
    contrastive_term_distribution,
    document_frequencies,
    import_term_weights,
    load_attention_dump,
    load_term_weights,
    merge_wordpieces,
    minmax_rescale,
    save_term_weights,
    tfidf_term_distribution,
)
from .training import (
    FINETUNE_DEFAULTS,
    PRETRAIN_DEFAULTS,
    TrainPair,
    TrainRunConfig,
    contrastive_warmup,
    finetune_dual,
    pretrain_mlm,
    save_loss_curve,
)

WEIGHT_SOURCES = ("tfidf", "attention-dump", "import")

# Config schema doubles as the defaults; unknown keys anywhere are rejected.
# Path fields default to None: corpus inputs must be provided explicitly,
# while vocab/weights/checkpoint/index/run fall back to the conventional
# artifact locations under the output directory.
DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out": "out",
    "threads": 1,
    "paths": {
        "passages": None,
        "queries_train": None,
        "queries_eval": None,
        "pairs": None,
        "judgments": None,
        "vocab": None,
        "weights": None,
        "attention_dump": None,
        "import_weights": None,
        "checkpoint": None,
        "index": None,
        "run": None,
    },
    "vocab": {"target_size": 5000, "min_freq": 1},
    "weights": {"source": "tfidf"},
    "masking": {
        "rate": 0.15,
        "strategy": "random",
        "corruption": [0.8, 0.1, 0.1],
        "dynamic": True,
    },
    "model": {
        "layers": 2,
        "heads": 2,
        "hidden": 64,
        "ffn": 128,
        "max_seq_len": 128,
        "dropout": 0.0,
        "precision": "fast32",
    },
    "train": {
        "pretrain": {
            "lr": PRETRAIN_DEFAULTS["lr"],
            "batch_size": PRETRAIN_DEFAULTS["batch_size"],
            "epochs": 2,
            "steps": None,
            "weight_decay": 0.01,
            "warmup_frac": PRETRAIN_DEFAULTS["warmup_frac"],
            "checkpoint_every": 0,
            "refresh_weights_every": 0,
        },
        "warmup": {
            "lr": 1e-4,
            "batch_size": 16,
            "epochs": 1,
            "steps": None,
            "weight_decay": 0.01,
            "temperature": 1.0,
        },
        "finetune": {
            "lr": FINETUNE_DEFAULTS["lr"],
            "batch_size": FINETUNE_DEFAULTS["batch_size"],
            "epochs": FINETUNE_DEFAULTS["epochs"],
            "steps": None,
            "weight_decay": 0.01,
            "temperature": 1.0,
        },
    },
    "search": {"k": 100, "score": "dot"},
    "compare": {"warmup": False},
}


# --------------------------------------------------------------------------
# config plumbing


def _merged(defaults: dict, override, trail: str = "config") -> dict:
    """Deep-merge an override tree onto the defaults, rejecting unknown keys."""
    if not isinstance(override, dict):
        raise InvalidConfigError(f"{trail}: expected an object, got {type(override).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise InvalidConfigError(f"{trail}: unknown key {key!r}")
        if isinstance(defaults[key], dict):
            out[key] = _merged(defaults[key], value, f"{trail}.{key}")
        else:
            out[key] = value
    return out


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p}")
    try:
        with open(p, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidConfigError(f"{p}: not valid JSON: {e}") from e
    return _merged(DEFAULT_CONFIG, doc)


def effective_config(args: argparse.Namespace) -> dict:
    """Merge config file onto defaults, then apply flag overrides (flags win)."""
    cfg = _load_config_file(args.config) if args.config else copy.deepcopy(DEFAULT_CONFIG)
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.strategy is not None:
        cfg["masking"]["strategy"] = args.strategy
    if args.weights is not None:
        cfg["paths"]["weights"] = args.weights
    if args.threads is not None:
        cfg["threads"] = args.threads
    else:
        env = os.environ.get("ROM_LAB_THREADS")
        if env is not None:
            try:
                cfg["threads"] = int(env)
            except ValueError:
                raise InvalidConfigError(f"ROM_LAB_THREADS must be an integer, got {env!r}")
    if not isinstance(cfg["seed"], int):
        raise InvalidConfigError("config: seed must be an integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise InvalidConfigError("config: threads must be a positive integer")
    if cfg["weights"]["source"] not in WEIGHT_SOURCES:
        raise InvalidConfigError(
            f"config: weights.source must be one of {WEIGHT_SOURCES}, "
            f"got {cfg['weights']['source']!r}"
        )
    return cfg


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    """Record what produced this directory; no timestamps, so reruns match."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "seed": cfg["seed"],
        "effective_config": cfg,
        "versions": {
            "rom_lab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    with open(out / f"manifest-{command}.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _require_file(path: Path, field: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{field}: no such file: {path}")
    return path


def _input_path(cfg: dict, name: str) -> Path:
    """A corpus input the user must point at; absence is a config error."""
    value = cfg["paths"][name]
    if value is None:
        raise InvalidConfigError(f"config: paths.{name} is required for this command")
    return _require_file(Path(value), f"paths.{name}")


def _artifact_path(cfg: dict, out: Path, name: str, default_name: str) -> Path:
    """An artifact path with a conventional default under the output dir."""
    value = cfg["paths"][name]
    return Path(value) if value is not None else out / default_name


# --------------------------------------------------------------------------
# shared stage helpers


def _model_config(cfg: dict, vocab: Vocabulary) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        layers=m["layers"],
        heads=m["heads"],
        hidden=m["hidden"],
        ffn=m["ffn"],
        vocab_size=vocab.size,
        max_seq_len=m["max_seq_len"],
        dropout=m["dropout"],
        precision=m["precision"],
    )


def _policy(cfg: dict, strategy: str | None = None) -> MaskingPolicy:
    m = cfg["masking"]
    return MaskingPolicy(
        rate=m["rate"],
        strategy=strategy if strategy is not None else m["strategy"],
        corruption=tuple(m["corruption"]),
        dynamic=m["dynamic"],
    )


def _run_config(cfg: dict, stage: str, policy: MaskingPolicy) -> TrainRunConfig:
    t = cfg["train"][stage]
    kwargs = dict(
        stage=stage,
        lr=t["lr"],
        batch_size=t["batch_size"],
        seed=cfg["seed"],
        epochs=t["epochs"],
        steps=t["steps"],
        policy=policy,
        weight_decay=t["weight_decay"],
        workers=cfg["threads"],
    )
    if stage == "pretrain":
        kwargs.update(
            warmup_frac=t["warmup_frac"],
            checkpoint_every=t["checkpoint_every"],
            refresh_weights_every=t["refresh_weights_every"],
        )
    else:
        kwargs.update(temperature=t["temperature"])
    return TrainRunConfig(**kwargs)


def _load_vocab(cfg: dict, out: Path) -> Vocabulary:
    return load_vocab(_require_file(_artifact_path(cfg, out, "vocab", "vocab.json"), "paths.vocab"))


def _tokenized_passages(cfg: dict, vocab: Vocabulary, flagged: bool = False) -> list[TokenSequence]:
    records = load_passages(_input_path(cfg, "passages"))
    max_len = cfg["model"]["max_seq_len"]
    seqs = [tokenize(r.text, vocab, max_len, seq_id=r.pid) for r in records]
    if flagged:
        stoplist = load_stopwords()
        seqs = [flag_stop_and_punct(s, stoplist) for s in seqs]
    return seqs


def _load_rom_weights(
    cfg: dict, out: Path, corpus: list[TokenSequence]
) -> dict[str, TermWeightRecord]:
    path = _artifact_path(cfg, out, "weights", "weights.jsonl")
    records = load_term_weights(_require_file(path, "paths.weights"))
    by_id = {r.seq_id: r for r in records}
    missing = [s.seq_id for s in corpus if s.seq_id not in by_id]
    if missing:
        raise ConfigError(
            f"{path}: no term-weight record for: "
            + ", ".join(missing[:20])
            + ("..." if len(missing) > 20 else "")
        )
    return by_id


def _checkpoint_for(cfg: dict, out: Path, preferred: list[str]):
    """Load the configured checkpoint, else the first conventional one found."""
    value = cfg["paths"]["checkpoint"]
    if value is not None:
        path = Path(value)
    else:
        candidates = [out / name for name in preferred]
        existing = [c for c in candidates if c.exists()]
        path = existing[0] if existing else candidates[0]
    if not path.exists():
        raise FileNotFoundError(f"paths.checkpoint: no such file: {path}")
    return load_checkpoint(path)


def _masked_epoch(
    cfg: dict,
    out: Path,
    vocab: Vocabulary,
    seqs: list[TokenSequence],
    strategy: str,
):
    """One deterministic epoch of masked examples (epoch 0, ordinal = index)."""
    policy = _policy(cfg, strategy)
    rescaled: dict[str, np.ndarray] = {}
    if strategy == "rom":
        by_id = _load_rom_weights(cfg, out, seqs)
        rescaled = {s.seq_id: minmax_rescale(by_id[s.seq_id]) for s in seqs}

    def one(item):
        i, seq = item
        rng = sequence_rng(cfg["seed"], 0, i)
        return mask_sequence(seq, policy, rng, vocab.size, rescaled.get(seq.seq_id))

    if cfg["threads"] <= 1:
        return [one(item) for item in enumerate(seqs)]
    with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
        return list(pool.map(one, enumerate(seqs)))


def _compute_weight_records(cfg: dict, out: Path) -> list[TermWeightRecord]:
    source = cfg["weights"]["source"]
    if source == "tfidf":
        vocab = _load_vocab(cfg, out)
        passages = load_passages(_input_path(cfg, "passages"))
        df, n_docs = document_frequencies(r.text for r in passages)
        max_len = cfg["model"]["max_seq_len"]
        return [
            tfidf_term_distribution(tokenize(r.text, vocab, max_len, seq_id=r.pid), df, n_docs)
            for r in passages
        ]
    if source == "attention-dump":
        dump = load_attention_dump(_input_path(cfg, "attention_dump"))
        return [contrastive_term_distribution(merge_wordpieces(rec)) for rec in dump]
    # import: renormalize an external weight file, checked against the corpus
    vocab = _load_vocab(cfg, out)
    seqs = _tokenized_passages(cfg, vocab)
    expected = {s.seq_id: len(s.maskable_positions()) for s in seqs}
    return import_term_weights(_input_path(cfg, "import_weights"), expected_lengths=expected)


def _load_pairs(cfg: dict, vocab: Vocabulary) -> list[TrainPair]:
    path = _input_path(cfg, "pairs")
    queries = {q.qid: q for q in load_queries(_input_path(cfg, "queries_train"))}
    passages = {p.pid: p for p in load_passages(_input_path(cfg, "passages"))}
    max_len = cfg["model"]["max_seq_len"]
    pairs: list[TrainPair] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise SchemaError(f"{path}:{lineno}: expected 'qid<TAB>pid', got {line!r}")
            qid, pid = parts
            if qid not in queries:
                raise SchemaError(f"{path}:{lineno}: unknown query id {qid!r}")
            if pid not in passages:
                raise SchemaError(f"{path}:{lineno}: unknown passage id {pid!r}")
            pairs.append(
                TrainPair(
                    qid=qid,
                    pid=pid,
                    query=tokenize(queries[qid].text, vocab, max_len, seq_id=qid),
                    passage=tokenize(passages[pid].text, vocab, max_len, seq_id=pid),
                )
            )
    return pairs


# --------------------------------------------------------------------------
# subcommand handlers


def cmd_build_vocab(cfg: dict, out: Path) -> None:
    records = load_passages(_input_path(cfg, "passages"))
    vocab = build_vocab(
        (r.text for r in records), cfg["vocab"]["target_size"], cfg["vocab"]["min_freq"]
    )
    save_vocab(vocab, out / "vocab.json")


def cmd_weights(cfg: dict, out: Path) -> None:
    save_term_weights(_compute_weight_records(cfg, out), out / "weights.jsonl")


def cmd_mask(cfg: dict, out: Path) -> None:
    vocab = _load_vocab(cfg, out)
    seqs = _tokenized_passages(cfg, vocab)
    examples = _masked_epoch(cfg, out, vocab, seqs, cfg["masking"]["strategy"])
    with open(out / "masked.jsonl", "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(
                json.dumps(
                    {
                        "id": ex.seq_id,
                        "input_ids": ex.input_ids,
                        "labels": ex.labels,
                        "positions": ex.positions,
                    }
                )
                + "\n"
            )


def cmd_mask_stats(cfg: dict, out: Path) -> None:
    strategy = cfg["masking"]["strategy"]
    vocab = _load_vocab(cfg, out)
    seqs = _tokenized_passages(cfg, vocab, flagged=True)
    examples = _masked_epoch(cfg, out, vocab, seqs, strategy)
    flags = {s.seq_id: s.is_stop_or_punct for s in seqs}
    report = masking_statistics(examples, flags, strategy=strategy)
    with open(out / f"mask_stats_{strategy}.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_pretrain(cfg: dict, out: Path) -> None:
    vocab = _load_vocab(cfg, out)
    seqs = _tokenized_passages(cfg, vocab)
    strategy = cfg["masking"]["strategy"]
    weights = _load_rom_weights(cfg, out, seqs) if strategy == "rom" else None
    run = _run_config(cfg, "pretrain", _policy(cfg, strategy))
    _, curve = pretrain_mlm(
        seqs,
        weights,
        _model_config(cfg, vocab),
        run,
        checkpoint_dir=out / "checkpoint-pretrain",
    )
    save_loss_curve(curve, out / "loss_pretrain.csv")


def cmd_warmup(cfg: dict, out: Path) -> None:
    params, mcfg = _checkpoint_for(cfg, out, ["checkpoint-pretrain"])
    vocab = _load_vocab(cfg, out)
    if mcfg.vocab_size != vocab.size:
        raise ConfigError(
            f"checkpoint vocab size {mcfg.vocab_size} != vocabulary size {vocab.size}"
        )
    seqs = _tokenized_passages(cfg, vocab)
    # span contrast masks uniformly within each span, whatever the strategy
    run = _run_config(cfg, "warmup", _policy(cfg, "random"))
    _, curve = contrastive_warmup(
        seqs, params, mcfg, run, checkpoint_dir=out / "checkpoint-warmup"
    )
    save_loss_curve(curve, out / "loss_warmup.csv", contrastive=True)


def cmd_finetune(cfg: dict, out: Path) -> None:
    params, mcfg = _checkpoint_for(cfg, out, ["checkpoint-warmup", "checkpoint-pretrain"])
    vocab = _load_vocab(cfg, out)
    if mcfg.vocab_size != vocab.size:
        raise ConfigError(
            f"checkpoint vocab size {mcfg.vocab_size} != vocabulary size {vocab.size}"
        )
    pairs = _load_pairs(cfg, vocab)
    run = _run_config(cfg, "finetune", _policy(cfg, "random"))
    _, curve = finetune_dual(pairs, params, mcfg, run, checkpoint_dir=out / "checkpoint-finetune")
    save_loss_curve(curve, out / "loss_finetune.csv")


def cmd_encode(cfg: dict, out: Path) -> None:
    params, mcfg = _checkpoint_for(
        cfg, out, ["checkpoint-finetune", "checkpoint-warmup", "checkpoint-pretrain"]
    )
    vocab = _load_vocab(cfg, out)
    seqs = _tokenized_passages(cfg, vocab)
    index = encode_corpus(params, mcfg, seqs, workers=cfg["threads"])
    save_index(index, out / "index")


def cmd_search(cfg: dict, out: Path) -> None:
    params, mcfg = _checkpoint_for(
        cfg, out, ["checkpoint-finetune", "checkpoint-warmup", "checkpoint-pretrain"]
    )
    vocab = _load_vocab(cfg, out)
    index_path = _artifact_path(cfg, out, "index", "index")
    if not index_path.exists():
        raise FileNotFoundError(f"paths.index: no such file: {index_path}")
    index = load_index(index_path)
    queries = load_queries(_input_path(cfg, "queries_eval"))
    max_len = cfg["model"]["max_seq_len"]
    results = {}
    for q in queries:
        seq = tokenize(q.text, vocab, max_len, seq_id=q.qid)
        vector = encode_text(params, mcfg, seq)
        results[q.qid] = search_topk(index, vector, cfg["search"]["k"], cfg["search"]["score"])
    save_run(RetrievalRun(results=results), out / "run.trec")


def cmd_eval(cfg: dict, out: Path) -> None:
    run = load_run(_require_file(_artifact_path(cfg, out, "run", "run.trec"), "paths.run"))
    judgments = load_judgments(_input_path(cfg, "judgments"))
    save_metrics(evaluate_run(run, judgments), out / "metrics.json")


def cmd_compare(cfg: dict, out: Path) -> None:
    """Twin pipelines, random vs ROM masking, sharing vocabulary and weights."""
    passages = load_passages(_input_path(cfg, "passages"))
    vocab = build_vocab(
        (p.text for p in passages), cfg["vocab"]["target_size"], cfg["vocab"]["min_freq"]
    )
    save_vocab(vocab, out / "vocab.json")

    sub = copy.deepcopy(cfg)
    sub["paths"]["vocab"] = str(out / "vocab.json")
    save_term_weights(_compute_weight_records(sub, out), out / "weights.jsonl")
    sub["paths"]["weights"] = str(out / "weights.jsonl")

    report: dict = {"seed": cfg["seed"], "strategies": {}}
    for strategy in ("random", "rom"):
        branch = copy.deepcopy(sub)
        branch["masking"]["strategy"] = strategy
        branch["paths"]["checkpoint"] = None
        branch["paths"]["index"] = None
        branch["paths"]["run"] = None
        branch_out = out / strategy
        branch_out.mkdir(parents=True, exist_ok=True)
        cmd_pretrain(branch, branch_out)
        if cfg["compare"]["warmup"]:
            cmd_warmup(branch, branch_out)
        cmd_finetune(branch, branch_out)
        cmd_encode(branch, branch_out)
        cmd_search(branch, branch_out)
        cmd_eval(branch, branch_out)
        with open(branch_out / "metrics.json", encoding="utf-8") as f:
            report["strategies"][strategy] = json.load(f)

    with open(out / "compare_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


COMMANDS = [
    ("build-vocab", cmd_build_vocab, "build a vocabulary from a passage file"),
    ("weights", cmd_weights, "estimate per-token term weights (tfidf, attention-dump, import)"),
    ("mask", cmd_mask, "write one deterministic epoch of masked examples"),
    ("mask-stats", cmd_mask_stats, "report the stop/punctuation fraction of masked positions"),
    ("pretrain", cmd_pretrain, "masked-language-model pre-training"),
    ("warmup", cmd_warmup, "joint MLM + span-contrastive warm-up from a pretrain checkpoint"),
    ("finetune", cmd_finetune, "dual-encoder fine-tuning with in-batch negatives"),
    ("encode", cmd_encode, "encode passages into an embedding index"),
    ("search", cmd_search, "rank indexed passages for each query"),
    ("eval", cmd_eval, "score a run file against relevance judgments"),
    ("compare", cmd_compare, "run random-vs-ROM twin pipelines and a side-by-side report"),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON pipeline config")
    common.add_argument("--out", metavar="DIR", help="output directory (default: ./out)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--strategy", choices=["random", "rom"], help="masking strategy")
    common.add_argument("--weights", metavar="PATH", help="term-weights JSONL file")
    common.add_argument(
        "--threads", type=int, help="worker threads (fallback: ROM_LAB_THREADS, then 1)"
    )
    parser = argparse.ArgumentParser(
        prog="rom-lab",
        description="Term-weighted masking lab: pre-train, fine-tune and evaluate "
        "a small dual-encoder under random vs retrieval-oriented masking.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, handler, help_text in COMMANDS:
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        cmd.set_defaults(handler=handler)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        args.handler(cfg, out)
        write_manifest(out, args.command, cfg)
    except (InvalidConfigError, ConfigError) as e:
        print(f"rom-lab {args.command}: invalid config: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"rom-lab {args.command}: missing input: {e}", file=sys.stderr)
        return 3
    except RomLabError as e:
        print(f"rom-lab {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
