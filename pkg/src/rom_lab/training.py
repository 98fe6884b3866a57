"""AdamW, MLM pre-training, span-contrastive warm-up, dual-encoder fine-tuning.

All randomness is derived per sequence from (master seed, epoch, ordinal) so
training trajectories are reproducible bit for bit regardless of how batch
assembly is parallelized. The epoch shuffle draws from the reserved ordinal
slot _ORDER_STREAM, which real corpus ordinals never reach.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .corpus import CLS, SEP, TokenSequence
from .errors import ConfigError, EmptyInputError, NumericError
from .masking import MaskedExample, MaskingPolicy, mask_sequence, sequence_rng
from .model import (
    ModelConfig,
    ModelParameters,
    batch_arrays,
    compute_gradients,
    init_parameters,
    mlm_loss_and_grad,
    _backward,
    _forward,
)
from .termweight import TermWeightRecord, minmax_rescale

STAGES = ("pretrain", "warmup", "finetune")

# Ordinal slot reserved for the epoch shuffle stream; corpus ordinals are
# bounded by the corpus size, which never reaches 2**32 - 1 at this scale.
_ORDER_STREAM = 2**32 - 1

# Desk-scale pre-training defaults; fine-tuning keeps the published recipe
# (AdamW, lr 5e-6, batch 64, 3 epochs).
PRETRAIN_DEFAULTS = {"lr": 1e-3, "batch_size": 32, "warmup_frac": 0.1}
FINETUNE_DEFAULTS = {"lr": 5e-6, "batch_size": 64, "epochs": 3}


@dataclass
class OptimizerState:
    """AdamW moments plus hyperparameters; mutated in place by adamw_step."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(
    params: ModelParameters, lr: float, weight_decay: float = 0.0
) -> OptimizerState:
    state = OptimizerState(lr=lr, weight_decay=weight_decay)
    for name, tensor in params.tensors.items():
        state.m[name] = np.zeros_like(tensor)
        state.v[name] = np.zeros_like(tensor)
    return state


def adamw_step(
    params: ModelParameters,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    Tensors absent from grads are left untouched (frozen). A non-finite
    gradient aborts the whole step before any state is mutated.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    lr_eff = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in state.m:
        if name not in grads:
            continue
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta = params.tensors[name]
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.weight_decay * theta
        theta -= lr_eff * update


@dataclass(frozen=True)
class TrainRunConfig:
    """Knobs for one training stage; validation happens at construction."""

    stage: str
    lr: float
    batch_size: int
    seed: int = 0
    epochs: int | None = None
    steps: int | None = None
    policy: MaskingPolicy = MaskingPolicy()
    temperature: float = 1.0
    weight_decay: float = 0.01
    warmup_frac: float = 0.0
    workers: int = 1
    checkpoint_every: int = 0
    refresh_weights_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stage in ("warmup", "finetune") and self.batch_size < 2:
            raise ConfigError(f"stage {self.stage!r} needs in-batch negatives; batch_size >= 2")
        if self.epochs is None and self.steps is None:
            raise ConfigError("one of epochs/steps is required")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def lr_at(step: int, total_steps: int, run: TrainRunConfig) -> float:
    """Linear warmup to run.lr, then linear decay; step is 0-based."""
    warm = int(round(run.warmup_frac * total_steps))
    if step < warm:
        return run.lr * (step + 1) / warm
    if total_steps == warm:
        return run.lr
    return run.lr * (total_steps - step) / (total_steps - warm)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = sequence_rng(seed, epoch, _ORDER_STREAM)
    return rng.permutation(n)


def _chunks(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def _total_steps(run: TrainRunConfig, n_items: int) -> int:
    per_epoch = max(1, math.ceil(n_items / run.batch_size))
    if run.steps is not None:
        return run.steps
    return run.epochs * per_epoch


def save_loss_curve(rows: Sequence[tuple], path: str | Path, contrastive: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "contrastive_loss"] if contrastive else ["step", "loss"])
        for row in rows:
            writer.writerow([row[0]] + [f"{x:.6f}" for x in row[1:]])


def load_loss_curve(path: str | Path) -> list[tuple]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for rec in reader:
            rows.append((int(rec[0]),) + tuple(float(x) for x in rec[1:]))
    return rows


def _maybe_checkpoint(
    params: ModelParameters,
    config: ModelConfig,
    run: TrainRunConfig,
    checkpoint_dir: str | Path | None,
    step: int,
) -> None:
    if checkpoint_dir is None or run.checkpoint_every <= 0:
        return
    if step % run.checkpoint_every == 0:
        save_checkpoint(params, config, Path(checkpoint_dir) / f"step-{step:06d}")


def _mask_epoch(
    corpus: Sequence[TokenSequence],
    rescaled: Mapping[str, np.ndarray] | None,
    run: TrainRunConfig,
    epoch: int,
    vocab_size: int,
) -> list[MaskedExample]:
    """Mask every sequence for one epoch; ordinal = corpus index, so the
    result is independent of worker count and shuffle order."""
    mask_epoch = epoch if run.policy.dynamic else 0

    def one(i: int) -> MaskedExample:
        seq = corpus[i]
        rng = sequence_rng(run.seed, mask_epoch, i)
        w = rescaled[seq.seq_id] if rescaled is not None else None
        return mask_sequence(seq, run.policy, rng, vocab_size, p_w_rescaled=w)

    if run.workers <= 1:
        return [one(i) for i in range(len(corpus))]
    with ThreadPoolExecutor(max_workers=run.workers) as pool:
        return list(pool.map(one, range(len(corpus))))


def _seq_batch_arrays(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s.token_ids) for s in seqs)
    ids = np.zeros((len(seqs), n), dtype=np.int64)  # PAD = 0
    mask = np.zeros((len(seqs), n), dtype=bool)
    for r, s in enumerate(seqs):
        m = len(s.token_ids)
        ids[r, :m] = s.token_ids
        mask[r, :m] = True
    return ids, mask


def _refreshed_rescaled(
    corpus: Sequence[TokenSequence],
    params: ModelParameters,
    config: ModelConfig,
    batch_size: int,
) -> dict[str, np.ndarray]:
    """Recompute rescaled weights from the model's own [CLS] attention."""
    from .model import ForwardTrace, cls_attention_distribution
    from .termweight import AttentionDumpRecord, contrastive_term_distribution

    out: dict[str, np.ndarray] = {}
    for start in range(0, len(corpus), batch_size):
        seqs = corpus[start : start + batch_size]
        ids, mask = _seq_batch_arrays(seqs)
        cache = _forward(params, config, ids, mask)
        trace = ForwardTrace(
            final_hidden=cache.final_hidden,
            attentions=[lc.probs for lc in cache.layers],
            attn_mask=mask,
            pooled=cache.final_hidden[:, 0, :],
        )
        for b, seq in enumerate(seqs):
            a = cls_attention_distribution(trace, seq.is_special, batch_index=b)
            tokens = [t for t, sp in zip(seq.surface, seq.is_special) if not sp]
            rec = contrastive_term_distribution(
                AttentionDumpRecord(seq.seq_id, tokens, a.tolist())
            )
            out[seq.seq_id] = minmax_rescale(rec)
    return out


def pretrain_mlm(
    corpus: Sequence[TokenSequence],
    weights: Mapping[str, TermWeightRecord] | None,
    config: ModelConfig,
    run: TrainRunConfig,
    params: ModelParameters | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelParameters, list[tuple[int, float]]]:
    """Masked-language-model pre-training with random or ROM masking.

    Term weights are consumed up front: for strategy=rom every sequence must
    carry a record, rescaled once before the loop. Returns the trained
    parameters and the per-step loss curve.
    """
    if len(corpus) == 0:
        raise EmptyInputError("empty pre-training corpus")
    rescaled: dict[str, np.ndarray] | None = None
    if run.policy.strategy == "rom":
        have = weights or {}
        missing = [s.seq_id for s in corpus if s.seq_id not in have]
        if missing:
            raise ConfigError(
                "strategy=rom requires a term-weight record per sequence; missing: "
                + ", ".join(missing[:20])
                + ("..." if len(missing) > 20 else "")
            )
        rescaled = {s.seq_id: minmax_rescale(have[s.seq_id]) for s in corpus}

    if params is None:
        params = init_parameters(config, run.seed)
    state = init_optimizer(params, run.lr, run.weight_decay)
    total = _total_steps(run, len(corpus))
    curve: list[tuple[int, float]] = []
    step = 0
    epoch = 0
    while step < total:
        if (
            rescaled is not None
            and run.refresh_weights_every > 0
            and epoch > 0
            and epoch % run.refresh_weights_every == 0
        ):
            rescaled = _refreshed_rescaled(corpus, params, config, run.batch_size)
        examples = _mask_epoch(corpus, rescaled, run, epoch, config.vocab_size)
        order = _epoch_order(len(corpus), run.seed, epoch)
        for chunk in _chunks(order, run.batch_size):
            batch = [examples[i] for i in chunk]
            loss, grads = compute_gradients(params, config, batch)
            adamw_step(params, grads, state, lr=lr_at(step, total, run))
            curve.append((step, loss))
            step += 1
            _maybe_checkpoint(params, config, run, checkpoint_dir, step)
            if step >= total:
                break
        epoch += 1
    if not math.isfinite(curve[-1][1]):
        raise NumericError("final MLM loss is not finite")
    if checkpoint_dir is not None:
        save_checkpoint(params, config, checkpoint_dir)
    return params, curve


def contrastive_loss_and_grad(
    anchors: np.ndarray, candidates: np.ndarray, temperature: float = 1.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """In-batch softmax cross-entropy over dot-product scores, diagonal gold.

    Returns (loss, d_anchors, d_candidates). Uniform similarities give
    exactly ln(#candidates); the loss is never negative.
    """
    if anchors.shape[0] < 2:
        raise ConfigError("in-batch negatives need at least 2 rows")
    p = anchors.shape[0]
    scores = (anchors @ candidates.T) / temperature
    scores = scores.astype(np.float64, copy=False)
    z = scores - scores.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-np.trace(log_probs) / p)
    d_scores = (np.exp(log_probs) - np.eye(p)) / p
    d_anchors = (d_scores @ candidates) / temperature
    d_candidates = (d_scores.T @ anchors) / temperature
    return loss, d_anchors.astype(anchors.dtype), d_candidates.astype(candidates.dtype)


def split_spans(seq: TokenSequence, rng: np.random.Generator) -> tuple[TokenSequence, TokenSequence]:
    """Two disjoint contiguous half-spans of the maskable tokens, split at a
    random interior point; each is rewrapped as [CLS] ... [SEP]."""
    maskable = seq.maskable_positions()
    if len(maskable) < 2:
        raise EmptyInputError(f"sequence {seq.seq_id!r} too short for two spans")
    cut = int(rng.integers(1, len(maskable)))

    def wrap(tag: str, positions: list[int]) -> TokenSequence:
        ids = [CLS] + [seq.token_ids[i] for i in positions] + [SEP]
        surface = ["[CLS]"] + [seq.surface[i] for i in positions] + ["[SEP]"]
        flags = [False] + [seq.is_stop_or_punct[i] for i in positions] + [False]
        special = [True] + [False] * len(positions) + [True]
        return TokenSequence(f"{seq.seq_id}{tag}", ids, surface, special, flags)

    return wrap("/a", maskable[:cut]), wrap("/b", maskable[cut:])


def contrastive_warmup(
    corpus: Sequence[TokenSequence],
    params: ModelParameters,
    config: ModelConfig,
    run: TrainRunConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelParameters, list[tuple[int, float, float]]]:
    """Joint MLM + span-contrastive warm-up.

    Each passage contributes two disjoint spans; span A rows anchor the
    in-batch similarity matrix against span B rows, and both spans feed the
    MLM term. Total loss per step = mlm + contrastive.
    """
    eligible_idx = [i for i, s in enumerate(corpus) if len(s.maskable_positions()) >= 2]
    if not eligible_idx:
        raise EmptyInputError("no passage yields two disjoint spans")
    if len(eligible_idx) < 2:
        raise ConfigError("warm-up needs at least 2 eligible passages for in-batch negatives")
    state = init_optimizer(params, run.lr, run.weight_decay)
    total = _total_steps(run, len(eligible_idx))
    curve: list[tuple[int, float, float]] = []
    step = 0
    epoch = 0
    while step < total:
        order = _epoch_order(len(eligible_idx), run.seed, epoch)
        for chunk in _chunks(order, run.batch_size):
            if len(chunk) < 2:
                continue  # a trailing singleton has no negatives
            examples: list[MaskedExample] = []
            for j in chunk:
                seq = corpus[eligible_idx[j]]
                # one stream per passage: split point, then span A draws,
                # then span B draws
                rng = sequence_rng(run.seed, epoch, eligible_idx[j])
                span_a, span_b = split_spans(seq, rng)
                examples.append(mask_sequence(span_a, run.policy, rng, config.vocab_size))
                examples.append(mask_sequence(span_b, run.policy, rng, config.vocab_size))
            p = len(chunk)
            # rows alternate a0,b0,a1,b1,...; deinterleave for the two towers
            ids, mask, labels = batch_arrays(examples)
            cache = _forward(params, config, ids, mask)
            logits = cache.final_hidden @ params["mlm.w"] + params["mlm.b"]
            loss_mlm, d_logits = mlm_loss_and_grad(logits, labels)
            pooled = cache.final_hidden[:, 0, :]
            anchors = pooled[0::2]
            candidates = pooled[1::2]
            loss_con, d_anchors, d_candidates = contrastive_loss_and_grad(
                anchors, candidates, run.temperature
            )
            d_hidden = np.zeros_like(cache.final_hidden)
            d_hidden[0::2, 0, :] = d_anchors
            d_hidden[1::2, 0, :] = d_candidates
            grads = _backward(params, config, cache, d_hidden, d_logits=d_logits)
            adamw_step(params, grads, state, lr=lr_at(step, total, run))
            curve.append((step, loss_mlm + loss_con, loss_con))
            step += 1
            _maybe_checkpoint(params, config, run, checkpoint_dir, step)
            if step >= total:
                break
        epoch += 1
    if checkpoint_dir is not None:
        save_checkpoint(params, config, checkpoint_dir)
    return params, curve


@dataclass(frozen=True)
class TrainPair:
    """One (query, positive passage) fine-tuning example."""

    qid: str
    pid: str
    query: TokenSequence
    passage: TokenSequence


def _encode_pooled(
    params: ModelParameters, config: ModelConfig, seqs: Sequence[TokenSequence]
):
    ids, mask = _seq_batch_arrays(seqs)
    cache = _forward(params, config, ids, mask)
    return cache.final_hidden[:, 0, :], cache


def finetune_dual(
    pairs: Sequence[TrainPair],
    params: ModelParameters,
    config: ModelConfig,
    run: TrainRunConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelParameters, list[tuple[int, float]]]:
    """Dual-encoder fine-tuning with in-batch negatives and a shared tower.

    Each query is scored against every passage in its batch (dot product
    over temperature); gold is the diagonal. The MLM head is left frozen.
    """
    if len(pairs) == 0:
        raise EmptyInputError("no training pairs")
    if len(pairs) < 2:
        raise ConfigError("fine-tuning needs at least 2 pairs for in-batch negatives")
    state = init_optimizer(params, run.lr, run.weight_decay)
    total = _total_steps(run, len(pairs))
    curve: list[tuple[int, float]] = []
    step = 0
    epoch = 0
    while step < total:
        order = _epoch_order(len(pairs), run.seed, epoch)
        for chunk in _chunks(order, run.batch_size):
            if len(chunk) < 2:
                continue
            batch = [pairs[i] for i in chunk]
            pids = [p.pid for p in batch]
            if len(set(pids)) != len(pids):
                warnings.warn(
                    f"step {step}: duplicate passage ids in batch; in-batch labels ambiguous",
                    stacklevel=2,
                )
            q_pooled, q_cache = _encode_pooled(params, config, [p.query for p in batch])
            p_pooled, p_cache = _encode_pooled(params, config, [p.passage for p in batch])
            loss, d_q, d_p = contrastive_loss_and_grad(q_pooled, p_pooled, run.temperature)
            d_hidden_q = np.zeros_like(q_cache.final_hidden)
            d_hidden_q[:, 0, :] = d_q
            d_hidden_p = np.zeros_like(p_cache.final_hidden)
            d_hidden_p[:, 0, :] = d_p
            grads_q = _backward(params, config, q_cache, d_hidden_q)
            grads_p = _backward(params, config, p_cache, d_hidden_p)
            grads = {name: grads_q[name] + grads_p[name] for name in grads_q}
            adamw_step(params, grads, state, lr=lr_at(step, total, run))
            curve.append((step, loss))
            step += 1
            _maybe_checkpoint(params, config, run, checkpoint_dir, step)
            if step >= total:
                break
        epoch += 1
    if checkpoint_dir is not None:
        save_checkpoint(params, config, checkpoint_dir)
    return params, curve


def in_batch_accuracy(
    pairs: Sequence[TrainPair],
    params: ModelParameters,
    config: ModelConfig,
    temperature: float = 1.0,
) -> float:
    """Fraction of queries whose own passage wins the in-batch softmax."""
    if len(pairs) == 0:
        raise EmptyInputError("no pairs to score")
    q_pooled, _ = _encode_pooled(params, config, [p.query for p in pairs])
    p_pooled, _ = _encode_pooled(params, config, [p.passage for p in pairs])
    scores = (q_pooled @ p_pooled.T) / temperature
    return float(np.mean(scores.argmax(axis=1) == np.arange(len(pairs))))
