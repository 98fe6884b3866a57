"""Miniature transformer encoder with analytic gradients, in plain numpy.

Post-layer-norm blocks (attn -> add -> LN -> FFN -> add -> LN) with a
tanh-approximation GELU, learned position embeddings, and an untied MLM
projection. Every forward keeps the intermediates needed for an exact
manual backward pass; `check64` precision exists so gradients can be
verified against central finite differences at tight tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import TokenSequence
from .errors import (
    EmptyInputError,
    InvalidConfigError,
    InvalidInputError,
    NumericError,
)
from .masking import IGNORE_LABEL, MaskedExample

LN_EPS = 1e-5
ATTN_MASK_BIAS = -1e9
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_INIT_STREAM = 0x1A17  # fixed sub-stream tag for parameter initialization

PRECISIONS = {"fast32": np.float32, "check64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    hidden: int
    ffn: int
    vocab_size: int
    max_seq_len: int
    dropout: float = 0.0
    precision: str = "fast32"

    def __post_init__(self):
        if self.layers < 1:
            raise InvalidConfigError("layers must be >= 1")
        if self.hidden % self.heads != 0:
            raise InvalidConfigError(
                f"heads ({self.heads}) must divide hidden ({self.hidden})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError("dropout must be in [0, 1)")
        if self.precision not in PRECISIONS:
            raise InvalidConfigError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(PRECISIONS[self.precision])

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; fixes tensor order everywhere."""
    d, f, v, s = config.hidden, config.ffn, config.vocab_size, config.max_seq_len
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
        ("pos_emb", (s, d)),
    ]
    for i in range(config.layers):
        p = f"layers.{i}"
        shapes += [
            (f"{p}.attn.wq", (d, d)),
            (f"{p}.attn.bq", (d,)),
            (f"{p}.attn.wk", (d, d)),
            (f"{p}.attn.bk", (d,)),
            (f"{p}.attn.wv", (d, d)),
            (f"{p}.attn.bv", (d,)),
            (f"{p}.attn.wo", (d, d)),
            (f"{p}.attn.bo", (d,)),
            (f"{p}.ln1.gamma", (d,)),
            (f"{p}.ln1.beta", (d,)),
            (f"{p}.ffn.w1", (d, f)),
            (f"{p}.ffn.b1", (f,)),
            (f"{p}.ffn.w2", (f, d)),
            (f"{p}.ffn.b2", (d,)),
            (f"{p}.ln2.gamma", (d,)),
            (f"{p}.ln2.beta", (d,)),
        ]
    shapes += [("mlm.w", (d, v)), ("mlm.b", (v,))]
    return shapes


@dataclass
class ModelParameters:
    """All learnable tensors, keyed by canonical name."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def validate(self, config: ModelConfig) -> None:
        expected = dict(parameter_shapes(config))
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise InvalidConfigError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise InvalidConfigError(
                    f"{name}: shape {self.tensors[name].shape}, expected {shape}"
                )

    def require_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericError(f"non-finite values in parameter {name}")

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: v.copy() for k, v in self.tensors.items()})


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    """normal(0, 0.02) weights, zero biases/betas, unit layer-norm gammas."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _INIT_STREAM))))
    dtype = config.dtype
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bq", "bk", "bv", "bo", "b1", "b2", "b", "beta"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif leaf == "gamma":
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
    return ModelParameters(tensors)


@dataclass
class ForwardTrace:
    """Per-layer attention maps plus final hidden states of one forward."""

    final_hidden: np.ndarray  # (B, n, d)
    attentions: list[np.ndarray]  # per layer: (B, H, n, n)
    attn_mask: np.ndarray  # (B, n) bool, True at real tokens
    pooled: np.ndarray  # (B, d), the [CLS] rows


@dataclass
class _LayerCache:
    x_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray  # merged heads, (B, n, d)
    attn_drop_mask: np.ndarray | None
    res1: np.ndarray
    ln1_xhat: np.ndarray
    ln1_inv_std: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    h: np.ndarray
    ffn_drop_mask: np.ndarray | None
    res2: np.ndarray
    ln2_xhat: np.ndarray
    ln2_inv_std: np.ndarray


@dataclass
class _Cache:
    ids: np.ndarray
    attn_mask: np.ndarray
    layers: list[_LayerCache] = field(default_factory=list)
    final_hidden: np.ndarray | None = None


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * GELU_C * (1.0 + 3.0 * GELU_A * x**2)


def _layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, xhat, inv_std

def _layernorm_backward(d_out, xhat, inv_std, gamma):
    d_xhat = d_out * gamma
    d_gamma = (d_out * xhat).sum(axis=tuple(range(d_out.ndim - 1)))
    d_beta = d_out.sum(axis=tuple(range(d_out.ndim - 1)))
    m1 = d_xhat.mean(axis=-1, keepdims=True)
    m2 = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (d_xhat - m1 - xhat * m2)
    return dx, d_gamma, d_beta


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _forward(
    params: ModelParameters,
    config: ModelConfig,
    ids: np.ndarray,
    attn_mask: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> _Cache:
    dtype = config.dtype
    b, n = ids.shape
    if n > config.max_seq_len:
        raise InvalidInputError(f"sequence length {n} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InvalidInputError("token id out of vocabulary range")
    drop = config.dropout if train else 0.0
    if drop > 0.0 and rng is None:
        raise InvalidConfigError("dropout > 0 in training mode requires an rng")

    cache = _Cache(ids=ids, attn_mask=attn_mask)
    x = params["tok_emb"][ids].astype(dtype) + params["pos_emb"][:n][None, :, :].astype(dtype)
    # additive bias: padded keys get a large negative score before softmax
    key_bias = np.where(attn_mask[:, None, None, :], 0.0, ATTN_MASK_BIAS).astype(dtype)
    scale = 1.0 / math.sqrt(config.head_dim)

    for i in range(config.layers):
        p = f"layers.{i}"
        q = _split_heads(x @ params[f"{p}.attn.wq"] + params[f"{p}.attn.bq"], config.heads)
        k = _split_heads(x @ params[f"{p}.attn.wk"] + params[f"{p}.attn.bk"], config.heads)
        v = _split_heads(x @ params[f"{p}.attn.wv"] + params[f"{p}.attn.bv"], config.heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_bias
        probs = _softmax_last(scores)
        ctx = _merge_heads(probs @ v)
        attn_out = ctx @ params[f"{p}.attn.wo"] + params[f"{p}.attn.bo"]
        attn_drop_mask = None
        if drop > 0.0:
            attn_drop_mask = ((rng.random(attn_out.shape) >= drop) / (1.0 - drop)).astype(dtype)
            attn_out = attn_out * attn_drop_mask
        res1 = x + attn_out
        y, ln1_xhat, ln1_inv_std = _layernorm(
            res1, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"]
        )
        z1 = y @ params[f"{p}.ffn.w1"] + params[f"{p}.ffn.b1"]
        h = _gelu(z1)
        ffn_out = h @ params[f"{p}.ffn.w2"] + params[f"{p}.ffn.b2"]
        ffn_drop_mask = None
        if drop > 0.0:
            ffn_drop_mask = ((rng.random(ffn_out.shape) >= drop) / (1.0 - drop)).astype(dtype)
            ffn_out = ffn_out * ffn_drop_mask
        res2 = y + ffn_out
        x_out, ln2_xhat, ln2_inv_std = _layernorm(
            res2, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"]
        )
        cache.layers.append(
            _LayerCache(
                x_in=x, q=q, k=k, v=v, probs=probs, ctx=ctx,
                attn_drop_mask=attn_drop_mask, res1=res1,
                ln1_xhat=ln1_xhat, ln1_inv_std=ln1_inv_std, y=y, z1=z1, h=h,
                ffn_drop_mask=ffn_drop_mask, res2=res2,
                ln2_xhat=ln2_xhat, ln2_inv_std=ln2_inv_std,
            )
        )
        x = x_out

    cache.final_hidden = x
    return cache


def _backward(
    params: ModelParameters,
    config: ModelConfig,
    cache: _Cache,
    d_hidden: np.ndarray,
    d_logits: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients for every parameter given upstream gradients.

    d_hidden is the gradient at the final hidden states; d_logits, when
    given, additionally routes through the MLM projection.
    """
    dtype = config.dtype
    grads = {name: np.zeros(shape, dtype=dtype) for name, shape in parameter_shapes(config)}
    h_final = cache.final_hidden
    b, n, d = h_final.shape

    dx = d_hidden.astype(dtype).copy()
    if d_logits is not None:
        flat_h = h_final.reshape(-1, d)
        flat_dl = d_logits.reshape(-1, config.vocab_size).astype(dtype)
        grads["mlm.w"] += flat_h.T @ flat_dl
        grads["mlm.b"] += flat_dl.sum(axis=0)
        dx += (flat_dl @ params["mlm.w"].T).reshape(b, n, d)

    scale = 1.0 / math.sqrt(config.head_dim)
    for i in reversed(range(config.layers)):
        p = f"layers.{i}"
        lc = cache.layers[i]

        d_res2, d_g2, d_b2 = _layernorm_backward(
            dx, lc.ln2_xhat, lc.ln2_inv_std, params[f"{p}.ln2.gamma"]
        )
        grads[f"{p}.ln2.gamma"] += d_g2
        grads[f"{p}.ln2.beta"] += d_b2

        d_ffn_out = d_res2
        if lc.ffn_drop_mask is not None:
            d_ffn_out = d_ffn_out * lc.ffn_drop_mask
        flat_h = lc.h.reshape(-1, config.ffn)
        flat_d = d_ffn_out.reshape(-1, d)
        grads[f"{p}.ffn.w2"] += flat_h.T @ flat_d
        grads[f"{p}.ffn.b2"] += flat_d.sum(axis=0)
        d_h = d_ffn_out @ params[f"{p}.ffn.w2"].T
        d_z1 = d_h * _gelu_grad(lc.z1)
        flat_y = lc.y.reshape(-1, d)
        flat_dz1 = d_z1.reshape(-1, config.ffn)
        grads[f"{p}.ffn.w1"] += flat_y.T @ flat_dz1
        grads[f"{p}.ffn.b1"] += flat_dz1.sum(axis=0)
        d_y = d_res2 + d_z1 @ params[f"{p}.ffn.w1"].T

        d_res1, d_g1, d_b1 = _layernorm_backward(
            d_y, lc.ln1_xhat, lc.ln1_inv_std, params[f"{p}.ln1.gamma"]
        )
        grads[f"{p}.ln1.gamma"] += d_g1
        grads[f"{p}.ln1.beta"] += d_b1

        d_attn_out = d_res1
        if lc.attn_drop_mask is not None:
            d_attn_out = d_attn_out * lc.attn_drop_mask
        flat_ctx = lc.ctx.reshape(-1, d)
        flat_da = d_attn_out.reshape(-1, d)
        grads[f"{p}.attn.wo"] += flat_ctx.T @ flat_da
        grads[f"{p}.attn.bo"] += flat_da.sum(axis=0)
        d_ctx = _split_heads(d_attn_out @ params[f"{p}.attn.wo"].T, config.heads)

        d_probs = d_ctx @ lc.v.transpose(0, 1, 3, 2)
        d_v = lc.probs.transpose(0, 1, 3, 2) @ d_ctx
        d_scores = lc.probs * (d_probs - (d_probs * lc.probs).sum(axis=-1, keepdims=True))
        d_q = (d_scores @ lc.k) * scale
        d_k = (d_scores.transpose(0, 1, 3, 2) @ lc.q) * scale

        d_x = d_res1.copy()
        x_flat = lc.x_in.reshape(-1, d)
        for name, dm in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
            merged = _merge_heads(dm).reshape(-1, d)
            grads[f"{p}.attn.{name}"] += x_flat.T @ merged
            grads[f"{p}.attn.b{name[1]}"] += merged.sum(axis=0)
            d_x += (merged @ params[f"{p}.attn.{name}"].T).reshape(b, n, d)
        dx = d_x

    np.add.at(grads["tok_emb"], cache.ids, dx)
    grads["pos_emb"][:n] += dx.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Public operations


def batch_arrays(
    examples: Sequence[MaskedExample], pad_id: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack masked examples into padded (ids, attn_mask, labels) arrays."""
    if len(examples) == 0:
        raise EmptyInputError("empty batch")
    n = max(len(ex.input_ids) for ex in examples)
    ids = np.full((len(examples), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), n), dtype=bool)
    labels = np.full((len(examples), n), IGNORE_LABEL, dtype=np.int64)
    for r, ex in enumerate(examples):
        m = len(ex.input_ids)
        ids[r, :m] = ex.input_ids
        mask[r, :m] = True
        labels[r, :m] = ex.labels
    return ids, mask, labels


def forward_mlm(
    params: ModelParameters, config: ModelConfig, batch: Sequence[MaskedExample]
) -> tuple[np.ndarray, ForwardTrace]:
    """Full-vocabulary logits at every position, plus the attention trace."""
    params.require_finite()
    ids, mask, _ = batch_arrays(batch)
    cache = _forward(params, config, ids, mask)
    logits = cache.final_hidden @ params["mlm.w"] + params["mlm.b"]
    trace = ForwardTrace(
        final_hidden=cache.final_hidden,
        attentions=[lc.probs for lc in cache.layers],
        attn_mask=mask,
        pooled=cache.final_hidden[:, 0, :],
    )
    return logits, trace


def mlm_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over the masked positions only."""
    loss, _ = mlm_loss_and_grad(logits, labels)
    return loss


def mlm_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss plus its gradient w.r.t. the logits (zero at ignored positions)."""
    masked = labels != IGNORE_LABEL
    m = int(masked.sum())
    if m == 0:
        raise EmptyInputError("no masked positions in batch")
    lg = logits.astype(np.float64, copy=False)
    z = lg - lg.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.nonzero(masked)
    gold = labels[rows]
    loss = -log_probs[rows[0], rows[1], gold].mean()
    d_logits = np.zeros_like(lg)
    probs = np.exp(log_probs)
    d_logits[rows] = probs[rows]
    d_logits[rows[0], rows[1], gold] -= 1.0
    d_logits /= m
    return float(loss), d_logits


def compute_gradients(
    params: ModelParameters, config: ModelConfig, batch: Sequence[MaskedExample]
) -> tuple[float, dict[str, np.ndarray]]:
    """Analytic gradients of the mean masked cross-entropy for one batch."""
    params.require_finite()
    ids, mask, labels = batch_arrays(batch)
    cache = _forward(params, config, ids, mask)
    logits = cache.final_hidden @ params["mlm.w"] + params["mlm.b"]
    loss, d_logits = mlm_loss_and_grad(logits, labels)
    grads = _backward(
        params, config, cache, np.zeros_like(cache.final_hidden), d_logits=d_logits
    )
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def cls_attention_distribution(
    trace: ForwardTrace, is_special: Sequence[bool], batch_index: int = 0
) -> np.ndarray:
    """Head-averaged last-layer [CLS] attention over non-special tokens.

    Entries at special or padded positions are dropped and the remainder
    renormalized to sum 1.
    """
    last = trace.attentions[-1][batch_index]  # (H, n, n)
    cls_row = last[:, 0, :].mean(axis=0)  # (n,)
    real = trace.attn_mask[batch_index]
    keep = [
        i
        for i in range(cls_row.shape[0])
        if real[i] and i < len(is_special) and not is_special[i]
    ]
    if not keep:
        raise EmptyInputError("no non-special positions to attend to")
    a = cls_row[keep]
    total = a.sum()
    if total <= 0.0:
        raise NumericError("attention mass over content tokens is zero")
    return a / total


def encode_text(
    params: ModelParameters, config: ModelConfig, seq: TokenSequence
) -> np.ndarray:
    """Final-layer [CLS] hidden state as the pooled text vector."""
    params.require_finite()
    ids = np.asarray([seq.token_ids], dtype=np.int64)
    mask = np.ones_like(ids, dtype=bool)
    cache = _forward(params, config, ids, mask)
    return cache.final_hidden[0, 0, :].copy()
