"""Mask position selection, corruption, and masking statistics.

Selection is a pure function of explicitly injected uniform draws: each
maskable position gets a draw p_r in [0,1), weight-biased masking adds the
min-max-rescaled term weight, and the top-rate fraction of positions by
total score is masked. Randomness enters only through per-sequence
generators derived from (master_seed, epoch, ordinal), so streams are
byte-identical no matter how work is distributed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import MASK, SPECIAL_TOKENS, TokenSequence
from .errors import (
    ContractViolationError,
    EmptyInputError,
    InvalidConfigError,
    InvalidInputError,
)

IGNORE_LABEL = -100

STRATEGIES = ("random", "rom")


@dataclass(frozen=True)
class MaskingPolicy:
    """Masking rate, strategy, and the corruption mix for selected positions."""

    rate: float = 0.15
    strategy: str = "random"
    corruption: tuple[float, float, float] = (0.8, 0.1, 0.1)  # [MASK] / random token / keep
    dynamic: bool = True

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise InvalidConfigError(f"rate must be in (0, 1), got {self.rate}")
        if self.strategy not in STRATEGIES:
            raise InvalidConfigError(f"strategy must be one of {STRATEGIES}")
        if abs(sum(self.corruption) - 1.0) > 1e-9 or any(c < 0 for c in self.corruption):
            raise InvalidConfigError(f"corruption mix must be non-negative and sum to 1")


@dataclass(frozen=True)
class MaskedExample:
    """Corrupted input ids plus labels at the masked positions."""

    seq_id: str
    input_ids: list[int]
    labels: list[int]
    positions: list[int]


def mask_count(n_maskable: int, rate: float) -> int:
    """Number of positions to mask: max(1, round-half-up(rate * n))."""
    return max(1, int(math.floor(rate * n_maskable + 0.5)))


def select_positions_random(
    p_r: Sequence[float], maskable: Sequence[int], rate: float
) -> list[int]:
    """Positions with the largest uniform draws, ties to the lower index."""
    if len(maskable) == 0:
        raise EmptyInputError("no maskable positions")
    if len(p_r) != len(maskable):
        raise ContractViolationError(
            f"{len(p_r)} draws for {len(maskable)} maskable positions"
        )
    return _top_k_by_score(np.asarray(p_r, dtype=np.float64), maskable, rate)


def select_positions_rom(
    p_r: Sequence[float],
    p_w_rescaled: Sequence[float],
    maskable: Sequence[int],
    rate: float,
) -> list[int]:
    """Positions with the largest p_r + rescaled weight, ties to lower index.

    With all-zero (or all-equal, hence rescaled-to-zero) weights this
    reduces exactly to random selection on the same draws.
    """
    if len(maskable) == 0:
        raise EmptyInputError("no maskable positions")
    if not (len(p_r) == len(p_w_rescaled) == len(maskable)):
        raise ContractViolationError("draws, weights and maskable positions must align")
    w = np.asarray(p_w_rescaled, dtype=np.float64)
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise InvalidInputError("rescaled weights must lie in [0, 1]")
    scores = np.asarray(p_r, dtype=np.float64) + w
    return _top_k_by_score(scores, maskable, rate)


def _top_k_by_score(scores: np.ndarray, maskable: Sequence[int], rate: float) -> list[int]:
    k = mask_count(len(maskable), rate)
    order = sorted(range(len(maskable)), key=lambda i: (-scores[i], maskable[i]))
    return sorted(maskable[i] for i in order[:k])


def apply_corruption(
    seq: TokenSequence,
    positions: Iterable[int],
    policy: MaskingPolicy,
    rng: np.random.Generator,
    vocab_size: int,
) -> MaskedExample:
    """Corrupt the selected positions and record the original ids as labels.

    Per position: with probability mix[0] replace by [MASK], mix[1] by a
    uniformly random non-special vocab id, mix[2] keep unchanged. Labels
    hold the original id at masked positions and IGNORE_LABEL elsewhere.
    """
    positions = sorted(set(positions))
    input_ids = list(seq.token_ids)
    labels = [IGNORE_LABEL] * len(seq)
    n_specials = len(SPECIAL_TOKENS)
    for pos in positions:
        if seq.is_special[pos]:
            raise ContractViolationError(f"position {pos} is a special token")
        labels[pos] = seq.token_ids[pos]
        u = rng.random()
        if u < policy.corruption[0]:
            input_ids[pos] = MASK
        elif u < policy.corruption[0] + policy.corruption[1]:
            input_ids[pos] = int(rng.integers(n_specials, vocab_size))
        # else: keep the original token
    return MaskedExample(
        seq_id=seq.seq_id, input_ids=input_ids, labels=labels, positions=positions
    )


def sequence_rng(master_seed: int, epoch: int, ordinal: int) -> np.random.Generator:
    """Per-sequence generator derived from (master_seed, epoch, ordinal).

    This derivation rule is the determinism contract: draw streams depend
    only on these three integers, never on worker layout or batch shape.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((master_seed, epoch, ordinal))))


def mask_sequence(
    seq: TokenSequence,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    vocab_size: int,
    p_w_rescaled: Sequence[float] | None = None,
) -> MaskedExample:
    """Draw p_r, select positions per the policy strategy, and corrupt.

    The generator is consumed in a fixed order (selection draws first,
    then corruption draws) so a given rng yields one well-defined example.
    """
    maskable = seq.maskable_positions()
    if not maskable:
        raise EmptyInputError(f"sequence {seq.seq_id!r} has no maskable tokens")
    p_r = rng.random(len(maskable))
    if policy.strategy == "rom":
        if p_w_rescaled is None:
            raise ContractViolationError(
                f"sequence {seq.seq_id!r}: rom strategy requires rescaled weights"
            )
        positions = select_positions_rom(p_r, p_w_rescaled, maskable, policy.rate)
    else:
        positions = select_positions_random(p_r, maskable, policy.rate)
    return apply_corruption(seq, positions, policy, rng, vocab_size)


def masking_statistics(
    examples: Iterable[MaskedExample],
    flags: Mapping[str, Sequence[bool]],
    strategy: str = "random",
) -> dict:
    """Fraction of masked positions that are stop words or punctuation.

    Counting is exact (integer/rational arithmetic); the reported fraction
    is the rational value converted to float at the end.
    """
    masked_total = 0
    flagged = 0
    for ex in examples:
        seq_flags = flags.get(ex.seq_id)
        if seq_flags is None:
            raise ContractViolationError(f"no flags for sequence {ex.seq_id!r}")
        for pos in ex.positions:
            if pos >= len(seq_flags):
                raise ContractViolationError(
                    f"sequence {ex.seq_id!r}: masked position {pos} beyond flags"
                )
            masked_total += 1
            if seq_flags[pos]:
                flagged += 1
    if masked_total == 0:
        raise EmptyInputError("no masked positions in stream")
    fraction = Fraction(flagged, masked_total)
    return {
        "strategy": strategy,
        "masked_total": masked_total,
        "stop_punct_masked": flagged,
        "fraction": float(fraction),
    }
