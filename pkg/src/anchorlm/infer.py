"""Anchor-based autoregressive generation and continuation scoring.

Generation processes the prefix under anchor masks, reduces the cache
once, then decodes token by token; whenever a generated anchor token has
been processed (its keys/values cached), the cache is reduced again and
the next token starts a new sequence. Discarded entries are exactly the
ones the masks already block for every future query, so reduction leaves
the generated text unchanged.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cache import AnchorKVCache, CacheStats
from .corpus import SegmentedText
from .errors import ContractError
from .masks import TokenFlags, anchor_mask, causal_mask, decode_mask_row
from .model import ModelWeights, forward


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int
    anchor_token_id: int | None = None  # a generated id equal to this is an anchor
    eos_id: int | None = None
    temperature: float | None = None  # None = greedy
    sample_seed: int = 0
    reduction_enabled: bool = True
    protected_upto: int = 0
    collect_logits: bool = False  # keep the logits each token was sampled from

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ContractError("max_new_tokens must be >= 1")
        if self.temperature is not None and self.temperature <= 0:
            raise ContractError("temperature must be positive")


@dataclass
class GenerationResult:
    ids: list[int]
    live_sizes: list[int]  # live cache size when each token was sampled
    stats: CacheStats
    prefix_seconds: float
    decode_seconds: float
    final_cache: AnchorKVCache | None = field(repr=False, default=None)
    sampled_logits: list[np.ndarray] = field(repr=False, default_factory=list)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def _sample(logits_row: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    if cfg.temperature is None:
        return int(np.argmax(logits_row))
    probs = np.exp(_log_softmax(logits_row / cfg.temperature))
    return int(rng.choice(len(probs), p=probs / probs.sum()))


def continuation_rows(
    new_flags: list[TokenFlags], live: list[TokenFlags], ansan: bool
) -> np.ndarray:
    """Mask rows for T new tokens attending into live entries plus each
    other, built row by row with the decoding-time rule."""
    n_live, n_new = len(live), len(new_flags)
    bits = np.zeros((n_new, n_live + n_new), dtype=np.uint8)
    preceding = list(live)
    for t, flags in enumerate(new_flags):
        if ansan:
            bits[t, : n_live + t + 1] = decode_mask_row(flags, preceding)
        else:
            bits[t, : n_live + t + 1] = 1
        preceding.append(flags)
    return bits


def next_seq_index(seg: SegmentedText) -> int:
    """Sequence index for a token appended after this segment."""
    if len(seg) == 0:
        return 0
    return seg.seq_index[-1] + (1 if seg.is_anchor[-1] else 0)


def generate(
    weights: ModelWeights, prefix: SegmentedText, cfg: GenerationConfig
) -> GenerationResult:
    """Decode greedily (or with seeded temperature sampling) under anchor
    masks, reducing the keys/values cache when reduction is enabled."""
    if len(prefix) < 1:
        raise ContractError("prefix must contain at least one token")
    if len(prefix) > weights.config.context_len:
        raise ContractError(
            f"prefix length {len(prefix)} exceeds context_len {weights.config.context_len}"
        )
    prefix.validate()
    rng = np.random.default_rng(cfg.sample_seed)
    cache = AnchorKVCache(protected_upto=cfg.protected_upto)

    t0 = time.perf_counter()
    out = forward(
        weights,
        prefix.ids,
        anchor_mask(prefix),
        None,
        positions=np.arange(len(prefix)),
    )
    prefix_seconds = time.perf_counter() - t0

    prefix_flags = [TokenFlags(a, s) for a, s in zip(prefix.is_anchor, prefix.seq_index)]
    cache.extend_from_forward(
        out.new_keys, out.new_values, list(range(len(prefix))), prefix_flags
    )
    if cfg.reduction_enabled:
        cache.reduction()

    generated = [_sample(out.logits[-1], cfg, rng)]
    live_sizes = [len(cache)]
    sampled_logits = [out.logits[-1].copy()] if cfg.collect_logits else []
    cur_seq = next_seq_index(prefix)
    next_pos = len(prefix)
    decode_seconds = 0.0

    while len(generated) < cfg.max_new_tokens and generated[-1] != cfg.eos_id:
        token = generated[-1]
        flags = TokenFlags(token == cfg.anchor_token_id, cur_seq)
        row = decode_mask_row(flags, cache.live_flags())
        t0 = time.perf_counter()
        out = forward(weights, [token], row, cache.stacked(), positions=[next_pos])
        decode_seconds += time.perf_counter() - t0
        cache.extend_from_forward(out.new_keys, out.new_values, [next_pos], [flags])
        next_pos += 1
        if flags.is_anchor:
            # The anchor's keys/values are cached, so its sequence can now
            # collapse onto it; the next token opens a new sequence.
            if cfg.reduction_enabled:
                cache.reduction()
            cur_seq += 1
        generated.append(_sample(out.logits[-1], cfg, rng))
        live_sizes.append(len(cache))
        if cfg.collect_logits:
            sampled_logits.append(out.logits[-1].copy())

    return GenerationResult(
        ids=generated,
        live_sizes=live_sizes,
        stats=cache.stats,
        prefix_seconds=prefix_seconds,
        decode_seconds=decode_seconds,
        final_cache=cache,
        sampled_logits=sampled_logits,
    )


def score_continuation(
    weights: ModelWeights,
    context: SegmentedText,
    continuation: list[int],
    use_ansan: bool,
) -> float:
    """Sum of log-probabilities of the continuation tokens given the
    context, under anchor masks or plain causal masks.

    Continuation tokens are scored as non-anchor members of the sequence
    that follows the context (a new sequence when the context ends in an
    anchor).
    """
    total = len(context) + len(continuation)
    if total > weights.config.context_len:
        raise ContractError(
            f"context+continuation length {total} exceeds context_len "
            f"{weights.config.context_len}"
        )
    if not continuation:
        return 0.0
    if len(context) == 0:
        raise ContractError("scoring requires a nonempty context")

    seq = next_seq_index(context)
    combined = SegmentedText(
        ids=list(context.ids) + list(continuation),
        is_anchor=list(context.is_anchor) + [False] * len(continuation),
        seq_index=list(context.seq_index) + [seq] * len(continuation),
    )
    mask = anchor_mask(combined) if use_ansan else causal_mask(total)
    out = forward(weights, combined.ids, mask, None, positions=np.arange(total))

    score = 0.0
    for t in range(len(context) - 1, total - 1):
        score += float(_log_softmax(out.logits[t])[combined.ids[t + 1]])
    return score
