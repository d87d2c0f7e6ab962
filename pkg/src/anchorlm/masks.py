"""Attention mask construction: causal and anchor-based.

Anchor-based masking keeps causal attention inside the current sequence
but, across sequences, routes everything through anchors. For query i in
sequence k and key j (j <= i):

  * blocked when neither token is an anchor and j lies in a sequence
    before k (non-anchor history is reachable only via its anchor);
  * blocked when i is an anchor and j lies in a sequence before k
    (an anchor aggregates its own sequence only);
  * allowed otherwise.

Masks are dense 0/1 matrices; at this scale exact testability beats
sparse storage. Full L x L matrices serve training, single rows serve
cached decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SegmentedText


@dataclass(frozen=True)
class TokenFlags:
    """Anchor flag and sequence index of one token, as masking sees it."""

    is_anchor: bool
    seq_index: int


def causal_mask(length: int) -> np.ndarray:
    """Lower-triangular mask: bit[i][j] = 1 iff i >= j."""
    return np.tril(np.ones((length, length), dtype=np.uint8))


def anchor_mask(seg: SegmentedText) -> np.ndarray:
    """Anchor-based mask over one segmented block (see module docstring)."""
    anchors = np.asarray(seg.is_anchor, dtype=bool)
    seqs = np.asarray(seg.seq_index, dtype=np.int64)
    earlier_seq = seqs[None, :] < seqs[:, None]  # key's sequence precedes query's
    blocked = (~anchors[:, None] & ~anchors[None, :] & earlier_seq) | (
        anchors[:, None] & earlier_seq
    )
    return (causal_mask(len(seg)).astype(bool) & ~blocked).astype(np.uint8)


def decode_mask_row(current: TokenFlags, live_entries: list[TokenFlags]) -> np.ndarray:
    """One decoding-time mask row: bits over live cache entries plus self.

    Entries must be in original position order and precede the current
    token, so the causal condition holds for every entry; only the two
    anchor cases can block. The trailing self bit is always 1.
    """
    bits = np.ones(len(live_entries) + 1, dtype=np.uint8)
    for j, entry in enumerate(live_entries):
        if entry.seq_index < current.seq_index:
            if current.is_anchor or not entry.is_anchor:
                bits[j] = 0
    return bits


def dump_mask(bits: np.ndarray) -> str:
    """Serialize a mask to a text grid of '0'/'1', one row per line."""
    grid = np.atleast_2d(bits)
    return "\n".join("".join(str(int(b)) for b in row) for row in grid)


def parse_mask(text: str) -> np.ndarray:
    """Inverse of dump_mask."""
    rows = [line for line in text.splitlines() if line]
    return np.array([[int(c) for c in row] for row in rows], dtype=np.uint8)
