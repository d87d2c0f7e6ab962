"""Anchor-aware keys/values cache with the reduction rule.

Reduction keeps every anchor, everything at or after the last anchor's
position, and an optional protected prefix; all other live entries are
discarded. Positions are absolute and never reused, so rotary encodings
stay valid after discards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .masks import TokenFlags


@dataclass
class CacheEntry:
    position: int  # absolute token index, monotone across appends
    is_anchor: bool
    seq_index: int
    keys: np.ndarray  # (n_layers, n_heads, head_dim), rotary applied
    values: np.ndarray  # (n_layers, n_heads, head_dim)


@dataclass
class CacheStats:
    peak_live_count: int = 0
    total_appends: int = 0
    total_discards: int = 0


@dataclass
class AnchorKVCache:
    """Ordered live cache entries plus lifetime occupancy statistics.

    Entries with position < protected_upto are exempt from discard (used
    to keep full attention over a retained region, e.g. a source text).
    """

    protected_upto: int = 0
    entries: list[CacheEntry] = field(default_factory=list)
    stats: CacheStats = field(default_factory=CacheStats)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: CacheEntry) -> None:
        if self.entries and entry.position <= self.entries[-1].position:
            raise ContractError(
                f"cache positions must be strictly increasing: "
                f"{entry.position} after {self.entries[-1].position}"
            )
        self.entries.append(entry)
        self.stats.total_appends += 1
        self.stats.peak_live_count = max(self.stats.peak_live_count, len(self.entries))

    def reduction(self) -> None:
        """Discard non-anchor, non-protected entries before the last anchor."""
        last_anchor_pos = None
        for entry in reversed(self.entries):
            if entry.is_anchor and entry.position >= self.protected_upto:
                last_anchor_pos = entry.position
                break
        if last_anchor_pos is None:
            return
        kept = [
            e
            for e in self.entries
            if e.is_anchor or e.position >= last_anchor_pos or e.position < self.protected_upto
        ]
        self.stats.total_discards += len(self.entries) - len(kept)
        self.entries = kept

    def live_flags(self) -> list[TokenFlags]:
        return [TokenFlags(e.is_anchor, e.seq_index) for e in self.entries]

    def live_positions(self) -> list[int]:
        return [e.position for e in self.entries]

    def reduction_metric(self) -> float:
        """Fraction of all entries ever appended that have been discarded."""
        if self.stats.total_appends == 0:
            raise UndefinedMetricError("cache reduction is undefined before any append")
        return self.stats.total_discards / self.stats.total_appends

    def stacked(self) -> list[tuple[np.ndarray, np.ndarray]] | None:
        """Per-layer (K, V) arrays of shape (n_heads, live, head_dim)."""
        if not self.entries:
            return None
        n_layers = self.entries[0].keys.shape[0]
        keys = np.stack([e.keys for e in self.entries], axis=2)
        values = np.stack([e.values for e in self.entries], axis=2)
        return [(keys[li], values[li]) for li in range(n_layers)]

    def clone(self) -> "AnchorKVCache":
        """Independent copy sharing entry arrays (entries are immutable);
        the clone starts with fresh statistics for its own appends."""
        c = AnchorKVCache(protected_upto=self.protected_upto)
        c.entries = list(self.entries)
        c.stats = CacheStats(peak_live_count=len(self.entries))
        return c

    def extend_from_forward(
        self,
        new_keys: list[np.ndarray],
        new_values: list[np.ndarray],
        positions: list[int],
        flags: list[TokenFlags],
    ) -> None:
        """Append one entry per processed token from a forward output."""
        stacked_k = np.stack(new_keys, axis=0)  # (n_layers, n_heads, T, head_dim)
        stacked_v = np.stack(new_values, axis=0)
        for t, (pos, flag) in enumerate(zip(positions, flags)):
            self.append(
                CacheEntry(
                    position=pos,
                    is_anchor=flag.is_anchor,
                    seq_index=flag.seq_index,
                    keys=np.ascontiguousarray(stacked_k[:, :, t, :]),
                    values=np.ascontiguousarray(stacked_v[:, :, t, :]),
                )
            )


def cache_reduction_metric(cache: AnchorKVCache) -> float:
    return cache.reduction_metric()
