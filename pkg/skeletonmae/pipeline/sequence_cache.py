"""
Sequence Cache
LRU cache of prepared skeleton sequences keyed by dataset record index
"""

from collections import OrderedDict
from typing import Any, Dict, Hashable, Optional
import logging

from .skeleton import SkeletonSequence

logger = logging.getLogger(__name__)


class SequenceCache:
    """
    Bounded store for dataset accessors:
    - least recently used record is dropped first
    - hits, misses and evictions are counted; pretrain and finetune reports include them
    """

    def __init__(self, max_size: int = 4096):
        """
        Args:
            max_size: Prepared sequences to hold; 0 turns caching off
        """
        self.max_size = max_size
        self.entries: "OrderedDict[Hashable, SkeletonSequence]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

        logger.debug(f"Sequence cache ready (max_size={max_size})")

    def get(self, record: Hashable) -> Optional[SkeletonSequence]:
        """Prepared sequence for `record`, or None on a miss."""
        sequence = self.entries.get(record)
        if sequence is None:
            self.misses += 1
            return None
        self.entries.move_to_end(record)
        self.hits += 1
        return sequence

    def set(self, record: Hashable, sequence: SkeletonSequence) -> None:
        if self.max_size <= 0:
            return
        self.entries[record] = sequence
        self.entries.move_to_end(record)
        while len(self.entries) > self.max_size:
            dropped, _ = self.entries.popitem(last=False)
            self.evictions += 1
            logger.debug(f"Evicted prepared record {dropped}")

    def __contains__(self, record: Hashable) -> bool:
        return record in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        dropped = len(self.entries)
        self.entries.clear()
        logger.debug(f"Sequence cache emptied ({dropped} records)")

    def get_hit_rate(self) -> float:
        """Hit percentage over all lookups so far"""
        lookups = self.hits + self.misses
        return 100.0 * self.hits / lookups if lookups else 0.0

    def get_statistics(self) -> Dict[str, Any]:
        return {
            'lookups': self.hits + self.misses,
            'hits': self.hits,
            'misses': self.misses,
            'hit_rate': round(self.get_hit_rate(), 2),
            'evictions': self.evictions,
            'size': len(self.entries),
            'max_size': self.max_size,
        }
