"""Hit-count bucketing and novelty detection over the 64 KiB trace map."""

from __future__ import annotations

import numpy as np

MAP_SIZE = 65536

# counter value -> one-hot bucket bit: 0, 1, 2, 3, 4-7, 8-15, 16-31,
# 32-127, 128-255
_LUT = np.zeros(256, dtype=np.uint8)
_LUT[1] = 1
_LUT[2] = 2
_LUT[3] = 4
_LUT[4:8] = 8
_LUT[8:16] = 16
_LUT[16:32] = 32
_LUT[32:128] = 64
_LUT[128:256] = 128

NO_NEW = 0
NEW_BUCKET = 1
NEW_EDGE = 2


def classify_counts(trace: bytes) -> np.ndarray:
    """Map each raw counter to its one-hot bucket bit."""
    raw = np.frombuffer(trace, dtype=np.uint8)
    return _LUT[raw]


def bucket_for_count(count: int) -> int:
    """Scalar version of the bucket table (for reports and debugging)."""
    return int(_LUT[count])


class VirginMap:
    """Accumulator of bucket bits seen so far (queue or crash map)."""

    def __init__(self):
        self.seen = np.zeros(MAP_SIZE, dtype=np.uint8)

    def has_new_bits(self, bucketed: np.ndarray) -> int:
        """NEW_EDGE if an index lights up for the first time, NEW_BUCKET if
        a known index gains a new bucket, else NO_NEW. Updates the
        accumulator."""
        new = bucketed & ~self.seen
        if not new.any():
            return NO_NEW
        result = NEW_EDGE if (new != 0)[self.seen == 0].any() else NEW_BUCKET
        self.seen |= bucketed
        return result

    def bit_count(self) -> int:
        return int(np.unpackbits(self.seen).sum())

    def edge_count(self) -> int:
        return int((self.seen != 0).sum())
