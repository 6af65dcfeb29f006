"""Mask-gated combination of character and phoneme embeddings.

Per position t with symbol id s and mask bit m:

    joint[t] = (1 - m) * char_table[s] + m * phone_table[s]
    final[t] = mask_table[m] + joint[t]

so the mask selects which table a position reads from, and the mask's own
embedding is added on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nc
from .frontend import VOCAB_SIZE


class IdOutOfRange(IndexError):
    def __init__(self, position, value, limit):
        super().__init__(f"symbol id {value} at position {position} >= {limit}")
        self.position = position


@dataclass
class EmbeddingTables:
    char_table: nc.Tensor
    phone_table: nc.Tensor
    mask_table: nc.Tensor

    @classmethod
    def create(cls, rng, dim=15, vocab_size=VOCAB_SIZE):
        scale = 1.0 / np.sqrt(vocab_size)
        return cls(
            nc.param(nc.truncated_normal(rng, (vocab_size, dim), scale)),
            nc.param(nc.truncated_normal(rng, (vocab_size, dim), scale)),
            nc.param(nc.truncated_normal(rng, (2, dim), scale)),
        )

    @property
    def dim(self):
        return self.char_table.shape[1]

    @property
    def vocab_size(self):
        return self.char_table.shape[0]

    def tensors(self):
        return [self.char_table, self.phone_table, self.mask_table]


def embed_mixed(seq, tables):
    """Embed a MixedSequence into a [T, dim] tensor."""
    symbols = seq.symbol_array()
    mask = seq.mask_array()
    limit = tables.vocab_size
    for pos, s in enumerate(symbols):
        if not 0 <= s < limit:
            raise IdOutOfRange(pos, int(s), limit)
    m = mask.astype(np.float64)[:, None]
    joint = nc.add(
        nc.mul(nc.gather_rows(tables.char_table, symbols), nc.tensor(1.0 - m)),
        nc.mul(nc.gather_rows(tables.phone_table, symbols), nc.tensor(m)),
    )
    return nc.add(nc.gather_rows(tables.mask_table, mask), joint)
