"""Full synthesis model: embeddings, encoder, and decoder in one container
with stable parameter names for checkpointing and optimization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import nncore as nc
from .embedding import EmbeddingTables, embed_mixed
from .frontend import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    embedding_dim: int = 15
    smrc_channels: int = 128
    smrc_stacks: int = 3
    enc_lstm_hidden: int = 128
    prenet_hidden: int = 128
    prenet_keep_prob: float = 0.5
    attn_lstm_hidden: int = 512
    attn_mixes: int = 10
    dec_lstm_hidden: int = 512
    dec_layers: int = 2
    cell_keep_prob: float = 0.925
    n_mels: int = 80

    def encoder_config(self):
        return enc.EncoderConfig(
            embed_dim=self.embedding_dim,
            channels_per_branch=self.smrc_channels,
            stacks=self.smrc_stacks,
            lstm_hidden=self.enc_lstm_hidden,
        )

    def decoder_config(self):
        return dec.DecoderConfig(
            n_mels=self.n_mels,
            prenet_hidden=self.prenet_hidden,
            prenet_keep_prob=self.prenet_keep_prob,
            attn_lstm_hidden=self.attn_lstm_hidden,
            n_mixes=self.attn_mixes,
            dec_lstm_hidden=self.dec_lstm_hidden,
            dec_layers=self.dec_layers,
            cell_keep_prob=self.cell_keep_prob,
            memory_dim=2 * self.enc_lstm_hidden,
        )


class Model:
    def __init__(self, config, tables, encoder_params, decoder_params):
        self.config = config
        self.tables = tables
        self.encoder = encoder_params
        self.decoder = decoder_params

    @classmethod
    def create(cls, config, rng):
        tables = EmbeddingTables.create(rng, config.embedding_dim, config.vocab_size)
        encoder_params = enc.EncoderParams.create(rng, config.encoder_config())
        decoder_params = dec.DecoderParams.create(rng, config.decoder_config())
        return cls(config, tables, encoder_params, decoder_params)

    def named_params(self):
        out = {
            "embed.char": self.tables.char_table,
            "embed.phone": self.tables.phone_table,
            "embed.mask": self.tables.mask_table,
        }
        out.update(self.encoder.named_params())
        out.update(self.decoder.named_params())
        return out

    def named_stats(self):
        return self.encoder.named_stats()

    def param_list(self):
        named = self.named_params()
        return [named[k] for k in sorted(named)]

    def encode_sequence(self, seq, mode):
        """Frontend sequence -> encoder memory [T, memory_dim]."""
        embedded = embed_mixed(seq, self.tables)
        return enc.encode(embedded, self.encoder, mode).memory

    def generate(self, seq, max_frames, rng, **kwargs):
        """Free-running synthesis of normalized mel frames for one sequence."""
        memory = self.encode_sequence(seq, "eval").detach()
        return dec.generate(memory, self.decoder, max_frames, rng, **kwargs)

    def load_arrays(self, params, stats):
        """Overwrite parameter and running-stat buffers in place."""
        named = self.named_params()
        for name, value in params.items():
            if name not in named:
                raise KeyError(f"unknown parameter {name}")
            if named[name].data.shape != value.shape:
                raise nc.ShapeMismatch(f"{name}: {named[name].data.shape} vs {value.shape}")
            named[name].data[...] = value
        named_stats = self.named_stats()
        for name, value in stats.items():
            if name not in named_stats:
                raise KeyError(f"unknown stat {name}")
            named_stats[name][...] = value
