"""Sequence encoder: stacked multi-scale residual convolutions, then a
bidirectional LSTM.

Each stack runs kernel-size 1/3/5 branches over its input, concatenates the
branch channels, batch-normalizes (time positions act as the batch axis),
applies ReLU, and adds the stack input back through a residual bypass. A
learned 1x1 projection lifts the embeddings to the stack width before the
first stack. The BiLSTM memory is the forward/backward concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nc


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 15
    channels_per_branch: int = 128
    stacks: int = 3
    kernel_sizes: tuple = (1, 3, 5)
    lstm_hidden: int = 128

    @property
    def width(self):
        return self.channels_per_branch * len(self.kernel_sizes)

    @property
    def memory_dim(self):
        return 2 * self.lstm_hidden


@dataclass
class ConvBranch:
    w: nc.Tensor
    b: nc.Tensor

    @classmethod
    def create(cls, rng, kernel, c_in, c_out):
        flat = nc.orthonormal(rng, (kernel * c_in, c_out))
        return cls(nc.param(flat.reshape(kernel, c_in, c_out)), nc.param(np.zeros(c_out)))


@dataclass
class SmrcStack:
    branches: list
    gamma: nc.Tensor
    beta: nc.Tensor
    stats: nc.RunningStats

    @classmethod
    def create(cls, rng, cfg):
        branches = [
            ConvBranch.create(rng, k, cfg.width, cfg.channels_per_branch)
            for k in cfg.kernel_sizes
        ]
        width = cfg.width
        return cls(branches, nc.param(np.ones(width)), nc.param(np.zeros(width)),
                   nc.RunningStats.create(width))


@dataclass
class EncoderParams:
    in_proj_w: nc.Tensor
    in_proj_b: nc.Tensor
    stacks: list
    fwd: nc.LstmParams
    bwd: nc.LstmParams
    config: EncoderConfig = field(default_factory=EncoderConfig)

    @classmethod
    def create(cls, rng, cfg):
        in_w = nc.param(nc.orthonormal(rng, (cfg.embed_dim, cfg.width)))
        in_b = nc.param(np.zeros(cfg.width))
        stacks = [SmrcStack.create(rng, cfg) for _ in range(cfg.stacks)]
        fwd = nc.LstmParams.create(rng, cfg.width, cfg.lstm_hidden)
        bwd = nc.LstmParams.create(rng, cfg.width, cfg.lstm_hidden)
        return cls(in_w, in_b, stacks, fwd, bwd, cfg)

    def named_params(self, prefix="enc"):
        out = {f"{prefix}.in_proj.w": self.in_proj_w, f"{prefix}.in_proj.b": self.in_proj_b}
        for i, stack in enumerate(self.stacks):
            for k, br in zip(self.config.kernel_sizes, stack.branches):
                out[f"{prefix}.stack{i}.conv{k}.w"] = br.w
                out[f"{prefix}.stack{i}.conv{k}.b"] = br.b
            out[f"{prefix}.stack{i}.bn.gamma"] = stack.gamma
            out[f"{prefix}.stack{i}.bn.beta"] = stack.beta
        for name, lstm in (("fwd", self.fwd), ("bwd", self.bwd)):
            out[f"{prefix}.lstm.{name}.wx"] = lstm.wx
            out[f"{prefix}.lstm.{name}.wh"] = lstm.wh
            out[f"{prefix}.lstm.{name}.b"] = lstm.b
        return out

    def named_stats(self, prefix="enc"):
        out = {}
        for i, stack in enumerate(self.stacks):
            out[f"{prefix}.stack{i}.bn.mean"] = stack.stats.mean
            out[f"{prefix}.stack{i}.bn.var"] = stack.stats.var
        return out


@dataclass
class EncoderOutput:
    memory: nc.Tensor

    @property
    def length(self):
        return self.memory.shape[0]

    @property
    def dim(self):
        return self.memory.shape[1]


def smrc_forward(embedded, params, mode):
    """[T, embed_dim] -> [T, width] through the residual conv stacks."""
    h = nc.linear(embedded, params.in_proj_w, params.in_proj_b)
    for stack in params.stacks:
        branches = [nc.conv1d(h, br.w, br.b) for br in stack.branches]
        mixed = nc.concat(branches, axis=1)
        normed = nc.batch_norm(mixed, stack.gamma, stack.beta, stack.stats, mode)
        h = nc.add(nc.relu(normed), h)
    return h


def _run_lstm(rows, params):
    state = nc.LstmState.zeros(1, params.hidden)
    outs = []
    for row in rows:
        h, state = nc.lstm_step(row, state, params)
        outs.append(h)
    return outs


def encode(embedded, params, mode):
    """Full encoder: SMRC then BiLSTM; memory is [T, 2 * lstm_hidden]."""
    h = smrc_forward(embedded, params, mode)
    t = h.shape[0]
    rows = [nc.narrow(h, 0, i, 1) for i in range(t)]
    fwd = _run_lstm(rows, params.fwd)
    bwd = _run_lstm(rows[::-1], params.bwd)[::-1]
    memory = nc.concat(
        [nc.concat(fwd, axis=0), nc.concat(bwd, axis=0)], axis=1
    )
    return EncoderOutput(memory)
