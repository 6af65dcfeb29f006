"""Autoregressive mel decoder.

Every audio frame entering the network passes through a two-layer linear
pre-net whose dropout stays active at inference as well as training, so all
downstream consumers (attention included) see corrupted audio. Alignment
uses unnormalized Gaussian-mixture attention whose component means advance
by softplus of the predicted step, which keeps them strictly increasing.
Two decode LSTMs with cell dropout follow, wired with skip connections:
layer 1 sees [prenet; context], layer 2 sees [prenet; context; h1], and the
final hidden state alone is projected to the next 80-dim frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nc


class EmptyMemory(ValueError):
    pass


class NonFiniteFrame(ArithmeticError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    n_mels: int = 80
    prenet_hidden: int = 128
    prenet_keep_prob: float = 0.5
    attn_lstm_hidden: int = 512
    n_mixes: int = 10
    dec_lstm_hidden: int = 512
    dec_layers: int = 2
    cell_keep_prob: float = 0.925
    memory_dim: int = 256


@dataclass
class DecoderParams:
    prenet_w1: nc.Tensor
    prenet_b1: nc.Tensor
    prenet_w2: nc.Tensor
    prenet_b2: nc.Tensor
    attn_lstm: nc.LstmParams
    attn_proj_w: nc.Tensor
    attn_proj_b: nc.Tensor
    dec_lstms: list
    out_w: nc.Tensor
    out_b: nc.Tensor
    config: DecoderConfig = field(default_factory=DecoderConfig)

    @classmethod
    def create(cls, rng, cfg):
        ph, m = cfg.prenet_hidden, cfg.memory_dim
        prenet_w1 = nc.param(nc.orthonormal(rng, (cfg.n_mels, ph)))
        prenet_w2 = nc.param(nc.orthonormal(rng, (ph, ph)))
        attn_lstm = nc.LstmParams.create(rng, ph + m, cfg.attn_lstm_hidden)
        attn_proj_w = nc.param(
            nc.truncated_normal(rng, (cfg.attn_lstm_hidden, 3 * cfg.n_mixes), 0.075)
        )
        dec_lstms = [
            nc.LstmParams.create(rng, ph + m, cfg.dec_lstm_hidden),
        ]
        for _ in range(cfg.dec_layers - 1):
            dec_lstms.append(
                nc.LstmParams.create(rng, ph + m + cfg.dec_lstm_hidden, cfg.dec_lstm_hidden)
            )
        out_w = nc.param(nc.truncated_normal(rng, (cfg.dec_lstm_hidden, cfg.n_mels), 0.075))
        return cls(
            prenet_w1, nc.param(np.zeros(ph)), prenet_w2, nc.param(np.zeros(ph)),
            attn_lstm, attn_proj_w, nc.param(np.zeros(3 * cfg.n_mixes)),
            dec_lstms, out_w, nc.param(np.zeros(cfg.n_mels)), cfg,
        )

    def named_params(self, prefix="dec"):
        out = {
            f"{prefix}.prenet.w1": self.prenet_w1, f"{prefix}.prenet.b1": self.prenet_b1,
            f"{prefix}.prenet.w2": self.prenet_w2, f"{prefix}.prenet.b2": self.prenet_b2,
            f"{prefix}.attn.proj.w": self.attn_proj_w, f"{prefix}.attn.proj.b": self.attn_proj_b,
            f"{prefix}.out.w": self.out_w, f"{prefix}.out.b": self.out_b,
        }
        for name, lstm in [("attn.lstm", self.attn_lstm)] + [
            (f"lstm{i}", p) for i, p in enumerate(self.dec_lstms)
        ]:
            out[f"{prefix}.{name}.wx"] = lstm.wx
            out[f"{prefix}.{name}.wh"] = lstm.wh
            out[f"{prefix}.{name}.b"] = lstm.b
        return out


@dataclass
class AttentionState:
    kappa: nc.Tensor
    alpha: nc.Tensor
    beta: nc.Tensor
    context: nc.Tensor
    lstm: nc.LstmState

    @classmethod
    def zeros(cls, batch, cfg):
        k = cfg.n_mixes
        return cls(
            nc.tensor(np.zeros((batch, k))),
            nc.tensor(np.zeros((batch, k))),
            nc.tensor(np.zeros((batch, k))),
            nc.tensor(np.zeros((batch, cfg.memory_dim))),
            nc.LstmState.zeros(batch, cfg.attn_lstm_hidden),
        )

    def detach(self):
        return AttentionState(
            self.kappa.detach(), self.alpha.detach(), self.beta.detach(),
            self.context.detach(), self.lstm.detach(),
        )


@dataclass
class DecoderState:
    attention: AttentionState
    layer_states: list
    prev_frame: nc.Tensor

    @classmethod
    def zeros(cls, batch, cfg):
        return cls(
            AttentionState.zeros(batch, cfg),
            [nc.LstmState.zeros(batch, cfg.dec_lstm_hidden) for _ in range(cfg.dec_layers)],
            nc.tensor(np.zeros((batch, cfg.n_mels))),
        )

    def detach(self):
        return DecoderState(
            self.attention.detach(),
            [s.detach() for s in self.layer_states],
            self.prev_frame.detach(),
        )


def prenet(frame, params, rng):
    """Two linear layers, each followed by dropout that is active in both
    training and inference (noisy teacher forcing)."""
    keep = params.config.prenet_keep_prob
    h = nc.linear(frame, params.prenet_w1, params.prenet_b1)
    h = nc.dropout(h, keep, rng, active=True)
    h = nc.linear(h, params.prenet_w2, params.prenet_b2)
    return nc.dropout(h, keep, rng, active=True)


def mixture_weights(alpha, beta, kappa, length):
    """Unnormalized attention over positions 0..length-1:
    phi[b, u] = sum_k alpha[b, k] * exp(-beta[b, k] * (kappa[b, k] - u)^2)."""
    b, k = kappa.shape
    positions = nc.tensor(np.arange(length, dtype=np.float64).reshape(1, 1, length))
    diff = nc.sub(nc.reshape(kappa, (b, k, 1)), positions)
    bumps = nc.exp(nc.neg(nc.mul(nc.reshape(beta, (b, k, 1)), nc.square(diff))))
    return nc.sum_(nc.mul(nc.reshape(alpha, (b, k, 1)), bumps), axis=1)


def gm_attention_step(prenet_out, state, memory, params, valid=None):
    """One attention step over batched memory [B, U, M].

    The attention LSTM consumes [prenet_out; previous context]; its output
    maps to per-component log weights, log precisions, and a mean step that
    passes through softplus before being added to the running means.
    """
    if memory.ndim != 3:
        raise nc.ShapeMismatch(f"memory must be [B, U, M], got {memory.shape}")
    length = memory.shape[1]
    if length == 0:
        raise EmptyMemory("attention over empty memory")
    k = params.config.n_mixes
    x = nc.concat([prenet_out, state.context], axis=1)
    h, lstm_state = nc.lstm_step(x, state.lstm, params.attn_lstm)
    stats = nc.linear(h, params.attn_proj_w, params.attn_proj_b)
    alpha = nc.exp(nc.narrow(stats, 1, 0, k))
    beta = nc.exp(nc.narrow(stats, 1, k, k))
    kappa = nc.add(state.kappa, nc.softplus(nc.narrow(stats, 1, 2 * k, k)))
    phi = mixture_weights(alpha, beta, kappa, length)
    if valid is not None:
        phi = nc.mul(phi, nc.tensor(valid))
    context = nc.weighted_mix(phi, memory)
    return context, AttentionState(kappa, alpha, beta, context, lstm_state)


def decode_step(state, memory, params, rng, mode, valid=None):
    """One decoder step: pre-net, attention, two skip-connected LSTMs, and a
    linear projection to the next frame. Returns the frame prediction and
    the advanced state (with prev_frame set to the prediction; overwrite it
    for teacher forcing)."""
    train = mode == "train"
    cfg = params.config
    p = prenet(state.prev_frame, params, rng)
    context, attn_state = gm_attention_step(p, state.attention, memory, params, valid)
    h = None
    layer_states = []
    for i, lstm in enumerate(params.dec_lstms):
        inputs = [p, context] if h is None else [p, context, h]
        h, new_state = nc.lstm_step(
            nc.concat(inputs, axis=1), state.layer_states[i], lstm,
            cfg.cell_keep_prob, rng, active=train,
        )
        layer_states.append(new_state)
    frame = nc.linear(h, params.out_w, params.out_b)
    return frame, DecoderState(attn_state, layer_states, frame)


def teacher_forced_loss(batch_frames, state, memory, params, rng, valid=None):
    """Mean squared error over a [B, S, n_mels] window of ground-truth
    frames, fed back through the pre-net as noisy teacher forcing. No output
    masking. Returns the scalar loss tensor and the final (attached) state."""
    batch_frames = np.asarray(batch_frames, dtype=np.float64)
    if batch_frames.ndim != 3:
        raise nc.ShapeMismatch(f"frames must be [B, S, n_mels], got {batch_frames.shape}")
    b, s, _ = batch_frames.shape
    total = None
    for t in range(s):
        frame, state = decode_step(state, memory, params, rng, "train", valid)
        step_sq = nc.sum_(nc.square(nc.sub(frame, nc.tensor(batch_frames[:, t]))))
        total = step_sq if total is None else nc.add(total, step_sq)
        state.prev_frame = nc.tensor(batch_frames[:, t])
    loss = nc.mul(total, 1.0 / batch_frames.size)
    return loss, state


def attention_position(state):
    """Weight-averaged mean position of the attention mixture, per lane."""
    alpha = state.attention.alpha.data
    kappa = state.attention.kappa.data
    denom = np.maximum(alpha.sum(axis=1), 1e-12)
    return (alpha * kappa).sum(axis=1) / denom


def generate(memory, params, max_frames, rng, stop_margin=2.0, stop_patience=5,
             use_stop_rule=True):
    """Free-running decode feeding predictions back through the pre-net.

    Stops once the attention's weighted mean position stays past the final
    memory position plus ``stop_margin`` for ``stop_patience`` consecutive
    steps, or at ``max_frames``. Returns the [N, n_mels] frame matrix.
    """
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    if memory.ndim == 2:
        memory = nc.reshape(memory, (1,) + memory.shape)
    length = memory.shape[1]
    state = DecoderState.zeros(memory.shape[0], params.config)
    frames = []
    past_end = 0
    for _ in range(max_frames):
        frame, state = decode_step(state, memory, params, rng, "eval")
        if not np.isfinite(frame.data).all():
            raise NonFiniteFrame(f"at step {len(frames)}")
        frames.append(frame.data.copy())
        state = state.detach()
        if use_stop_rule:
            if (attention_position(state) > length - 1 + stop_margin).all():
                past_end += 1
                if past_end >= stop_patience:
                    break
            else:
                past_end = 0
    out = np.stack(frames)
    return out[:, 0] if out.shape[1] == 1 else out
