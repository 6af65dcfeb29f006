"""Truncated-BPTT training over continuously packed minibatch lanes.

Each of B lanes consumes utterances sequentially from a shuffled queue. A
window advances every lane by at most the TBPTT length; when a lane reaches
the end of an utterance it pulls the next one and raises its reset flag, so
only that lane's RNN/attention state is zeroed and only that lane's text is
re-encoded. Encoder memory is computed once per utterance (in the window
where the lane resets, so gradients reach the encoder there) and reused as a
constant for the utterance's remaining windows; decoder state is detached at
every window boundary, confining gradients to one window.

All randomness is derived statelessly from (seed, purpose, counters), which
is what makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nncore as nc
from .frontend import mix_words
from .model import Model, ModelConfig


class EmptyCorpus(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


def subrng(seed, *tags):
    """Deterministic child generator keyed by (seed, *tags)."""
    digest = hashlib.sha256(repr((int(seed),) + tags).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    p_phone: float = 0.5
    vocab_size: int = 49
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
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    batch_size: int = 64
    tbptt_length: int = 256
    steps: int = 500_000
    checkpoint_interval: int = 1000

    def model_config(self):
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        values = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return ModelConfig(**values)


def desk_config(**overrides):
    """Reduced defaults for single-machine runs: batch 8, windows of 64, all
    hidden sizes divided by four."""
    base = dict(
        batch_size=8, tbptt_length=64, smrc_channels=32, enc_lstm_hidden=32,
        prenet_hidden=32, attn_lstm_hidden=128, dec_lstm_hidden=128,
        steps=2000, checkpoint_interval=500,
    )
    base.update(overrides)
    return TrainConfig(**base)


def parse_config(text):
    """Flat ``key = value`` text; blank lines and # comments allowed;
    unknown keys are hard errors."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            raise ValueError(f"config line {line_no}: unknown key {key!r}")
        ftype = fields[key].type
        if ftype in ("int", int):
            values[key] = int(raw)
        elif ftype in ("float", float):
            values[key] = float(raw)
        else:
            values[key] = raw
    return TrainConfig(**values)


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


def render_config(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)!r}" if isinstance(getattr(cfg, f.name), str)
             else f"{f.name} = {getattr(cfg, f.name)}"
             for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# packed minibatch iterator
# ---------------------------------------------------------------------------

@dataclass
class PulledUtterance:
    pull: int
    utt_id: str
    frames: np.ndarray
    mixed: object = None


@dataclass
class PackedBatchWindow:
    frames: np.ndarray        # [B, S_w, n_mels], zero padded per lane
    reset_flags: np.ndarray   # [B] bool, true when a lane starts a new utterance
    linguistic_refs: list     # [B] mixed sequences (may be None in tests)
    lane_offsets: np.ndarray  # [B] frame offset into each lane's utterance
    lane_lengths: np.ndarray  # [B] frames actually consumed this window
    utt_ids: list


class WindowPacker:
    """Stateful lane packer; ``puller(k)`` must deterministically return the
    k-th pulled utterance. Lane cursors are exposed for checkpointing."""

    def __init__(self, puller, batch_size, tbptt_length,
                 lane_pulls=None, lane_offsets=None, next_pull=None):
        if batch_size < 1 or tbptt_length < 1:
            raise ValueError("batch_size and tbptt_length must be >= 1")
        self.puller = puller
        self.batch_size = batch_size
        self.tbptt_length = tbptt_length
        if lane_pulls is None:
            self.lane_pulls = list(range(batch_size))
            self.lane_offsets = [0] * batch_size
            self.next_pull = batch_size
        else:
            self.lane_pulls = list(lane_pulls)
            self.lane_offsets = list(lane_offsets)
            self.next_pull = int(next_pull)
        self._lanes = [self.puller(k) for k in self.lane_pulls]

    def next_window(self):
        b, s = self.batch_size, self.tbptt_length
        for i in range(b):
            if self.lane_offsets[i] >= len(self._lanes[i].frames):
                self.lane_pulls[i] = self.next_pull
                self._lanes[i] = self.puller(self.next_pull)
                self.lane_offsets[i] = 0
                self.next_pull += 1
        takes = [
            min(s, len(self._lanes[i].frames) - self.lane_offsets[i])
            for i in range(b)
        ]
        width = max(takes)
        n_mels = self._lanes[0].frames.shape[1]
        frames = np.zeros((b, width, n_mels))
        for i in range(b):
            off = self.lane_offsets[i]
            frames[i, : takes[i]] = self._lanes[i].frames[off : off + takes[i]]
        window = PackedBatchWindow(
            frames=frames,
            reset_flags=np.array([off == 0 for off in self.lane_offsets]),
            linguistic_refs=[lane.mixed for lane in self._lanes],
            lane_offsets=np.array(self.lane_offsets),
            lane_lengths=np.array(takes),
            utt_ids=[lane.utt_id for lane in self._lanes],
        )
        for i in range(b):
            self.lane_offsets[i] += takes[i]
        return window


def make_puller(utterances, lexicon, p_phone, seed):
    """Shuffled-queue puller with fresh word mixing on every encounter."""
    if not utterances:
        raise EmptyCorpus("no utterances")
    n = len(utterances)

    def puller(pull):
        epoch, pos = divmod(pull, n)
        order = subrng(seed, "shuffle", epoch).permutation(n)
        utt = utterances[order[pos]]
        mixed = mix_words(
            utt.record, lexicon, p_phone, subrng(seed, "mix", epoch, int(order[pos]))
        )
        return PulledUtterance(pull, utt.utt_id, utt.frames, mixed)

    return puller


def pack_minibatches(utterances, batch_size, tbptt_length, lexicon=None, p_phone=0.0, seed=0):
    """Infinite generator of packed windows over a training corpus."""
    packer = WindowPacker(
        make_puller(utterances, lexicon, p_phone, seed), batch_size, tbptt_length
    )
    while True:
        yield packer.next_window()


@dataclass
class TrainingUtterance:
    utt_id: str
    record: object
    frames: np.ndarray  # [N, n_mels], normalized


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, named_params):
        self.m = {k: np.zeros(p.shape) for k, p in named_params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in named_params.items()}
        self.t = 0

    def update(self, named_params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        bc1 = 1.0 - beta1 ** self.t
        bc2 = 1.0 - beta2 ** self.t
        for name, grad in grads.items():
            p = named_params[name]
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1 - beta1) * grad
            v *= beta2
            v += (1 - beta2) * grad * grad
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_by_global_norm(grads, clip):
    """Scale the gradient dict in place so its global norm is at most
    ``clip``; returns the pre-clip norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > clip:
        scale = clip / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# carried decoder state (plain arrays between windows)
# ---------------------------------------------------------------------------

@dataclass
class CarriedState:
    kappa: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    context: np.ndarray
    attn_h: np.ndarray
    attn_c: np.ndarray
    dec_h: list
    dec_c: list
    prev_frame: np.ndarray

    @classmethod
    def zeros(cls, batch, cfg):
        dc = cfg.decoder_config()
        return cls(
            np.zeros((batch, dc.n_mixes)), np.zeros((batch, dc.n_mixes)),
            np.zeros((batch, dc.n_mixes)), np.zeros((batch, dc.memory_dim)),
            np.zeros((batch, dc.attn_lstm_hidden)), np.zeros((batch, dc.attn_lstm_hidden)),
            [np.zeros((batch, dc.dec_lstm_hidden)) for _ in range(dc.dec_layers)],
            [np.zeros((batch, dc.dec_lstm_hidden)) for _ in range(dc.dec_layers)],
            np.zeros((batch, dc.n_mels)),
        )

    def zero_lanes(self, lanes):
        for arr in self.arrays().values():
            arr[lanes] = 0.0

    def arrays(self):
        out = {
            "kappa": self.kappa, "alpha": self.alpha, "beta": self.beta,
            "context": self.context, "attn_h": self.attn_h, "attn_c": self.attn_c,
            "prev_frame": self.prev_frame,
        }
        for i, (h, c) in enumerate(zip(self.dec_h, self.dec_c)):
            out[f"dec{i}_h"] = h
            out[f"dec{i}_c"] = c
        return out

    def to_decoder_state(self):
        from .decoder import AttentionState, DecoderState

        attn = AttentionState(
            nc.tensor(self.kappa), nc.tensor(self.alpha), nc.tensor(self.beta),
            nc.tensor(self.context),
            nc.LstmState(nc.tensor(self.attn_h), nc.tensor(self.attn_c)),
        )
        layers = [
            nc.LstmState(nc.tensor(h), nc.tensor(c))
            for h, c in zip(self.dec_h, self.dec_c)
        ]
        return DecoderState(attn, layers, nc.tensor(self.prev_frame))

    @classmethod
    def from_decoder_state(cls, state):
        a = state.attention
        return cls(
            a.kappa.data.copy(), a.alpha.data.copy(), a.beta.data.copy(),
            a.context.data.copy(), a.lstm.h.data.copy(), a.lstm.c.data.copy(),
            [s.h.data.copy() for s in state.layer_states],
            [s.c.data.copy() for s in state.layer_states],
            state.prev_frame.data.copy(),
        )


# ---------------------------------------------------------------------------
# training step and loop
# ---------------------------------------------------------------------------

def train_step(window, carried, lane_memories, model, opt, cfg, step):
    """One optimizer update over a packed window.

    Reset lanes get zeroed state and a fresh (gradient-attached) encoding of
    their linguistic sequence; other lanes reuse their cached memory as a
    constant. Returns (loss, grad_norm); mutates carried state, memories,
    model parameters, and optimizer moments.
    """
    from .decoder import teacher_forced_loss

    reset = np.flatnonzero(window.reset_flags)
    carried.zero_lanes(reset)
    memory_tensors = []
    for i in range(len(window.reset_flags)):
        if window.reset_flags[i]:
            memory_tensors.append(model.encode_sequence(window.linguistic_refs[i], "train"))
        else:
            memory_tensors.append(nc.tensor(lane_memories[i]))
    width = max(m.shape[0] for m in memory_tensors)
    valid = np.zeros((len(memory_tensors), width))
    for i, m in enumerate(memory_tensors):
        valid[i, : m.shape[0]] = 1.0
    memory = nc.pad_stack(memory_tensors, width)

    rng = subrng(cfg.seed, "drop", step)
    loss_t, final_state = teacher_forced_loss(
        window.frames, carried.to_decoder_state(), memory, model.decoder, rng, valid
    )
    loss = float(loss_t.data)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"step {step}: loss {loss}")

    named = model.named_params()
    order = sorted(named)
    grads_list = nc.backward(loss_t, [named[k] for k in order])
    grads = dict(zip(order, grads_list))
    grad_norm = clip_by_global_norm(grads, cfg.clip_norm)
    opt.update(named, grads, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    new_carried = CarriedState.from_decoder_state(final_state)
    for name, arr in carried.arrays().items():
        arr[...] = new_carried.arrays()[name]
    for i in reset:
        lane_memories[i] = memory_tensors[i].data.copy()
    return loss, grad_norm


def train_loop(cfg, utterances, lexicon, mel_stats, log_fh=None, resume=None):
    """Run training, yielding a checkpoint dict every
    ``checkpoint_interval`` steps and at the end. ``mel_stats`` is the
    (mean, std) pair the corpus frames were normalized with."""
    puller = make_puller(utterances, lexicon, cfg.p_phone, cfg.seed)
    model = Model.create(cfg.model_config(), subrng(cfg.seed, "init"))
    opt = AdamState(model.named_params())
    carried = CarriedState.zeros(cfg.batch_size, cfg.model_config())
    lane_memories = [np.zeros((1, model.config.encoder_config().memory_dim))
                     for _ in range(cfg.batch_size)]
    step = 0
    if resume is not None:
        step = restore_training(resume, model, opt, carried, lane_memories)
        packer = WindowPacker(
            puller, cfg.batch_size, cfg.tbptt_length,
            lane_pulls=resume["loop.lane_pulls"].tolist(),
            lane_offsets=resume["loop.lane_offsets"].tolist(),
            next_pull=int(resume["loop.next_pull"]),
        )
    else:
        packer = WindowPacker(puller, cfg.batch_size, cfg.tbptt_length)

    while step < cfg.steps:
        window = packer.next_window()
        t0 = time.monotonic()
        loss, grad_norm = train_step(window, carried, lane_memories, model, opt, cfg, step)
        step += 1
        if log_fh is not None:
            log_fh.write(json.dumps({
                "step": step, "loss": loss, "grad_norm": grad_norm,
                "wall_time": time.monotonic() - t0,
            }) + "\n")
            log_fh.flush()
        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            yield build_checkpoint(cfg, model, opt, carried, lane_memories, packer,
                                   mel_stats, step)


# ---------------------------------------------------------------------------
# checkpoint format: little-endian binary, length-prefixed name table
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MIXTTS01"
_DTYPE_CODES = {"f": "<f8", "i": "<i8", "u": "u1"}


def build_checkpoint(cfg, model, opt, carried, lane_memories, packer, mel_stats, step):
    entries = {}
    for name, p in model.named_params().items():
        entries[f"param.{name}"] = p.data.copy()
    for name, arr in model.named_stats().items():
        entries[f"stat.{name}"] = arr.copy()
    for name in model.named_params():
        entries[f"adam.m.{name}"] = opt.m[name].copy()
        entries[f"adam.v.{name}"] = opt.v[name].copy()
    entries["meta.step"] = np.array(step, dtype=np.int64)
    entries["meta.adam_t"] = np.array(opt.t, dtype=np.int64)
    entries["mel.mean"] = np.asarray(mel_stats[0], dtype=np.float64)
    entries["mel.std"] = np.asarray(mel_stats[1], dtype=np.float64)
    for name, arr in carried.arrays().items():
        entries[f"carry.{name}"] = arr.copy()
    for i, mem in enumerate(lane_memories):
        entries[f"lane{i}.memory"] = mem.copy()
    entries["loop.lane_pulls"] = np.asarray(packer.lane_pulls, dtype=np.int64)
    entries["loop.lane_offsets"] = np.asarray(packer.lane_offsets, dtype=np.int64)
    entries["loop.next_pull"] = np.array(packer.next_pull, dtype=np.int64)
    entries["config"] = np.frombuffer(render_config(cfg).encode(), dtype=np.uint8).copy()
    return entries


def restore_training(ckpt, model, opt, carried, lane_memories):
    params = {k[len("param."):]: v for k, v in ckpt.items() if k.startswith("param.")}
    stats = {k[len("stat."):]: v for k, v in ckpt.items() if k.startswith("stat.")}
    model.load_arrays(params, stats)
    for name in opt.m:
        opt.m[name][...] = ckpt[f"adam.m.{name}"]
        opt.v[name][...] = ckpt[f"adam.v.{name}"]
    opt.t = int(ckpt["meta.adam_t"])
    for name, arr in carried.arrays().items():
        arr[...] = ckpt[f"carry.{name}"]
    for i in range(len(lane_memories)):
        lane_memories[i] = ckpt[f"lane{i}.memory"].copy()
    return int(ckpt["meta.step"])


def save_checkpoint(entries, path):
    """Deterministic writer: sorted names, fixed-width little-endian fields,
    so identical contents produce identical bytes."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", 1, len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        if arr.dtype == np.uint8:
            code = b"u"
        elif arr.dtype.kind == "i":
            code = b"i"
            arr = arr.astype("<i8")
        else:
            code = b"f"
            arr = arr.astype("<f8")
        encoded = name.encode()
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += code
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", data, 8)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode()
        pos += name_len
        code = chr(data[pos])
        pos += 1
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        dtype = np.dtype(_DTYPE_CODES[code])
        n_bytes = dtype.itemsize * int(np.prod(shape)) if ndim else dtype.itemsize
        arr = np.frombuffer(data[pos : pos + n_bytes], dtype=dtype).reshape(shape)
        pos += n_bytes
        entries[name] = arr.copy()
    return entries


def checkpoint_config(ckpt):
    return parse_config(bytes(ckpt["config"]).decode())


def checkpoint_mel_stats(ckpt):
    return ckpt["mel.mean"].copy(), ckpt["mel.std"].copy()


def load_model(ckpt):
    """Rebuild a Model (weights and batch-norm stats) from a checkpoint."""
    cfg = checkpoint_config(ckpt)
    model = Model.create(cfg.model_config(), subrng(cfg.seed, "init"))
    params = {k[len("param."):]: v for k, v in ckpt.items() if k.startswith("param.")}
    stats = {k[len("stat."):]: v for k, v in ckpt.items() if k.startswith("stat.")}
    model.load_arrays(params, stats)
    return model
