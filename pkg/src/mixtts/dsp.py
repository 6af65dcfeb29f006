"""Waveform <-> log mel spectrogram transforms.

Fixed pipeline: 22.05 kHz mono PCM16 input scaled to (-1, 1), Hann-windowed
512-point STFT magnitudes at hop 128, an 80-band triangular mel filterbank
between 125 Hz and 7.8 kHz (2595*log10 mel scale, unit-peak filters), log
compression floored at 1e-5, then optional per-dimension mean/std
normalization.

The same transform exists twice: a fast numpy path (``stft_mag``/``logmel``)
and a tape-differentiable path (``logmel_diff``) built on :mod:`.nncore`
using explicit cosine/sine DFT matrices, so inversion can take gradients
through it. Both paths agree to ~1e-10 and the tests pin that.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import nncore as nc

SAMPLE_RATE = 22050
WINDOW = 512
HOP = 128
N_MELS = 80
F_LO = 125.0
F_HI = 7800.0
LOG_FLOOR = 1e-5


class TooShort(ValueError):
    pass


class BadRange(ValueError):
    pass


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    normalized: bool = False
    stats: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    def denormalized(self):
        if not self.normalized:
            return self
        mean, std = self.stats
        return MelSpectrogram(self.frames * std + mean, False, self.stats)

    def normalized_with(self, stats):
        if self.normalized:
            raise ValueError("already normalized")
        mean, std = stats
        return MelSpectrogram((self.frames - mean) / std, True, stats)


def load_wav(path):
    """Read mono 16-bit PCM at 22050 Hz, scaled to (-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise WavFormatError(f"{path}: need mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise WavFormatError(f"{path}: need 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getframerate() != SAMPLE_RATE:
            raise WavFormatError(f"{path}: need {SAMPLE_RATE} Hz, got {w.getframerate()}")
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples)


def save_wav(path, waveform):
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(waveform.sample_rate)
        w.writeframes(pcm.tobytes())


def hann_window(n=WINDOW):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(num_samples, window=WINDOW, hop=HOP):
    if num_samples < window:
        raise TooShort(f"{num_samples} samples < window {window}")
    return 1 + (num_samples - window) // hop


def frame_signal(samples, window=WINDOW, hop=HOP):
    n = num_frames(len(samples), window, hop)
    idx = hop * np.arange(n)[:, None] + np.arange(window)[None, :]
    return samples[idx]


def stft(samples, window=WINDOW, hop=HOP):
    """Complex half-spectrum [N, window//2 + 1] of the Hann-windowed frames."""
    frames = frame_signal(np.asarray(samples, dtype=np.float64), window, hop)
    return np.fft.rfft(frames * hann_window(window), axis=1)


def stft_mag(waveform, window=WINDOW, hop=HOP):
    """Magnitude spectrogram [N, window//2 + 1]."""
    samples = waveform.samples if isinstance(waveform, Waveform) else waveform
    return np.abs(stft(samples, window, hop))


def istft(spec, window=WINDOW, hop=HOP):
    """Weighted overlap-add inverse of ``stft``.

    Output length is window + (N-1)*hop; the squared-window envelope is
    divided out wherever it is nonzero, which makes istft(stft(x)) == x to
    machine precision everywhere the envelope covers.
    """
    n = spec.shape[0]
    win = hann_window(window)
    frames = np.fft.irfft(spec, n=window, axis=1) * win
    length = window + (n - 1) * hop
    out = np.zeros(length)
    env = np.zeros(length)
    idx = hop * np.arange(n)[:, None] + np.arange(window)[None, :]
    np.add.at(out, idx, frames)
    np.add.at(env, idx, np.broadcast_to(win * win, idx.shape))
    good = env > 1e-10
    out[good] /= env[good]
    return out


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_matrix_cached(n_mels, f_lo, f_hi, n_fft, sr):
    if not (0 <= f_lo < f_hi <= sr / 2):
        raise BadRange(f"mel range {f_lo}..{f_hi} outside (0, {sr / 2}]")
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sr / n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_lo), _hz_to_mel(f_hi), n_mels + 2))
    mat = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        mat[m] = np.maximum(0.0, np.minimum(up, down))
    return mat


def mel_matrix(n_mels=N_MELS, f_lo=F_LO, f_hi=F_HI, n_fft=WINDOW, sr=SAMPLE_RATE):
    """Unit-peak triangular filterbank [n_mels, n_fft//2 + 1]."""
    return _mel_matrix_cached(n_mels, f_lo, f_hi, n_fft, sr).copy()


def mel_center_frequencies(n_mels=N_MELS, f_lo=F_LO, f_hi=F_HI):
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_lo), _hz_to_mel(f_hi), n_mels + 2))
    return edges[1:-1]


def logmel(waveform, normalize=False, stats=None):
    """Log mel spectrogram [N, 80]; optionally mean/std normalized per dim."""
    mag = stft_mag(waveform)
    mel = np.log(np.maximum(mag @ mel_matrix().T, LOG_FLOOR))
    if normalize:
        if stats is None:
            raise ValueError("normalize=True needs stats")
        mean, std = stats
        return MelSpectrogram((mel - mean) / std, True, stats)
    return MelSpectrogram(mel, False, stats)


def mel_stats(mels):
    """Per-dimension mean and std over a list of raw log-mel frame matrices."""
    stacked = np.concatenate([m.frames if isinstance(m, MelSpectrogram) else m for m in mels])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


# ---------------------------------------------------------------------------
# differentiable path
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def _dft_matrices(window):
    """Real-DFT as two constant matrices: frames @ cos -> Re, frames @ sin -> -Im."""
    n_bins = window // 2 + 1
    t = np.arange(window)[:, None]
    k = np.arange(n_bins)[None, :]
    angle = 2.0 * np.pi * t * k / window
    return np.cos(angle), np.sin(angle)


def logmel_diff(samples, window=WINDOW, hop=HOP):
    """Raw log-mel of a 1-D sample tensor, differentiable through the tape.

    Matches ``logmel(...).frames`` to ~1e-10; implemented with explicit DFT
    matrix products so every step has an exact backward rule.
    """
    x = nc.as_tensor(samples)
    frames = nc.frame_rows(x, window, hop)
    windowed = nc.mul(frames, nc.tensor(hann_window(window)))
    cos_m, sin_m = _dft_matrices(window)
    re = nc.matmul(windowed, nc.tensor(cos_m))
    im = nc.matmul(windowed, nc.tensor(sin_m))
    mag = nc.sqrt(nc.add(nc.square(re), nc.square(im)))
    mel = nc.matmul(mag, nc.tensor(mel_matrix().T))
    return nc.log(nc.maximum(mel, nc.tensor(LOG_FLOOR)))
