"""Mixed character/phoneme mel-spectrogram synthesis, desk scale.

Subpackages: text frontend and embeddings, a numpy autodiff core, the
encoder/decoder network, a truncated-BPTT trainer, waveform DSP, and
spectrogram inversion with a timing benchmark.
"""

__version__ = "0.1.0"
