"""Constant-Q magnitude spectrograms on a 72-bin semitone grid.

The transform covers 6 octaves (72 bins at 12 bins per octave) upward from
32.7 Hz, with a hop of 6592 samples at 22050 Hz (~298.96 ms, divisible by
2**5 so the hop stays integral at every octave).  A 120 s analysis window
therefore yields exactly 401 frames.

Implementation follows the classic efficient constant-Q recipe: per-bin
Hann-windowed complex kernels are laid out in a common FFT buffer, their
conjugate spectra are sparsified once, and every analysis frame is computed
as one rFFT followed by a sparse matrix product.  Frames are centred on
``t * hop`` with zero padding beyond the signal edges.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy import sparse

SAMPLE_RATE = 22050
N_BINS = 72
BINS_PER_OCTAVE = 12
FMIN_HZ = 32.7
HOP_LENGTH = 6592
HOP_SECONDS = HOP_LENGTH / SAMPLE_RATE
WINDOW_SECONDS = 120
WINDOW_SAMPLES = WINDOW_SECONDS * SAMPLE_RATE
FRAMES_PER_WINDOW = 401

# Bandwidth matches the semitone spacing; the longest kernel (lowest bin)
# is ~11340 samples, so a 16384-point FFT holds every kernel.
_Q_FACTOR = 1.0 / (2.0 ** (1.0 / BINS_PER_OCTAVE) - 1.0)
_FFT_SIZE = 16384
_KERNEL_PRUNE_REL = 1e-5


def bin_frequencies() -> np.ndarray:
    """Centre frequency of each bin in Hz, geometrically spaced from 32.7 Hz."""
    return FMIN_HZ * 2.0 ** (np.arange(N_BINS) / BINS_PER_OCTAVE)


def kernel_length(freq_hz: float) -> int:
    """Samples spanned by the analysis kernel for one bin."""
    return int(np.ceil(_Q_FACTOR * SAMPLE_RATE / freq_hz))


def frame_count(n_samples: int) -> int:
    """Number of CQT frames emitted for an ``n_samples``-long signal."""
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    return max(1, n_samples // HOP_LENGTH)


@functools.lru_cache(maxsize=1)
def _spectral_kernels() -> sparse.csr_matrix:
    """Conjugate spectral kernels over the rFFT half-spectrum, one row per bin.

    Each temporal kernel is a Hann-windowed complex exponential normalised by
    the window sum, so a unit complex exponential at a bin centre responds
    with magnitude ~1 (a real sine with ~0.5).  The 1/N DFT factor is folded
    in so a frame coefficient equals the time-domain windowed correlation.
    """
    n_freqs = _FFT_SIZE // 2 + 1
    rows = np.zeros((N_BINS, n_freqs), dtype=np.complex128)
    for k, freq in enumerate(bin_frequencies()):
        n_k = kernel_length(float(freq))
        if n_k > _FFT_SIZE:
            raise ValueError(f"kernel for bin {k} ({n_k} samples) exceeds FFT size")
        window = np.hanning(n_k)
        phase = np.exp(2j * np.pi * freq * np.arange(n_k) / SAMPLE_RATE)
        kernel = window * phase / window.sum()
        padded = np.zeros(_FFT_SIZE, dtype=np.complex128)
        start = (_FFT_SIZE - n_k) // 2
        padded[start : start + n_k] = kernel
        spectrum = np.fft.fft(padded)[:n_freqs]
        spectrum[np.abs(spectrum) < _KERNEL_PRUNE_REL * np.abs(spectrum).max()] = 0.0
        rows[k] = np.conj(spectrum) / _FFT_SIZE
    return sparse.csr_matrix(rows)


def kernel_alignment(n_kernel: int) -> int:
    """Offset of a kernel's first sample inside the shared FFT buffer."""
    return (_FFT_SIZE - n_kernel) // 2


def cqt_magnitudes(samples: np.ndarray) -> np.ndarray:
    """Non-negative magnitude matrix of shape ``(72, frame_count(n))``.

    Frames are centred on multiples of the hop; signal edges are zero padded.
    Pure function of the input samples.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a mono 1-D signal, got shape {x.shape}")
    n_frames = frame_count(x.size)
    half = _FFT_SIZE // 2

    span = (n_frames - 1) * HOP_LENGTH + _FFT_SIZE
    pad_right = max(0, span - half - x.size)
    padded = np.pad(x, (half, pad_right))
    frames = np.lib.stride_tricks.sliding_window_view(padded, _FFT_SIZE)[::HOP_LENGTH]
    frames = frames[:n_frames]

    spectra = np.fft.rfft(frames, axis=1)
    coeffs = _spectral_kernels() @ spectra.T
    return np.abs(coeffs).astype(np.float32)


def fit_frames(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Right-trim or zero-pad the frame axis to exactly ``n_frames`` columns."""
    if values.shape[1] >= n_frames:
        return values[:, :n_frames]
    pad = n_frames - values.shape[1]
    return np.pad(values, ((0, 0), (0, pad)))
