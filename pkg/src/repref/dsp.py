"""Deterministic signal-processing kernels shared by deformations and
built-in feature extractors.

Conventions (stated once, tested as such): periodic Hann window, power-of-two
FFT sizes only, HTK mel scale with unnormalized peak-1 triangles, orthonormal
DCT-II, windowed-sinc resampling with a Kaiser window and 64 taps per phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class DspError(ValueError):
    pass


@dataclass
class Spectrogram:
    """Magnitude spectrogram; frame t covers samples [t*hop, t*hop + n_fft)."""

    magnitudes: np.ndarray  # [n_frames, n_bins], n_bins = n_fft // 2 + 1
    sr: int
    n_fft: int
    hop: int
    _complex: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def n_bins(self) -> int:
        return self.magnitudes.shape[1]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * (self.sr / self.n_fft)


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame(signal: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Frame with zero padding so every sample is covered; >= 1 frame."""
    n = len(signal)
    n_frames = max(1, -(-n // hop))
    padded = np.zeros((n_frames - 1) * hop + n_fft, dtype=np.float64)
    padded[:n] = signal
    stride = padded.strides[0]
    return np.lib.stride_tricks.as_strided(
        padded, shape=(n_frames, n_fft), strides=(hop * stride, stride))


def stft(signal, n_fft: int, hop: int, keep_complex: bool = False,
         sr: int = 0) -> Spectrogram:
    """Short-time Fourier transform (unnormalized DFT, periodic Hann).

    n_fft must be a power of two; the final frame is zero-padded. sr is
    carried along for bin-frequency bookkeeping and may be 0 when unused.
    """
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise DspError(f"n_fft must be a power of two, got {n_fft}")
    if hop < 1:
        raise DspError(f"hop must be >= 1, got {hop}")
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or len(signal) < 1:
        raise DspError("signal must be a nonempty 1-D array")
    frames = _frame(signal, n_fft, hop) * hann_periodic(n_fft)
    spec = np.fft.rfft(frames, axis=1)
    return Spectrogram(
        magnitudes=np.abs(spec), sr=sr, n_fft=n_fft, hop=hop,
        _complex=spec if keep_complex else None)


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sr: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, peak 1, evaluated at the rfft bin grid.

    Returns [n_mels, n_fft // 2 + 1]. Raises when the bin resolution leaves
    any filter without support.
    """
    if fmax is None:
        fmax = sr / 2.0
    if not fmin < fmax <= sr / 2.0:
        raise DspError(f"need fmin < fmax <= sr/2, got {fmin}, {fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sr / n_fft)
    fb = np.zeros((n_mels, len(bin_freqs)))
    for i in range(n_mels):
        left, center, right = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        if not fb[i].any():
            raise DspError(
                f"empty mel filter (index {i}): n_mels={n_mels} too large "
                f"for n_fft={n_fft} at sr={sr}")
        fb[i] /= fb[i].max()  # peak 1 at the bin grid
    return fb


def dct_ii(x, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II of a vector (or of each row of a matrix)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if not 1 <= n_out <= n:
        raise DspError(f"n_out must be in [1, {n}], got {n_out}")
    k = np.arange(n_out)[:, None]
    basis = np.cos(np.pi * (2 * np.arange(n)[None, :] + 1) * k / (2 * n))
    scale = np.full(n_out, math.sqrt(2.0 / n))
    scale[0] = math.sqrt(1.0 / n)
    return (x @ basis.T) * scale


def dct_ii_inverse(c, n: int) -> np.ndarray:
    """Inverse of `dct_ii` for full-length coefficient vectors."""
    c = np.asarray(c, dtype=np.float64)
    n_out = c.shape[-1]
    k = np.arange(n_out)[:, None]
    basis = np.cos(np.pi * (2 * np.arange(n)[None, :] + 1) * k / (2 * n))
    scale = np.full(n_out, math.sqrt(2.0 / n))
    scale[0] = math.sqrt(1.0 / n)
    return (c * scale) @ basis


_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.6


def _resample_prototype(up: int, down: int) -> np.ndarray:
    n_taps = _TAPS_PER_PHASE * up
    cutoff = 0.5 / max(up, down)  # cycles per upsampled sample
    t = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * t) * np.kaiser(n_taps, _KAISER_BETA)
    return h * (up / h.sum())  # unity DC gain after zero-stuffing


def resample(signal, sr_from: int, sr_to: int) -> np.ndarray:
    """Windowed-sinc polyphase resampling; exact identity for equal rates."""
    if sr_from <= 0 or sr_to <= 0:
        raise DspError(f"sample rates must be positive, got {sr_from}->{sr_to}")
    signal = np.asarray(signal, dtype=np.float64)
    if sr_from == sr_to:
        return signal.copy()
    g = math.gcd(sr_from, sr_to)
    up, down = sr_to // g, sr_from // g
    return np.asarray(
        _kernels.polyphase_resample(signal, up, down,
                                    _resample_prototype(up, down)))


def lowpass_fir(signal, cutoff_hz: float, sr: int, n_taps: int = 255) -> np.ndarray:
    """Linear-phase windowed-sinc (Hamming) low-pass, group delay removed."""
    if cutoff_hz >= sr / 2.0:
        raise DspError(f"cutoff above Nyquist: {cutoff_hz} >= {sr / 2.0}")
    if cutoff_hz <= 0:
        raise DspError(f"cutoff must be positive, got {cutoff_hz}")
    if n_taps < 3 or n_taps % 2 == 0:
        raise DspError(f"n_taps must be odd and >= 3, got {n_taps}")
    signal = np.asarray(signal, dtype=np.float64)
    fc = cutoff_hz / sr
    t = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = 2.0 * fc * np.sinc(2.0 * fc * t) * np.hamming(n_taps)
    h /= h.sum()
    delay = (n_taps - 1) // 2
    full = np.asarray(_kernels.fir_convolve(signal, h))
    return full[delay:delay + len(signal)]
