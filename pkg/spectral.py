"""
Spectral Analysis

Hann windowing, discrete Fourier transforms (an O(N^2) reference and a fast
radix-2 / Bluestein path), one-sided power spectra and per-electrode band
power aggregation over the theta, alpha and gamma bands.

All transforms operate on the last axis, so a channel x time matrix is
processed in one call.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from eeg_io import Epoch


class SpectralError(ValueError):
    """Raised for invalid windows, mismatched lengths or unrepresentable bands."""


@dataclass(frozen=True)
class BandDefinition:
    """Half-open frequency bands [lo, hi) in Hz."""

    theta: Tuple[float, float] = (4.0, 8.0)
    alpha: Tuple[float, float] = (8.0, 12.0)
    gamma: Tuple[float, float] = (12.0, 40.0)

    def __post_init__(self):
        previous_hi = 0.0
        for name, (lo, hi) in self.items():
            if not lo < hi:
                raise SpectralError(f"band {name} is empty: [{lo}, {hi})")
            if lo < previous_hi:
                raise SpectralError(f"band {name} overlaps or precedes the band before it")
            previous_hi = hi

    def items(self):
        return (("theta", self.theta), ("alpha", self.alpha), ("gamma", self.gamma))

    @property
    def upper_edge(self) -> float:
        return self.gamma[1]


DEFAULT_BANDS = BandDefinition()


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    freqs_hz: np.ndarray
    power: np.ndarray
    fs: float
    n: int


@dataclass(frozen=True, eq=False)
class BandPowerFrame:
    """Mean one-sided power per electrode and band, shape [num_electrodes, 3]."""

    powers: np.ndarray
    label: int

    @property
    def num_electrodes(self) -> int:
        return self.powers.shape[0]


def hann_window(length_a: int) -> np.ndarray:
    """Symmetric Hann window: zero at both ends, exactly one at the centre for odd lengths."""
    if length_a < 2:
        raise SpectralError(f"Hann window length must be at least 2, got {length_a}")
    return np.hanning(length_a)


def apply_window(signal, w) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if signal.shape[-1] != w.shape[-1]:
        raise SpectralError(f"window length {w.shape[-1]} does not match signal length {signal.shape[-1]}")
    return signal * w


def dft_naive(signal, block: int = 256) -> np.ndarray:
    """
    Reference DFT, X[k] = sum_n x[n] exp(-2 pi i k n / N), in O(N^2).

    The phase index k*n is reduced modulo N before exponentiation to keep
    float64 accuracy for long inputs. Rows of the DFT matrix are built in
    blocks to bound memory.

    Args:
        signal: Input samples, transformed along the last axis
        block: Number of output bins computed per matrix block

    Returns:
        Complex spectrum with the same shape as the input
    """
    x = np.asarray(signal, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0:
        raise SpectralError("cannot transform an empty signal")
    index = np.arange(n)
    out = np.empty(x.shape, dtype=np.complex128)
    for start in range(0, n, block):
        k = index[start:start + block]
        phase = np.outer(k, index) % n
        matrix = np.exp(-2j * np.pi * phase / n)
        out[..., start:start + block] = x @ matrix.T
    return out


def _bit_reversed(n: int) -> np.ndarray:
    levels = n.bit_length() - 1
    index = np.arange(n)
    reversed_index = np.zeros(n, dtype=np.int64)
    for bit in range(levels):
        reversed_index |= ((index >> bit) & 1) << (levels - 1 - bit)
    return reversed_index


def _fft_radix2(x: np.ndarray) -> np.ndarray:
    # Iterative decimation in time; every stage is one vectorised butterfly.
    n = x.shape[-1]
    lead = x.shape[:-1]
    x = x[..., _bit_reversed(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = x.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return x


def _ifft_radix2(y: np.ndarray) -> np.ndarray:
    return np.conj(_fft_radix2(np.conj(y))) / y.shape[-1]


def _fft_bluestein(x: np.ndarray) -> np.ndarray:
    # Chirp-z: the DFT becomes a circular convolution of power-of-two length.
    n = x.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    index = np.arange(n)
    chirp = np.exp(-1j * np.pi * ((index * index) % (2 * n)) / n)

    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]

    conv = _ifft_radix2(_fft_radix2(a) * _fft_radix2(b))
    return conv[..., :n] * chirp


def fft(signal) -> np.ndarray:
    """
    Fast DFT for any length: radix-2 for powers of two, Bluestein otherwise.

    Args:
        signal: Input samples, transformed along the last axis

    Returns:
        Complex spectrum matching dft_naive
    """
    x = np.asarray(signal, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0:
        raise SpectralError("cannot transform an empty signal")
    if n & (n - 1) == 0:
        return _fft_radix2(x)
    return _fft_bluestein(x)


def one_sided_power(X, fs: float) -> PowerSpectrum:
    """
    Fold a two-sided spectrum of a real signal into one-sided power.

    P[k] = |X[k]|^2 / N^2 for the DC bin and, for even N, the Nyquist bin;
    interior bins are doubled to absorb their negative-frequency mirror.

    Args:
        X: Complex spectrum of a real signal of length N (last axis)
        fs: Sample rate in Hz

    Returns:
        PowerSpectrum with floor(N/2)+1 bins at k*fs/N
    """
    X = np.asarray(X)
    n = X.shape[-1]
    bins = n // 2 + 1
    power = np.abs(X[..., :bins]) ** 2 / float(n * n)
    interior_stop = bins - 1 if n % 2 == 0 else bins
    power[..., 1:interior_stop] *= 2.0
    freqs = np.arange(bins) * (fs / n)
    return PowerSpectrum(freqs_hz=freqs, power=power, fs=float(fs), n=n)


def band_means(ps: PowerSpectrum, bands: BandDefinition = DEFAULT_BANDS) -> np.ndarray:
    """
    Mean one-sided power over the bins of each band.

    Args:
        ps: One-sided power spectrum
        bands: Band edges

    Returns:
        Array [..., 3] ordered (theta, alpha, gamma)
    """
    if ps.fs < 2 * bands.upper_edge:
        raise SpectralError(
            f"sample rate {ps.fs} Hz cannot represent the {bands.upper_edge} Hz band edge "
            f"(need at least {2 * bands.upper_edge} Hz)"
        )
    means = []
    for name, (lo, hi) in bands.items():
        in_band = (ps.freqs_hz >= lo) & (ps.freqs_hz < hi)
        if not np.any(in_band):
            raise SpectralError(f"band {name} [{lo}, {hi}) holds no frequency bins for N={ps.n}")
        means.append(ps.power[..., in_band].mean(axis=-1))
    return np.stack(means, axis=-1)


def epoch_band_powers(epoch: Epoch, bands: BandDefinition = DEFAULT_BANDS) -> BandPowerFrame:
    """Hann window, FFT, one-sided power and band means, per channel of one epoch."""
    window = hann_window(epoch.data.shape[-1])
    spectrum = fft(apply_window(epoch.data, window))
    powers = band_means(one_sided_power(spectrum, epoch.sample_rate_hz), bands)
    if not np.all(np.isfinite(powers)):
        logging.error(f"Non-finite band power for event {epoch.event_index}")
        raise SpectralError("non-finite band power")
    return BandPowerFrame(powers=powers, label=epoch.label)
