import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import spectral
from eeg_io import Epoch, EventMarker
from spectral import SpectralError

FS = 128.0
N = 2560


def tone_epoch(frequency_hz, channels=1, n=N):
    t = np.arange(n) / FS
    data = np.tile(np.sin(2 * np.pi * frequency_hz * t), (channels, 1))
    return Epoch(data=data, label=1, source_event=EventMarker(n // 2, 1), sample_rate_hz=FS)


# Window

def test_hann_length_four():
    assert spectral.hann_window(4) == pytest.approx([0.0, 0.75, 0.75, 0.0], abs=1e-15)


def test_hann_odd_peak_is_exactly_one():
    w = spectral.hann_window(5)
    assert w[2] == 1.0
    assert w.max() == 1.0


@given(st.integers(min_value=2, max_value=4096))
def test_hann_endpoints_and_symmetry(length):
    w = spectral.hann_window(length)
    assert w[0] == 0.0
    assert w[-1] == 0.0
    assert np.array_equal(w, w[::-1])


def test_hann_rejects_short_windows():
    with pytest.raises(SpectralError):
        spectral.hann_window(1)


def test_apply_window():
    assert spectral.apply_window(np.ones(4), spectral.hann_window(4)) == pytest.approx([0, 0.75, 0.75, 0])
    x = np.array([3.0, -1.0, 2.5])
    assert np.array_equal(spectral.apply_window(x, np.ones(3)), x)
    assert np.array_equal(spectral.apply_window(np.zeros(5), spectral.hann_window(5)), np.zeros(5))
    with pytest.raises(SpectralError):
        spectral.apply_window(np.ones(4), np.ones(5))


# Transforms

@pytest.mark.parametrize("signal, expected", [
    ([1, 1, 1, 1], [4, 0, 0, 0]),
    ([1, 0, -1, 0], [0, 2, 0, 2]),
    ([0, 1, 0, -1], [0, -2j, 0, 2j]),
])
def test_dft_naive_small_cases(signal, expected):
    np.testing.assert_allclose(spectral.dft_naive(signal), expected, atol=1e-12)


@pytest.mark.parametrize("n", [2, 3, 16, 100, 256, 1024, 2560])
def test_fft_matches_naive_dft(n):
    x = np.random.default_rng(n).normal(size=n)
    fast = spectral.fft(x)
    reference = spectral.dft_naive(x)
    assert np.max(np.abs(fast - reference)) / np.max(np.abs(reference)) < 1e-9


def test_fft_small_radix2_absolute_error():
    x = np.random.default_rng(16).normal(size=16)
    assert np.max(np.abs(spectral.fft(x) - spectral.dft_naive(x))) < 1e-10


def test_fft_of_impulse_is_flat():
    x = np.zeros(100)
    x[0] = 1.0
    np.testing.assert_allclose(spectral.fft(x), np.ones(100), atol=1e-12)


def test_fft_transforms_last_axis():
    x = np.random.default_rng(0).normal(size=(3, 100))
    rows = np.stack([spectral.fft(row) for row in x])
    np.testing.assert_allclose(spectral.fft(x), rows, rtol=0, atol=1e-12)


def test_empty_signal_is_rejected():
    with pytest.raises(SpectralError):
        spectral.fft([])
    with pytest.raises(SpectralError):
        spectral.dft_naive([])


@given(arrays(np.float64, st.integers(min_value=1, max_value=300),
              elements=st.floats(min_value=-1e3, max_value=1e3)))
def test_parseval(x):
    energy = np.sum(x * x)
    spectrum_energy = np.sum(np.abs(spectral.fft(x)) ** 2)
    assert abs(spectrum_energy - len(x) * energy) <= 1e-9 * len(x) * energy + 1e-12


def test_parseval_on_random_signals():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.normal(size=int(rng.integers(2, 600)))
        X = spectral.fft(x)
        total = spectral.one_sided_power(X, FS).power.sum()
        assert abs(np.sum(np.abs(X) ** 2) - len(x) * np.sum(x * x)) <= 1e-9 * len(x) * np.sum(x * x)
        assert abs(total - np.mean(x * x)) <= 1e-9 * np.mean(x * x)


# Power spectra

def test_one_sided_power_of_constant():
    ps = spectral.one_sided_power(np.array([4, 0, 0, 0], dtype=complex), 4.0)
    assert ps.power == pytest.approx([1.0, 0.0, 0.0])
    assert ps.freqs_hz == pytest.approx([0.0, 1.0, 2.0])


def test_one_sided_power_of_cosine():
    ps = spectral.one_sided_power(np.array([0, 2, 0, 2], dtype=complex), 4.0)
    assert ps.power == pytest.approx([0.0, 0.5, 0.0])


def test_one_sided_power_odd_length_doubles_last_bin():
    x = np.random.default_rng(3).normal(size=7)
    ps = spectral.one_sided_power(spectral.fft(x), FS)
    assert len(ps.power) == 4
    assert np.all(ps.power >= 0)
    assert ps.power.sum() == pytest.approx(np.mean(x * x), rel=1e-9)


def test_band_means_of_white_spectrum():
    freqs = np.arange(129) * 0.5
    ps = spectral.PowerSpectrum(freqs_hz=freqs, power=np.full(129, 2.5), fs=FS, n=256)
    assert spectral.band_means(ps) == pytest.approx([2.5, 2.5, 2.5])


@pytest.mark.parametrize("alpha", [0.0, 1e-6, 3.5, 2e4])
def test_band_means_scale_linearly(alpha):
    x = np.random.default_rng(11).normal(size=(4, 256))
    ps = spectral.one_sided_power(spectral.fft(x), FS)
    scaled = spectral.PowerSpectrum(freqs_hz=ps.freqs_hz, power=alpha * ps.power, fs=ps.fs, n=ps.n)
    np.testing.assert_allclose(spectral.band_means(scaled), alpha * spectral.band_means(ps), rtol=1e-12, atol=0)


def test_band_means_rejects_low_sample_rate():
    ps = spectral.PowerSpectrum(freqs_hz=np.arange(33) * 1.0, power=np.ones(33), fs=64.0, n=64)
    with pytest.raises(SpectralError):
        spectral.band_means(ps)


def test_band_definition_rejects_overlap():
    with pytest.raises(SpectralError):
        spectral.BandDefinition(theta=(4.0, 9.0))


@pytest.mark.parametrize("frequency_hz, band", [(6.0, 0), (10.0, 1), (25.0, 2)])
def test_tone_lands_in_its_band(frequency_hz, band):
    powers = spectral.epoch_band_powers(tone_epoch(frequency_hz)).powers[0]
    others = [powers[b] for b in range(3) if b != band]
    assert powers[band] > 100 * max(others)


def test_band_powers_match_naive_dft_oracle():
    epoch = tone_epoch(10.0)
    windowed = spectral.apply_window(epoch.data, spectral.hann_window(N))
    oracle = spectral.band_means(spectral.one_sided_power(spectral.dft_naive(windowed), FS))
    np.testing.assert_allclose(spectral.epoch_band_powers(epoch).powers, oracle, rtol=1e-7, atol=1e-18)


def test_zero_epoch_has_zero_band_powers():
    epoch = Epoch(data=np.zeros((4, 512)), label=2, source_event=EventMarker(256, 2), sample_rate_hz=FS)
    frame = spectral.epoch_band_powers(epoch)
    assert frame.label == 2
    assert np.array_equal(frame.powers, np.zeros((4, 3)))


def test_channel_permutation_permutes_frame():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(5, 512))
    order = np.array([3, 0, 4, 1, 2])
    frame = spectral.epoch_band_powers(Epoch(data, 0, EventMarker(256, 0), FS))
    permuted = spectral.epoch_band_powers(Epoch(data[order], 0, EventMarker(256, 0), FS))
    np.testing.assert_allclose(permuted.powers, frame.powers[order], rtol=1e-14)
