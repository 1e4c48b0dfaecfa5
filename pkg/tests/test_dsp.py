"""DSP kernels against naive O(n^2) references and closed-form cases."""

import math

import numpy as np
import pytest

from repref import dsp

# ---------------------------------------------------------------------------
# independent references (no FFT, no vectorized tricks shared with the impl)
# ---------------------------------------------------------------------------


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * kk * k / n)) for kk in range(n)])


def naive_stft_magnitudes(signal, n_fft, hop):
    n = len(signal)
    n_frames = max(1, math.ceil(n / hop))
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    mags = np.zeros((n_frames, n_fft // 2 + 1))
    for t in range(n_frames):
        frame = np.zeros(n_fft)
        chunk = signal[t * hop:t * hop + n_fft]
        frame[:len(chunk)] = chunk
        mags[t] = np.abs(naive_dft(frame * win))[:n_fft // 2 + 1]
    return mags


def naive_dct_ii(x, n_out):
    n = len(x)
    out = np.zeros(n_out)
    for k in range(n_out):
        s = 0.0
        for i in range(n):
            s += x[i] * math.cos(math.pi * (2 * i + 1) * k / (2 * n))
        out[k] = s * (math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n))
    return out


def naive_mel_weights(n_mels, n_fft, sr, fmin, fmax):
    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def imel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = [imel(mel(fmin) + (mel(fmax) - mel(fmin)) * i / (n_mels + 1))
             for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        for b in range(n_fft // 2 + 1):
            f = b * sr / n_fft
            if edges[i] < f < edges[i + 2]:
                if f <= edges[i + 1]:
                    fb[i, b] = (f - edges[i]) / (edges[i + 1] - edges[i])
                else:
                    fb[i, b] = (edges[i + 2] - f) / (edges[i + 2] - edges[i + 1])
        fb[i] /= fb[i].max()
    return fb


def rel_close(actual, expected, rtol):
    scale = max(1.0, float(np.max(np.abs(expected))))
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=rtol * scale)


# ---------------------------------------------------------------------------
# stft
# ---------------------------------------------------------------------------


def test_stft_matches_naive_dft_on_random_inputs():
    rng = np.random.default_rng(7)
    for n, n_fft, hop in [(300, 64, 32), (1000, 256, 100), (4096, 1024, 512)]:
        x = rng.standard_normal(n)
        got = dsp.stft(x, n_fft, hop).magnitudes
        rel_close(got, naive_stft_magnitudes(x, n_fft, hop), 1e-6)


def test_stft_sine_peak_bin():
    sr, n_fft = 16000, 1024
    t = np.arange(sr) / sr
    spec = dsp.stft(np.sin(2 * np.pi * 440.0 * t), n_fft, 512)
    # 440 * 1024 / 16000 = 28.16 -> nearest bin 28, for every frame
    assert (spec.magnitudes.argmax(axis=1) == 28).all()


def test_stft_zero_signal():
    spec = dsp.stft(np.zeros(2000), 256, 128)
    assert spec.magnitudes.shape == (math.ceil(2000 / 128), 129)
    assert not spec.magnitudes.any()


def test_stft_parseval_per_frame():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(2048)
    n_fft, hop = 512, 256
    spec = dsp.stft(x, n_fft, hop)
    win = dsp.hann_periodic(n_fft)
    for t in range(spec.n_frames):
        frame = np.zeros(n_fft)
        chunk = x[t * hop:t * hop + n_fft]
        frame[:len(chunk)] = chunk
        m = spec.magnitudes[t] ** 2
        full = m[0] + m[-1] + 2 * m[1:-1].sum()
        expected = n_fft * np.sum((frame * win) ** 2)
        assert full == pytest.approx(expected, rel=1e-6)


def test_stft_covers_all_samples_min_one_frame():
    spec = dsp.stft(np.ones(3), 64, 32)
    assert spec.n_frames == 1
    spec = dsp.stft(np.ones(65), 64, 32)
    assert spec.n_frames == 3  # starts 0, 32, 64


def test_stft_rejects_bad_sizes():
    with pytest.raises(dsp.DspError):
        dsp.stft(np.ones(10), 100, 10)  # not a power of two
    with pytest.raises(dsp.DspError):
        dsp.stft(np.ones(10), 64, 0)
    with pytest.raises(dsp.DspError):
        dsp.stft(np.array([]), 64, 32)


# ---------------------------------------------------------------------------
# mel filterbank
# ---------------------------------------------------------------------------


def test_mel_scale_moment():
    assert dsp.hz_to_mel(700.0) == pytest.approx(2595.0 * math.log10(2), abs=1e-9)
    assert dsp.hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)


def test_mel_filterbank_matches_naive():
    fb = dsp.mel_filterbank(40, 1024, 16000, fmin=0.0, fmax=8000.0)
    rel_close(fb, naive_mel_weights(40, 1024, 16000, 0.0, 8000.0), 1e-6)


def test_mel_filters_nonnegative_unimodal_peak_one():
    fb = dsp.mel_filterbank(40, 1024, 16000)
    assert (fb >= 0).all()
    assert fb.max(axis=1) == pytest.approx(np.ones(40), abs=1e-12)
    for row in fb:
        support = np.flatnonzero(row > 0)
        d = np.diff(row[support[0]:support[-1] + 1])
        # rises then falls: no negative step before the peak, none positive after
        peak = row.argmax() - support[0]
        assert (d[:peak] >= -1e-12).all()
        assert (d[peak:] <= 1e-12).all()


def test_mel_interior_bins_covered():
    n_mels, n_fft, sr = 40, 1024, 16000
    fb = dsp.mel_filterbank(n_mels, n_fft, sr, fmin=0.0, fmax=8000.0)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    interior = (freqs > 0.0) & (freqs < 8000.0)
    assert (fb.sum(axis=0)[interior] > 0).all()


def test_mel_too_many_filters_is_an_error():
    with pytest.raises(dsp.DspError, match="empty mel filter"):
        dsp.mel_filterbank(400, 256, 16000)


# ---------------------------------------------------------------------------
# dct
# ---------------------------------------------------------------------------


def test_dct_constant_vector():
    c = dsp.dct_ii(np.full(8, 3.0), 8)
    assert c[0] == pytest.approx(3.0 * 8 / math.sqrt(8))
    assert np.abs(c[1:]).max() < 1e-12


def test_dct_matches_naive():
    rng = np.random.default_rng(11)
    for n in [2, 5, 16, 40]:
        x = rng.standard_normal(n)
        rel_close(dsp.dct_ii(x, n), naive_dct_ii(x, n), 1e-6)


def test_dct_roundtrip_orthonormal():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(17)
    back = dsp.dct_ii_inverse(dsp.dct_ii(x, 17), 17)
    np.testing.assert_allclose(back, x, atol=1e-9)


def test_dct_length_two_closed_form():
    a, b = 1.7, -0.3
    c = dsp.dct_ii(np.array([a, b]), 2)
    assert c[0] == pytest.approx((a + b) / math.sqrt(2))
    assert c[1] == pytest.approx((a - b) / math.sqrt(2))


# ---------------------------------------------------------------------------
# resample / lowpass
# ---------------------------------------------------------------------------


def test_resample_identity_bit_exact():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(1000)
    y = dsp.resample(x, 22050, 22050)
    assert (x == y).all()


def test_resample_sine_keeps_frequency():
    sr_from, sr_to = 48000, 16000
    t = np.arange(sr_from) / sr_from
    x = np.sin(2 * np.pi * 440.0 * t)
    y = dsp.resample(x, sr_from, sr_to)
    assert len(y) == math.ceil(len(x) * sr_to / sr_from)
    spec = dsp.stft(y[1000:-1000], 1024, 512)
    # last frame is mostly zero padding; not meaningful for the peak check
    assert (spec.magnitudes.argmax(axis=1)[:-1] == round(440 * 1024 / sr_to)).all()


def test_resample_upsample_sine():
    sr_from, sr_to = 16000, 24000
    t = np.arange(sr_from) / sr_from
    x = np.sin(2 * np.pi * 440.0 * t)
    y = dsp.resample(x, sr_from, sr_to)
    spec = dsp.stft(y[2000:-2000], 1024, 512)
    assert (spec.magnitudes.argmax(axis=1)[:-1] == round(440 * 1024 / sr_to)).all()


def test_resample_dc_passthrough():
    x = np.full(8000, 0.5)
    y = dsp.resample(x, 48000, 16000)
    assert np.mean(y[100:-100]) == pytest.approx(0.5, abs=1e-3)


def test_resample_rejects_bad_rates():
    with pytest.raises(dsp.DspError):
        dsp.resample(np.ones(10), 0, 16000)
    with pytest.raises(dsp.DspError):
        dsp.resample(np.ones(10), 16000, -1)


def test_lowpass_passband_amplitude():
    sr = 16000
    t = np.arange(sr) / sr
    x = np.sin(2 * np.pi * 100.0 * t)
    y = dsp.lowpass_fir(x, 4000.0, sr)
    mid = slice(1000, -1000)
    amp = math.sqrt(2) * np.sqrt(np.mean(y[mid] ** 2))
    assert amp == pytest.approx(1.0, rel=0.01)


def test_lowpass_stopband_attenuation():
    sr = 16000
    t = np.arange(sr) / sr
    x = np.sin(2 * np.pi * 7000.0 * t)
    y = dsp.lowpass_fir(x, 2000.0, sr)
    mid = slice(1000, -1000)
    ratio = np.sqrt(np.mean(y[mid] ** 2)) / np.sqrt(np.mean(x[mid] ** 2))
    assert 20 * math.log10(max(ratio, 1e-30)) <= -40.0


def test_lowpass_group_delay_compensated():
    sr = 16000
    t = np.arange(4000) / sr
    x = np.sin(2 * np.pi * 200.0 * t)
    y = dsp.lowpass_fir(x, 3000.0, sr)
    assert len(y) == len(x)
    mid = slice(500, -500)
    np.testing.assert_allclose(y[mid], x[mid], atol=0.02)


def test_lowpass_cutoff_above_nyquist():
    with pytest.raises(dsp.DspError, match="cutoff above Nyquist"):
        dsp.lowpass_fir(np.ones(100), 8000.0, 16000)
