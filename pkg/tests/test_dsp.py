import logging

import numpy as np
import pytest

from src.dsp import (
    ComplexSpectrogram,
    StftConfig,
    TimeSignal,
    analyze,
    check_cola,
    magnitude_phase,
    make_config,
    make_window,
    pad_for_analysis,
    padding_for,
    polar_to_spectrogram,
    synthesize,
    trim_synthesis,
)
from src.errors import BadConfigError, SignalError
from tests.helpers import random_signal, tone


def direct_stft(samples, config):
    N, L = config.frame_len, config.hop
    n = np.arange(N)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(config.num_bins), n) / N)
    frames = [samples[t * L : t * L + N] * config.analysis_window for t in range((len(samples) - N) // L + 1)]
    return np.stack([basis @ frame for frame in frames], axis=1)


class TestStftConfig:

    def test_default_geometry(self, stft_config):
        assert stft_config.num_bins == 129
        assert stft_config.ola_gain == 1.0
        assert check_cola(stft_config) < 1e-12

    def test_hop_longer_than_frame_rejected(self):
        with pytest.raises(BadConfigError):
            make_config(256, 300)

    def test_non_cola_pair_rejected(self):
        with pytest.raises(BadConfigError, match="overlap-add"):
            make_config(256, 128, window="hann")

    def test_window_length_mismatch(self):
        window = make_window("hann", 128)
        with pytest.raises(BadConfigError):
            StftConfig(256, 128, window, window)

    def test_unknown_window(self):
        with pytest.raises(BadConfigError):
            make_window("kaiser", 256)

    def test_overlap_gain_for_quarter_hop(self):
        config = make_config(256, 64, window="hann")
        assert config.ola_gain == pytest.approx(1.5)

    def test_rect_pair_at_full_hop_is_exact(self):
        assert check_cola(make_config(64, 64, window="rect")) == 0.0

    def test_hann_analysis_with_rect_synthesis(self):
        config = make_config(256, 128, window="hann", synthesis_window="rect")
        assert check_cola(config) < 1e-6
        assert config.ola_gain == 1.0


class TestAnalyze:

    def test_frame_count(self, stft_config, rng):
        spec = analyze(random_signal(rng, 1000), stft_config)
        assert spec.shape == (129, (1000 - 256) // 128 + 1)

    def test_short_signal_is_zero_padded(self, stft_config, rng, caplog):
        with caplog.at_level(logging.WARNING):
            spec = analyze(random_signal(rng, 100), stft_config)
        assert spec.num_frames == 1
        assert "shorter than one frame" in caplog.text

    def test_bin_centred_tone_peaks_in_its_bin(self, stft_config):
        # 1 kHz is bin 32 at 31.25 Hz spacing
        spec = analyze(tone(1000.0, 4000), stft_config)
        mag, _ = magnitude_phase(spec)
        assert np.all(np.argmax(mag.values, axis=0) == 32)

    def test_silent_bins_have_zero_phase(self, stft_config):
        spec = analyze(TimeSignal(np.zeros(1024)), stft_config)
        _, phase = magnitude_phase(spec)
        assert np.all(phase.values == 0.0)

    def test_matches_direct_dft(self, rng):
        config = make_config(64, 32)
        signal = random_signal(rng, 300)
        expected = direct_stft(signal.samples, config)
        bins = analyze(signal, config).bins
        assert bins.shape == expected.shape
        assert np.linalg.norm(bins - expected) / np.linalg.norm(expected) < 1e-9

    def test_rect_window_dc(self):
        spec = analyze(TimeSignal(np.ones(256)), make_config(256, 256, window="rect"))
        assert spec.shape == (129, 1)
        assert spec.bins[0, 0] == pytest.approx(256.0 + 0.0j, abs=1e-9)
        np.testing.assert_allclose(spec.bins[1:, 0], 0.0, atol=1e-9)

    def test_linearity(self, stft_config, rng):
        x, y = random_signal(rng, 1500), random_signal(rng, 1500)
        combined = analyze(TimeSignal(2.0 * x.samples - 0.5 * y.samples), stft_config).bins
        expected = 2.0 * analyze(x, stft_config).bins - 0.5 * analyze(y, stft_config).bins
        np.testing.assert_allclose(combined, expected, atol=1e-10)

    def test_parseval_per_frame(self, rng):
        N = 64
        signal = random_signal(rng, 4 * N)
        bins = analyze(signal, make_config(N, N, window="rect")).bins
        power = np.abs(bins) ** 2
        weights = np.full(N // 2 + 1, 2.0)
        weights[[0, -1]] = 1.0
        frame_energy = np.sum(signal.samples.reshape(4, N) ** 2, axis=1)
        np.testing.assert_allclose(weights @ power / N, frame_energy, rtol=1e-10)

    def test_polar_form(self, small_config):
        spec = ComplexSpectrogram(np.full((9, 2), 3.0 + 4.0j), small_config)
        mag, phase = magnitude_phase(spec)
        np.testing.assert_allclose(mag.values, 5.0)
        np.testing.assert_allclose(phase.values, np.arctan2(4.0, 3.0))


class TestSynthesize:

    def test_output_length(self, stft_config, rng):
        spec = analyze(random_signal(rng, 1000), stft_config)
        assert len(synthesize(spec)) == (spec.num_frames - 1) * 128 + 256

    @pytest.mark.parametrize("frame_len,hop,window", [(256, 128, "sqrt_hann"), (64, 64, "rect"), (256, 64, "hann")])
    def test_perfect_reconstruction(self, rng, frame_len, hop, window):
        config = make_config(frame_len, hop, window=window)
        signal = random_signal(rng, 2000)
        padded = pad_for_analysis(signal, config)
        restored = trim_synthesis(synthesize(analyze(padded, config)), len(signal), config)
        np.testing.assert_allclose(restored.samples, signal.samples, atol=1e-10)

    def test_interior_reconstruction_without_padding(self, stft_config, rng):
        signal = random_signal(rng, 3000)
        restored = synthesize(analyze(signal, stft_config))
        interior = slice(128, len(restored) - 128)
        np.testing.assert_allclose(restored.samples[interior], signal.samples[interior], atol=1e-10)

    def test_polar_round_trip(self, stft_config, rng):
        spec = analyze(random_signal(rng, 2048), stft_config)
        mag, phase = magnitude_phase(spec)
        rebuilt = polar_to_spectrogram(mag, phase, stft_config)
        np.testing.assert_allclose(rebuilt.bins, spec.bins, atol=1e-12)


class TestPadding:

    def test_padding_covers_signal(self, stft_config):
        for length in (1, 255, 256, 1000, 4097):
            front, back = padding_for(length, stft_config)
            total = front + length + back
            assert front == 128
            assert (total - 256) % 128 == 0
            assert back >= 128

    def test_trim_rejects_short_signal(self, stft_config):
        with pytest.raises(SignalError):
            trim_synthesis(TimeSignal(np.zeros(200)), 100, stft_config)


class TestTimeSignal:

    def test_samples_are_read_only(self):
        signal = TimeSignal(np.ones(4))
        with pytest.raises(ValueError):
            signal.samples[0] = 2.0

    def test_rejects_nan(self):
        with pytest.raises(SignalError):
            TimeSignal(np.array([0.0, np.nan]))

    def test_energy(self):
        assert TimeSignal(np.array([3.0, 4.0])).energy == 25.0
