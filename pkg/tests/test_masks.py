import numpy as np
import pytest

from src.dsp import MagSpectrogram, PhaseSpectrogram, TimeSignal, analyze, trim_synthesis
from src.errors import BadConfigError, ShapeMismatchError
from src.masks import (
    MaskKind,
    MaskSet,
    SourceSet,
    apply_mask,
    negative_fraction,
    oracle_mask,
    read_mask_grid,
    reconstruct,
    write_mask_grid,
)
from tests.helpers import random_signal, source_set


@pytest.fixture
def two_sources(stft_config, rng):
    return source_set([random_signal(rng, 2000), random_signal(rng, 2000, scale=0.05)], stft_config)


@pytest.fixture
def opposed_sources(stft_config, rng):
    # second source is the first inverted at half amplitude
    x = random_signal(rng, 2000)
    return source_set([x, TimeSignal(-0.5 * x.samples)], stft_config)


class TestIdealRatioMask:

    def test_sums_to_one(self, two_sources):
        irm = oracle_mask(two_sources, MaskKind.IRM)
        np.testing.assert_allclose(irm.masks.sum(axis=0), 1.0, atol=1e-12)
        assert irm.masks.min() >= 0.0 and irm.masks.max() <= 1.0

    def test_degenerate_bins_are_uniform(self, stft_config):
        silent = TimeSignal(np.zeros(1000))
        irm = oracle_mask(SourceSet.from_signals([silent, silent, silent], stft_config), MaskKind.IRM)
        np.testing.assert_allclose(irm.masks, 1.0 / 3.0)

    def test_reconstructions_sum_to_mixture(self, two_sources, stft_config, rng):
        irm = oracle_mask(two_sources, MaskKind.IRM)
        mag = MagSpectrogram(two_sources.mixture_magnitude)
        phase = PhaseSpectrogram(two_sources.mixture_phase)
        estimates = [
            trim_synthesis(reconstruct(apply_mask(m, mag), phase, stft_config), 2000, stft_config)
            for m in irm.masks
        ]
        mixture = trim_synthesis(reconstruct(mag, phase, stft_config), 2000, stft_config)
        np.testing.assert_allclose(estimates[0].samples + estimates[1].samples, mixture.samples, atol=1e-10)


class TestIdealAmplitudeMask:

    def test_single_source_is_unity(self, stft_config, rng):
        sources = SourceSet.from_signals([random_signal(rng, 2000)], stft_config)
        iam = oracle_mask(sources, MaskKind.IAM)
        np.testing.assert_allclose(iam.masks, 1.0, atol=1e-9)

    def test_degenerate_bins_are_zero(self, stft_config):
        silent = TimeSignal(np.zeros(1000))
        iam = oracle_mask(SourceSet.from_signals([silent, silent], stft_config), MaskKind.IAM)
        assert np.all(iam.masks == 0.0)

    def test_may_exceed_one(self, opposed_sources):
        iam = oracle_mask(opposed_sources, MaskKind.IAM)
        np.testing.assert_allclose(iam.masks[0], 2.0, rtol=1e-9)


class TestPhaseSensitiveMasks:

    def test_projections_sum_to_one(self, two_sources):
        ipsm = oracle_mask(two_sources, MaskKind.IPSM)
        np.testing.assert_allclose(ipsm.masks.sum(axis=0), 1.0, atol=1e-9)

    def test_in_phase_sources_match_irm(self, stft_config, rng):
        x = random_signal(rng, 2000)
        sources = SourceSet.from_signals([x, TimeSignal(0.25 * x.samples)], stft_config)
        np.testing.assert_allclose(
            oracle_mask(sources, MaskKind.IPSM).masks, oracle_mask(sources, MaskKind.IRM).masks, atol=1e-9
        )

    def test_opposed_phase_is_negative(self, opposed_sources):
        ipsm = oracle_mask(opposed_sources, MaskKind.IPSM)
        np.testing.assert_allclose(ipsm.masks[1], -1.0, rtol=1e-9)
        assert negative_fraction(ipsm) == pytest.approx(0.5)

    def test_nonnegative_variant_clips(self, opposed_sources):
        inpsm = oracle_mask(opposed_sources, MaskKind.INPSM)
        assert inpsm.masks.min() == 0.0
        np.testing.assert_allclose(inpsm.masks[1], 0.0)

    def test_estimated_is_not_an_oracle(self, two_sources):
        with pytest.raises(BadConfigError):
            oracle_mask(two_sources, MaskKind.ESTIMATED)


class TestOracleRelations:

    def test_relations_hold_for_random_source_sets(self, small_config):
        rng = np.random.default_rng(21)
        for _ in range(20):
            S = int(rng.integers(2, 5))
            sources = source_set([random_signal(rng, 120, scale=rng.uniform(0.01, 1.0)) for _ in range(S)], small_config)
            iam = oracle_mask(sources, MaskKind.IAM).masks
            ipsm = oracle_mask(sources, MaskKind.IPSM).masks
            inpsm = oracle_mask(sources, MaskKind.INPSM).masks

            assert np.all(inpsm <= iam)
            np.testing.assert_array_equal(inpsm, np.maximum(ipsm, 0.0))
            np.testing.assert_allclose(iam * sources.mixture_magnitude, sources.source_magnitudes, atol=1e-9)


class TestSourceSetFromSignals:

    def test_explicit_mixture(self, small_config, rng):
        signals = [random_signal(rng, 64), random_signal(rng, 64)]
        mixture = random_signal(rng, 64)
        sources = SourceSet.from_signals(signals, small_config, mixture=mixture)
        np.testing.assert_allclose(sources.mixture.bins, analyze(mixture, small_config).bins)
        assert sources.num_sources == 2

    def test_default_mixture_is_the_sum(self, small_config, rng):
        signals = [random_signal(rng, 64), random_signal(rng, 64)]
        total = TimeSignal(signals[0].samples + signals[1].samples)
        sources = SourceSet.from_signals(signals, small_config)
        np.testing.assert_allclose(sources.mixture.bins, analyze(total, small_config).bins, atol=1e-12)

    def test_padding_adds_frames(self, small_config, rng):
        signals = [random_signal(rng, 64)]
        plain = SourceSet.from_signals(signals, small_config)
        padded = SourceSet.from_signals(signals, small_config, pad=True)
        assert padded.mixture.num_frames > plain.mixture.num_frames

    def test_length_mismatch(self, small_config, rng):
        with pytest.raises(ShapeMismatchError):
            SourceSet.from_signals([random_signal(rng, 64), random_signal(rng, 65)], small_config)
        with pytest.raises(ShapeMismatchError):
            SourceSet.from_signals([random_signal(rng, 64)], small_config, mixture=random_signal(rng, 60))

    def test_needs_a_source(self, small_config):
        with pytest.raises(ShapeMismatchError):
            SourceSet.from_signals([], small_config)


class TestMaskSet:

    def test_irm_range_checked(self):
        with pytest.raises(ShapeMismatchError):
            MaskSet(np.full((2, 3, 4), 1.5), MaskKind.IRM)

    def test_requires_three_axes(self):
        with pytest.raises(ShapeMismatchError):
            MaskSet(np.ones((3, 4)))

    def test_rejects_nan(self):
        masks = np.ones((2, 3, 4))
        masks[0, 0, 0] = np.nan
        with pytest.raises(ShapeMismatchError):
            MaskSet(masks)


class TestApplyMask:

    def test_clamps_negative_magnitudes(self):
        mag = MagSpectrogram(np.ones((3, 4)))
        out = apply_mask(np.full((3, 4), -0.5), mag)
        assert np.all(out.values == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            apply_mask(np.ones((3, 5)), MagSpectrogram(np.ones((3, 4))))


class TestMaskGrid:

    def test_round_trip(self, tmp_path, rng):
        mask = rng.uniform(-1, 2, size=(129, 17))
        path = write_mask_grid(str(tmp_path / "mask.bin"), mask)
        np.testing.assert_array_equal(read_mask_grid(path), mask)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTAMASK" + bytes(8))
        with pytest.raises(ShapeMismatchError):
            read_mask_grid(str(path))
