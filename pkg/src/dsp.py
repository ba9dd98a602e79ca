"""STFT analysis and weighted overlap-add synthesis.

Frames start at multiples of the hop with no implicit centering: a signal of
``n`` samples yields ``floor((n - N) / L) + 1`` frames and synthesis returns
``(T - 1) * L + N`` samples. Use :func:`pad_for_analysis` and
:func:`trim_synthesis` when every sample of an utterance must be
reconstructed, since the first and last ``N - L`` samples are outside the
constant-overlap-add region.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .config import Config
from .errors import BadConfigError, ShapeMismatchError, SignalError

logger = logging.getLogger(__name__)

COLA_TOLERANCE = 1e-6

WINDOW_NAMES = ("sqrt_hann", "hann", "hamming", "rect")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeSignal:
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if samples.size < 1:
            raise SignalError("signal must hold at least one sample")
        if not np.all(np.isfinite(samples)):
            raise SignalError("signal contains NaN or Inf samples")
        if self.sample_rate <= 0:
            raise SignalError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", _frozen(samples))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class StftConfig:
    frame_len: int
    hop: int
    analysis_window: np.ndarray = field(repr=False)
    synthesis_window: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.frame_len <= 0 or not 0 < self.hop <= self.frame_len:
            raise BadConfigError(
                f"bad config: need 0 < hop <= frame_len, got hop={self.hop}, "
                f"frame_len={self.frame_len}"
            )

        for name in ("analysis_window", "synthesis_window"):
            window = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if window.size != self.frame_len:
                raise BadConfigError(
                    f"bad config: {name} has length {window.size}, expected {self.frame_len}"
                )
            if not np.all(np.isfinite(window)) or np.any(window < 0):
                raise BadConfigError(f"bad config: {name} must be finite and nonnegative")
            object.__setattr__(self, name, _frozen(window))

        deviation = check_cola(self)
        if not deviation <= COLA_TOLERANCE:
            raise BadConfigError(
                f"bad config: windows violate constant overlap-add (deviation {deviation:.3g})"
            )

    @property
    def num_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def ola_gain(self) -> float:
        gain = _overlap_constant(self.analysis_window, self.synthesis_window, self.hop)
        return 1.0 if abs(gain - 1.0) < 1e-9 else gain


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray
    config: StftConfig
    sample_rate: int = 8000

    def __post_init__(self):
        bins = np.array(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[0] != self.config.num_bins:
            raise ShapeMismatchError(
                f"spectrogram shape {bins.shape} does not match {self.config.num_bins} bins"
            )
        if not np.all(np.isfinite(bins)):
            raise SignalError("spectrogram contains NaN or Inf entries")
        object.__setattr__(self, "bins", _frozen(bins))

    @property
    def num_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bins.shape


@dataclass(frozen=True)
class MagSpectrogram:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError(f"magnitude must be F x T, got {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise SignalError("magnitudes must be finite and nonnegative")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class PhaseSpectrogram:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError(f"phase must be F x T, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise SignalError("phases must be finite")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def make_window(name: str, frame_len: int) -> np.ndarray:

    if name == "sqrt_hann":
        return np.sqrt(get_window("hann", frame_len, fftbins=True))
    if name == "hann":
        return get_window("hann", frame_len, fftbins=True)
    if name == "hamming":
        return get_window("hamming", frame_len, fftbins=True)
    if name == "rect":
        return np.ones(frame_len)
    raise BadConfigError(f"bad config: unknown window '{name}', expected one of {WINDOW_NAMES}")


def make_config(
    frame_len: Optional[int] = None,
    hop: Optional[int] = None,
    window: str = "sqrt_hann",
    synthesis_window: Optional[str] = None,
) -> StftConfig:
    """Defaults give 129 bins at 8 kHz (32 ms frames, 16 ms shift)."""

    frame_len = frame_len or Config.frame_len()
    hop = hop or Config.hop()
    return StftConfig(
        frame_len=frame_len,
        hop=hop,
        analysis_window=make_window(window, frame_len),
        synthesis_window=make_window(synthesis_window or window, frame_len),
    )


def _overlap_sums(analysis: np.ndarray, synthesis: np.ndarray, hop: int) -> np.ndarray:
    # steady-state overlap sum is periodic in the hop
    product = analysis * synthesis
    sums = np.zeros(hop)
    for start in range(0, product.size, hop):
        chunk = product[start : start + hop]
        sums[: chunk.size] += chunk
    return sums


def _overlap_constant(analysis: np.ndarray, synthesis: np.ndarray, hop: int) -> float:
    return float(np.median(_overlap_sums(analysis, synthesis, hop)))


def check_cola(config: StftConfig) -> float:
    """Max relative deviation of the window overlap sum from its median."""

    sums = _overlap_sums(config.analysis_window, config.synthesis_window, config.hop)
    c = float(np.median(sums))
    if c <= 0:
        return float("inf")
    return float(np.max(np.abs(sums - c)) / c)


def analyze(signal: TimeSignal, config: StftConfig) -> ComplexSpectrogram:

    samples = signal.samples
    N, L = config.frame_len, config.hop

    if samples.size < N:
        logger.warning(
            f"Signal of {samples.size} samples is shorter than one frame, zero-padding to {N}"
        )
        samples = np.pad(samples, (0, N - samples.size))

    frames = sliding_window_view(samples, N)[::L]
    bins = np.fft.rfft(frames * config.analysis_window, n=N, axis=1)

    return ComplexSpectrogram(bins=bins.T, config=config, sample_rate=signal.sample_rate)


def synthesize(spec: ComplexSpectrogram) -> TimeSignal:

    config = spec.config
    N, L = config.frame_len, config.hop
    T = spec.num_frames

    frames = np.fft.irfft(spec.bins.T, n=N, axis=1) * config.synthesis_window

    output = np.zeros((T - 1) * L + N)
    for t in range(T):
        output[t * L : t * L + N] += frames[t]

    gain = config.ola_gain
    if gain != 1.0:
        output /= gain

    return TimeSignal(samples=output, sample_rate=spec.sample_rate)


def magnitude_phase(spec: ComplexSpectrogram) -> Tuple[MagSpectrogram, PhaseSpectrogram]:
    # np.angle(0) == 0, which is the convention for silent bins
    return MagSpectrogram(np.abs(spec.bins)), PhaseSpectrogram(np.angle(spec.bins))


def polar_to_spectrogram(
    magnitude: MagSpectrogram,
    phase: PhaseSpectrogram,
    config: StftConfig,
    sample_rate: int = 8000,
) -> ComplexSpectrogram:

    if magnitude.shape != phase.shape:
        raise ShapeMismatchError(
            f"magnitude {magnitude.shape} and phase {phase.shape} differ in shape"
        )
    return ComplexSpectrogram(
        bins=magnitude.values * np.exp(1j * phase.values),
        config=config,
        sample_rate=sample_rate,
    )


def padding_for(length: int, config: StftConfig) -> Tuple[int, int]:

    N, L = config.frame_len, config.hop
    front = N - L
    needed = length + 2 * front
    frames = max(1, int(np.ceil((needed - N) / L)) + 1)
    total = (frames - 1) * L + N
    return front, total - length - front


def pad_for_analysis(signal: TimeSignal, config: StftConfig) -> TimeSignal:

    front, back = padding_for(len(signal), config)
    return TimeSignal(np.pad(signal.samples, (front, back)), signal.sample_rate)


def trim_synthesis(signal: TimeSignal, length: int, config: StftConfig) -> TimeSignal:

    front = config.frame_len - config.hop
    if len(signal) < front + length:
        raise SignalError(
            f"synthesized signal of {len(signal)} samples cannot hold {length} samples after {front} padding"
        )
    return TimeSignal(signal.samples[front : front + length], signal.sample_rate)
