import numpy as np

from src.dsp import TimeSignal
from src.masks import SourceSet

SAMPLE_RATE = 8000


def random_signal(rng, length, scale=0.1):
    return TimeSignal(scale * rng.standard_normal(length), SAMPLE_RATE)


def tone(freq, length, amplitude=0.2, phase=0.0):
    t = np.arange(length) / SAMPLE_RATE
    return TimeSignal(amplitude * np.sin(2 * np.pi * freq * t + phase), SAMPLE_RATE)


def source_set(signals, config):
    """Padded analysis of the sources and of their sum."""
    return SourceSet.from_signals(signals, config, pad=True)
