import logging
import os
from pathlib import Path
from typing import List, Optional

import numpy as np
import soundfile as sf

from .dsp import TimeSignal
from .errors import SignalError

logger = logging.getLogger(__name__)

PCM_SUBTYPE = "PCM_16"


def read_wav(path: str, expected_rate: Optional[int] = None) -> TimeSignal:
    """Read a 16-bit mono WAV; samples are int / 32768 in [-1, 1)."""

    if not os.path.exists(path):
        raise FileNotFoundError(f"WAV file not found: {path}")

    info = sf.info(path)
    if info.channels != 1:
        raise SignalError(f"{path}: expected mono audio, found {info.channels} channels")
    if info.subtype != PCM_SUBTYPE:
        raise SignalError(f"{path}: expected {PCM_SUBTYPE} samples, found {info.subtype}")
    if expected_rate is not None and info.samplerate != expected_rate:
        raise SignalError(
            f"{path}: sample rate {info.samplerate} Hz does not match configured {expected_rate} Hz"
        )

    samples, rate = sf.read(path, dtype="float64", always_2d=False)
    logger.debug(f"Read {samples.size} samples at {rate} Hz from {path}")
    return TimeSignal(samples=samples, sample_rate=rate)


def write_wav(path: str, signal: TimeSignal) -> str:

    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    samples = signal.samples
    peak = float(np.max(np.abs(samples)))
    if peak >= 1.0:
        logger.warning(f"Clipping {out_path.name}: peak {peak:.3f} exceeds full scale")

    sf.write(str(out_path), to_pcm16(samples), signal.sample_rate, subtype=PCM_SUBTYPE)
    logger.debug(f"Wrote {len(signal)} samples to {out_path}")
    return str(out_path)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)


def quantize(signal: TimeSignal) -> TimeSignal:
    """Values a PCM_16 write followed by a read would return."""

    return TimeSignal(
        samples=to_pcm16(signal.samples) / 32768.0, sample_rate=signal.sample_rate
    )


def list_wavs(directory: str) -> List[str]:

    wavs = sorted(
        str(p) for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() == ".wav"
    )
    logger.debug(f"Found {len(wavs)} WAV files in {directory}")
    return wavs
