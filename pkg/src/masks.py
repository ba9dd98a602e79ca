import logging
import struct
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .config import Config
from .dsp import (
    ComplexSpectrogram,
    MagSpectrogram,
    PhaseSpectrogram,
    StftConfig,
    TimeSignal,
    analyze,
    pad_for_analysis,
    polar_to_spectrogram,
    synthesize,
)
from .errors import BadConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

MASK_GRID_MAGIC = b"UPITMASK"
MASK_GRID_HEADER = struct.Struct("<8sII")


class MaskKind(str, Enum):
    IRM = "irm"
    IAM = "iam"
    IPSM = "ipsm"
    INPSM = "inpsm"
    ESTIMATED = "estimated"


ORACLE_KINDS = (MaskKind.IRM, MaskKind.IAM, MaskKind.IPSM, MaskKind.INPSM)


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray
    kind: MaskKind = MaskKind.ESTIMATED

    def __post_init__(self):
        masks = np.array(self.masks, dtype=np.float64)
        if masks.ndim != 3:
            raise ShapeMismatchError(f"mask set must be S x F x T, got shape {masks.shape}")
        if not np.all(np.isfinite(masks)):
            raise ShapeMismatchError("mask set contains NaN or Inf entries")

        kind = MaskKind(self.kind)
        if kind == MaskKind.IRM and (masks.min() < 0 or masks.max() > 1 + 1e-12):
            raise ShapeMismatchError("IRM entries must lie in [0, 1]")
        if kind in (MaskKind.IAM, MaskKind.INPSM) and masks.min() < 0:
            raise ShapeMismatchError(f"{kind.value} entries must be nonnegative")

        masks.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "kind", kind)

    @property
    def num_sources(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.masks.shape

    def __getitem__(self, index: int) -> np.ndarray:
        return self.masks[index]


@dataclass(frozen=True)
class SourceSet:
    sources: Tuple[ComplexSpectrogram, ...]
    mixture: ComplexSpectrogram

    def __post_init__(self):
        sources = tuple(self.sources)
        if not sources:
            raise ShapeMismatchError("source set needs at least one source")
        for index, source in enumerate(sources):
            if source.shape != self.mixture.shape:
                raise ShapeMismatchError(
                    f"source {index} has shape {source.shape}, mixture has {self.mixture.shape}"
                )
        object.__setattr__(self, "sources", sources)

    @classmethod
    def from_signals(
        cls,
        signals: Sequence[TimeSignal],
        config: StftConfig,
        mixture: Optional[TimeSignal] = None,
        pad: bool = False,
    ) -> "SourceSet":
        """Analyse aligned sources; the mixture defaults to their sample-wise
        sum. With ``pad`` every signal goes through :func:`pad_for_analysis`
        first, so reconstructions cover the whole utterance."""

        if not signals:
            raise ShapeMismatchError("source set needs at least one source")
        if mixture is None:
            mixture = TimeSignal(np.sum([s.samples for s in signals], axis=0), signals[0].sample_rate)

        lengths = {len(s) for s in signals} | {len(mixture)}
        if len(lengths) != 1:
            raise ShapeMismatchError(f"sources and mixture must have equal length, got {sorted(lengths)}")

        prepare = (lambda s: pad_for_analysis(s, config)) if pad else (lambda s: s)
        return cls(
            sources=tuple(analyze(prepare(s), config) for s in signals),
            mixture=analyze(prepare(mixture), config),
        )

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def config(self) -> StftConfig:
        return self.mixture.config

    @cached_property
    def source_magnitudes(self) -> np.ndarray:
        return np.abs(np.stack([s.bins for s in self.sources]))

    @cached_property
    def source_phases(self) -> np.ndarray:
        return np.angle(np.stack([s.bins for s in self.sources]))

    @cached_property
    def mixture_magnitude(self) -> np.ndarray:
        return np.abs(self.mixture.bins)

    @cached_property
    def mixture_phase(self) -> np.ndarray:
        return np.angle(self.mixture.bins)

    def permuted(self, order: Sequence[int]) -> "SourceSet":
        return SourceSet(sources=tuple(self.sources[i] for i in order), mixture=self.mixture)


def _resolve_epsilon(epsilon: Optional[float]) -> float:
    return Config.epsilon() if epsilon is None else epsilon


def _safe_ratio(numerator: np.ndarray, denominator: np.ndarray, epsilon: float) -> np.ndarray:
    denominator = np.broadcast_to(denominator, numerator.shape)
    return np.divide(
        numerator,
        denominator,
        out=np.zeros_like(numerator),
        where=denominator >= epsilon,
    )


def phase_sensitive_magnitudes(sources: SourceSet) -> np.ndarray:
    """A_s ∘ cos(θ_y − θ_s) for every source, shape S x F x T."""

    return sources.source_magnitudes * np.cos(sources.mixture_phase - sources.source_phases)


def oracle_mask(
    sources: SourceSet,
    kind: Union[MaskKind, str],
    epsilon: Optional[float] = None,
) -> MaskSet:

    kind = MaskKind(kind)
    if kind not in ORACLE_KINDS:
        raise BadConfigError(f"unknown oracle mask kind '{kind.value}'")

    epsilon = _resolve_epsilon(epsilon)
    magnitudes = sources.source_magnitudes
    mixture_mag = sources.mixture_magnitude

    if kind == MaskKind.IRM:
        total = magnitudes.sum(axis=0, keepdims=True)
        masks = np.full_like(magnitudes, 1.0 / sources.num_sources)
        np.divide(
            magnitudes,
            np.broadcast_to(total, magnitudes.shape),
            out=masks,
            where=np.broadcast_to(total, magnitudes.shape) >= epsilon,
        )
        return MaskSet(np.clip(masks, 0.0, 1.0), MaskKind.IRM)

    if kind == MaskKind.IAM:
        return MaskSet(_safe_ratio(magnitudes, mixture_mag, epsilon), MaskKind.IAM)

    ipsm = _safe_ratio(phase_sensitive_magnitudes(sources), mixture_mag, epsilon)
    if kind == MaskKind.IPSM:
        return MaskSet(ipsm, MaskKind.IPSM)
    return MaskSet(np.maximum(ipsm, 0.0), MaskKind.INPSM)


def negative_fraction(mask_set: MaskSet) -> float:
    fraction = float(np.mean(mask_set.masks < 0))
    logger.debug(f"{fraction:.1%} of {mask_set.kind.value} entries are negative")
    return fraction


def apply_mask(mask: np.ndarray, mixture_mag: MagSpectrogram) -> MagSpectrogram:

    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != mixture_mag.shape:
        raise ShapeMismatchError(
            f"mask shape {mask.shape} does not match mixture {mixture_mag.shape}"
        )
    return MagSpectrogram(np.maximum(mask * mixture_mag.values, 0.0))


def reconstruct(
    est_mag: MagSpectrogram,
    mixture_phase: PhaseSpectrogram,
    config: StftConfig,
    sample_rate: int = 8000,
) -> TimeSignal:
    """Time-domain estimate from a magnitude and the mixture phase."""

    return synthesize(polar_to_spectrogram(est_mag, mixture_phase, config, sample_rate))


def write_mask_grid(path: str, mask: np.ndarray) -> str:

    mask = np.asarray(mask, dtype="<f8")
    if mask.ndim != 2:
        raise ShapeMismatchError(f"mask grid must be F x T, got {mask.shape}")

    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "wb") as f:
        f.write(MASK_GRID_HEADER.pack(MASK_GRID_MAGIC, *mask.shape))
        f.write(mask.tobytes(order="C"))

    logger.debug(f"Wrote {mask.shape[0]}x{mask.shape[1]} mask grid to {out_path}")
    return str(out_path)


def read_mask_grid(path: str) -> np.ndarray:

    with open(path, "rb") as f:
        header = f.read(MASK_GRID_HEADER.size)
        magic, num_bins, num_frames = MASK_GRID_HEADER.unpack(header)
        if magic != MASK_GRID_MAGIC:
            raise ShapeMismatchError(f"{path} is not a mask grid file")
        data = np.frombuffer(f.read(), dtype="<f8")

    if data.size != num_bins * num_frames:
        raise ShapeMismatchError(
            f"{path}: expected {num_bins * num_frames} values, found {data.size}"
        )
    return data.reshape(num_bins, num_frames).astype(np.float64)
