import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dsp import (
    ComplexSpectrogram,
    MagSpectrogram,
    PhaseSpectrogram,
    StftConfig,
    TimeSignal,
    analyze,
    pad_for_analysis,
    trim_synthesis,
)
from .errors import BadConfigError, ShapeMismatchError, SignalError
from .masks import MaskKind, MaskSet, SourceSet, apply_mask, negative_fraction, oracle_mask, reconstruct
from .mixgen import MixtureRecord
from .model import ModelParams, forward, stack_features
from .pit import (
    LossKind,
    PairwiseLossMatrix,
    apply_permutation,
    average_overlapping,
    best_permutation,
    loss_targets,
    meta_frame_starts,
    pairwise_loss_matrix,
    two_stage_average,
)

logger = logging.getLogger(__name__)

SDR_CAP_DB = 100.0


class AssignmentMode(str, Enum):
    DEFAULT = "default"
    OPTIMAL = "optimal"


class Pairing(str, Enum):
    BEST = "best"
    INDEX = "index"


def _samples(signal: Union[TimeSignal, np.ndarray]) -> np.ndarray:
    return signal.samples if isinstance(signal, TimeSignal) else np.asarray(signal, dtype=np.float64)


def sdr(reference: Union[TimeSignal, np.ndarray], estimate: Union[TimeSignal, np.ndarray]) -> float:
    """Scale-invariant SDR in dB, clipped to [-100, 100]."""

    x, x_hat = _samples(reference), _samples(estimate)
    if x.shape != x_hat.shape:
        raise ShapeMismatchError(f"reference has {x.size} samples, estimate has {x_hat.size}")

    ref_energy = float(np.dot(x, x))
    if ref_energy == 0.0:
        raise SignalError("zero reference: SDR is undefined")

    alpha = float(np.dot(x, x_hat)) / ref_energy
    target = alpha * x
    error = target - x_hat
    target_energy = float(np.dot(target, target))
    error_energy = float(np.dot(error, error))

    if error_energy == 0.0:
        return SDR_CAP_DB
    if target_energy == 0.0:
        return -SDR_CAP_DB
    value = 10.0 * np.log10(target_energy / error_energy)
    return float(np.clip(value, -SDR_CAP_DB, SDR_CAP_DB))


def sdr_improvement(
    mixture: TimeSignal,
    references: Sequence[TimeSignal],
    estimates: Sequence[TimeSignal],
) -> List[float]:

    if len(references) != len(estimates):
        raise ShapeMismatchError(
            f"{len(estimates)} estimates cannot be paired with {len(references)} references"
        )
    return [sdr(ref, est) - sdr(ref, mixture) for ref, est in zip(references, estimates)]


def select_active_streams(estimates: Sequence[TimeSignal], k: int) -> Tuple[int, ...]:
    """Indices of the k most energetic streams, descending; ties go to the
    lower index."""

    if not 1 <= k <= len(estimates):
        raise BadConfigError(f"cannot select {k} of {len(estimates)} streams")
    energies = [float(np.dot(_samples(e), _samples(e))) for e in estimates]
    ranked = sorted(range(len(estimates)), key=lambda i: (-energies[i], i))
    return tuple(ranked[:k])


@dataclass(frozen=True)
class Analysis:
    """Padded mixture analysis plus what is needed to undo the padding."""

    spectrogram: ComplexSpectrogram
    magnitude: np.ndarray
    phase: np.ndarray
    length: int
    config: StftConfig


def analyze_mixture(mixture: TimeSignal, config: StftConfig) -> Analysis:

    spec = analyze(pad_for_analysis(mixture, config), config)
    return Analysis(
        spectrogram=spec,
        magnitude=np.abs(spec.bins),
        phase=np.angle(spec.bins),
        length=len(mixture),
        config=config,
    )


def reconstruct_streams(masks: np.ndarray, analysis: Analysis, sample_rate: int) -> List[TimeSignal]:

    magnitude = MagSpectrogram(analysis.magnitude)
    phase = PhaseSpectrogram(analysis.phase)
    return [
        trim_synthesis(
            reconstruct(apply_mask(mask, magnitude), phase, analysis.config, sample_rate),
            analysis.length,
            analysis.config,
        )
        for mask in masks
    ]


def _stage_masks(
    params: ModelParams, mixture_mag: np.ndarray, second_stage: Optional[ModelParams]
) -> np.ndarray:

    first, _ = forward(params, mixture_mag)
    if second_stage is None:
        return first.masks
    second, _ = forward(second_stage, stack_features(mixture_mag, first.masks))
    return two_stage_average(first, second).masks


def match_streams(chunk: np.ndarray, previous: np.ndarray, offset: int) -> np.ndarray:
    """Reorder ``chunk`` so its streams agree with ``previous`` on the frames
    they share; ``chunk`` starts ``offset`` frames after ``previous``."""

    overlap = min(previous.shape[2] - offset, chunk.shape[2])
    if overlap <= 0:
        return chunk
    S = chunk.shape[0]
    shared = previous[:, :, offset : offset + overlap]
    entries = np.array(
        [[float(np.sum((chunk[s, :, :overlap] - shared[r]) ** 2)) for r in range(S)] for s in range(S)]
    )
    perm = best_permutation(PairwiseLossMatrix(entries, normalizer=1.0, evaluations=S * S)).perm
    return apply_permutation(chunk, perm)


def model_masks(
    params: ModelParams,
    mixture_mag: np.ndarray,
    second_stage: Optional[ModelParams] = None,
    window: Optional[int] = None,
    stride: Optional[int] = None,
) -> np.ndarray:
    """Eval-mode masks; with a second stage, the average of both stages.

    With ``window`` the model sees overlapping windows of that many frames
    (half-window stride by default). Each window's streams are matched to
    the previous window before the overlaps are averaged.
    """

    T = mixture_mag.shape[1]
    if window is None or window >= T:
        return _stage_masks(params, mixture_mag, second_stage)
    if window < 1:
        raise BadConfigError(f"inference window must be >= 1 frame, got {window}")

    stride = max(window // 2, 1) if stride is None else stride
    if not 1 <= stride <= window:
        raise BadConfigError(f"inference stride must lie in [1, {window}], got {stride}")

    starts = meta_frame_starts(T, window, stride)
    chunks: List[np.ndarray] = []
    for index, start in enumerate(starts):
        stop = min(start + window, T)
        chunk = _stage_masks(params, mixture_mag[:, start:stop], second_stage)
        if chunks:
            chunk = match_streams(chunk, chunks[-1], start - starts[index - 1])
        chunks.append(chunk)

    logger.debug(f"Averaged {len(chunks)} windows of {window} frames over {T} frames")
    return average_overlapping(chunks, starts, T)


def separate(
    params: ModelParams,
    mixture: TimeSignal,
    config: StftConfig,
    second_stage: Optional[ModelParams] = None,
    window: Optional[int] = None,
    stride: Optional[int] = None,
) -> Tuple[np.ndarray, List[TimeSignal]]:
    """Separate with a constant output permutation over the utterance."""

    analysis = analyze_mixture(mixture, config)
    masks = model_masks(params, analysis.magnitude, second_stage, window, stride)
    return masks, reconstruct_streams(masks, analysis, mixture.sample_rate)


def oracle_estimates(
    record: MixtureRecord, config: StftConfig, kind: Union[MaskKind, str]
) -> Tuple[MaskSet, List[TimeSignal]]:
    """Ideal mask of the record's real sources and its reconstructions."""

    analysis = analyze_mixture(record.mixture, config)
    sources = SourceSet.from_signals(record.scaled_sources(), config, mixture=record.mixture, pad=True)
    mask_set = oracle_mask(sources, kind)
    if mask_set.kind == MaskKind.IPSM:
        negative_fraction(mask_set)
    return mask_set, reconstruct_streams(mask_set.masks, analysis, record.mixture.sample_rate)


@dataclass(frozen=True)
class EvalUtterance:
    utt_id: str
    masks: np.ndarray
    mixture: TimeSignal
    references: Tuple[TimeSignal, ...]
    speakers: Tuple[str, ...]
    condition: str = ""

    @classmethod
    def from_record(cls, record: MixtureRecord, masks: np.ndarray) -> "EvalUtterance":
        speakers = record.speakers or tuple(f"spk{k}" for k in range(record.num_speakers))
        return cls(
            utt_id=record.record_id,
            masks=np.asarray(masks, dtype=np.float64),
            mixture=record.mixture,
            references=tuple(record.scaled_sources()),
            speakers=tuple(speakers),
            condition=record.split,
        )


@dataclass(frozen=True)
class EvalRow:
    utt_id: str
    speaker: str
    mode: AssignmentMode
    sdr_in: float
    sdr_out: float

    @property
    def improvement(self) -> float:
        return self.sdr_out - self.sdr_in


@dataclass
class EvalReport:
    mode: AssignmentMode
    rows: List[EvalRow] = field(default_factory=list)
    switch_counts: Dict[str, int] = field(default_factory=dict)
    gaps: Dict[str, float] = field(default_factory=dict)
    active_streams: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def utterance_improvements(self) -> Dict[str, float]:
        per_utt: Dict[str, List[float]] = {}
        for row in self.rows:
            per_utt.setdefault(row.utt_id, []).append(row.improvement)
        return {utt: float(np.mean(values)) for utt, values in per_utt.items()}

    def mean_improvement(self) -> float:
        values = list(self.utterance_improvements().values())
        return float(np.mean(values)) if values else float("nan")

    def per_speaker(self) -> Dict[str, float]:
        per_spk: Dict[str, List[float]] = {}
        for row in self.rows:
            per_spk.setdefault(row.speaker, []).append(row.improvement)
        return {spk: float(np.mean(values)) for spk, values in sorted(per_spk.items())}

    def mean_gap(self) -> float:
        """Mean DEFAULT minus OPTIMAL improvement (dB)."""
        return float(np.mean(list(self.gaps.values()))) if self.gaps else float("nan")

    def total_switches(self) -> int:
        return int(sum(self.switch_counts.values()))


def _count_switches(perms: Sequence[Tuple[int, ...]]) -> int:
    return sum(1 for prev, cur in zip(perms, perms[1:]) if prev != cur)


@dataclass(frozen=True)
class _Scored:
    rows: List[EvalRow]
    switches: int
    gap: float
    active: Tuple[int, ...]


def _score_utterance(
    utt: EvalUtterance,
    config: StftConfig,
    mode: AssignmentMode,
    meta_frame_len: Optional[int],
    loss_kind: LossKind,
    pairing: Pairing,
) -> _Scored:

    analysis = analyze_mixture(utt.mixture, config)
    rate = utt.mixture.sample_rate
    masks = utt.masks
    num_refs = len(utt.references)

    if masks.shape[1:] != analysis.magnitude.shape:
        raise ShapeMismatchError(
            f"{utt.utt_id}: masks {masks.shape[1:]} do not match mixture analysis {analysis.magnitude.shape}"
        )
    if masks.shape[0] < num_refs:
        raise ShapeMismatchError(
            f"{utt.utt_id}: {masks.shape[0]} output streams for {num_refs} references"
        )

    active = tuple(range(masks.shape[0]))
    if masks.shape[0] > num_refs:
        streams = reconstruct_streams(masks, analysis, rate)
        active = tuple(sorted(select_active_streams(streams, num_refs)))
        masks = masks[list(active)]

    sources = SourceSet.from_signals(utt.references, config, mixture=utt.mixture, pad=True)
    targets = loss_targets(sources, loss_kind)
    T = masks.shape[2]

    if pairing == Pairing.INDEX:
        default_perm = tuple(range(num_refs))
    else:
        default_perm = best_permutation(
            pairwise_loss_matrix(masks, analysis.magnitude, targets, loss_kind)
        ).perm
    default_aligned = apply_permutation(masks, default_perm)

    M = T if meta_frame_len is None else min(meta_frame_len, T)
    optimal_aligned = np.empty_like(masks)
    perms = []
    for start in meta_frame_starts(T, M):
        stop = min(start + M, T)
        perm = best_permutation(
            pairwise_loss_matrix(masks, analysis.magnitude, targets, loss_kind, (start, stop))
        ).perm
        perms.append(perm)
        optimal_aligned[:, :, start:stop] = apply_permutation(masks[:, :, start:stop], perm)

    improvements = {}
    rows = []
    for which, aligned in ((AssignmentMode.DEFAULT, default_aligned), (AssignmentMode.OPTIMAL, optimal_aligned)):
        estimates = reconstruct_streams(aligned, analysis, rate)
        mode_rows = [
            EvalRow(utt.utt_id, speaker, which, sdr(ref, utt.mixture), sdr(ref, est))
            for ref, est, speaker in zip(utt.references, estimates, utt.speakers)
        ]
        improvements[which] = float(np.mean([row.improvement for row in mode_rows]))
        if which == mode:
            rows = mode_rows

    return _Scored(
        rows=rows,
        switches=_count_switches(perms),
        gap=improvements[AssignmentMode.DEFAULT] - improvements[AssignmentMode.OPTIMAL],
        active=active,
    )


def evaluate_assignment(
    utterances: Sequence[EvalUtterance],
    config: StftConfig,
    mode: Union[AssignmentMode, str] = AssignmentMode.DEFAULT,
    meta_frame_len: Optional[int] = None,
    loss_kind: Union[LossKind, str] = LossKind.AMPLITUDE,
    pairing: Union[Pairing, str] = Pairing.BEST,
    threads: int = 1,
) -> EvalReport:
    """Score separated utterances under default or optimal assignment.

    DEFAULT keeps one stream order for the whole utterance and pairs streams
    with references by the utterance-level best permutation (or by index).
    OPTIMAL re-selects the oracle permutation in every meta-frame before
    reconstruction. Models with more streams than references are scored on
    their most energetic streams.
    """

    mode, loss_kind, pairing = AssignmentMode(mode), LossKind(loss_kind), Pairing(pairing)

    with ThreadPoolExecutor(max_workers=threads) as executor:
        scored = list(
            executor.map(
                lambda utt: _score_utterance(utt, config, mode, meta_frame_len, loss_kind, pairing),
                utterances,
            )
        )

    report = EvalReport(mode=mode)
    for utt, result in zip(utterances, scored):
        report.rows.extend(result.rows)
        report.switch_counts[utt.utt_id] = result.switches
        report.gaps[utt.utt_id] = result.gap
        report.active_streams[utt.utt_id] = result.active

    logger.info(
        f"{mode.value} assignment over {len(utterances)} utterances: "
        f"mean SDR improvement {report.mean_improvement():.2f} dB, "
        f"default-optimal gap {report.mean_gap():.2f} dB"
    )
    return report


REPORT_COLUMNS = ("utterance", "speaker", "mode", "sdr_in", "sdr_out", "improvement")


def write_report_csv(path: str, reports: Sequence[EvalReport]) -> str:

    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            for row in report.rows:
                writer.writerow(
                    [row.utt_id, row.speaker, row.mode.value,
                     f"{row.sdr_in:.4f}", f"{row.sdr_out:.4f}", f"{row.improvement:.4f}"]
                )
                count += 1
    logger.info(f"Wrote {count} evaluation rows to {out_path}")
    return str(out_path)


def format_summary(reports: Mapping[str, Mapping[AssignmentMode, EvalReport]]) -> str:
    """Text table of mean SDR improvement, conditions by assignment mode."""

    header = f"{'Condition':<12}{'Opt. Assign.':>14}{'Def. Assign.':>14}"
    lines = [header, "-" * len(header)]
    for condition, by_mode in reports.items():
        optimal = by_mode.get(AssignmentMode.OPTIMAL)
        default = by_mode.get(AssignmentMode.DEFAULT)
        cells = [
            f"{r.mean_improvement():>14.2f}" if r is not None else f"{'-':>14}"
            for r in (optimal, default)
        ]
        lines.append(f"{condition:<12}{''.join(cells)}")
    return "\n".join(lines)
