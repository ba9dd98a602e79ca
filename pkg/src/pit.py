"""Separation losses and permutation-invariant assignment.

Output stream ``s`` is scored against reference ``perm[s]``. Pairwise losses
are computed once per scored frame range (S² squared-error sums) and every
candidate permutation is priced from that matrix, so the S! search never
touches the spectrograms again.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import Config
from .dsp import MagSpectrogram
from .errors import PermutationError, ShapeMismatchError
from .masks import MaskKind, MaskSet, SourceSet, oracle_mask, phase_sensitive_magnitudes

logger = logging.getLogger(__name__)


class LossKind(str, Enum):
    MASK_MSE = "mse"
    AMPLITUDE = "am"
    PSM = "psm"


@dataclass(frozen=True)
class LossTargets:
    """Per-reference training targets for one loss kind, S x F x T."""

    kind: LossKind
    values: np.ndarray


@dataclass(frozen=True)
class PairwiseLossMatrix:
    entries: np.ndarray
    normalizer: float
    evaluations: int

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class PermutationResult:
    perm: Tuple[int, ...]
    loss: float


FrameRange = Union[Tuple[int, int], range, slice, None]
Masks = Union[MaskSet, np.ndarray]
Magnitude = Union[MagSpectrogram, np.ndarray]
References = Union[SourceSet, LossTargets]


def loss_targets(
    refs: SourceSet,
    kind: Union[LossKind, str],
    mask_kind: MaskKind = MaskKind.IRM,
    epsilon: Optional[float] = None,
) -> LossTargets:

    kind = LossKind(kind)
    if kind == LossKind.MASK_MSE:
        values = oracle_mask(refs, mask_kind, epsilon).masks
    elif kind == LossKind.AMPLITUDE:
        values = refs.source_magnitudes
    else:
        values = phase_sensitive_magnitudes(refs)
    return LossTargets(kind=kind, values=np.asarray(values, dtype=np.float64))


def _as_array(masks: Masks) -> np.ndarray:
    return masks.masks if isinstance(masks, MaskSet) else np.asarray(masks, dtype=np.float64)


def _as_magnitude(mixture: Magnitude) -> np.ndarray:
    return mixture.values if isinstance(mixture, MagSpectrogram) else np.asarray(mixture)


def _as_targets(refs: References, kind: LossKind) -> np.ndarray:
    if isinstance(refs, LossTargets):
        if refs.kind != kind:
            raise PermutationError(
                f"targets were built for '{refs.kind.value}', not '{kind.value}'"
            )
        return refs.values
    return loss_targets(refs, kind).values


def _frame_slice(frame_range: FrameRange, num_frames: int) -> slice:

    if frame_range is None:
        return slice(0, num_frames)
    if isinstance(frame_range, slice):
        start, stop, _ = frame_range.indices(num_frames)
    elif isinstance(frame_range, range):
        start, stop = frame_range.start, frame_range.stop
    else:
        start, stop = frame_range

    if not 0 <= start < stop <= num_frames:
        raise PermutationError(f"frame range [{start}, {stop}) outside [0, {num_frames})")
    return slice(start, stop)


def _estimates(est: np.ndarray, mixture_mag: np.ndarray, kind: LossKind) -> np.ndarray:
    # mse scores the masks themselves, am and psm the masked magnitudes
    if kind == LossKind.MASK_MSE:
        return est
    return est * mixture_mag[np.newaxis]


def _squared_error(estimate: np.ndarray, target: np.ndarray) -> float:
    diff = estimate - target
    return float(np.sum(diff * diff))


def _check_shapes(est: np.ndarray, mixture_mag: np.ndarray, targets: np.ndarray):

    if est.ndim != 3 or targets.ndim != 3:
        raise ShapeMismatchError("masks and targets must be S x F x T")
    if est.shape[0] != targets.shape[0]:
        raise PermutationError(
            f"{est.shape[0]} estimated masks cannot be scored against {targets.shape[0]} references"
        )
    if est.shape[1:] != targets.shape[1:] or est.shape[1:] != mixture_mag.shape:
        raise ShapeMismatchError(
            f"mask shape {est.shape[1:]}, target shape {targets.shape[1:]} and "
            f"mixture shape {mixture_mag.shape} differ"
        )


def _pairwise_sums(
    est: np.ndarray, mixture_mag: np.ndarray, targets: np.ndarray, kind: LossKind, frames: slice
) -> np.ndarray:

    estimates = _estimates(est[:, :, frames], mixture_mag[:, frames], kind)
    window = targets[:, :, frames]
    S = est.shape[0]

    sums = np.empty((S, S))
    for s in range(S):
        for r in range(S):
            sums[s, r] = _squared_error(estimates[s], window[r])
    return sums


def pairwise_loss_matrix(
    est_masks: Masks,
    mixture_mag: Magnitude,
    refs: References,
    kind: Union[LossKind, str],
    frame_range: FrameRange = None,
) -> PairwiseLossMatrix:

    kind = LossKind(kind)
    est = _as_array(est_masks)
    mixture = _as_magnitude(mixture_mag)
    targets = _as_targets(refs, kind)
    _check_shapes(est, mixture, targets)

    S, F, T = est.shape
    frames = _frame_slice(frame_range, T)
    normalizer = float((frames.stop - frames.start) * F * S)

    sums = _pairwise_sums(est, mixture, targets, kind, frames)
    return PairwiseLossMatrix(entries=sums / normalizer, normalizer=normalizer, evaluations=S * S)


def _assignment_cost(entries: np.ndarray, perm: Sequence[int]) -> float:
    total = 0.0
    for s, r in enumerate(perm):
        total += entries[s, r]
    return float(total)


def best_permutation(
    matrix: PairwiseLossMatrix,
    solver: str = "exhaustive",
    exhaustive_limit: Optional[int] = None,
) -> PermutationResult:
    """Lowest total pairwise loss; ties go to the lexicographically smallest
    permutation."""

    entries = matrix.entries
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1] or entries.shape[0] < 1:
        raise PermutationError(f"pairwise matrix must be square and non-empty, got {entries.shape}")

    S = entries.shape[0]

    if solver == "hungarian":
        rows, cols = linear_sum_assignment(entries)
        perm = tuple(int(c) for c in cols[np.argsort(rows)])
        return PermutationResult(perm=perm, loss=_assignment_cost(entries, perm))

    if solver != "exhaustive":
        raise PermutationError(f"unknown assignment solver '{solver}'")

    limit = Config.exhaustive_limit() if exhaustive_limit is None else exhaustive_limit
    if S > limit:
        raise PermutationError(
            f"{S} speakers exceed the exhaustive search limit of {limit}; "
            f"use solver='hungarian'"
        )

    best_perm, best_loss = None, np.inf
    ties = 0
    for perm in itertools.permutations(range(S)):
        loss = _assignment_cost(entries, perm)
        if loss < best_loss:
            best_perm, best_loss, ties = perm, loss, 0
        elif loss == best_loss:
            ties += 1

    if ties:
        logger.debug(f"{ties} permutations tie with {best_perm} at loss {best_loss:.6g}")

    return PermutationResult(perm=tuple(best_perm), loss=float(best_loss))


def upit_loss(
    est_masks: Masks,
    mixture_mag: Magnitude,
    refs: References,
    kind: Union[LossKind, str],
) -> Tuple[float, PermutationResult]:
    """Utterance-level criterion: one permutation for all frames."""

    result = best_permutation(pairwise_loss_matrix(est_masks, mixture_mag, refs, kind))
    return result.loss, result


def fixed_permutation_loss(
    est_masks: Masks,
    mixture_mag: Magnitude,
    refs: References,
    kind: Union[LossKind, str],
    perm: Sequence[int],
) -> float:

    matrix = pairwise_loss_matrix(est_masks, mixture_mag, refs, kind)
    return _assignment_cost(matrix.entries, perm)


def meta_frame_starts(num_frames: int, meta_frame_len: int, stride: Optional[int] = None) -> List[int]:

    if meta_frame_len < 1:
        raise PermutationError(f"meta-frame length must be >= 1, got {meta_frame_len}")
    stride = meta_frame_len if stride is None else stride
    if stride < 1:
        raise PermutationError(f"meta-frame stride must be >= 1, got {stride}")

    if stride >= meta_frame_len:
        return list(range(0, num_frames, stride))

    starts = list(range(0, max(num_frames - meta_frame_len, 0) + 1, stride))
    if starts[-1] + meta_frame_len < num_frames:
        starts.append(num_frames - meta_frame_len)
    return starts


def pit_meta_frame_loss(
    est_masks: Masks,
    mixture_mag: Magnitude,
    refs: References,
    kind: Union[LossKind, str],
    meta_frame_len: int,
    stride: Optional[int] = None,
) -> Tuple[float, List[PermutationResult]]:
    """Frame-level PIT: an independent permutation per meta-frame.

    The total is the sum of per-meta-frame minima over the total number of
    scored T-F units, so ``meta_frame_len = T`` reproduces :func:`upit_loss`.
    """

    kind = LossKind(kind)
    est = _as_array(est_masks)
    mixture = _as_magnitude(mixture_mag)
    targets = _as_targets(refs, kind)
    _check_shapes(est, mixture, targets)

    T = est.shape[2]
    results = []
    weighted, scored = 0.0, 0.0
    for start in meta_frame_starts(T, meta_frame_len, stride):
        stop = min(start + meta_frame_len, T)
        matrix = pairwise_loss_matrix(est, mixture, LossTargets(kind, targets), kind, (start, stop))
        result = best_permutation(matrix)
        results.append(result)
        weighted += result.loss * matrix.normalizer
        scored += matrix.normalizer

    return weighted / scored, results


def _segments_gradient(
    est: np.ndarray,
    mixture_mag: np.ndarray,
    targets: np.ndarray,
    kind: LossKind,
    segments: Sequence[Tuple[int, int, Sequence[int]]],
) -> np.ndarray:

    S, F, _ = est.shape
    scored = sum((stop - start) * F * S for start, stop, _ in segments)
    grad = np.zeros_like(est)

    for start, stop, perm in segments:
        frames = slice(start, stop)
        estimates = _estimates(est[:, :, frames], mixture_mag[:, frames], kind)
        residual = estimates - targets[list(perm), :, frames]
        if kind != LossKind.MASK_MSE:
            residual = residual * mixture_mag[np.newaxis, :, frames]
        grad[:, :, frames] += (2.0 / scored) * residual

    return grad


def upit_loss_and_grad(
    est_masks: Masks, mixture_mag: Magnitude, refs: References, kind: Union[LossKind, str]
) -> Tuple[float, PermutationResult, np.ndarray]:
    """uPIT loss plus dJ/dM̂ at the selected permutation (piecewise constant)."""

    kind = LossKind(kind)
    est = _as_array(est_masks)
    mixture = _as_magnitude(mixture_mag)
    targets = LossTargets(kind, _as_targets(refs, kind))

    loss, result = upit_loss(est, mixture, targets, kind)
    grad = _segments_gradient(est, mixture, targets.values, kind, [(0, est.shape[2], result.perm)])
    return loss, result, grad


def pit_loss_and_grad(
    est_masks: Masks,
    mixture_mag: Magnitude,
    refs: References,
    kind: Union[LossKind, str],
    meta_frame_len: int,
    stride: Optional[int] = None,
) -> Tuple[float, List[PermutationResult], np.ndarray]:

    kind = LossKind(kind)
    est = _as_array(est_masks)
    mixture = _as_magnitude(mixture_mag)
    targets = LossTargets(kind, _as_targets(refs, kind))

    loss, results = pit_meta_frame_loss(est, mixture, targets, kind, meta_frame_len, stride)
    T = est.shape[2]
    segments = [
        (start, min(start + meta_frame_len, T), result.perm)
        for start, result in zip(meta_frame_starts(T, meta_frame_len, stride), results)
    ]
    return loss, results, _segments_gradient(est, mixture, targets.values, kind, segments)


def fixed_loss_and_grad(
    est_masks: Masks,
    mixture_mag: Magnitude,
    refs: References,
    kind: Union[LossKind, str],
    perm: Optional[Sequence[int]] = None,
) -> Tuple[float, np.ndarray]:
    """Conventional training: a fixed assignment, identity by default."""

    kind = LossKind(kind)
    est = _as_array(est_masks)
    mixture = _as_magnitude(mixture_mag)
    targets = LossTargets(kind, _as_targets(refs, kind))
    _check_shapes(est, mixture, targets.values)

    perm = tuple(range(est.shape[0])) if perm is None else tuple(perm)
    loss = fixed_permutation_loss(est, mixture, targets, kind, perm)
    grad = _segments_gradient(est, mixture, targets.values, kind, [(0, est.shape[2], perm)])
    return loss, grad


def apply_permutation(masks: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Reorder output streams so that index ``perm[s]`` holds stream ``s``."""

    aligned = np.empty_like(masks)
    for s, r in enumerate(perm):
        aligned[r] = masks[s]
    return aligned


def two_stage_average(m1: Masks, m2: Masks) -> MaskSet:

    first, second = _as_array(m1), _as_array(m2)
    if first.shape != second.shape:
        raise ShapeMismatchError(f"cannot average masks of shapes {first.shape} and {second.shape}")
    return MaskSet((first + second) / 2.0, MaskKind.ESTIMATED)


def average_overlapping(chunks: Sequence[np.ndarray], starts: Sequence[int], num_frames: int) -> np.ndarray:
    """Each frame is the mean of every output meta-frame that contains it."""

    if not chunks:
        raise ShapeMismatchError("no meta-frame outputs to average")

    S, F, _ = chunks[0].shape
    total = np.zeros((S, F, num_frames))
    counts = np.zeros(num_frames)
    for chunk, start in zip(chunks, starts):
        stop = start + chunk.shape[2]
        if stop > num_frames:
            raise ShapeMismatchError(f"meta-frame [{start}, {stop}) exceeds {num_frames} frames")
        total[:, :, start:stop] += chunk
        counts[start:stop] += 1

    if np.any(counts == 0):
        raise ShapeMismatchError("some frames are not covered by any meta-frame")
    return total / counts
