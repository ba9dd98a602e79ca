import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import Config
from .dsp import StftConfig
from .errors import BadConfigError, DatasetError
from .masks import MaskKind, SourceSet
from .mixgen import MixtureRecord
from .model import (
    ModelParams,
    ParamDict,
    average_gradients,
    apply_update,
    backward,
    forward,
    save_checkpoint,
    stack_features,
)
from .pit import (
    LossKind,
    LossTargets,
    fixed_loss_and_grad,
    loss_targets,
    pit_loss_and_grad,
    upit_loss_and_grad,
)

logger = logging.getLogger(__name__)


class Criterion(str, Enum):
    CONV = "conv"
    CONV_RAND = "conv-rand"
    PIT = "pit"
    UPIT = "upit"


class LrUnit(str, Enum):
    TF_UNIT = "tf_unit"
    FRAME = "frame"
    UTTERANCE = "utterance"


@dataclass(frozen=True)
class TrainConfig:
    criterion: Criterion = Criterion.UPIT
    loss_kind: LossKind = LossKind.PSM
    meta_frame_len: int = 51
    meta_frame_stride: Optional[int] = None
    lr_initial: float = Config.LR_INITIAL
    lr_decay: float = Config.LR_DECAY
    lr_floor: float = Config.LR_FLOOR
    lr_unit: LrUnit = LrUnit.TF_UNIT
    momentum: float = 0.0
    max_epochs: int = Config.MAX_EPOCHS
    minibatch_size: int = Config.MINIBATCH_SIZE
    dropout: float = Config.DROPOUT
    seed: int = 0
    mask_kind: MaskKind = MaskKind.IRM
    threads: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "lr_unit", LrUnit(self.lr_unit))
        object.__setattr__(self, "mask_kind", MaskKind(self.mask_kind))

        if not 0.0 < self.lr_decay < 1.0:
            raise BadConfigError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if self.lr_floor <= 0:
            raise BadConfigError(f"lr_floor must be positive, got {self.lr_floor}")
        if self.lr_initial < 0:
            raise BadConfigError(f"lr_initial must be nonnegative, got {self.lr_initial}")
        if self.minibatch_size < 1:
            raise BadConfigError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.max_epochs < 0:
            raise BadConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.meta_frame_len < 1:
            raise BadConfigError(f"meta_frame_len must be >= 1, got {self.meta_frame_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 <= self.momentum < 1.0:
            raise BadConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.threads < 1:
            raise BadConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    train_mse: float
    valid_mse: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    rows: List[TrainLogRow] = field(default_factory=list)

    COLUMNS = ("epoch", "train_mse", "valid_mse", "lr", "seconds")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def train_curve(self) -> List[float]:
        return [row.train_mse for row in self.rows]

    @property
    def valid_curve(self) -> List[float]:
        return [row.valid_mse for row in self.rows]

    def write_csv(self, path: str) -> str:

        out_path = Path(path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [row.epoch, repr(row.train_mse), repr(row.valid_mse), repr(row.lr), f"{row.seconds:.3f}"]
                )
        logger.info(f"Wrote training log with {len(self.rows)} epochs to {out_path}")
        return str(out_path)


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    features: np.ndarray
    mixture_mag: np.ndarray
    targets: LossTargets

    @property
    def num_sources(self) -> int:
        return self.targets.values.shape[0]

    def relabeled(self, order: Sequence[int]) -> "Utterance":
        return replace(
            self, targets=LossTargets(self.targets.kind, self.targets.values[list(order)])
        )


def utterance_from_record(
    record: MixtureRecord,
    stft_config: StftConfig,
    loss_kind: LossKind,
    mask_kind: MaskKind = MaskKind.IRM,
    first_stage: Optional[ModelParams] = None,
) -> Utterance:

    sources = SourceSet.from_signals(record.targets(), stft_config, mixture=record.mixture, pad=True)
    mixture_mag = sources.mixture_magnitude

    features = mixture_mag
    if first_stage is not None:
        first_masks, _ = forward(first_stage, mixture_mag)
        features = stack_features(mixture_mag, first_masks.masks)

    return Utterance(
        utt_id=record.record_id,
        features=features,
        mixture_mag=mixture_mag,
        targets=loss_targets(sources, loss_kind, mask_kind),
    )


def prepare_utterances(
    records: Sequence[MixtureRecord],
    stft_config: StftConfig,
    loss_kind: LossKind,
    mask_kind: MaskKind = MaskKind.IRM,
    first_stage: Optional[ModelParams] = None,
) -> List[Utterance]:

    utterances = [
        utterance_from_record(record, stft_config, loss_kind, mask_kind, first_stage)
        for record in records
    ]
    logger.info(f"Prepared {len(utterances)} utterances for '{LossKind(loss_kind).value}' loss")
    return utterances


def lr_step(
    current_lr: float,
    prev_epoch_obj: Optional[float],
    this_epoch_obj: float,
    config: TrainConfig,
) -> Tuple[float, bool]:
    """Decay when the training objective went up; stop below the floor."""

    new_lr = current_lr
    if prev_epoch_obj is not None and this_epoch_obj > prev_epoch_obj:
        new_lr = current_lr * config.lr_decay
    return new_lr, new_lr < config.lr_floor


def criterion_loss_and_grad(
    masks: np.ndarray, utt: Utterance, config: TrainConfig
) -> Tuple[float, np.ndarray]:

    kind = config.loss_kind
    if config.criterion == Criterion.UPIT:
        loss, _, grad = upit_loss_and_grad(masks, utt.mixture_mag, utt.targets, kind)
    elif config.criterion == Criterion.PIT:
        loss, _, grad = pit_loss_and_grad(
            masks, utt.mixture_mag, utt.targets, kind, config.meta_frame_len, config.meta_frame_stride
        )
    else:
        loss, grad = fixed_loss_and_grad(masks, utt.mixture_mag, utt.targets, kind)
    return loss, grad


def _lr_scale(utt: Utterance, config: TrainConfig) -> float:

    S, F, T = utt.targets.values.shape
    if config.lr_unit == LrUnit.FRAME:
        return float(F * S)
    if config.lr_unit == LrUnit.UTTERANCE:
        return float(T * F * S)
    return 1.0


def utterance_gradient(
    params: ModelParams, utt: Utterance, config: TrainConfig, dropout_seed: int
) -> Tuple[float, Tuple[ParamDict, ...]]:

    masks, trace = forward(params, utt.features, train_mode=True, rng_seed=dropout_seed)
    loss, upstream = criterion_loss_and_grad(masks.masks, utt, config)
    grads = backward(params, trace, upstream * _lr_scale(utt, config))
    return loss, grads


def evaluate_objective(
    params: ModelParams, utterances: Sequence[Utterance], config: TrainConfig
) -> float:
    """Mean criterion value in eval mode (no dropout)."""

    if not utterances:
        return float("nan")
    losses = [
        criterion_loss_and_grad(forward(params, utt.features)[0].masks, utt, config)[0]
        for utt in utterances
    ]
    return float(np.mean(losses))


def _check_dataset(params: ModelParams, utterances: Sequence[Utterance], name: str):

    for utt in utterances:
        if utt.num_sources != params.spec.num_speakers:
            raise DatasetError(
                f"{name} utterance {utt.utt_id} has {utt.num_sources} references, "
                f"model outputs {params.spec.num_speakers} streams"
            )


def randomize_labels(utterances: Sequence[Utterance], seed: int) -> List[Utterance]:
    """Shuffle reference order once per utterance (conventional training
    without speaker-consistent labels)."""

    rng = np.random.default_rng(seed)
    return [utt.relabeled(rng.permutation(utt.num_sources)) for utt in utterances]


def train(
    model: ModelParams,
    train_set: Sequence[Utterance],
    valid_set: Sequence[Utterance],
    config: TrainConfig,
) -> Tuple[ModelParams, TrainLog]:
    """Plain minibatch SGD with the training-set learning-rate schedule."""

    if not train_set:
        raise DatasetError("training set is empty")
    _check_dataset(model, train_set, "training")
    _check_dataset(model, valid_set, "validation")

    params = model.with_dropout(config.dropout)

    if config.criterion == Criterion.CONV_RAND:
        train_set = randomize_labels(train_set, config.seed)
        valid_set = randomize_labels(valid_set, config.seed + 1)

    log = TrainLog()
    lr = config.lr_initial
    prev_obj = None
    velocity = None

    logger.info(
        f"Training {config.criterion.value}/{config.loss_kind.value} on {len(train_set)} utterances "
        f"({len(valid_set)} validation), lr {lr:g}, minibatch {config.minibatch_size}"
    )

    with ThreadPoolExecutor(max_workers=config.threads) as executor:
        for epoch in tqdm(range(1, config.max_epochs + 1), desc="epochs", disable=not config.progress):
            started = time.time()
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(train_set))
            dropout_seeds = rng.integers(0, 2**32, size=len(train_set))

            epoch_losses = []
            for start in range(0, len(order), config.minibatch_size):
                batch = order[start : start + config.minibatch_size]
                results = list(
                    executor.map(
                        lambda i: utterance_gradient(params, train_set[i], config, int(dropout_seeds[i])),
                        batch,
                    )
                )
                losses = [loss for loss, _ in results]
                grads = average_gradients([g for _, g in results])
                epoch_losses.extend(losses)

                if config.momentum > 0:
                    if velocity is None:
                        velocity = grads
                    else:
                        velocity = tuple(
                            {name: config.momentum * v[name] + g[name] for name in g}
                            for v, g in zip(velocity, grads)
                        )
                    step = velocity
                else:
                    step = grads

                params = apply_update(params, step, lr)
                logger.debug(f"epoch {epoch} batch {start // config.minibatch_size}: loss {np.mean(losses):.6g}")

            train_obj = float(np.mean(epoch_losses))
            valid_obj = evaluate_objective(params, valid_set, config)
            log.rows.append(
                TrainLogRow(
                    epoch=epoch,
                    train_mse=train_obj,
                    valid_mse=valid_obj,
                    lr=lr,
                    seconds=time.time() - started,
                )
            )
            logger.info(
                f"Epoch {epoch}: train {train_obj:.6g}, valid {valid_obj:.6g}, lr {lr:.3g}"
            )

            if config.checkpoint_every and config.checkpoint_dir and epoch % config.checkpoint_every == 0:
                save_checkpoint(str(Path(config.checkpoint_dir) / f"epoch_{epoch:04d}.ckpt"), params)

            lr, stop = lr_step(lr, prev_obj, train_obj, config)
            prev_obj = train_obj
            if stop:
                logger.info(f"Learning rate {lr:.3g} fell below {config.lr_floor:g}, stopping")
                break

    return params, log
