import argparse
import csv
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from .audio_io import read_wav, write_wav
from .config import Config, load_config_file, resolve_settings, write_resolved_config
from .dsp import make_config
from .errors import SeparationError
from .evaluation import (
    AssignmentMode,
    EvalUtterance,
    analyze_mixture,
    evaluate_assignment,
    format_summary,
    model_masks,
    oracle_estimates,
    sdr,
    separate,
    write_report_csv,
)
from .masks import ORACLE_KINDS, MaskKind, write_mask_grid
from .mixgen import (
    ManifestConfig,
    build_manifest,
    read_manifest,
    synthesize_toy_corpus,
    write_dataset,
)
from .model import (
    Activation,
    ModelSpec,
    compute_feature_stats,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .pit import LossKind
from .train import Criterion, LrUnit, TrainConfig, prepare_utterances, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4

CONDITION_NAMES = {"valid": "CC", "test": "OC"}

# Defaults read the environment, so they are built only after
# Config.validate_environment has passed.


def stft_defaults() -> Dict[str, Any]:
    return {"frame_len": Config.frame_len(), "hop": Config.hop()}


def toy_corpus_defaults() -> Dict[str, Any]:
    return {
        "out": "toy_corpus",
        "speakers": 4,
        "utterances": 10,
        "duration": 0.5,
        "seed": 0,
    }


def mixgen_defaults() -> Dict[str, Any]:
    return {
        "corpus": None,
        "out": Config.OUTPUT_DIR,
        "speakers": 2,
        "train_count": 100,
        "valid_count": 20,
        "test_count": 20,
        "test_speakers": None,
        "snr_min": 0.0,
        "snr_max": 5.0,
        "seed": 0,
        "extend_to": None,
        "order_by_energy": False,
        "threads": Config.threads(),
    }


def train_defaults() -> Dict[str, Any]:
    return {
        **stft_defaults(),
        "manifest": None,
        "out": Config.OUTPUT_DIR,
        "checkpoint": None,
        "first_stage": None,
        "mask": MaskKind.IRM.value,
        "loss": LossKind.PSM.value,
        "criterion": Criterion.UPIT.value,
        "meta_frames": 51,
        "lr": Config.LR_INITIAL,
        "lr_decay": Config.LR_DECAY,
        "lr_floor": Config.LR_FLOOR,
        "lr_unit": LrUnit.TF_UNIT.value,
        "momentum": 0.0,
        "epochs": Config.MAX_EPOCHS,
        "minibatch": Config.MINIBATCH_SIZE,
        "dropout": Config.DROPOUT,
        "layers": Config.DEFAULT_LAYERS,
        "hidden": Config.DEFAULT_HIDDEN,
        "activation": Activation.SOFTMAX.value,
        "hidden_activation": Activation.RELU.value,
        "seed": 0,
        "threads": Config.threads(),
        "checkpoint_every": 0,
    }


def separate_defaults() -> Dict[str, Any]:
    return {
        **stft_defaults(),
        "input": None,
        "checkpoint": None,
        "first_stage": None,
        "window": None,
        "window_stride": None,
        "out": Config.OUTPUT_DIR,
    }


def oracle_defaults() -> Dict[str, Any]:
    return {
        **stft_defaults(),
        "manifest": None,
        "split": "test",
        "mask": None,
        "out": Config.OUTPUT_DIR,
        "threads": Config.threads(),
    }


def evaluate_defaults() -> Dict[str, Any]:
    return {
        **stft_defaults(),
        "manifest": None,
        "checkpoint": None,
        "first_stage": None,
        "splits": "valid,test",
        "window": None,
        "window_stride": None,
        "meta_frames": 1,
        "loss": LossKind.AMPLITUDE.value,
        "pairing": "best",
        "out": Config.OUTPUT_DIR,
        "threads": Config.threads(),
    }


def _require(settings: Dict[str, Any], *keys: str):
    missing = [f"--{key.replace('_', '-')}" for key in keys if not settings.get(key)]
    if missing:
        raise SeparationError(f"missing required setting(s): {', '.join(missing)}")


def cmd_toy_corpus(settings: Dict[str, Any]):

    synthesize_toy_corpus(
        settings["out"],
        num_speakers=settings["speakers"],
        utterances_per_speaker=settings["utterances"],
        duration=settings["duration"],
        sample_rate=Config.sample_rate(),
        seed=settings["seed"],
    )
    write_resolved_config(settings["out"], settings)


def cmd_mixgen(settings: Dict[str, Any]):

    _require(settings, "corpus")
    config = ManifestConfig(
        num_speakers=settings["speakers"],
        counts={
            "train": settings["train_count"],
            "valid": settings["valid_count"],
            "test": settings["test_count"],
        },
        snr_min=settings["snr_min"],
        snr_max=settings["snr_max"],
        seed=settings["seed"],
        test_speakers=settings["test_speakers"],
        extend_to=settings["extend_to"],
        order_by_energy=bool(settings["order_by_energy"]),
        sample_rate=Config.sample_rate(),
    )
    manifest = build_manifest(settings["corpus"], config)
    write_dataset(manifest, settings["out"], threads=settings["threads"])
    write_resolved_config(settings["out"], settings)


def _load_optional(path: Optional[str]):
    return load_checkpoint(path) if path else None


def _manifest_paths(value) -> List[str]:
    return [value] if isinstance(value, str) else list(value)


def cmd_train(settings: Dict[str, Any]):

    _require(settings, "manifest")
    stft = make_config(settings["frame_len"], settings["hop"])
    manifests = [read_manifest(path) for path in _manifest_paths(settings["manifest"])]
    outputs = {m.extend_to or m.num_speakers for m in manifests}
    if len(outputs) != 1:
        raise SeparationError(
            f"manifests disagree on the number of output streams: {sorted(outputs)}"
        )
    first_stage = _load_optional(settings["first_stage"])

    train_records = [r for m in manifests for r in m.realize("train", threads=settings["threads"])]
    valid_records = [r for m in manifests for r in m.realize("valid", threads=settings["threads"])]
    train_set = prepare_utterances(train_records, stft, settings["loss"], settings["mask"], first_stage)
    valid_set = prepare_utterances(valid_records, stft, settings["loss"], settings["mask"], first_stage)
    if not train_set:
        raise SeparationError(f"no training records in {settings['manifest']}")

    if settings["checkpoint"]:
        params = load_checkpoint(settings["checkpoint"])
        logger.info(f"Resuming from {settings['checkpoint']}")
    else:
        spec = ModelSpec(
            input_dim=train_set[0].features.shape[0],
            num_bins=stft.num_bins,
            num_speakers=outputs.pop(),
            layers=ModelSpec.parse_layers(settings["layers"], settings["hidden"]),
            activation=settings["activation"],
            hidden_activation=settings["hidden_activation"],
            dropout=settings["dropout"],
        )
        params = init_params(spec, rng_seed=settings["seed"])
        params = params.with_normalization(*compute_feature_stats([u.features for u in train_set]))

    out_dir = Path(settings["out"])
    config = TrainConfig(
        criterion=settings["criterion"],
        loss_kind=settings["loss"],
        meta_frame_len=settings["meta_frames"],
        lr_initial=settings["lr"],
        lr_decay=settings["lr_decay"],
        lr_floor=settings["lr_floor"],
        lr_unit=settings["lr_unit"],
        momentum=settings["momentum"],
        max_epochs=settings["epochs"],
        minibatch_size=settings["minibatch"],
        dropout=settings["dropout"],
        seed=settings["seed"],
        mask_kind=settings["mask"],
        threads=settings["threads"],
        checkpoint_every=settings["checkpoint_every"],
        checkpoint_dir=str(out_dir / "checkpoints"),
        progress=True,
    )

    params, log = train(params, train_set, valid_set, config)
    save_checkpoint(str(out_dir / "model.ckpt"), params)
    log.write_csv(str(out_dir / "train_log.csv"))
    write_resolved_config(str(out_dir), settings)


def _stages(settings: Dict[str, Any]):
    """(first, second) model stages; ``--first-stage`` makes the checkpoint
    the second stage."""

    model = load_checkpoint(settings["checkpoint"])
    first_stage = _load_optional(settings["first_stage"])
    if first_stage is None:
        return model, None
    return first_stage, model


def cmd_separate(settings: Dict[str, Any]):

    _require(settings, "input", "checkpoint")
    stft = make_config(settings["frame_len"], settings["hop"])
    first, second = _stages(settings)

    mixture = read_wav(settings["input"], Config.sample_rate())
    _, estimates = separate(
        first, mixture, stft, second_stage=second, window=settings["window"], stride=settings["window_stride"]
    )

    out_dir = Path(settings["out"])
    for k, estimate in enumerate(estimates, 1):
        write_wav(str(out_dir / f"s{k}.wav"), estimate)
    logger.info(f"Wrote {len(estimates)} separated streams to {out_dir}")
    write_resolved_config(str(out_dir), settings)


def cmd_oracle(settings: Dict[str, Any]):

    _require(settings, "manifest")
    stft = make_config(settings["frame_len"], settings["hop"])
    manifest = read_manifest(settings["manifest"])
    records = manifest.realize(settings["split"], threads=settings["threads"])
    kinds = [MaskKind(settings["mask"])] if settings["mask"] else list(ORACLE_KINDS)

    out_dir = Path(settings["out"])
    rows = []
    for record in records:
        references = record.scaled_sources()
        for kind in kinds:
            mask_set, estimates = oracle_estimates(record, stft, kind)
            record_dir = out_dir / kind.value / record.record_id
            for k, (ref, est) in enumerate(zip(references, estimates)):
                write_wav(str(record_dir / f"s{k + 1}.wav"), est)
                write_mask_grid(str(record_dir / f"mask{k + 1}.bin"), mask_set[k])
                sdr_in, sdr_out = sdr(ref, record.mixture), sdr(ref, est)
                speaker = record.speakers[k] if record.speakers else f"spk{k}"
                rows.append([record.record_id, speaker, kind.value, sdr_in, sdr_out, sdr_out - sdr_in])

    csv_path = out_dir / "oracle_sdr.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["utterance", "speaker", "mask", "sdr_in", "sdr_out", "improvement"])
        writer.writerows([row[:3] + [f"{v:.4f}" for v in row[3:]] for row in rows])

    for kind in kinds:
        gains = [row[5] for row in rows if row[2] == kind.value]
        if gains:
            logger.info(f"{kind.value}: mean SDR improvement {sum(gains) / len(gains):.2f} dB")
    write_resolved_config(str(out_dir), settings)


def cmd_evaluate(settings: Dict[str, Any]):

    _require(settings, "manifest", "checkpoint")
    stft = make_config(settings["frame_len"], settings["hop"])
    manifest = read_manifest(settings["manifest"])
    first, second = _stages(settings)
    out_dir = Path(settings["out"])

    summary = {}
    reports = []
    for split in filter(None, (s.strip() for s in settings["splits"].split(","))):
        records = manifest.realize(split, threads=settings["threads"])
        if not records:
            logger.warning(f"No '{split}' records in {settings['manifest']}, skipping")
            continue
        utterances = []
        for record in records:
            magnitude = analyze_mixture(record.mixture, stft).magnitude
            masks = model_masks(first, magnitude, second, settings["window"], settings["window_stride"])
            utterances.append(EvalUtterance.from_record(record, masks))
        condition = CONDITION_NAMES.get(split, split.upper())
        summary[condition] = {}
        for mode in AssignmentMode:
            report = evaluate_assignment(
                utterances,
                stft,
                mode,
                meta_frame_len=settings["meta_frames"],
                loss_kind=settings["loss"],
                pairing=settings["pairing"],
                threads=settings["threads"],
            )
            summary[condition][mode] = report
            reports.append(report)
            logger.info(
                f"{condition} {mode.value}: {report.total_switches()} permutation switches "
                f"over {len(utterances)} utterances"
            )

    if not reports:
        raise SeparationError(f"nothing to evaluate in {settings['manifest']}")

    write_report_csv(str(out_dir / "eval_report.csv"), reports)
    table = format_summary(summary)
    (out_dir / "summary.txt").write_text(table + "\n")
    print(table)
    write_resolved_config(str(out_dir), settings)


def _add_common(parser: argparse.ArgumentParser, threads: bool = True):
    parser.add_argument("--config", help="JSON file with settings (overridden by flags)")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--seed", type=int)
    if threads:
        parser.add_argument("--threads", type=int)


def _add_stft(parser: argparse.ArgumentParser):
    parser.add_argument("--frame-len", type=int)
    parser.add_argument("--hop", type=int)


def _add_window(parser: argparse.ArgumentParser):
    parser.add_argument("--window", type=int, help="Run the model on overlapping windows of this many frames")
    parser.add_argument("--window-stride", type=int, help="Frames between window starts (default half a window)")


def build_parser() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(
        prog="upit", description="Utterance-level permutation invariant training for speech separation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-corpus", help="Write a synthetic band-limited speaker corpus")
    _add_common(p, threads=False)
    p.add_argument("--speakers", type=int, help="Number of corpus speakers")
    p.add_argument("--utterances", type=int, help="Utterances per speaker")
    p.add_argument("--duration", type=float, help="Mean utterance length in seconds")
    p.set_defaults(handler=cmd_toy_corpus, defaults=toy_corpus_defaults)

    p = sub.add_parser("mixgen", help="Build a mixture manifest and write its audio")
    _add_common(p)
    p.add_argument("--corpus", help="Corpus root with one directory per speaker")
    p.add_argument("--speakers", type=int, help="Speakers per mixture")
    p.add_argument("--train-count", type=int)
    p.add_argument("--valid-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--test-speakers", type=int, help="Speakers held out for the open condition")
    p.add_argument("--snr-min", type=float)
    p.add_argument("--snr-max", type=float)
    p.add_argument("--extend-to", type=int, help="Pad records with silent channels up to this count")
    p.add_argument("--order-by-energy", action="store_true", default=None)
    p.set_defaults(handler=cmd_mixgen, defaults=mixgen_defaults)

    p = sub.add_parser("train", help="Train a mask estimation model")
    _add_common(p)
    _add_stft(p)
    p.add_argument("--manifest", action="append", help="Dataset manifest; repeat to train on several")
    p.add_argument("--checkpoint", help="Resume from this checkpoint")
    p.add_argument("--first-stage", help="Checkpoint whose masks are stacked onto the features")
    p.add_argument("--mask", choices=[k.value for k in ORACLE_KINDS], help="Oracle mask for the mse loss")
    p.add_argument("--loss", choices=[k.value for k in LossKind])
    p.add_argument("--criterion", choices=[c.value for c in Criterion])
    p.add_argument("--meta-frames", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--lr-floor", type=float)
    p.add_argument("--lr-unit", choices=[u.value for u in LrUnit])
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--minibatch", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--layers", help="Comma list of dense|recurrent|birecurrent|lstm|bilstm[:width]")
    p.add_argument("--hidden", type=int, help="Default layer width")
    p.add_argument("--activation", choices=[a.value for a in Activation])
    p.add_argument("--hidden-activation", choices=[Activation.RELU.value, Activation.TANH.value])
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(handler=cmd_train, defaults=train_defaults)

    p = sub.add_parser("separate", help="Separate a mixture WAV")
    _add_common(p, threads=False)
    _add_stft(p)
    p.add_argument("--input", help="Mixture WAV")
    p.add_argument("--checkpoint")
    p.add_argument("--first-stage")
    _add_window(p)
    p.set_defaults(handler=cmd_separate, defaults=separate_defaults)

    p = sub.add_parser("oracle", help="Reconstruct with oracle masks and score them")
    _add_common(p)
    _add_stft(p)
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--mask", choices=[k.value for k in ORACLE_KINDS])
    p.set_defaults(handler=cmd_oracle, defaults=oracle_defaults)

    p = sub.add_parser("evaluate", help="Score a model with default and optimal assignment")
    _add_common(p)
    _add_stft(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--first-stage")
    p.add_argument("--splits", help="Comma list of splits, e.g. valid,test")
    p.add_argument("--meta-frames", type=int, help="Meta-frame length for optimal assignment")
    p.add_argument("--loss", choices=[k.value for k in LossKind], help="Loss used to pick permutations")
    p.add_argument("--pairing", choices=["best", "index"])
    _add_window(p)
    p.set_defaults(handler=cmd_evaluate, defaults=evaluate_defaults)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    if not Config.validate_environment():
        return EXIT_BAD_CONFIG

    handler: Callable[[Dict[str, Any]], None] = args.handler
    defaults: Dict[str, Any] = args.defaults()
    flags = {
        key: value
        for key, value in vars(args).items()
        if key not in ("handler", "defaults", "command", "config")
    }

    try:
        file_values = load_config_file(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise SeparationError(f"unknown settings in {args.config}: {sorted(unknown)}")
        settings = resolve_settings(defaults, file_values, flags)
        settings["command"] = args.command
        handler(settings)
    except FileNotFoundError as e:
        logger.error(f"Missing input: {e}")
        return EXIT_MISSING_FILE
    except SeparationError as e:
        logger.error(f"Invalid configuration for '{args.command}': {e}")
        return EXIT_BAD_CONFIG
    except Exception as e:
        logger.error(f"Error in '{args.command}': {e}")
        return EXIT_FAILURE

    return EXIT_OK


def main(argv: Optional[List[str]] = None):
    logging.basicConfig(level=Config.get_log_level())
    raise SystemExit(run(argv))
