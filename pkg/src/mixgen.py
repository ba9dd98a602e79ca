import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio_io import list_wavs, quantize, read_wav, write_wav
from .config import Config
from .dsp import TimeSignal
from .errors import BadConfigError, DatasetError, SignalError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
MANIFEST_TYPE = "manifest"
RECORD_TYPE = "record"


@dataclass(frozen=True)
class MixtureRecord:
    """Sources are stored unscaled and zero-padded to the mixture length;
    the mixture is ``scale * sum(gain_k * source_k)``."""

    sources: Tuple[TimeSignal, ...]
    gains: Tuple[float, ...]
    snrs_db: Tuple[float, ...]
    mixture: TimeSignal
    scale: float = 1.0
    reference_index: int = 0
    record_id: str = ""
    split: str = "train"
    speakers: Tuple[str, ...] = ()
    paths: Tuple[str, ...] = ()
    silent_channels: Tuple[TimeSignal, ...] = ()
    silent_seed: Optional[int] = None
    order: Tuple[int, ...] = ()

    @property
    def num_speakers(self) -> int:
        return len(self.sources)

    @property
    def num_targets(self) -> int:
        return len(self.sources) + len(self.silent_channels)

    def scaled_sources(self) -> List[TimeSignal]:
        return [
            TimeSignal(self.scale * gain * source.samples, source.sample_rate)
            for gain, source in zip(self.gains, self.sources)
        ]

    def targets(self) -> List[TimeSignal]:
        """Reference signals in output order, silent channels last."""
        return self.scaled_sources() + list(self.silent_channels)

    def input_order_gains(self) -> List[float]:
        """Gains in the order the sources were passed to ``mix``."""
        if not self.order:
            return list(self.gains)
        gains = [0.0] * len(self.gains)
        for position, source_index in enumerate(self.order):
            gains[source_index] = self.gains[position]
        return gains


def _energy(samples: np.ndarray) -> float:
    return float(np.dot(samples, samples))


def mix(
    sources: Sequence[TimeSignal],
    snrs_db: Sequence[float],
    reference_index: int = 0,
    order_by_energy: bool = False,
) -> MixtureRecord:
    """Scale sources to the requested SNRs against the reference and sum.

    Energies are measured over the region shared with the reference; shorter
    sources are zero-padded afterwards.
    """

    if len(sources) < 2:
        raise SignalError(f"need at least 2 sources to mix, got {len(sources)}")
    if len(snrs_db) != len(sources) - 1:
        raise BadConfigError(f"need {len(sources) - 1} SNR values, got {len(snrs_db)}")
    if not 0 <= reference_index < len(sources):
        raise BadConfigError(f"reference index {reference_index} out of range")

    rates = {s.sample_rate for s in sources}
    if len(rates) != 1:
        raise SignalError(f"sources have different sample rates: {sorted(rates)}")

    reference = sources[reference_index].samples
    others = [k for k in range(len(sources)) if k != reference_index]

    gains = [1.0] * len(sources)
    for k, snr in zip(others, snrs_db):
        overlap = min(reference.size, len(sources[k]))
        ref_energy = _energy(reference[:overlap])
        src_energy = _energy(sources[k].samples[:overlap])
        if src_energy == 0.0 or ref_energy == 0.0:
            raise SignalError("silent source: zero energy over the overlapped region")
        gains[k] = float(np.sqrt(ref_energy / (src_energy * 10.0 ** (snr / 10.0))))

    length = max(len(s) for s in sources)
    padded = [np.pad(s.samples, (0, length - len(s))) for s in sources]

    order = list(range(len(sources)))
    if order_by_energy:
        energies = [gain * gain * _energy(x) for gain, x in zip(gains, padded)]
        order = sorted(order, key=lambda k: -energies[k])

    total = np.zeros(length)
    for k in order:
        total += gains[k] * padded[k]

    scale = 1.0
    peak = float(np.max(np.abs(total)))
    if peak >= 1.0:
        scale = 0.9 / peak
        logger.warning(f"Mixture peak {peak:.3f} clips, rescaling record by {scale:.4f}")

    # snrs_db follows the output order of the non-reference sources
    snr_of = dict(zip(others, (float(s) for s in snrs_db)))
    rate = sources[0].sample_rate
    return MixtureRecord(
        sources=tuple(TimeSignal(padded[k], rate) for k in order),
        gains=tuple(gains[k] for k in order),
        snrs_db=tuple(snr_of[k] for k in order if k != reference_index),
        mixture=TimeSignal(scale * total, rate),
        scale=scale,
        reference_index=order.index(reference_index),
        order=tuple(order),
    )


def extend_silent_channel(record: MixtureRecord, target_S: int, rng_seed: int) -> MixtureRecord:
    """Append reference-only white-noise channels 70 dB below the average
    energy of the real sources; the mixture is left unchanged."""

    if target_S <= record.num_targets:
        raise DatasetError(
            f"target speaker count {target_S} must exceed the record's {record.num_targets}"
        )

    average = float(np.mean([s.energy for s in record.scaled_sources()]))
    wanted = average * 10.0 ** (-Config.SILENT_CHANNEL_DB / 10.0)

    rng = np.random.default_rng(rng_seed)
    length = len(record.mixture)
    channels = list(record.silent_channels)
    for _ in range(target_S - record.num_targets):
        noise = rng.standard_normal(length)
        noise *= np.sqrt(wanted / _energy(noise))
        channels.append(TimeSignal(noise, record.mixture.sample_rate))

    return replace(record, silent_channels=tuple(channels), silent_seed=rng_seed)


@dataclass(frozen=True)
class ManifestConfig:
    num_speakers: int = 2
    counts: Dict[str, int] = field(default_factory=lambda: {"train": 100, "valid": 20, "test": 20})
    snr_min: float = 0.0
    snr_max: float = 5.0
    seed: int = 0
    test_speakers: Optional[int] = None
    extend_to: Optional[int] = None
    order_by_energy: bool = False
    sample_rate: int = 8000

    def __post_init__(self):
        if self.num_speakers < 2:
            raise BadConfigError(f"need at least 2 speakers per mixture, got {self.num_speakers}")
        if self.snr_max < self.snr_min:
            raise BadConfigError(f"empty SNR range [{self.snr_min}, {self.snr_max}]")
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise BadConfigError(f"unknown splits {sorted(unknown)}")
        if any(count < 0 for count in self.counts.values()):
            raise BadConfigError("split counts must be nonnegative")
        if self.extend_to is not None and self.extend_to <= self.num_speakers:
            raise BadConfigError(
                f"extend_to ({self.extend_to}) must exceed the speaker count ({self.num_speakers})"
            )


@dataclass
class DatasetManifest:
    corpus_root: str
    seed: int
    num_speakers: int
    snr_range: Tuple[float, float]
    records: List[Dict]
    extend_to: Optional[int] = None
    order_by_energy: bool = False
    sample_rate: int = 8000

    def header(self) -> Dict:
        return {
            "type": MANIFEST_TYPE,
            "corpus_root": self.corpus_root,
            "seed": self.seed,
            "num_speakers": self.num_speakers,
            "snr_range": list(self.snr_range),
            "extend_to": self.extend_to,
            "order_by_energy": self.order_by_energy,
            "sample_rate": self.sample_rate,
        }

    def split_records(self, split: str) -> List[Dict]:
        return [r for r in self.records if r["split"] == split]

    def speakers_in(self, splits: Sequence[str]) -> set:
        return {spk for r in self.records if r["split"] in splits for spk in r["speakers"]}

    def realize(self, split: Optional[str] = None, threads: int = 1) -> List[MixtureRecord]:

        records = self.records if split is None else self.split_records(split)
        with ThreadPoolExecutor(max_workers=threads) as executor:
            realized = list(executor.map(lambda meta: realize_record(meta, self), records))
        logger.info(f"Realized {len(realized)} mixtures{f' for {split}' if split else ''}")
        return realized


def _speaker_utterances(corpus_root: str) -> Dict[str, List[str]]:

    root = Path(corpus_root)
    if not root.is_dir():
        raise FileNotFoundError(f"Corpus root not found: {corpus_root}")

    speakers = {}
    for speaker_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        wavs = [str(Path(w).relative_to(root)) for w in list_wavs(str(speaker_dir))]
        if wavs:
            speakers[speaker_dir.name] = wavs
    return speakers


def _valid_share(utterances: List[str]) -> Tuple[List[str], List[str]]:
    # every fifth utterance of a seen speaker goes to validation
    if len(utterances) < 2:
        return utterances, []
    valid = utterances[4::5] or utterances[-1:]
    train = [u for u in utterances if u not in valid]
    return train, valid


def build_manifest(corpus_root: str, config: ManifestConfig) -> DatasetManifest:
    """Deterministic CC/OC speaker partition, pairing and SNR draws."""

    speakers = _speaker_utterances(corpus_root)
    S = config.num_speakers
    rng = np.random.default_rng(config.seed)

    names = sorted(speakers)
    shuffled = [names[i] for i in rng.permutation(len(names))]

    wanted_test = config.counts.get("test", 0)
    held_out = config.test_speakers
    if held_out is None:
        held_out = max(S, int(round(0.2 * len(names)))) if wanted_test else 0

    unseen, seen = shuffled[:held_out], shuffled[held_out:]

    pools = {"train": {}, "valid": {}, "test": {spk: speakers[spk] for spk in unseen}}
    for spk in seen:
        train_utts, valid_utts = _valid_share(speakers[spk])
        if train_utts:
            pools["train"][spk] = train_utts
        if valid_utts:
            pools["valid"][spk] = valid_utts

    records = []
    for split in SPLITS:
        count = config.counts.get(split, 0)
        if count == 0:
            continue
        eligible = sorted(pools[split])
        if len(eligible) < S:
            raise DatasetError(
                f"too few speakers for split '{split}': {len(eligible)} available, {S} needed"
            )
        for index in range(count):
            chosen = [eligible[i] for i in rng.choice(len(eligible), size=S, replace=False)]
            paths = [pools[split][spk][rng.integers(len(pools[split][spk]))] for spk in chosen]
            snrs = rng.uniform(config.snr_min, config.snr_max, size=S - 1)
            silent_seed = int(rng.integers(0, 2**31)) if config.extend_to else None
            records.append(
                {
                    "type": RECORD_TYPE,
                    "id": f"{split}_{index:05d}",
                    "split": split,
                    "speakers": chosen,
                    "paths": paths,
                    "snrs_db": [float(s) for s in snrs],
                    "gains": None,
                    "scale": None,
                    "silent_seed": silent_seed,
                }
            )

    manifest = DatasetManifest(
        corpus_root=str(corpus_root),
        seed=config.seed,
        num_speakers=S,
        snr_range=(config.snr_min, config.snr_max),
        records=records,
        extend_to=config.extend_to,
        order_by_energy=config.order_by_energy,
        sample_rate=config.sample_rate,
    )
    logger.info(
        f"Built manifest with {len(records)} records from {len(names)} speakers "
        f"({len(unseen)} held out for the open condition)"
    )
    return manifest


def realize_record(meta: Dict, manifest: DatasetManifest) -> MixtureRecord:
    """Rebuild a mixture from manifest metadata and the corpus audio."""

    root = Path(manifest.corpus_root)
    sources = [read_wav(str(root / path), manifest.sample_rate) for path in meta["paths"]]
    record = mix(sources, meta["snrs_db"], 0, manifest.order_by_energy)

    speakers, paths = list(meta["speakers"]), list(meta["paths"])
    if record.order:
        speakers, paths = [speakers[k] for k in record.order], [paths[k] for k in record.order]

    record = replace(
        record, record_id=meta["id"], split=meta["split"], speakers=tuple(speakers), paths=tuple(paths)
    )
    if manifest.extend_to and meta.get("silent_seed") is not None:
        record = extend_silent_channel(record, manifest.extend_to, meta["silent_seed"])
    return record


def write_manifest(path: str, manifest: DatasetManifest) -> str:

    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        f.write(json.dumps(manifest.header(), sort_keys=True) + "\n")
        for record in manifest.records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info(f"Wrote manifest with {len(manifest.records)} records to {out_path}")
    return str(out_path)


def read_manifest(path: str) -> DatasetManifest:

    if not Path(path).exists():
        raise FileNotFoundError(f"Manifest not found: {path}")

    header, records = None, []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry.get("type") == MANIFEST_TYPE:
                header = entry
            elif entry.get("type") == RECORD_TYPE:
                records.append(entry)
            else:
                raise DatasetError(f"{path}:{line_no}: unknown entry type {entry.get('type')!r}")

    if header is None:
        raise DatasetError(f"{path} has no manifest header line")

    return DatasetManifest(
        corpus_root=header["corpus_root"],
        seed=header["seed"],
        num_speakers=header["num_speakers"],
        snr_range=tuple(header["snr_range"]),
        records=records,
        extend_to=header.get("extend_to"),
        order_by_energy=header.get("order_by_energy", False),
        sample_rate=header.get("sample_rate", Config.sample_rate()),
    )


def write_dataset(manifest: DatasetManifest, out_dir: str, threads: int = 1) -> DatasetManifest:
    """Write mixture and source WAVs per record and fill in gains and scale."""

    out_root = Path(out_dir)

    def emit(meta: Dict) -> Dict:
        record = realize_record(meta, manifest)
        record_dir = out_root / record.split / record.record_id
        write_wav(str(record_dir / "mix.wav"), record.mixture)
        for k, target in enumerate(record.targets(), 1):
            write_wav(str(record_dir / f"s{k}.wav"), target)
        # gains line up with meta["paths"]; s{k}.wav follows output_order
        return {
            **meta,
            "gains": record.input_order_gains(),
            "output_order": list(record.order),
            "scale": record.scale,
            "mixture_path": str(record_dir / "mix.wav"),
        }

    with ThreadPoolExecutor(max_workers=threads) as executor:
        records = list(executor.map(emit, manifest.records))

    written = replace(manifest, records=records)
    write_manifest(str(out_root / "manifest.jsonl"), written)
    logger.info(f"Wrote {len(records)} mixtures under {out_root}")
    return written


def band_limited_noise(
    length: int, low_hz: float, high_hz: float, sample_rate: int, rms: float, rng: np.random.Generator
) -> np.ndarray:

    spectrum = np.fft.rfft(rng.standard_normal(length))
    freqs = np.fft.rfftfreq(length, d=1.0 / sample_rate)
    spectrum[(freqs < low_hz) | (freqs >= high_hz)] = 0.0
    noise = np.fft.irfft(spectrum, n=length)
    return noise * (rms / np.sqrt(np.mean(noise * noise)))


def synthesize_toy_corpus(
    root: str,
    num_speakers: int = 4,
    utterances_per_speaker: int = 10,
    duration: float = 0.5,
    sample_rate: int = 8000,
    seed: int = 0,
    rms: float = 0.1,
) -> List[str]:
    """Speaker-directory corpus of band-limited noise, one disjoint band per
    speaker, written as 16-bit WAVs."""

    if num_speakers < 1 or utterances_per_speaker < 1:
        raise BadConfigError("toy corpus needs at least one speaker and one utterance")

    rng = np.random.default_rng(seed)
    band = (sample_rate / 2.0) / num_speakers
    guard = 0.1 * band
    written = []

    for k in range(num_speakers):
        low, high = k * band + guard, (k + 1) * band - guard
        for j in range(utterances_per_speaker):
            length = int(duration * sample_rate * rng.uniform(0.8, 1.2))
            samples = band_limited_noise(length, low, high, sample_rate, rms, rng)
            signal = quantize(TimeSignal(samples, sample_rate))
            written.append(write_wav(str(Path(root) / f"spk{k:02d}" / f"utt{j:03d}.wav"), signal))

    logger.info(f"Wrote toy corpus of {num_speakers} speakers x {utterances_per_speaker} utterances to {root}")
    return written
