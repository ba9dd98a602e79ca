import json
from pathlib import Path

import numpy as np
import pytest

from src.audio_io import read_wav, write_wav
from src.dsp import TimeSignal
from src.errors import BadConfigError, DatasetError, SignalError
from src.mixgen import (
    DatasetManifest,
    ManifestConfig,
    build_manifest,
    extend_silent_channel,
    mix,
    read_manifest,
    realize_record,
    write_dataset,
    write_manifest,
)
from tests.helpers import random_signal


def snr_db(reference, other):
    return 10 * np.log10(np.dot(reference, reference) / np.dot(other, other))


class TestMix:

    def test_equal_energy_at_zero_db(self, rng):
        x = random_signal(rng, 1000)
        y = TimeSignal(-x.samples)
        record = mix([x, y], [0.0])
        assert record.gains == (1.0, 1.0)
        np.testing.assert_array_equal(record.mixture.samples, x.samples + y.samples)

    def test_requested_snr(self, rng):
        a, b = random_signal(rng, 1200), random_signal(rng, 1200, scale=0.3)
        record = mix([a, b], [3.5])
        scaled = record.scaled_sources()
        assert snr_db(scaled[0].samples, scaled[1].samples) == pytest.approx(3.5, abs=1e-9)

    def test_snr_measured_over_overlap(self, rng):
        a, b = random_signal(rng, 1500), random_signal(rng, 1000)
        record = mix([a, b], [2.0])
        scaled = record.scaled_sources()
        assert len(record.mixture) == 1500
        assert np.all(scaled[1].samples[1000:] == 0.0)
        assert snr_db(scaled[0].samples[:1000], scaled[1].samples[:1000]) == pytest.approx(2.0, abs=1e-9)

    def test_clipping_rescales_everything(self, rng):
        a = TimeSignal(np.full(100, 0.8))
        b = TimeSignal(np.full(100, 0.8))
        record = mix([a, b], [0.0])
        assert record.scale == pytest.approx(0.9 / 1.6)
        assert np.max(np.abs(record.mixture.samples)) == pytest.approx(0.9)
        total = np.sum([s.samples for s in record.scaled_sources()], axis=0)
        np.testing.assert_allclose(total, record.mixture.samples, atol=1e-12)

    def test_order_by_energy(self, rng):
        quiet, loud = random_signal(rng, 800), random_signal(rng, 800)
        record = mix([quiet, loud], [-6.0], order_by_energy=True)
        energies = [s.energy for s in record.scaled_sources()]
        assert energies[0] > energies[1]
        assert record.order == (1, 0)
        assert record.reference_index == 1

    def test_order_by_energy_keeps_snrs_with_their_sources(self, rng):
        a, b, c = (random_signal(rng, 900) for _ in range(3))
        record = mix([a, b, c], [6.0, -4.0], order_by_energy=True)
        assert record.order == (2, 0, 1)
        assert record.reference_index == 1
        assert record.snrs_db == (-4.0, 6.0)
        assert record.input_order_gains()[0] == 1.0
        scaled = record.scaled_sources()
        for position, snr in zip((0, 2), record.snrs_db):
            assert snr_db(scaled[1].samples, scaled[position].samples) == pytest.approx(snr, abs=1e-9)

    def test_needs_two_sources(self, rng):
        with pytest.raises(SignalError):
            mix([random_signal(rng, 100)], [])

    def test_snr_count(self, rng):
        with pytest.raises(BadConfigError):
            mix([random_signal(rng, 100), random_signal(rng, 100)], [0.0, 1.0])

    def test_silent_source(self, rng):
        with pytest.raises(SignalError):
            mix([random_signal(rng, 100), TimeSignal(np.zeros(100))], [0.0])


class TestSilentChannel:

    def test_energy_is_70_db_down(self, rng):
        record = mix([random_signal(rng, 1000), random_signal(rng, 1000)], [1.0])
        extended = extend_silent_channel(record, 3, rng_seed=5)
        average = np.mean([s.energy for s in record.scaled_sources()])
        assert extended.num_targets == 3
        assert extended.silent_channels[0].energy == pytest.approx(average * 1e-7, rel=1e-9)
        np.testing.assert_array_equal(extended.mixture.samples, record.mixture.samples)
        assert len(extended.targets()) == 3

    def test_reproducible_from_seed(self, rng):
        record = mix([random_signal(rng, 500), random_signal(rng, 500)], [0.0])
        a = extend_silent_channel(record, 3, rng_seed=9).silent_channels[0]
        b = extend_silent_channel(record, 3, rng_seed=9).silent_channels[0]
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_target_must_grow(self, rng):
        record = mix([random_signal(rng, 500), random_signal(rng, 500)], [0.0])
        with pytest.raises(DatasetError):
            extend_silent_channel(record, 2, rng_seed=0)


class TestManifest:

    def test_deterministic(self, toy_corpus):
        config = ManifestConfig(num_speakers=2, counts={"train": 5, "valid": 2, "test": 2}, seed=11)
        assert build_manifest(toy_corpus, config).records == build_manifest(toy_corpus, config).records

    def test_open_condition_speakers_are_unseen(self, toy_manifest):
        seen = toy_manifest.speakers_in(["train", "valid"])
        unseen = toy_manifest.speakers_in(["test"])
        assert seen and unseen
        assert not seen & unseen
        assert toy_manifest.speakers_in(["valid"]) <= toy_manifest.speakers_in(["train"])

    def test_record_fields(self, toy_manifest):
        record = toy_manifest.records[0]
        assert len(record["speakers"]) == 2
        assert len(set(record["speakers"])) == 2
        assert 0.0 <= record["snrs_db"][0] <= 5.0
        assert record["type"] == "record"

    def test_too_few_speakers(self, toy_corpus):
        config = ManifestConfig(num_speakers=3, counts={"train": 2, "test": 1}, seed=0, test_speakers=3)
        with pytest.raises(DatasetError):
            build_manifest(toy_corpus, config)

    def test_missing_corpus(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            build_manifest(str(tmp_path / "absent"), ManifestConfig())

    def test_invalid_config(self):
        with pytest.raises(BadConfigError):
            ManifestConfig(snr_min=5.0, snr_max=0.0)
        with pytest.raises(BadConfigError):
            ManifestConfig(num_speakers=2, extend_to=2)

    def test_write_read(self, toy_manifest, tmp_path):
        path = write_manifest(str(tmp_path / "manifest.jsonl"), toy_manifest)
        loaded = read_manifest(path)
        assert loaded.records == toy_manifest.records
        assert loaded.header() == toy_manifest.header()
        first = json.loads(Path(path).read_text().splitlines()[0])
        assert first["type"] == "manifest"

    def test_unknown_entry(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"type": "manifest"}\n{"type": "other"}\n')
        with pytest.raises(DatasetError):
            read_manifest(str(path))

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"type": "record", "split": "train"}\n')
        with pytest.raises(DatasetError):
            read_manifest(str(path))


class TestRealize:

    def test_reproducible(self, toy_manifest):
        meta = toy_manifest.records[0]
        a, b = realize_record(meta, toy_manifest), realize_record(meta, toy_manifest)
        np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)
        assert a.speakers == tuple(meta["speakers"])

    def test_split_filter(self, toy_manifest):
        records = toy_manifest.realize("valid", threads=2)
        assert len(records) == 2
        assert all(r.split == "valid" for r in records)

    def test_silent_extension(self, toy_corpus):
        config = ManifestConfig(num_speakers=2, counts={"train": 2}, seed=1, extend_to=3)
        manifest = build_manifest(toy_corpus, config)
        records = manifest.realize()
        assert all(r.num_targets == 3 and r.num_speakers == 2 for r in records)


class TestWriteDataset:

    def test_writes_audio_and_gains(self, toy_manifest, tmp_path):
        written = write_dataset(toy_manifest, str(tmp_path / "data"), threads=2)
        meta = written.records[0]
        assert len(meta["gains"]) == 2
        assert meta["scale"] > 0

        record_dir = tmp_path / "data" / meta["split"] / meta["id"]
        assert sorted(p.name for p in record_dir.iterdir()) == ["mix.wav", "s1.wav", "s2.wav"]

        mixture = read_wav(meta["mixture_path"])
        expected = realize_record(meta, toy_manifest).mixture.samples
        np.testing.assert_allclose(mixture.samples, expected, atol=1.0 / 32768)
        assert (tmp_path / "data" / "manifest.jsonl").exists()

    def test_energy_order_gains_follow_manifest_paths(self, rng, tmp_path):
        corpus = tmp_path / "corpus"
        write_wav(str(corpus / "a" / "quiet.wav"), random_signal(rng, 800, scale=0.05))
        write_wav(str(corpus / "b" / "loud.wav"), random_signal(rng, 800, scale=0.05))
        manifest = DatasetManifest(
            corpus_root=str(corpus),
            seed=0,
            num_speakers=2,
            snr_range=(-6.0, -6.0),
            records=[
                {
                    "type": "record",
                    "id": "train_00000",
                    "split": "train",
                    "speakers": ["a", "b"],
                    "paths": ["a/quiet.wav", "b/loud.wav"],
                    "snrs_db": [-6.0],
                    "gains": None,
                    "scale": None,
                    "silent_seed": None,
                }
            ],
            order_by_energy=True,
        )
        meta = write_dataset(manifest, str(tmp_path / "data")).records[0]
        assert meta["paths"] == ["a/quiet.wav", "b/loud.wav"]
        assert meta["gains"][0] == 1.0
        assert meta["gains"][1] > 1.0
        assert meta["output_order"] == [1, 0]

        record_dir = tmp_path / "data" / "train" / "train_00000"
        loud = read_wav(str(corpus / "b" / "loud.wav")).samples * meta["gains"][1] * meta["scale"]
        first = read_wav(str(record_dir / "s1.wav")).samples
        np.testing.assert_allclose(first, loud, atol=2.0 / 32768)


class TestToyCorpus:

    def test_layout(self, toy_corpus):
        speakers = sorted(p.name for p in Path(toy_corpus).iterdir())
        assert speakers == ["spk00", "spk01", "spk02", "spk03"]
        assert len(list((Path(toy_corpus) / "spk00").glob("*.wav"))) == 5

    def test_bands_are_disjoint(self, toy_corpus):
        signal = read_wav(str(Path(toy_corpus) / "spk01" / "utt000.wav"))
        spectrum = np.abs(np.fft.rfft(signal.samples)) ** 2
        freqs = np.fft.rfftfreq(len(signal), d=1.0 / 8000)
        in_band = spectrum[(freqs >= 1000) & (freqs < 2000)].sum()
        assert in_band / spectrum.sum() > 0.99
