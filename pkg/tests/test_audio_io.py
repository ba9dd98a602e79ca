import numpy as np
import pytest
import soundfile as sf

from src.audio_io import list_wavs, quantize, read_wav, write_wav
from src.dsp import TimeSignal
from src.errors import SignalError
from tests.helpers import random_signal


class TestWavIO:

    def test_round_trip_matches_quantize(self, tmp_path, rng):
        signal = random_signal(rng, 3000)
        loaded = read_wav(write_wav(str(tmp_path / "a.wav"), signal), expected_rate=8000)
        np.testing.assert_array_equal(loaded.samples, quantize(signal).samples)
        assert loaded.sample_rate == 8000

    def test_rate_mismatch(self, tmp_path, rng):
        path = write_wav(str(tmp_path / "a.wav"), TimeSignal(random_signal(rng, 100).samples, 16000))
        with pytest.raises(SignalError, match="sample rate"):
            read_wav(path, expected_rate=8000)

    def test_rejects_stereo(self, tmp_path):
        path = str(tmp_path / "stereo.wav")
        sf.write(path, np.zeros((100, 2), dtype=np.int16), 8000, subtype="PCM_16")
        with pytest.raises(SignalError, match="mono"):
            read_wav(path)

    def test_rejects_float_wav(self, tmp_path):
        path = str(tmp_path / "float.wav")
        sf.write(path, np.zeros(100), 8000, subtype="FLOAT")
        with pytest.raises(SignalError):
            read_wav(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(str(tmp_path / "absent.wav"))

    def test_clipping_saturates(self, tmp_path):
        loaded = read_wav(write_wav(str(tmp_path / "loud.wav"), TimeSignal(np.array([1.5, -1.5, 0.0]))))
        np.testing.assert_array_equal(loaded.samples, [32767 / 32768, -1.0, 0.0])

    def test_list_wavs(self, tmp_path, rng):
        for name in ("b.wav", "a.wav"):
            write_wav(str(tmp_path / name), random_signal(rng, 10))
        (tmp_path / "notes.txt").write_text("x")
        assert [p.split("/")[-1] for p in list_wavs(str(tmp_path))] == ["a.wav", "b.wav"]
