import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwslab.errors import EmptyInputError, ParseError, ResampleRequiredError, UnsupportedFormatError
from kwslab.features import (
    AudioBuffer,
    LFBETransformer,
    compute_lfbe,
    hz_to_mel,
    mel_filterbank,
    mel_to_hz,
    read_wav,
    write_wav,
)
from oracles import reference_frame_lfbe

FLOOR = math.log(1e-10)


def sine(freq, seconds=1.0, amp=1.0, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


class TestLfbe:
    def test_silence(self):
        feats = compute_lfbe(np.zeros(16000))
        assert feats.shape == (98, 64)
        np.testing.assert_array_equal(feats, FLOOR)

    @pytest.mark.parametrize("n,expected", [(400, 1), (559, 1), (560, 2), (16000, 98), (16160, 99)])
    def test_frame_count(self, n, expected):
        assert compute_lfbe(np.zeros(n)).shape[0] == expected

    def test_sine_peaks_at_nearest_center(self):
        feats = compute_lfbe(sine(1000.0))
        _, centers = mel_filterbank()
        assert np.all(np.argmax(feats, axis=1) == np.argmin(np.abs(centers - 1000.0)))

    def test_matches_reference_dft(self):
        x = sine(1000.0, 0.05) + 0.1 * np.random.default_rng(0).normal(size=800)
        fast = compute_lfbe(x)
        slow = reference_frame_lfbe(x[160:560])
        np.testing.assert_allclose(fast[1], slow, atol=1e-6)
        assert np.argmax(fast[1]) == np.argmax(slow)

    def test_shift_covariance(self):
        x = np.random.default_rng(1).normal(size=8000)
        a = compute_lfbe(x)
        b = compute_lfbe(np.concatenate([np.zeros(160), x]))
        np.testing.assert_allclose(b[1:], a[: len(b) - 1], atol=1e-5)

    @given(st.floats(0.05, 20.0))
    @settings(max_examples=25, deadline=None)
    def test_gain_homogeneity(self, c):
        x = np.random.default_rng(2).normal(size=2000)
        a, b = compute_lfbe(x), compute_lfbe(c * x)
        above = (a > FLOOR + 5) & (b > FLOOR + 5)
        np.testing.assert_allclose(b[above] - a[above], 2 * math.log(c), atol=1e-8)

    def test_never_below_floor_or_non_finite(self):
        x = np.random.default_rng(3).normal(size=4000) * 1e-8
        feats = compute_lfbe(x)
        assert np.all(np.isfinite(feats))
        assert feats.min() >= FLOOR

    def test_too_short(self):
        with pytest.raises(EmptyInputError):
            compute_lfbe(np.zeros(399))

    def test_wrong_rate(self):
        with pytest.raises(ResampleRequiredError):
            compute_lfbe(AudioBuffer(np.zeros(8000), 8000))

    def test_transformer(self):
        t = LFBETransformer()
        out = t.fit_transform([np.zeros(16000), sine(500.0, 0.5)])
        assert [o.shape for o in out] == [(98, 64), (48, 64)]
        assert t.get_params()["n_mels"] == 64


class TestFilterbank:
    def test_unit_area(self):
        w, _ = mel_filterbank()
        np.testing.assert_allclose(w.sum(axis=1), 1.0)

    def test_centers_increase_and_span(self):
        _, c = mel_filterbank()
        assert np.all(np.diff(c) > 0)
        assert 60 < c[0] < c[-1] < 8000

    def test_mel_round_trip(self):
        f = np.array([0.0, 60.0, 1000.0, 7999.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
        assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.1)


def wav_bytes(fmt_code, channels, bits, payload, rate=16000):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_code, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestWav:
    def test_pcm_normalization(self, tmp_path):
        path = tmp_path / "a.wav"
        path.write_bytes(wav_bytes(1, 1, 16, struct.pack("<3h", 32767, -32768, 0)))
        audio = read_wav(path)
        assert audio.samples[0] == pytest.approx(0.99997, abs=1e-5)
        assert audio.samples[1] == -1.0
        assert audio.samples[2] == 0.0
        assert audio.sample_rate == 16000

    @pytest.mark.parametrize("fmt", ["float32", "pcm16"])
    def test_round_trip(self, tmp_path, fmt):
        rng = np.random.default_rng(4)
        if fmt == "pcm16":
            samples = rng.integers(-32768, 32768, size=1000) / 32768.0
        else:
            samples = rng.uniform(-1, 1, size=1000).astype(np.float32).astype(np.float64)
        write_wav(tmp_path / "x.wav", AudioBuffer(samples), fmt)
        back = read_wav(tmp_path / "x.wav")
        assert back.samples.tobytes() == samples.tobytes()

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "s.wav"
        path.write_bytes(wav_bytes(1, 2, 16, bytes(8)))
        with pytest.raises(UnsupportedFormatError):
            read_wav(path)

    def test_bad_riff_offset(self, tmp_path):
        path = tmp_path / "b.wav"
        path.write_bytes(b"RIFX" + bytes(40))
        with pytest.raises(ParseError) as info:
            read_wav(path)
        assert info.value.offset == 0

    def test_bad_wave_offset(self, tmp_path):
        path = tmp_path / "b.wav"
        path.write_bytes(b"RIFF" + bytes(4) + b"WAVX" + bytes(20))
        with pytest.raises(ParseError) as info:
            read_wav(path)
        assert info.value.offset == 8

    def test_overrunning_chunk(self, tmp_path):
        raw = bytearray(wav_bytes(1, 1, 16, bytes(4)))
        struct.pack_into("<I", raw, 40, 1000)
        path = tmp_path / "o.wav"
        path.write_bytes(bytes(raw))
        with pytest.raises(ParseError) as info:
            read_wav(path)
        assert info.value.offset == 36

    def test_unsupported_bit_depth(self, tmp_path):
        path = tmp_path / "u.wav"
        path.write_bytes(wav_bytes(1, 1, 8, bytes(4)))
        with pytest.raises(UnsupportedFormatError):
            read_wav(path)

    def test_wav_to_features(self, tmp_path):
        write_wav(tmp_path / "s.wav", AudioBuffer(sine(1000.0, 0.5, amp=0.5)), "pcm16")
        feats = compute_lfbe(read_wav(tmp_path / "s.wav"))
        assert feats.shape == (48, 64)
