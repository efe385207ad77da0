"""Log-mel frontend, pooling, and SQE1 file format tests.

The spectrogram is cross-checked against a deliberately naive
reimplementation (python loops, no shared code), and the binary format
against fields unpacked by hand with struct.
"""

import math
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqe.audio import AudioClip
from sqe.errors import DataError, FormatError, TooShortError, TruncationError, VersionError
from sqe.features import (
    EmbeddingSequence,
    MelConfig,
    UtteranceEmbedding,
    log_mel_spectrogram,
    mel_center_frequencies,
    mel_filterbank,
    normalize_embedding_sequence,
    pool_mean_max,
    read_embedding_file,
    write_embedding_file,
)


def _hz_to_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def _naive_log_mel(x, cfg):
    """Frame-by-frame direct computation used as the oracle."""
    win = cfg.window_samples
    hop = cfg.hop_samples
    n_frames = 1 + (len(x) - win) // hop
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    fb = mel_filterbank(cfg)
    rows = []
    for t in range(n_frames):
        frame = x[t * hop : t * hop + win].astype(np.float64) * window
        spec = np.fft.rfft(frame, n=cfg.fft_size)
        power = spec.real**2 + spec.imag**2
        rows.append(np.log(power @ fb.T + cfg.log_floor))
    return np.stack(rows)


class TestMelFilterbank:
    def test_triangle_geometry(self):
        """Each filter is a triangle between successive mel-spaced edges."""
        cfg = MelConfig()
        fb = mel_filterbank(cfg)
        assert fb.shape == (cfg.n_mels, cfg.fft_size // 2 + 1)
        lo = _hz_to_mel(cfg.fmin)
        hi = _hz_to_mel(cfg.fmax)
        edges = _mel_to_hz(np.linspace(lo, hi, cfg.n_mels + 2))
        bin_hz = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
        for m in (0, 17, 63):
            f_lo, f_c, f_hi = edges[m], edges[m + 1], edges[m + 2]
            norm = 2.0 / (f_hi - f_lo)
            up = np.clip((bin_hz - f_lo) / (f_c - f_lo), 0, None)
            down = np.clip((f_hi - bin_hz) / (f_hi - f_c), 0, None)
            expected = np.maximum(np.minimum(up, down), 0.0) * norm
            np.testing.assert_allclose(fb[m], expected, atol=1e-12)

    def test_support_within_band(self):
        cfg = MelConfig()
        fb = mel_filterbank(cfg)
        bin_hz = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
        outside = (bin_hz < cfg.fmin) | (bin_hz > cfg.fmax)
        assert np.all(fb[:, outside] == 0.0)
        assert np.all(fb >= 0.0)

    def test_every_filter_nonempty(self):
        fb = mel_filterbank(MelConfig())
        assert np.all(fb.sum(axis=1) > 0.0)

    def test_center_frequencies_monotone(self):
        centers = mel_center_frequencies(MelConfig())
        assert centers.shape == (64,)
        assert np.all(np.diff(centers) > 0)
        assert centers[0] > 60.0 and centers[-1] < 7800.0


class TestLogMel:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(21)
        x = rng.uniform(-0.8, 0.8, 7000).astype(np.float32)
        clip = AudioClip(samples=x, sample_rate=16000)
        cfg = MelConfig()
        seq = log_mel_spectrogram(clip, cfg)
        expected = _naive_log_mel(x, cfg)
        assert seq.data.shape == expected.shape
        np.testing.assert_allclose(seq.data, expected.astype(np.float32), rtol=1e-5, atol=1e-5)

    def test_one_second_shape(self):
        clip = AudioClip(samples=np.zeros(16000, dtype=np.float32), sample_rate=16000)
        seq = log_mel_spectrogram(clip, MelConfig())
        assert seq.n_frames == 98
        assert seq.dim == 64
        assert seq.frame_step_ms == np.float32(10.0)
        assert seq.source_tag == "melspec"

    def test_silence_hits_log_floor(self):
        clip = AudioClip(samples=np.zeros(16000, dtype=np.float32), sample_rate=16000)
        seq = log_mel_spectrogram(clip, MelConfig())
        np.testing.assert_allclose(seq.data, np.log(1e-10), rtol=1e-6)

    def test_sine_energy_lands_in_nearest_band(self):
        """A 1 kHz tone peaks in the mel band whose center is nearest 1 kHz."""
        cfg = MelConfig()
        t = np.arange(32000) / 16000
        clip = AudioClip(
            samples=(0.5 * np.sin(2 * np.pi * 1000.0 * t)).astype(np.float32),
            sample_rate=16000,
        )
        seq = log_mel_spectrogram(clip, cfg)
        band = int(np.argmax(seq.data.mean(axis=0)))
        centers = mel_center_frequencies(cfg)
        assert band == int(np.argmin(np.abs(centers - 1000.0)))

    @given(n=st.integers(400, 40000))
    @settings(max_examples=60, deadline=None)
    def test_frame_count_formula(self, n):
        cfg = MelConfig()
        clip = AudioClip(samples=np.zeros(n, dtype=np.float32), sample_rate=16000)
        seq = log_mel_spectrogram(clip, cfg)
        assert seq.n_frames == 1 + (n - cfg.window_samples) // cfg.hop_samples

    def test_too_short(self):
        clip = AudioClip(samples=np.zeros(399, dtype=np.float32), sample_rate=16000)
        with pytest.raises(TooShortError):
            log_mel_spectrogram(clip, MelConfig())

    def test_rate_mismatch(self):
        clip = AudioClip(samples=np.zeros(8000, dtype=np.float32), sample_rate=8000)
        with pytest.raises(ValueError):
            log_mel_spectrogram(clip, MelConfig())

    def test_appending_silence_never_lowers_max_part(self):
        """Extra near-silent audio can only add frames at the log floor."""
        rng = np.random.default_rng(9)
        x = rng.uniform(-0.5, 0.5, 8000).astype(np.float32)
        cfg = MelConfig()
        a = pool_mean_max(log_mel_spectrogram(AudioClip(samples=x, sample_rate=16000), cfg))
        longer = np.concatenate([x, np.zeros(4000, dtype=np.float32)])
        b = pool_mean_max(
            log_mel_spectrogram(AudioClip(samples=longer, sample_rate=16000), cfg)
        )
        d = cfg.n_mels
        assert np.all(b.vector[:d] >= a.vector[:d])


class TestMelConfigValidation:
    def test_window_shorter_than_hop(self):
        with pytest.raises(ValueError):
            MelConfig(window_ms=5.0, hop_ms=10.0)

    def test_fmax_above_nyquist(self):
        with pytest.raises(ValueError):
            MelConfig(fmax=9000.0)

    def test_fft_shorter_than_window(self):
        with pytest.raises(ValueError):
            MelConfig(fft_size=256)

    def test_sample_counts(self):
        cfg = MelConfig()
        assert cfg.window_samples == 400
        assert cfg.hop_samples == 160


class TestPooling:
    def test_known_matrix(self):
        """Columnwise scan oracle: max part first, mean part second."""
        seq = EmbeddingSequence(
            data=np.array([[1, -2], [3, 0], [2, -1]], dtype=np.float32),
            frame_step_ms=10.0,
            source_tag="other",
        )
        out = pool_mean_max(seq)
        np.testing.assert_allclose(out.vector, [3.0, 0.0, 2.0, -1.0])
        assert out.dim == 2

    def test_single_frame_and_constant(self):
        row = np.array([[0.5, -0.25, 8.0]], dtype=np.float32)
        seq = EmbeddingSequence(data=row, frame_step_ms=10.0, source_tag="other")
        out = pool_mean_max(seq)
        np.testing.assert_array_equal(out.vector, [0.5, -0.25, 8.0, 0.5, -0.25, 8.0])

        const = EmbeddingSequence(
            data=np.tile(row, (7, 1)), frame_step_ms=10.0, source_tag="other"
        )
        out = pool_mean_max(const)
        # constant columns: mean equals max *exactly*, not approximately
        assert np.array_equal(out.vector[:3], out.vector[3:])

    @given(t=st.integers(1, 40), d=st.integers(1, 16), seed=st.integers(0, 10**6))
    @settings(max_examples=60, deadline=None)
    def test_permutation_invariance_exact(self, t, d, seed):
        rng = np.random.default_rng(seed)
        data = rng.standard_normal((t, d)).astype(np.float32)
        seq = EmbeddingSequence(data=data, frame_step_ms=10.0, source_tag="other")
        perm = rng.permutation(t)
        shuffled = EmbeddingSequence(
            data=data[perm], frame_step_ms=10.0, source_tag="other"
        )
        a = pool_mean_max(seq).vector
        b = pool_mean_max(shuffled).vector
        assert np.array_equal(a, b)

    @given(t=st.integers(1, 40), d=st.integers(1, 16), seed=st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_max_part_dominates_mean_part(self, t, d, seed):
        rng = np.random.default_rng(seed)
        data = rng.standard_normal((t, d)).astype(np.float32)
        seq = EmbeddingSequence(data=data, frame_step_ms=10.0, source_tag="other")
        out = pool_mean_max(seq).vector
        assert np.all(out[:d] >= out[d:])


class TestNormalization:
    def test_standardizes_columns(self):
        rng = np.random.default_rng(2)
        data = (rng.standard_normal((50, 6)) * 3 + 1).astype(np.float32)
        seq = EmbeddingSequence(data=data, frame_step_ms=20.0, source_tag="byols_cvt")
        out = normalize_embedding_sequence(seq)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.std(axis=0), 1.0, atol=1e-4)
        assert out.frame_step_ms == seq.frame_step_ms
        assert out.source_tag == seq.source_tag

    def test_constant_column_stays_finite(self):
        data = np.ones((10, 3), dtype=np.float32)
        seq = EmbeddingSequence(data=data, frame_step_ms=20.0, source_tag="other")
        out = normalize_embedding_sequence(seq)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-7)


class TestEmbeddingFile:
    def _seq(self, t=5, d=8, seed=0, step=20.0, tag="xlsr"):
        rng = np.random.default_rng(seed)
        return EmbeddingSequence(
            data=rng.standard_normal((t, d)).astype(np.float32),
            frame_step_ms=step,
            source_tag=tag,
        )

    def test_header_layout(self, tmp_path):
        """Unpack the header by hand and check every field."""
        seq = self._seq(t=5, d=8, step=20.0, tag="xlsr")
        path = tmp_path / "e.sqe1"
        write_embedding_file(seq, path)
        blob = path.read_bytes()
        magic, version, t, d, step, tag, reserved = struct.unpack_from("<4sIIIfB3s", blob, 0)
        assert magic == b"SQE1"
        assert version == 1
        assert (t, d) == (5, 8)
        assert step == np.float32(20.0)
        assert tag == 2  # xlsr
        assert reserved == b"\x00\x00\x00"
        header = struct.calcsize("<4sIIIfB3s")
        assert len(blob) == header + 4 * t * d
        payload = np.frombuffer(blob, dtype="<f4", offset=header).reshape(t, d)
        np.testing.assert_array_equal(payload, seq.data)

    def test_roundtrip_bit_exact(self, tmp_path):
        seq = self._seq(t=5, d=8)
        write_embedding_file(seq, tmp_path / "e.sqe1")
        back = read_embedding_file(tmp_path / "e.sqe1")
        assert np.array_equal(back.data, seq.data)
        assert back.frame_step_ms == seq.frame_step_ms
        assert back.source_tag == seq.source_tag

    def test_roundtrip_minimal(self, tmp_path):
        seq = EmbeddingSequence(
            data=np.array([[3.25]], dtype=np.float32), frame_step_ms=160.0, source_tag="other"
        )
        write_embedding_file(seq, tmp_path / "m.sqe1")
        back = read_embedding_file(tmp_path / "m.sqe1")
        assert np.array_equal(back.data, seq.data)
        assert back.frame_step_ms == np.float32(160.0)

    def test_step_values_stay_distinct(self, tmp_path):
        for step in (20.0, 160.0):
            seq = self._seq(step=step)
            write_embedding_file(seq, tmp_path / f"{step}.sqe1")
            assert read_embedding_file(tmp_path / f"{step}.sqe1").frame_step_ms == np.float32(step)

    @given(
        t=st.integers(1, 20),
        d=st.integers(1, 12),
        seed=st.integers(0, 10**6),
        tag=st.sampled_from(["melspec", "byols_cvt", "xlsr", "other"]),
    )
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_property(self, t, d, seed, tag):
        seq = self._seq(t=t, d=d, seed=seed, tag=tag)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "p.sqe1"
            write_embedding_file(seq, path)
            back = read_embedding_file(path)
        assert np.array_equal(back.data, seq.data)
        assert back.source_tag == tag

    def test_bad_magic(self, tmp_path):
        seq = self._seq()
        path = tmp_path / "e.sqe1"
        write_embedding_file(seq, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_embedding_file(path)

    def test_future_version(self, tmp_path):
        seq = self._seq()
        path = tmp_path / "e.sqe1"
        write_embedding_file(seq, path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 4, 2)
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            read_embedding_file(path)

    def test_truncated_payload(self, tmp_path):
        seq = self._seq()
        path = tmp_path / "e.sqe1"
        write_embedding_file(seq, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(TruncationError):
            read_embedding_file(path)

    def test_reserved_bytes_must_be_zero(self, tmp_path):
        seq = self._seq()
        path = tmp_path / "e.sqe1"
        write_embedding_file(seq, path)
        blob = bytearray(path.read_bytes())
        blob[21] = 0xFF  # inside the 3 reserved bytes after the tag
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_embedding_file(path)

    def test_unknown_tag(self, tmp_path):
        seq = self._seq()
        path = tmp_path / "e.sqe1"
        write_embedding_file(seq, path)
        blob = bytearray(path.read_bytes())
        blob[20] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_embedding_file(path)

    def test_nan_payload_rejected(self, tmp_path):
        seq = self._seq(t=2, d=2)
        path = tmp_path / "e.sqe1"
        write_embedding_file(seq, path)
        blob = bytearray(path.read_bytes())
        header = struct.calcsize("<4sIIIfB3s")
        struct.pack_into("<f", blob, header, float("nan"))
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError):
            read_embedding_file(path)


class TestContainers:
    def test_embedding_sequence_validation(self):
        with pytest.raises(ValueError):
            EmbeddingSequence(
                data=np.zeros((0, 4), dtype=np.float32), frame_step_ms=10.0, source_tag="other"
            )
        with pytest.raises(ValueError):
            EmbeddingSequence(
                data=np.zeros(4, dtype=np.float32), frame_step_ms=10.0, source_tag="other"
            )
        with pytest.raises(ValueError):
            EmbeddingSequence(
                data=np.full((2, 2), np.nan, dtype=np.float32),
                frame_step_ms=10.0,
                source_tag="other",
            )
        with pytest.raises(ValueError):
            EmbeddingSequence(
                data=np.zeros((2, 2), dtype=np.float32), frame_step_ms=10.0, source_tag="bogus"
            )

    def test_utterance_embedding_needs_even_length(self):
        with pytest.raises(ValueError):
            UtteranceEmbedding(vector=np.zeros(5), source_tag="other")
        emb = UtteranceEmbedding(vector=np.zeros(6), source_tag="other")
        assert emb.dim == 3
