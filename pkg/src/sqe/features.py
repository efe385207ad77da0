"""Framewise features and utterance-level pooling.

Two feature sources exist: log-mel spectrograms computed here, and
embeddings produced by external pre-trained encoders, which enter through
the ``SQE1`` binary container (see :func:`read_embedding_file`). Either way
the in-memory carrier is an :class:`EmbeddingSequence` (a T x D matrix plus
its frame step), which downstream models consume directly or after
mean+max pooling to a single utterance vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import AudioClip
from .errors import DataError, FormatError, TooShortError, TruncationError, VersionError

SOURCE_TAGS = ("melspec", "byols_cvt", "xlsr", "other")

_SQE1_MAGIC = b"SQE1"
_SQE1_VERSION = 1
_SQE1_HEADER = struct.Struct("<4sIIIfB3s")


@dataclass(frozen=True)
class MelConfig:
    """Log-mel front-end settings. Defaults target 16 kHz speech."""

    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    n_mels: int = 64
    fmin: float = 60.0
    fmax: float = 7800.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not self.window_ms >= self.hop_ms > 0:
            raise ValueError("need window_ms >= hop_ms > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.fft_size < self.window_samples:
            raise ValueError("fft_size smaller than the analysis window")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))


@dataclass(frozen=True)
class EmbeddingSequence:
    """T x D framewise feature matrix with its frame step in milliseconds.

    data is held as float32 (the on-disk precision); frame_step_ms is
    rounded to float32 so a file roundtrip reproduces the object exactly.
    """

    data: np.ndarray
    frame_step_ms: float
    source_tag: str = "other"

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"data must be a nonempty 2-D matrix, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("data contains NaN or Inf")
        if not self.frame_step_ms > 0:
            raise ValueError(f"frame_step_ms must be positive, got {self.frame_step_ms}")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}, got {self.source_tag!r}")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "frame_step_ms", float(np.float32(self.frame_step_ms)))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class UtteranceEmbedding:
    """Pooled per-utterance vector: max over frames ++ mean over frames."""

    vector: np.ndarray
    source_tag: str = "other"

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or v.size == 0 or v.size % 2 != 0:
            raise ValueError(f"vector must be 1-D with even length, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector contains NaN or Inf")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}, got {self.source_tag!r}")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        """Framewise dimension D; the vector itself has length 2*D."""
        return self.vector.size // 2


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, fft_size//2 + 1).

    Filters are spaced uniformly on the HTK mel scale between fmin and fmax
    and normalized to unit area in Hz, so wider high-frequency triangles do
    not dominate the energy scale.
    """
    n_bins = cfg.fft_size // 2 + 1
    fft_freqs = np.arange(n_bins) * (cfg.sample_rate / cfg.fft_size)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (fft_freqs - lo) / max(mid - lo, 1e-12)
        fall = (hi - fft_freqs) / max(hi - mid, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall)) * (2.0 / (hi - lo))
    return fb


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


def log_mel_spectrogram(clip: AudioClip, cfg: MelConfig = MelConfig()) -> EmbeddingSequence:
    """Compute a log-mel spectrogram, one row per analysis frame.

    Frames a clip with a periodic Hann window, takes the power spectrum,
    applies the mel filterbank, and returns ln(power + log_floor). Frame
    count is 1 + floor((N - window)/hop).

    Raises:
        TooShortError: the clip does not cover one analysis window.
        ValueError: clip sample rate differs from cfg.sample_rate.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"clip is {clip.sample_rate} Hz but the mel config expects {cfg.sample_rate} Hz"
        )
    x = clip.samples.astype(np.float64)
    win, hop = cfg.window_samples, cfg.hop_samples
    if len(x) < win:
        raise TooShortError(f"clip of {len(x)} samples is shorter than one {win}-sample window")
    n_frames = 1 + (len(x) - win) // hop

    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    frames = x[idx] * window

    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel_power = power @ mel_filterbank(cfg).T
    out = np.log(mel_power + cfg.log_floor)
    return EmbeddingSequence(data=out.astype(np.float32), frame_step_ms=cfg.hop_ms,
                             source_tag="melspec")


def pool_mean_max(seq: EmbeddingSequence) -> UtteranceEmbedding:
    """Collapse frames to a single vector: columnwise max ++ columnwise mean.

    The mean is computed by summing each column in sorted order, which makes
    the result exactly invariant to frame permutations (floating-point sums
    are order-dependent, so a canonical order is forced first). Constant
    columns yield an exactly equal max and mean.
    """
    cols = np.sort(seq.data.astype(np.float64), axis=0)
    top = cols[-1]
    mean = cols.sum(axis=0) / seq.n_frames
    mean = np.where(cols[0] == top, top, np.minimum(mean, top))
    return UtteranceEmbedding(vector=np.concatenate([top, mean]), source_tag=seq.source_tag)


def normalize_embedding_sequence(seq: EmbeddingSequence) -> EmbeddingSequence:
    """Per-utterance standardization: each dimension to zero mean, unit std.

    Dimensions with (near-)zero spread are left centered but unscaled. Off
    by default everywhere; enable explicitly where a corpus needs it.
    """
    data = seq.data.astype(np.float64)
    mu = data.mean(axis=0)
    sd = data.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    out = (data - mu) / sd
    return EmbeddingSequence(data=out.astype(np.float32),
                             frame_step_ms=seq.frame_step_ms, source_tag=seq.source_tag)


def write_embedding_file(seq: EmbeddingSequence, path) -> None:
    """Serialize an EmbeddingSequence in the SQE1 container.

    Layout (little-endian): magic "SQE1", version u32, T u32, D u32,
    frame_step_ms f32, source-tag byte, 3 reserved zero bytes, then T*D
    float32 values row-major.
    """
    header = _SQE1_HEADER.pack(
        _SQE1_MAGIC,
        _SQE1_VERSION,
        seq.n_frames,
        seq.dim,
        np.float32(seq.frame_step_ms),
        SOURCE_TAGS.index(seq.source_tag),
        b"\x00\x00\x00",
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write embedding file {path}: {exc}") from exc


def read_embedding_file(path) -> EmbeddingSequence:
    """Parse an SQE1 container back into an EmbeddingSequence.

    Raises:
        FormatError: wrong magic, corrupt header fields, or unknown tag.
        VersionError: container version this reader does not speak.
        TruncationError: payload length disagrees with the header.
        DataError: non-finite values or a non-positive frame step.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _SQE1_HEADER.size:
        raise TruncationError(f"{path}: file shorter than an SQE1 header")
    magic, version, n_frames, dim, step, tag, reserved = _SQE1_HEADER.unpack_from(blob, 0)
    if magic != _SQE1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _SQE1_VERSION:
        raise VersionError(f"{path}: unsupported SQE1 version {version}")
    if reserved != b"\x00\x00\x00":
        raise FormatError(f"{path}: reserved header bytes are nonzero")
    if tag >= len(SOURCE_TAGS):
        raise FormatError(f"{path}: unknown source-tag byte {tag}")
    if n_frames < 1 or dim < 1:
        raise FormatError(f"{path}: header declares empty matrix {n_frames}x{dim}")
    if not (np.isfinite(step) and step > 0):
        raise DataError(f"{path}: frame_step_ms {step!r} is not a positive finite value")

    expected = n_frames * dim * 4
    payload = blob[_SQE1_HEADER.size :]
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: header declares {expected} payload bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n_frames, dim)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains NaN or Inf")
    return EmbeddingSequence(data=data, frame_step_ms=float(step),
                             source_tag=SOURCE_TAGS[tag])
