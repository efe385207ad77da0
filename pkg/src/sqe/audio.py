"""Audio decoding, resampling, and synthetic clip generation.

WAV support is deliberately narrow: RIFF little-endian containers holding
PCM16 or IEEE float32 samples, which covers every corpus this engine
ingests. Anything else raises :class:`~sqe.errors.UnsupportedEncodingError`
rather than guessing.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, TruncationError, UnsupportedEncodingError

_PCM16_SCALE = 1.0 / 32768.0


@dataclass(frozen=True)
class AudioClip:
    """A mono clip: float32 samples in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a nonempty 1-D array")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain NaN or Inf")
        if float(np.max(np.abs(s))) > 1.0:
            raise ValueError("samples exceed [-1, 1]")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


def _parse_chunks(data: bytes):
    """Yield (chunk_id, payload) pairs from a RIFF/WAVE byte string."""
    if len(data) < 12:
        raise TruncationError("file shorter than a RIFF header")
    if data[0:4] != b"RIFF":
        raise FormatError("not a RIFF container (bad magic)")
    if data[8:12] != b"WAVE":
        raise FormatError("RIFF form type is not WAVE")
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise TruncationError(
                f"chunk {cid!r} declares {size} bytes but only {len(body)} present"
            )
        yield cid, body
        pos += 8 + size + (size & 1)  # chunks are word-aligned


def decode_wav(data: bytes) -> AudioClip:
    """Decode a WAV byte string to a mono AudioClip.

    PCM16 samples are scaled by 1/32768; float32 samples are clamped to
    [-1, 1]. Multichannel audio is averaged down to mono.

    Raises:
        FormatError: malformed container or missing chunks.
        UnsupportedEncodingError: codec other than PCM16 / IEEE float32.
        TruncationError: declared sizes exceed the actual payload.
    """
    fmt = None
    payload = None
    for cid, body in _parse_chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise TruncationError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data" and payload is None:
            payload = body
    if fmt is None:
        raise FormatError("missing fmt chunk")
    if payload is None:
        raise FormatError("missing data chunk")

    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels < 1:
        raise FormatError("fmt chunk declares zero channels")
    if sample_rate <= 0:
        raise FormatError("fmt chunk declares a non-positive sample rate")

    if audio_format == 1 and bits == 16:
        width = 2
        raw = np.frombuffer(payload[: len(payload) - len(payload) % width], dtype="<i2")
        samples = raw.astype(np.float32) * _PCM16_SCALE
    elif audio_format == 3 and bits == 32:
        width = 4
        raw = np.frombuffer(payload[: len(payload) - len(payload) % width], dtype="<f4")
        if not np.all(np.isfinite(raw)):
            raise FormatError("float32 payload contains NaN or Inf")
        samples = np.clip(raw, -1.0, 1.0).astype(np.float32)
    else:
        raise UnsupportedEncodingError(
            f"unsupported WAV encoding: format={audio_format}, bits={bits} "
            "(only PCM16 and IEEE float32 are handled)"
        )

    if samples.size == 0:
        raise TruncationError("data chunk holds no complete samples")
    if samples.size % channels != 0:
        samples = samples[: samples.size - samples.size % channels]
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1).astype(np.float32)
    return AudioClip(samples=samples, sample_rate=int(sample_rate))


def encode_wav(clip: AudioClip, sample_format: str = "pcm16") -> bytes:
    """Serialize a clip as a mono WAV byte string.

    Args:
        clip: audio to encode.
        sample_format: "pcm16" (values quantized by round(x * 32768)) or
            "float32" (bit-exact roundtrip through decode_wav).
    """
    if sample_format == "pcm16":
        audio_format, bits = 1, 16
        q = np.round(clip.samples.astype(np.float64) * 32768.0)
        payload = np.clip(q, -32768, 32767).astype("<i2").tobytes()
    elif sample_format == "float32":
        audio_format, bits = 3, 32
        payload = clip.samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown sample_format {sample_format!r}")

    block_align = bits // 8
    byte_rate = clip.sample_rate * block_align
    fmt_chunk = struct.pack(
        "<HHIIHH", audio_format, 1, clip.sample_rate, byte_rate, block_align, bits
    )
    body = b"WAVE"
    body += b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def load_wav(path) -> AudioClip:
    """Read and decode a WAV file."""
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def save_wav(path, clip: AudioClip, sample_format: str = "pcm16") -> None:
    """Encode and write a WAV file."""
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip, sample_format=sample_format))


def _kaiser_windowed_sinc(offsets: np.ndarray, cutoff: float, half_width: float) -> np.ndarray:
    """Lowpass interpolation taps at fractional sample offsets.

    offsets are in input-sample units; cutoff is in cycles per input sample.
    The sinc is shaped by a Kaiser window (beta 8.6) spanning +-half_width.
    """
    beta = 8.6
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * offsets)
    u = offsets / half_width
    w = np.where(np.abs(u) <= 1.0, np.i0(beta * np.sqrt(np.maximum(0.0, 1.0 - u * u))), 0.0)
    return h * (w / np.i0(beta))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Resample to target_rate with a windowed-sinc polyphase filter.

    The kernel spans 64 input samples (Kaiser window, beta 8.6), widened by
    the decimation factor when downsampling so the anti-aliasing cutoff at
    0.945 of the narrower Nyquist keeps its transition band. Each polyphase
    leg is normalized to unit DC gain, so constant signals pass unchanged.
    Output length is round(len(clip) * target_rate / clip.sample_rate).
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip

    x = clip.samples.astype(np.float64)
    g = math.gcd(clip.sample_rate, target_rate)
    up = target_rate // g
    down = clip.sample_rate // g
    n_out = int(round(len(x) * target_rate / clip.sample_rate))
    if n_out < 1:
        raise ValueError("clip too short to resample to the requested rate")

    stretch = max(1.0, down / up)  # widen support when decimating
    half = int(math.ceil(32.0 * stretch))
    cutoff = 0.945 * 0.5 * min(1.0, up / down)
    taps_len = 2 * half + 1
    rel = np.arange(-half, half + 1, dtype=np.float64)

    # One filter per polyphase leg p, interpolating at fractional offset p/up.
    bank = np.empty((up, taps_len))
    for p in range(up):
        taps = _kaiser_windowed_sinc(rel - p / up, cutoff, half)
        bank[p] = taps / taps.sum()

    xpad = np.concatenate([np.zeros(half), x, np.zeros(half + down + 2)])
    windows = np.lib.stride_tricks.sliding_window_view(xpad, taps_len)
    y = np.empty(n_out)

    # Output n sits at input time n*down/up = base + p/up with p = (n*down) % up,
    # so each leg serves the arithmetic progression of outputs sharing p.
    for first_n in range(min(up, n_out)):
        p = (first_n * down) % up
        n_idx = np.arange(first_n, n_out, up)
        starts = (n_idx * down - p) // up
        taps = bank[p]
        for lo in range(0, len(starts), 4096):  # bound transient memory
            sel = starts[lo : lo + 4096]
            y[n_idx[lo : lo + 4096]] = windows[sel] @ taps

    return AudioClip(
        samples=np.clip(y, -1.0, 1.0).astype(np.float32), sample_rate=int(target_rate)
    )


def synthesize_profiling_clip(rng_seed: int, duration_s: float, sample_rate: int) -> AudioClip:
    """Deterministic white-noise clip for latency/memory benchmarking.

    Samples are uniform in [-0.9, 0.9]. duration_s must lie in [5.5, 6.5],
    the range benchmark clips are drawn from.
    """
    if not 5.5 <= duration_s <= 6.5:
        raise ValueError(f"duration_s must be in [5.5, 6.5], got {duration_s}")
    if sample_rate <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(rng_seed)
    samples = rng.uniform(-0.9, 0.9, size=n).astype(np.float32)
    return AudioClip(samples=samples, sample_rate=int(sample_rate))
