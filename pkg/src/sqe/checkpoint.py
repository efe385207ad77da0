"""Model checkpoints: the SQM1 binary container.

Layout (little-endian):

    magic "SQM1" | version u32 | json_len u32 | JSON block (UTF-8)
    | tensor_count u32
    | per tensor: name_len u32, name UTF-8, rank u32, dims u32...,
      float32 payload (row-major)

The JSON block stores the model config plus the training-side metadata that
must travel with the weights (target scaling, embedding normalization).
Roundtrips are bit-exact: parameters are kept float32-representable at all
times, so the float32 payload loses nothing.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, IntegrityError, TaskSetMismatchError, VersionError
from .models import DownstreamModel, ModelConfig, describe_parameters
from .tasks import DEFAULT_TARGET_SCALING

_MAGIC = b"SQM1"
_VERSION = 1


def _config_json(model: DownstreamModel) -> bytes:
    blob = {
        "config": model.config.to_dict(),
        "target_scaling": {t: list(sc) for t, sc in model.target_scaling.items()},
        "normalize_embeddings": model.normalize_embeddings,
    }
    return json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_nbytes(model: DownstreamModel) -> int:
    """Exact serialized size in bytes, computed without writing anything."""
    total = 4 + 4 + 4 + len(_config_json(model)) + 4
    for name, tensor in model.parameters.items():
        total += 4 + len(name.encode("utf-8")) + 4 + 4 * tensor.values.ndim
        total += 4 * tensor.values.size
    return total


def save_checkpoint(model: DownstreamModel, path) -> None:
    """Write the model; load_checkpoint reproduces it bit-exactly."""
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    cfg = _config_json(model)
    out += struct.pack("<I", len(cfg))
    out += cfg
    out += struct.pack("<I", len(model.parameters))
    for name, tensor in model.parameters.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        dims = tensor.values.shape
        out += struct.pack("<I", len(dims))
        out += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
        out += np.ascontiguousarray(tensor.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise IntegrityError(
                f"{self.path}: checkpoint ends early "
                f"(needed {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos})"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_tasks=None) -> DownstreamModel:
    """Read an SQM1 checkpoint.

    Args:
        path: checkpoint file.
        expected_tasks: optional task tuple; a checkpoint trained on a
            different task set raises TaskSetMismatchError instead of being
            silently accepted.

    Raises:
        FormatError / VersionError: wrong container or version.
        IntegrityError: truncation, trailing bytes, or tensors that do not
            match what the embedded config dictates.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != _MAGIC:
        raise FormatError(f"{path}: not an SQM1 checkpoint (bad magic)")
    version = r.u32()
    if version != _VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad config block: {exc}") from exc

    if expected_tasks is not None and tuple(expected_tasks) != config.tasks:
        raise TaskSetMismatchError(
            f"{path}: checkpoint tasks {config.tasks} != expected {tuple(expected_tasks)}"
        )

    n_tensors = r.u32()
    parameters: dict = {}
    for _ in range(n_tensors):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise IntegrityError(f"{path}: tensor {name} declares implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(4 * count)
        values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        if name in parameters:
            raise IntegrityError(f"{path}: duplicate tensor {name}")
        parameters[name] = Tensor(values, requires_grad=True, name=name)
    if r.pos != len(blob):
        raise IntegrityError(f"{path}: {len(blob) - r.pos} trailing bytes after last tensor")

    expected = {name: shape for name, shape, _ in describe_parameters(config)}
    actual = {name: tuple(t.values.shape) for name, t in parameters.items()}
    if expected != actual:
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        bad = sorted(
            n for n in set(expected) & set(actual) if expected[n] != actual[n]
        )
        raise IntegrityError(
            f"{path}: tensors disagree with config "
            f"(missing={missing}, unexpected={extra}, wrong-shape={bad})"
        )

    raw_scaling = meta.get("target_scaling")
    if raw_scaling:
        scaling = {t: tuple(sc) for t, sc in raw_scaling.items()}
    else:
        scaling = dict(DEFAULT_TARGET_SCALING)
    return DownstreamModel(
        config=config,
        parameters=parameters,
        target_scaling=scaling,
        normalize_embeddings=bool(meta.get("normalize_embeddings", False)),
    )
