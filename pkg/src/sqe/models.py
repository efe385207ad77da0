"""Downstream quality-prediction models.

Three architectures cover the two feature granularities:

* ``framewise_transformer`` — input projection to ``hidden_dim``, optional
  sinusoidal positional encoding, two pre-norm encoder blocks (single-head
  self-attention + feed-forward, residuals), attention pooling, linear
  task heads.
* ``framewise_bilstm`` — stacked bidirectional LSTM layers (32 units per
  direction by default, so the framewise output width matches the
  transformer's 64), attention pooling, linear task heads.
* ``utterance_mlp`` — consumes a mean+max pooled utterance vector of
  length 2*D through two ReLU hidden layers of width D, then task heads.

All trunks end in one independent linear head per configured task, emitting
predictions in model space (training-time target scaling applied; use
:func:`predict` for natural units).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .features import EmbeddingSequence, UtteranceEmbedding
from .tasks import DEFAULT_TARGET_SCALING, TASKS

VARIANTS = ("framewise_transformer", "framewise_bilstm", "utterance_mlp")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; parameter shapes follow from these."""

    variant: str
    input_dim: int
    tasks: tuple = ("MOS",)
    hidden_dim: int = 64
    n_transformer_layers: int = 2
    n_heads: int = 1
    ff_dim: int = 64
    n_bilstm_layers: int = 2
    bilstm_units_per_dir: int = 32
    positional_encoding: bool = True
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("tasks must be nonempty")
        for t in tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")
        if len(set(tasks)) != len(tasks):
            raise ValueError("tasks contains duplicates")
        object.__setattr__(self, "tasks", tasks)
        for name in ("input_dim", "hidden_dim", "n_transformer_layers", "ff_dim",
                     "n_bilstm_layers", "bilstm_units_per_dir"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_heads != 1:
            raise ValueError("only single-head attention is implemented (n_heads must be 1)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def trunk_dim(self) -> int:
        """Width of the representation the task heads consume."""
        if self.variant == "framewise_transformer":
            return self.hidden_dim
        if self.variant == "framewise_bilstm":
            return 2 * self.bilstm_units_per_dir
        return self.input_dim  # MLP hidden width = half its 2*D input

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_dim": self.input_dim,
            "tasks": list(self.tasks),
            "hidden_dim": self.hidden_dim,
            "n_transformer_layers": self.n_transformer_layers,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "n_bilstm_layers": self.n_bilstm_layers,
            "bilstm_units_per_dir": self.bilstm_units_per_dir,
            "positional_encoding": self.positional_encoding,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if k == "tasks" else v) for k, v in d.items() if k in known})


@dataclass(frozen=True)
class PredictionSet:
    """One scalar per configured task."""

    by_task: dict

    def __post_init__(self):
        if not self.by_task:
            raise ValueError("PredictionSet must cover at least one task")
        for task, value in self.by_task.items():
            if task not in TASKS:
                raise ValueError(f"unknown task {task!r}")
            if not math.isfinite(value):
                raise ValueError(f"prediction for {task} is not finite: {value!r}")

    def __getitem__(self, task: str) -> float:
        return self.by_task[task]

    @property
    def tasks(self) -> tuple:
        return tuple(self.by_task)

    def as_dict(self) -> dict:
        return dict(self.by_task)


@dataclass
class DownstreamModel:
    """Config plus named parameters (engine tensors, float32-representable).

    target_scaling maps each task to an affine (shift, scale): the model is
    trained on (label - shift)/scale and predictions are mapped back with
    value*scale + shift. Persisted in checkpoints so prediction-side units
    always match what training used.
    """

    config: ModelConfig
    parameters: dict
    target_scaling: dict = field(default_factory=lambda: dict(DEFAULT_TARGET_SCALING))
    normalize_embeddings: bool = False

    def param_list(self) -> list:
        return list(self.parameters.values())

    def __post_init__(self):
        for name, tensor in self.parameters.items():
            if not np.all(np.isfinite(tensor.values)):
                raise ValueError(f"parameter {name} contains NaN or Inf")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    # snap to float32 so parameters stay exactly representable in storage
    return rng.uniform(-a, a, size=shape).astype(np.float32).astype(np.float64)


def _param(store: dict, name: str, values: np.ndarray) -> None:
    store[name] = Tensor(values, requires_grad=True, name=name)


def init_model(config: ModelConfig, seed: int) -> DownstreamModel:
    """Deterministically initialize a model.

    Weights draw from the uniform Glorot range +-sqrt(6/(fan_in+fan_out)) in
    the parameter-table order; biases are zero except LSTM forget gates
    (1.0); layer-norm gains are 1. Identical (config, seed) yields
    bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    p: dict = {}
    c = config
    if c.variant == "framewise_transformer":
        h, f = c.hidden_dim, c.ff_dim
        _param(p, "proj.w", _glorot(rng, c.input_dim, h, (c.input_dim, h)))
        _param(p, "proj.b", np.zeros(h))
        for i in range(c.n_transformer_layers):
            _param(p, f"enc.{i}.ln1.g", np.ones(h))
            _param(p, f"enc.{i}.ln1.b", np.zeros(h))
            for part in ("q", "k", "v", "out"):
                _param(p, f"enc.{i}.attn.{part}.w", _glorot(rng, h, h, (h, h)))
                _param(p, f"enc.{i}.attn.{part}.b", np.zeros(h))
            _param(p, f"enc.{i}.ln2.g", np.ones(h))
            _param(p, f"enc.{i}.ln2.b", np.zeros(h))
            _param(p, f"enc.{i}.ff.1.w", _glorot(rng, h, f, (h, f)))
            _param(p, f"enc.{i}.ff.1.b", np.zeros(f))
            _param(p, f"enc.{i}.ff.2.w", _glorot(rng, f, h, (f, h)))
            _param(p, f"enc.{i}.ff.2.b", np.zeros(h))
    elif c.variant == "framewise_bilstm":
        u = c.bilstm_units_per_dir
        for i in range(c.n_bilstm_layers):
            in_dim = c.input_dim if i == 0 else 2 * u
            for direction in ("fw", "bw"):
                _param(p, f"lstm.{i}.{direction}.w",
                       _glorot(rng, in_dim + u, 4 * u, (in_dim + u, 4 * u)))
                bias = np.zeros(4 * u)
                bias[u : 2 * u] = 1.0  # forget gate open at init
                _param(p, f"lstm.{i}.{direction}.b", bias)
    else:  # utterance_mlp
        d = c.input_dim
        _param(p, "fc1.w", _glorot(rng, 2 * d, d, (2 * d, d)))
        _param(p, "fc1.b", np.zeros(d))
        _param(p, "fc2.w", _glorot(rng, d, d, (d, d)))
        _param(p, "fc2.b", np.zeros(d))

    if c.variant in ("framewise_transformer", "framewise_bilstm"):
        t = c.trunk_dim
        _param(p, "pool.v", _glorot(rng, t, 1, (t, 1)))
        _param(p, "pool.b", np.zeros(1))
    for task in c.tasks:
        _param(p, f"head.{task}.w", _glorot(rng, c.trunk_dim, 1, (c.trunk_dim, 1)))
        _param(p, f"head.{task}.b", np.zeros(1))
    return DownstreamModel(config=config, parameters=p)


def describe_parameters(config: ModelConfig) -> list:
    """Closed-form parameter table: (name, shape, count) per tensor.

    Derived from config arithmetic alone — never from an instantiated
    model — so it can serve as an independent check on init_model.
    """
    rows: list = []

    def row(name, *shape):
        count = 1
        for s in shape:
            count *= s
        rows.append((name, tuple(shape), count))

    c = config
    if c.variant == "framewise_transformer":
        h, f = c.hidden_dim, c.ff_dim
        row("proj.w", c.input_dim, h)
        row("proj.b", h)
        for i in range(c.n_transformer_layers):
            row(f"enc.{i}.ln1.g", h)
            row(f"enc.{i}.ln1.b", h)
            for part in ("q", "k", "v", "out"):
                row(f"enc.{i}.attn.{part}.w", h, h)
                row(f"enc.{i}.attn.{part}.b", h)
            row(f"enc.{i}.ln2.g", h)
            row(f"enc.{i}.ln2.b", h)
            row(f"enc.{i}.ff.1.w", h, f)
            row(f"enc.{i}.ff.1.b", f)
            row(f"enc.{i}.ff.2.w", f, h)
            row(f"enc.{i}.ff.2.b", h)
    elif c.variant == "framewise_bilstm":
        u = c.bilstm_units_per_dir
        for i in range(c.n_bilstm_layers):
            in_dim = c.input_dim if i == 0 else 2 * u
            for direction in ("fw", "bw"):
                row(f"lstm.{i}.{direction}.w", in_dim + u, 4 * u)
                row(f"lstm.{i}.{direction}.b", 4 * u)
    else:
        d = c.input_dim
        row("fc1.w", 2 * d, d)
        row("fc1.b", d)
        row("fc2.w", d, d)
        row("fc2.b", d)

    if c.variant in ("framewise_transformer", "framewise_bilstm"):
        row("pool.v", c.trunk_dim, 1)
        row("pool.b", 1)
    for task in c.tasks:
        row(f"head.{task}.w", c.trunk_dim, 1)
        row(f"head.{task}.b", 1)
    return rows


def parameter_total(config: ModelConfig) -> int:
    return sum(count for _, _, count in describe_parameters(config))


@lru_cache(maxsize=32)
def _positional_table(n_frames: int, dim: int) -> np.ndarray:
    """Sinusoidal position table: sin on even columns, cos on odd ones."""
    pos = np.arange(n_frames, dtype=np.float64)[:, None]
    col = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(col / 2.0) / dim)
    table = np.where(col % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.broadcast_add_bias(ad.matmul(x, w), b)


def _dropout(x: Tensor, p: float, training: bool, rng) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return ad.mul(x, Tensor(mask))


def _attention_pool_graph(hidden: Tensor, v: Tensor, b: Tensor) -> Tensor:
    scores = ad.broadcast_add_bias(ad.matmul(hidden, v), b)  # (T, 1)
    alpha = ad.softmax(scores, axis=0)
    return ad.matmul(ad.transpose(alpha), hidden)  # (1, H)


def attention_pool(hidden: np.ndarray, v: np.ndarray, b) -> np.ndarray:
    """Score frames with v·h_t + b, softmax over time, weighted-sum rows.

    hidden: (T, H) array; v: (H,) or (H, 1); b: scalar or length-1 array.
    Returns the pooled (H,) vector.
    """
    h = Tensor(np.asarray(hidden, dtype=np.float64))
    if h.values.ndim != 2:
        raise ShapeError(f"attention_pool: hidden must be 2-D, got {h.shape}")
    vv = np.asarray(v, dtype=np.float64).reshape(h.shape[1], 1)
    bb = np.asarray(b, dtype=np.float64).reshape(1)
    out = _attention_pool_graph(h, Tensor(vv), Tensor(bb))
    return out.values.reshape(-1)


def _transformer_trunk(model: DownstreamModel, x: Tensor, training: bool, rng) -> Tensor:
    c, p = model.config, model.parameters
    h = _linear(x, p["proj.w"], p["proj.b"])
    if c.positional_encoding:
        h = ad.add(h, Tensor(_positional_table(x.shape[0], c.hidden_dim)))
    scale = 1.0 / math.sqrt(c.hidden_dim)
    for i in range(c.n_transformer_layers):
        a = ad.layer_norm(h, p[f"enc.{i}.ln1.g"], p[f"enc.{i}.ln1.b"])
        q = _linear(a, p[f"enc.{i}.attn.q.w"], p[f"enc.{i}.attn.q.b"])
        k = _linear(a, p[f"enc.{i}.attn.k.w"], p[f"enc.{i}.attn.k.b"])
        v = _linear(a, p[f"enc.{i}.attn.v.w"], p[f"enc.{i}.attn.v.b"])
        att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), scale), axis=1)
        ctx = ad.matmul(att, v)
        out = _linear(ctx, p[f"enc.{i}.attn.out.w"], p[f"enc.{i}.attn.out.b"])
        h = ad.add(h, _dropout(out, c.dropout_p, training, rng))

        f = ad.layer_norm(h, p[f"enc.{i}.ln2.g"], p[f"enc.{i}.ln2.b"])
        f = ad.relu(_linear(f, p[f"enc.{i}.ff.1.w"], p[f"enc.{i}.ff.1.b"]))
        f = _linear(f, p[f"enc.{i}.ff.2.w"], p[f"enc.{i}.ff.2.b"])
        h = ad.add(h, _dropout(f, c.dropout_p, training, rng))
    return h


def _lstm_direction(x: Tensor, w: Tensor, b: Tensor, units: int, reverse: bool) -> list:
    """Run one LSTM direction over (T, in) input; list of (1, units) outputs.

    Gate layout in the fused weight matrix is input | forget | candidate |
    output. Hidden and cell states start at zero.
    """
    n_frames = x.shape[0]
    h = Tensor(np.zeros((1, units)))
    cell = Tensor(np.zeros((1, units)))
    steps = range(n_frames - 1, -1, -1) if reverse else range(n_frames)
    outputs: list = [None] * n_frames
    for t in steps:
        xt = x[t : t + 1, :]
        z = ad.broadcast_add_bias(ad.matmul(ad.concat([xt, h], axis=1), w), b)
        i_gate = ad.sigmoid(z[:, 0:units])
        f_gate = ad.sigmoid(z[:, units : 2 * units])
        g = ad.tanh(z[:, 2 * units : 3 * units])
        o_gate = ad.sigmoid(z[:, 3 * units : 4 * units])
        cell = ad.add(ad.mul(f_gate, cell), ad.mul(i_gate, g))
        h = ad.mul(o_gate, ad.tanh(cell))
        outputs[t] = h
    return outputs


def _bilstm_trunk(model: DownstreamModel, x: Tensor, training: bool, rng) -> Tensor:
    c, p = model.config, model.parameters
    u = c.bilstm_units_per_dir
    h = x
    for i in range(c.n_bilstm_layers):
        fw = _lstm_direction(h, p[f"lstm.{i}.fw.w"], p[f"lstm.{i}.fw.b"], u, reverse=False)
        bw = _lstm_direction(h, p[f"lstm.{i}.bw.w"], p[f"lstm.{i}.bw.b"], u, reverse=True)
        rows = [ad.concat([fw[t], bw[t]], axis=1) for t in range(h.shape[0])]
        h = ad.concat(rows, axis=0)
        h = _dropout(h, c.dropout_p, training, rng)
    return h


def _heads(model: DownstreamModel, trunk_out: Tensor) -> dict:
    p = model.parameters
    return {
        task: _linear(trunk_out, p[f"head.{task}.w"], p[f"head.{task}.b"])
        for task in model.config.tasks
    }


def forward_graph(model: DownstreamModel, features, training: bool = False, rng=None):
    """Engine-level forward pass.

    Returns (hidden, outputs): hidden is the framewise (T, trunk_dim) Tensor
    (None for the MLP variant) and outputs maps each task to its (1, 1)
    model-space prediction Tensor. This is the single forward path shared by
    inference, training, and FLOP instrumentation.
    """
    c = model.config
    if c.variant == "utterance_mlp":
        if not isinstance(features, UtteranceEmbedding):
            raise ShapeError("utterance_mlp consumes an UtteranceEmbedding")
        if features.dim != c.input_dim:
            raise ShapeError(
                f"utterance embedding is 2x{features.dim}, model expects 2x{c.input_dim}"
            )
        p = model.parameters
        x = Tensor(features.vector.reshape(1, -1))
        h = ad.relu(_linear(x, p["fc1.w"], p["fc1.b"]))
        h = _dropout(h, c.dropout_p, training, rng)
        h = ad.relu(_linear(h, p["fc2.w"], p["fc2.b"]))
        h = _dropout(h, c.dropout_p, training, rng)
        return None, _heads(model, h)

    if not isinstance(features, EmbeddingSequence):
        raise ShapeError(f"{c.variant} consumes an EmbeddingSequence")
    if features.dim != c.input_dim:
        raise ShapeError(
            f"feature dimension {features.dim} does not match model input_dim {c.input_dim}"
        )
    x = Tensor(features.data.astype(np.float64))
    if c.variant == "framewise_transformer":
        hidden = _transformer_trunk(model, x, training, rng)
    else:
        hidden = _bilstm_trunk(model, x, training, rng)
    pooled = _attention_pool_graph(hidden, model.parameters["pool.v"], model.parameters["pool.b"])
    return hidden, _heads(model, pooled)


def _to_prediction_set(outputs: dict) -> PredictionSet:
    return PredictionSet(by_task={task: out.item() for task, out in outputs.items()})


def forward_framewise_transformer(model: DownstreamModel, seq: EmbeddingSequence):
    """Inference forward; returns (hidden (T, hidden_dim) array, PredictionSet)."""
    if model.config.variant != "framewise_transformer":
        raise ValueError(f"model variant is {model.config.variant}")
    hidden, outputs = forward_graph(model, seq)
    return hidden.values.copy(), _to_prediction_set(outputs)


def forward_framewise_bilstm(model: DownstreamModel, seq: EmbeddingSequence):
    """Inference forward; returns (hidden (T, 2*units) array, PredictionSet)."""
    if model.config.variant != "framewise_bilstm":
        raise ValueError(f"model variant is {model.config.variant}")
    hidden, outputs = forward_graph(model, seq)
    return hidden.values.copy(), _to_prediction_set(outputs)


def forward_utterance_mlp(model: DownstreamModel, emb: UtteranceEmbedding) -> PredictionSet:
    if model.config.variant != "utterance_mlp":
        raise ValueError(f"model variant is {model.config.variant}")
    _, outputs = forward_graph(model, emb)
    return _to_prediction_set(outputs)


def predict(model: DownstreamModel, features) -> PredictionSet:
    """Inference in natural units: inverse target scaling applied per task."""
    _, outputs = forward_graph(model, features)
    by_task = {}
    for task, out in outputs.items():
        shift, scale = model.target_scaling.get(task, (0.0, 1.0))
        by_task[task] = out.item() * scale + shift
    return PredictionSet(by_task=by_task)
