"""Non-intrusive speech quality and room-acoustics estimation.

The package turns raw audio (or precomputed frame embeddings) into
per-utterance estimates of perceptual and acoustic quantities — mean
opinion score, signal-to-noise ratio, speech transmission index,
reverberation time, direct-to-reverberant ratio, and clarity — using
small downstream regressors trained with a masked multi-task loss.

Everything numerical runs on numpy float64 through a small
reverse-mode autodiff engine that doubles as a FLOP meter, so training
gradients, efficiency numbers, and the closed-form cost model can all
be checked against each other.
"""

from .audio import AudioClip, decode_wav, encode_wav, load_wav, resample, save_wav
from .autodiff import FlopMeter, Tensor, backward, finite_difference_check
from .checkpoint import checkpoint_nbytes, load_checkpoint, save_checkpoint
from .errors import SqeError
from .features import (
    EmbeddingSequence,
    MelConfig,
    UtteranceEmbedding,
    log_mel_spectrogram,
    normalize_embedding_sequence,
    pool_mean_max,
    read_embedding_file,
    write_embedding_file,
)
from .manifest import ManifestRow, load_manifest, save_manifest
from .metrics import build_report, pearson, rmse, third_order_fit
from .models import (
    VARIANTS,
    DownstreamModel,
    ModelConfig,
    PredictionSet,
    attention_pool,
    describe_parameters,
    forward_framewise_bilstm,
    forward_framewise_transformer,
    forward_utterance_mlp,
    init_model,
    parameter_total,
    predict,
)
from .profiler import count_flops, count_mel_flops, count_params, measure_latency, profile
from .tasks import TASKS, TaskLabels
from .training import LabeledExample, TrainConfig, evaluate, multitask_loss, train

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "DownstreamModel",
    "EmbeddingSequence",
    "FlopMeter",
    "LabeledExample",
    "ManifestRow",
    "MelConfig",
    "ModelConfig",
    "PredictionSet",
    "SqeError",
    "TASKS",
    "TaskLabels",
    "Tensor",
    "TrainConfig",
    "UtteranceEmbedding",
    "VARIANTS",
    "attention_pool",
    "backward",
    "build_report",
    "checkpoint_nbytes",
    "count_flops",
    "count_mel_flops",
    "count_params",
    "decode_wav",
    "describe_parameters",
    "encode_wav",
    "evaluate",
    "finite_difference_check",
    "forward_framewise_bilstm",
    "forward_framewise_transformer",
    "forward_utterance_mlp",
    "init_model",
    "parameter_total",
    "load_checkpoint",
    "load_manifest",
    "load_wav",
    "log_mel_spectrogram",
    "measure_latency",
    "multitask_loss",
    "normalize_embedding_sequence",
    "pearson",
    "pool_mean_max",
    "predict",
    "profile",
    "read_embedding_file",
    "resample",
    "rmse",
    "save_checkpoint",
    "save_manifest",
    "save_wav",
    "third_order_fit",
    "train",
    "write_embedding_file",
]
