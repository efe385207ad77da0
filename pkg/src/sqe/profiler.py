"""Efficiency measurement: parameters, memory, latency, FLOPs.

FLOP convention (documented so the numbers are comparable): one
multiply-accumulate is 2 FLOPs; element-wise adds/multiplies and
transcendentals are 1 FLOP per element; softmax 5 and layer-norm 8 per
element; pure data movement (concat, slice, transpose) is free. The
closed-form counter below mirrors the model forward pass op for op, and the
test suite holds it to *exact integer equality* against an instrumented
forward pass that tallies inside every engine primitive.

Latency follows the benchmarking protocol the models are compared under:
synthetic clips with durations drawn uniformly from [5.5, 6.5] s, 5 warmup
runs discarded, 30 timed runs, single-threaded BLAS.
"""

from __future__ import annotations

import math
import platform
import sys
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .audio import synthesize_profiling_clip
from .autodiff import FlopMeter
from .checkpoint import checkpoint_nbytes
from .errors import CostModelError
from .features import EmbeddingSequence, MelConfig, log_mel_spectrogram, pool_mean_max
from .models import DownstreamModel, ModelConfig, forward_graph, init_model

SCOPES = ("downstream_only", "features_plus_downstream")

# Closed-form cost per layer kind. `rows` is the leading (frame/batch)
# dimension of the op's input.
COST_MODEL = {
    "linear": lambda rows, d_in, d_out: rows * (2 * d_in * d_out + d_out),
    "layer_norm": lambda rows, dim: 8 * rows * dim,
    "relu": lambda count: count,
    "elementwise": lambda count: count,  # residual adds, PE add, scalar scales
    "softmax": lambda count: 5 * count,
    "attention_scores": lambda frames, dim: 2 * frames * frames * dim,
    "attention_scale": lambda frames: frames * frames,
    "attention_context": lambda frames, dim: 2 * frames * frames * dim,
    "lstm_timestep_direction": lambda d_in, units: 4 * (2 * (d_in + units) * units + units)
    + 9 * units,
    "attention_pool": lambda frames, dim: 4 * frames * dim + 6 * frames,
    "mean_max_pool": lambda frames, dim: 2 * frames * dim,
}


def _cost(kind: str, *args) -> int:
    formula = COST_MODEL.get(kind)
    if formula is None:
        raise CostModelError(f"no FLOP formula for layer kind {kind!r}")
    return int(formula(*args))


def count_params(model: DownstreamModel) -> int:
    return sum(t.values.size for t in model.parameters.values())


def count_flops(config: ModelConfig, n_frames: int) -> int:
    """Closed-form FLOPs of one downstream inference on n_frames frames.

    Matches the instrumented forward pass exactly. For utterance_mlp the
    result is frame-count independent (its input is the pooled vector;
    pooling itself is feature-side work, counted only in the
    features_plus_downstream scope).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    c = config
    t = n_frames
    if c.variant == "framewise_transformer":
        h, f = c.hidden_dim, c.ff_dim
        total = _cost("linear", t, c.input_dim, h)
        if c.positional_encoding:
            total += _cost("elementwise", t * h)
        for _ in range(c.n_transformer_layers):
            total += _cost("layer_norm", t, h)
            total += 3 * _cost("linear", t, h, h)  # q, k, v
            total += _cost("attention_scores", t, h)
            total += _cost("attention_scale", t)  # 1/sqrt(d) on the score matrix
            total += _cost("softmax", t * t)
            total += _cost("attention_context", t, h)
            total += _cost("linear", t, h, h)  # attention output projection
            total += _cost("elementwise", t * h)  # residual
            total += _cost("layer_norm", t, h)
            total += _cost("linear", t, h, f)
            total += _cost("relu", t * f)
            total += _cost("linear", t, f, h)
            total += _cost("elementwise", t * h)  # residual
        total += _cost("attention_pool", t, h)
        total += len(c.tasks) * _cost("linear", 1, h, 1)
        return total
    if c.variant == "framewise_bilstm":
        u = c.bilstm_units_per_dir
        total = 0
        for i in range(c.n_bilstm_layers):
            d_in = c.input_dim if i == 0 else 2 * u
            total += 2 * t * _cost("lstm_timestep_direction", d_in, u)
        total += _cost("attention_pool", t, 2 * u)
        total += len(c.tasks) * _cost("linear", 1, 2 * u, 1)
        return total
    if c.variant == "utterance_mlp":
        d = c.input_dim
        total = _cost("linear", 1, 2 * d, d) + _cost("relu", d)
        total += _cost("linear", 1, d, d) + _cost("relu", d)
        total += len(c.tasks) * _cost("linear", 1, d, 1)
        return total
    raise CostModelError(f"no FLOP model for variant {c.variant!r}")


def count_mel_flops(cfg: MelConfig, n_samples: int) -> int:
    """Analytic log-mel front-end cost for an n_samples clip.

    Per frame: windowing (win), real FFT at 2.5*N*log2(N), power spectrum
    (3 per bin), filterbank matmul (2 per weight), floor-add + log (2 per
    mel bin). The FFT term is the usual real-transform estimate, not an
    instrumented count.
    """
    win, hop = cfg.window_samples, cfg.hop_samples
    if n_samples < win:
        raise ValueError("clip shorter than one analysis window")
    frames = 1 + (n_samples - win) // hop
    bins = cfg.fft_size // 2 + 1
    per_frame = (
        win
        + int(2.5 * cfg.fft_size * math.log2(cfg.fft_size))
        + 3 * bins
        + 2 * bins * cfg.n_mels
        + 2 * cfg.n_mels
    )
    return frames * per_frame


def instrumented_forward_flops(model: DownstreamModel, features) -> int:
    """Run one inference with the engine's FLOP meter on; return the tally."""
    with FlopMeter() as meter:
        forward_graph(model, features)
    return meter.total


@dataclass(frozen=True)
class LatencyResult:
    stats: dict
    runs_ms: tuple
    clip_durations_s: tuple
    warnings: tuple


@dataclass(frozen=True)
class EfficiencyReport:
    param_count: int
    model_memory_bytes: int
    peak_runtime_bytes: int | None
    latency_ms: dict
    latency_runs_ms: tuple
    clip_durations_s: tuple
    flops_per_inference: int
    flops_frames: int
    flops_scope: str
    environment: str
    warnings: tuple


def _clip_durations(seed: int, count: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(5.5, 6.5, size=count)


def _clip_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def _external_sequence(seed, index, duration_s, config, frame_step_ms) -> EmbeddingSequence:
    frames = max(1, int(duration_s * 1000.0 // frame_step_ms))
    rng = np.random.default_rng([seed, 2, index])
    data = rng.standard_normal((frames, config.input_dim)).astype(np.float32)
    return EmbeddingSequence(data=data, frame_step_ms=frame_step_ms, source_tag="other")


def _resolve_source(config, feature_source, mel_cfg) -> str:
    if feature_source == "auto":
        return "melspec" if config.input_dim == mel_cfg.n_mels else "external"
    if feature_source not in ("melspec", "external"):
        raise ValueError(f"feature_source must be melspec/external/auto, got {feature_source!r}")
    return feature_source


def _check_scope(scope: str, source: str) -> None:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if scope == "features_plus_downstream" and source != "melspec":
        raise ValueError(
            "features_plus_downstream can only time the log-mel front-end; external "
            "embedding extraction happens outside this artifact"
        )


def measure_latency(
    model: DownstreamModel,
    feature_source: str = "auto",
    n_runs: int = 30,
    warmup: int = 5,
    *,
    scope: str = "downstream_only",
    seed: int = 0,
    frame_step_ms: float = 160.0,
    mel_cfg: MelConfig = MelConfig(),
    sample_rate: int = 16000,
) -> LatencyResult:
    """Wall-clock inference latency over seeded synthetic clips.

    Every run gets its own clip (duration uniform in [5.5, 6.5] s). The
    first `warmup` runs are discarded. BLAS is pinned to one thread for the
    whole measurement so results are comparable across machines.
    """
    if n_runs < 1 or warmup < 0:
        raise ValueError("need n_runs >= 1 and warmup >= 0")
    source = _resolve_source(model.config, feature_source, mel_cfg)
    _check_scope(scope, source)

    total = n_runs + warmup
    durations = _clip_durations(seed, total)
    clips = [
        synthesize_profiling_clip(_clip_seed(seed, i), float(durations[i]), sample_rate)
        for i in range(total)
    ]

    needs_mlp_pool = model.config.variant == "utterance_mlp"
    prepared = []
    if scope == "downstream_only":
        for i, clip in enumerate(clips):
            if source == "melspec":
                seq = log_mel_spectrogram(clip, mel_cfg)
            else:
                seq = _external_sequence(seed, i, float(durations[i]), model.config,
                                         frame_step_ms)
            prepared.append(pool_mean_max(seq) if needs_mlp_pool else seq)

    times_ms = []
    with threadpool_limits(limits=1):
        for i in range(total):
            start = time.perf_counter_ns()
            if scope == "downstream_only":
                forward_graph(model, prepared[i])
            else:
                seq = log_mel_spectrogram(clips[i], mel_cfg)
                forward_graph(model, pool_mean_max(seq) if needs_mlp_pool else seq)
            elapsed = time.perf_counter_ns() - start
            times_ms.append(elapsed / 1e6)

    runs = times_ms[warmup:]
    stats = {
        "median": float(np.median(runs)),
        "mean": float(np.mean(runs)),
        "p95": float(np.percentile(runs, 95)),
        "min": float(np.min(runs)),
        "max": float(np.max(runs)),
    }
    warnings = []
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    if resolution_ms > 0.01 * stats["median"]:
        warnings.append(
            f"timer resolution {resolution_ms:.6f} ms exceeds 1% of the median latency"
        )
    if stats["median"] > 0 and (stats["p95"] - stats["min"]) / stats["median"] >= 1.0:
        warnings.append("latency spread (p95 - min) exceeds the median; machine may be busy")
    return LatencyResult(
        stats=stats,
        runs_ms=tuple(runs),
        clip_durations_s=tuple(float(d) for d in durations[warmup:]),
        warnings=tuple(warnings),
    )


def measure_memory(
    model: DownstreamModel,
    *,
    scope: str = "downstream_only",
    feature_source: str = "auto",
    frame_step_ms: float = 160.0,
    mel_cfg: MelConfig = MelConfig(),
    sample_rate: int = 16000,
    seed: int = 0,
) -> tuple:
    """(model_memory_bytes, peak_runtime_bytes) for one 6 s inference.

    The model term is the exact serialized checkpoint size (float32 weights
    plus container overhead). The peak term adds the Python-allocator
    high-water mark traced during the inference, so it is weights +
    transient buffers.
    """
    source = _resolve_source(model.config, feature_source, mel_cfg)
    _check_scope(scope, source)
    model_bytes = checkpoint_nbytes(model)

    clip = synthesize_profiling_clip(_clip_seed(seed, 0), 6.0, sample_rate)
    needs_mlp_pool = model.config.variant == "utterance_mlp"
    features = None
    if scope == "downstream_only":
        if source == "melspec":
            seq = log_mel_spectrogram(clip, mel_cfg)
        else:
            seq = _external_sequence(seed, 0, 6.0, model.config, frame_step_ms)
        features = pool_mean_max(seq) if needs_mlp_pool else seq

    tracemalloc.start()
    try:
        if scope == "downstream_only":
            forward_graph(model, features)
        else:
            seq = log_mel_spectrogram(clip, mel_cfg)
            forward_graph(model, pool_mean_max(seq) if needs_mlp_pool else seq)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return model_bytes, model_bytes + int(peak)


def _environment_string() -> str:
    cpu = ""
    try:
        with open("/proc/cpuinfo", "r", encoding="utf-8") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    if not cpu:
        cpu = platform.processor() or platform.machine()
    py = ".".join(str(v) for v in sys.version_info[:3])
    return f"cpu={cpu}; python={py}; numpy={np.__version__}; threads=1"


def profile(
    config: ModelConfig,
    *,
    model: DownstreamModel | None = None,
    seed: int = 0,
    runs: int = 30,
    warmup: int = 5,
    scope: str = "downstream_only",
    feature_source: str = "auto",
    frame_step_ms: float = 160.0,
    mel_cfg: MelConfig = MelConfig(),
    sample_rate: int = 16000,
) -> EfficiencyReport:
    """Full efficiency report for one configuration.

    FLOPs are evaluated at a 6.0 s reference clip (the midpoint of the
    benchmark duration range): its frame count under the active feature
    source fixes `flops_frames`.
    """
    if model is None:
        model = init_model(config, seed)
    source = _resolve_source(config, feature_source, mel_cfg)
    _check_scope(scope, source)

    ref_samples = int(round(6.0 * sample_rate))
    if source == "melspec":
        if config.input_dim != mel_cfg.n_mels:
            raise ValueError(
                f"melspec source yields {mel_cfg.n_mels}-dim frames but the model "
                f"expects {config.input_dim}"
            )
        ref_frames = 1 + (ref_samples - mel_cfg.window_samples) // mel_cfg.hop_samples
    else:
        ref_frames = int(6000.0 // frame_step_ms)

    flops = count_flops(config, ref_frames)
    if scope == "features_plus_downstream":
        flops += count_mel_flops(mel_cfg, ref_samples)
        if config.variant == "utterance_mlp":
            flops += _cost("mean_max_pool", ref_frames, config.input_dim)

    latency = measure_latency(
        model,
        feature_source=source,
        n_runs=runs,
        warmup=warmup,
        scope=scope,
        seed=seed,
        frame_step_ms=frame_step_ms,
        mel_cfg=mel_cfg,
        sample_rate=sample_rate,
    )
    model_bytes, peak_bytes = measure_memory(
        model,
        scope=scope,
        feature_source=source,
        frame_step_ms=frame_step_ms,
        mel_cfg=mel_cfg,
        sample_rate=sample_rate,
        seed=seed,
    )
    return EfficiencyReport(
        param_count=count_params(model),
        model_memory_bytes=model_bytes,
        peak_runtime_bytes=peak_bytes,
        latency_ms=latency.stats,
        latency_runs_ms=latency.runs_ms,
        clip_durations_s=latency.clip_durations_s,
        flops_per_inference=flops,
        flops_frames=ref_frames,
        flops_scope=scope,
        environment=_environment_string(),
        warnings=latency.warnings,
    )


def report_to_csv(report: EfficiencyReport) -> str:
    scope = report.flops_scope
    rows = [
        ("param_count", report.param_count, "count"),
        ("model_memory_bytes", report.model_memory_bytes, "bytes"),
        ("peak_runtime_bytes", report.peak_runtime_bytes, "bytes"),
        ("latency_median_ms", report.latency_ms["median"], "ms"),
        ("latency_mean_ms", report.latency_ms["mean"], "ms"),
        ("latency_p95_ms", report.latency_ms["p95"], "ms"),
        ("latency_min_ms", report.latency_ms["min"], "ms"),
        ("latency_max_ms", report.latency_ms["max"], "ms"),
        ("latency_runs", len(report.latency_runs_ms), "count"),
        ("flops_per_inference", report.flops_per_inference, "flops"),
        ("flops_frames", report.flops_frames, "frames"),
    ]
    lines = ["metric,value,unit,scope"]
    for name, value, unit in rows:
        rendered = "" if value is None else (repr(value) if isinstance(value, float) else value)
        lines.append(f"{name},{rendered},{unit},{scope}")
    lines.append(f"# environment: {report.environment}")
    for w in report.warnings:
        lines.append(f"# warning: {w}")
    return "\n".join(lines) + "\n"


def format_table(report: EfficiencyReport) -> str:
    mb = report.model_memory_bytes / 1e6
    peak = "-" if report.peak_runtime_bytes is None else f"{report.peak_runtime_bytes / 1e6:.2f}"
    lines = [
        f"parameters        {report.param_count:,}",
        f"model memory      {mb:.2f} MB",
        f"peak runtime      {peak} MB",
        f"latency (median)  {report.latency_ms['median']:.2f} ms over "
        f"{len(report.latency_runs_ms)} runs",
        f"latency (p95)     {report.latency_ms['p95']:.2f} ms",
        f"flops/inference   {report.flops_per_inference:,} ({report.flops_scope}, "
        f"{report.flops_frames} frames)",
        f"environment       {report.environment}",
    ]
    for w in report.warnings:
        lines.append(f"warning           {w}")
    return "\n".join(lines) + "\n"
