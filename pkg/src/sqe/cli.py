"""Command-line interface.

Five subcommands mirror the pipeline stages: ``features`` (WAV -> SQE1
embedding files), ``train``, ``predict``, ``eval``, and ``profile``.

Option precedence is defaults < config file < flags. The config file is
flat ``key = value`` text with ``#`` comments; keys use the flag names with
underscores, and keys a given subcommand does not know are ignored so one
file can drive the whole pipeline.

stdout carries machine-readable CSV only; human-oriented tables and
warnings go to stderr. Exit codes: 0 success, 1 user/data error, 2
internal error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import metrics as metrics_mod
from . import profiler as profiler_mod
from .audio import load_wav, resample
from .errors import SqeError
from .features import (
    MelConfig,
    log_mel_spectrogram,
    normalize_embedding_sequence,
    pool_mean_max,
    read_embedding_file,
    write_embedding_file,
)
from .manifest import load_manifest
from .models import ModelConfig, init_model, predict
from .tasks import TASKS, TaskLabels
from .training import LabeledExample, TrainConfig, evaluate, save_history_csv, train


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_tasks(text: str) -> tuple:
    tasks = tuple(t.strip().upper() for t in text.split(",") if t.strip())
    for t in tasks:
        if t not in TASKS:
            raise argparse.ArgumentTypeError(f"unknown task {t!r} (choose from {TASKS})")
    return tasks


def _parse_weights(text: str) -> dict:
    weights = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise argparse.ArgumentTypeError(f"task weight {part!r} is not TASK=VALUE")
        task, value = part.split("=", 1)
        weights[task.strip().upper()] = float(value)
    return weights


# option tables: (name, type, default, help)
_MEL_OPTS = [
    ("sample_rate", int, 16000, "operating sample rate; WAV input is resampled to this"),
    ("window_ms", float, 25.0, "analysis window length"),
    ("hop_ms", float, 10.0, "hop between frames"),
    ("fft_size", int, 512, "FFT length"),
    ("n_mels", int, 64, "mel bands"),
    ("fmin", float, 60.0, "lowest filterbank frequency, Hz"),
    ("fmax", float, 7800.0, "highest filterbank frequency, Hz"),
    ("log_floor", float, 1e-10, "additive floor inside the log"),
]

_MODEL_OPTS = [
    ("variant", str, "framewise_transformer",
     "architecture: framewise_transformer, framewise_bilstm, or utterance_mlp"),
    ("input_dim", int, None, "framewise feature dimension; derived from the data if omitted"),
    ("tasks", _parse_tasks, ("MOS",), "comma-separated prediction tasks, e.g. MOS,SNR,T60"),
    ("hidden_dim", int, 64, "transformer width"),
    ("n_transformer_layers", int, 2, "encoder blocks"),
    ("ff_dim", int, 64, "feed-forward width"),
    ("n_bilstm_layers", int, 2, "stacked BiLSTM layers"),
    ("bilstm_units_per_dir", int, 32, "LSTM units per direction"),
    ("positional_encoding", _parse_bool, True, "add sinusoidal positions (transformer)"),
    ("dropout", float, 0.1, "training-time dropout probability"),
]

_TRAIN_OPTS = [
    ("lr", float, 1e-3, "Adam learning rate"),
    ("beta1", float, 0.9, "Adam beta1"),
    ("beta2", float, 0.999, "Adam beta2"),
    ("eps", float, 1e-8, "Adam epsilon"),
    ("batch_size", int, 32, "examples per update"),
    ("max_epochs", int, 100, "epoch budget"),
    ("patience", int, 10, "epochs without validation improvement before stopping"),
    ("seed", int, 0, "seed for init, shuffling, and dropout"),
    ("task_weights", _parse_weights, None, "loss weights, e.g. MOS=1,SNR=0.5 (default 1.0 each)"),
    ("normalize_embeddings", _parse_bool, False,
     "standardize each utterance's embedding dimensions before the model"),
]

_PROFILE_OPTS = [
    ("runs", int, 30, "timed inference runs"),
    ("warmup", int, 5, "discarded warmup runs"),
    ("scope", str, "downstream_only",
     "downstream_only or features_plus_downstream"),
    ("feature_source", str, "auto", "melspec, external, or auto"),
    ("frame_step_ms", float, 160.0, "frame step of synthetic external embeddings"),
    ("seed", int, 0, "seed for clips and model init"),
]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for internal faults here
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_opts(parser: argparse.ArgumentParser, opts) -> None:
    for name, typ, default, help_text in opts:
        parser.add_argument(
            "--" + name.replace("_", "-"),
            dest=name,
            type=typ,
            default=None,
            help=f"{help_text} (default: {default})",
        )


def _load_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            values[key.strip().lower().replace("-", "_")] = value.strip()
    return values


def _resolve(args, opts) -> dict:
    """Apply defaults < config file < flags for one option table."""
    file_values = _load_config_file(args.config) if args.config else {}
    resolved = {}
    for name, typ, default, _ in opts:
        value = getattr(args, name, None)
        if value is None and name in file_values:
            value = typ(file_values[name])
        if value is None:
            value = default
        resolved[name] = value
    return resolved


def _mel_config(args) -> MelConfig:
    return MelConfig(**_resolve(args, _MEL_OPTS))


def _model_config(args, input_dim: int) -> ModelConfig:
    opts = _resolve(args, _MODEL_OPTS)
    return ModelConfig(
        variant=opts["variant"],
        input_dim=opts["input_dim"] or input_dim,
        tasks=opts["tasks"],
        hidden_dim=opts["hidden_dim"],
        n_transformer_layers=opts["n_transformer_layers"],
        ff_dim=opts["ff_dim"],
        n_bilstm_layers=opts["n_bilstm_layers"],
        bilstm_units_per_dir=opts["bilstm_units_per_dir"],
        positional_encoding=opts["positional_encoding"],
        dropout_p=opts["dropout"],
    )


def _input_rows(input_path: Path) -> list:
    """Interpret the input as a manifest (.csv) or a single media file."""
    if input_path.suffix.lower() == ".csv":
        rows = load_manifest(input_path)
        base = input_path.parent
        return [
            (str(_resolve_path(base, r.source_path)), r.labels) for r in rows
        ]
    return [(str(input_path), TaskLabels())]


def _resolve_path(base: Path, p: str) -> Path:
    candidate = Path(p)
    return candidate if candidate.is_absolute() else base / candidate


def _load_features(path: str, mel_cfg: MelConfig, normalize: bool, variant: str):
    if path.lower().endswith(".wav"):
        clip = resample(load_wav(path), mel_cfg.sample_rate)
        seq = log_mel_spectrogram(clip, mel_cfg)
    else:
        seq = read_embedding_file(path)
    if normalize:
        seq = normalize_embedding_sequence(seq)
    return pool_mean_max(seq) if variant == "utterance_mlp" else seq


def _load_examples(manifest_path: Path, mel_cfg, normalize, variant) -> list:
    rows = load_manifest(manifest_path)
    base = manifest_path.parent
    examples = []
    for row in rows:
        path = str(_resolve_path(base, row.source_path))
        features = _load_features(path, mel_cfg, normalize, variant)
        examples.append(LabeledExample(features=features, labels=row.labels, name=path))
    return examples


def _check_dims(examples, expected: int) -> None:
    for ex in examples:
        dim = ex.features.dim
        if dim != expected:
            raise ValueError(
                f"row {ex.name}: feature dimension {dim} does not match expected {expected}"
            )


def cmd_features(args) -> int:
    mel_cfg = _mel_config(args)
    rows = _input_rows(Path(args.input))
    if not rows:
        print("error: no rows in manifest", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    used_names: set = set()
    written = 0
    failures = 0
    print("input,output")
    for index, (path, _labels) in enumerate(rows):
        try:
            clip = resample(load_wav(path), mel_cfg.sample_rate)
            seq = log_mel_spectrogram(clip, mel_cfg)
            stem = Path(path).stem or f"row{index}"
            if stem in used_names:
                stem = f"{stem}-{index}"
            used_names.add(stem)
            target = out_dir / f"{stem}.sqe1"
            write_embedding_file(seq, target)
            print(f"{path},{target}")
            written += 1
        except (SqeError, OSError, ValueError) as exc:
            failures += 1
            print(f"warning: {path}: {exc}", file=sys.stderr)
    if written == 0:
        print("error: every row failed", file=sys.stderr)
        return 1
    if failures:
        print(f"warning: {failures} of {len(rows)} rows failed", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    mel_cfg = _mel_config(args)
    train_opts = _resolve(args, _TRAIN_OPTS)
    model_opts = _resolve(args, _MODEL_OPTS)
    normalize = train_opts["normalize_embeddings"]
    variant = model_opts["variant"]

    train_rows = _load_examples(Path(args.train), mel_cfg, normalize, variant)
    val_rows = _load_examples(Path(args.val), mel_cfg, normalize, variant)
    if not train_rows:
        raise ValueError("empty train set")
    input_dim = model_opts["input_dim"] or train_rows[0].features.dim
    _check_dims(train_rows + val_rows, input_dim)

    config = _model_config(args, input_dim)
    model = init_model(config, train_opts["seed"])
    model.normalize_embeddings = normalize
    cfg = TrainConfig(
        lr=train_opts["lr"],
        beta1=train_opts["beta1"],
        beta2=train_opts["beta2"],
        eps=train_opts["eps"],
        batch_size=train_opts["batch_size"],
        max_epochs=train_opts["max_epochs"],
        patience=train_opts["patience"],
        seed=train_opts["seed"],
        task_weights=train_opts["task_weights"],
    )
    model, history = train(model, train_rows, val_rows, cfg)
    ckpt.save_checkpoint(model, args.out)
    if args.history:
        save_history_csv(history, args.history)
    print(f"training finished: {len(history)} epochs, checkpoint at {args.out}",
          file=sys.stderr)
    print(repr(history[-1].best_so_far))
    return 0


def cmd_predict(args) -> int:
    model = ckpt.load_checkpoint(args.checkpoint)
    mel_cfg = _mel_config(args)
    rows = _input_rows(Path(args.input))
    if not rows:
        print("error: no rows in manifest", file=sys.stderr)
        return 1
    print("path,task,prediction")
    for path, _labels in rows:
        features = _load_features(
            path, mel_cfg, model.normalize_embeddings, model.config.variant
        )
        ps = predict(model, features)
        for task in model.config.tasks:
            print(f"{path},{task},{ps[task]!r}")
    return 0


def cmd_eval(args) -> int:
    model = ckpt.load_checkpoint(args.checkpoint)
    mel_cfg = _mel_config(args)
    examples = _load_examples(
        Path(args.manifest), mel_cfg, model.normalize_embeddings, model.config.variant
    )
    if not examples:
        raise ValueError("manifest holds no rows")
    pairs = evaluate(model, examples)
    if all(len(p) < 4 for p in pairs.values()):
        print("error: insufficient pairs (need >= 4 labeled rows for some task)",
              file=sys.stderr)
        return 1
    report = metrics_mod.build_report(pairs)
    sys.stdout.write(metrics_mod.report_to_csv(report))
    sys.stderr.write(metrics_mod.format_table(report))
    return 0


def cmd_profile(args) -> int:
    prof_opts = _resolve(args, _PROFILE_OPTS)
    mel_cfg = _mel_config(args)
    if args.checkpoint:
        model = ckpt.load_checkpoint(args.checkpoint)
        config = model.config
    else:
        model_opts = _resolve(args, _MODEL_OPTS)
        if not model_opts["input_dim"]:
            raise ValueError("profile needs --checkpoint or --input-dim")
        config = _model_config(args, model_opts["input_dim"])
        model = None
    report = profiler_mod.profile(
        config,
        model=model,
        seed=prof_opts["seed"],
        runs=prof_opts["runs"],
        warmup=prof_opts["warmup"],
        scope=prof_opts["scope"],
        feature_source=prof_opts["feature_source"],
        frame_step_ms=prof_opts["frame_step_ms"],
        mel_cfg=mel_cfg,
        sample_rate=mel_cfg.sample_rate,
    )
    sys.stdout.write(profiler_mod.report_to_csv(report))
    sys.stderr.write(profiler_mod.format_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sqe",
        description="Speech-quality engine: feature extraction, training, prediction, "
        "evaluation, profiling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[], help="extract log-mel SQE1 files from WAV input")
    p.add_argument("input", help="a WAV file or a manifest CSV")
    p.add_argument("--out-dir", required=True, help="directory for SQE1 output")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_opts(p, _MEL_OPTS)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model on a labeled manifest")
    p.add_argument("--train", required=True, help="training manifest CSV")
    p.add_argument("--val", required=True, help="validation manifest CSV")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", default=None, help="optional per-epoch history CSV path")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_opts(p, _MODEL_OPTS)
    _add_opts(p, _TRAIN_OPTS)
    _add_opts(p, _MEL_OPTS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict task values for audio or embeddings")
    p.add_argument("input", help="a WAV/SQE1 file or a manifest CSV")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_opts(p, _MEL_OPTS)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a checkpoint against a labeled manifest")
    p.add_argument("manifest", help="labeled manifest CSV")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_opts(p, _MEL_OPTS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="measure parameters, memory, latency, and FLOPs")
    p.add_argument("--checkpoint", default=None, help="profile this checkpoint")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_opts(p, _PROFILE_OPTS)
    _add_opts(p, _MODEL_OPTS)
    _add_opts(p, _MEL_OPTS)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (SqeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 — last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
