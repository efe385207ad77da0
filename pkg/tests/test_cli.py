"""CLI behavior: exit codes, stream discipline, config precedence, pipelines."""

import subprocess
import sys

import numpy as np
import pytest

from sqe.audio import AudioClip, save_wav
from sqe.checkpoint import save_checkpoint
from sqe.cli import _MEL_OPTS, _MODEL_OPTS, _PROFILE_OPTS, _TRAIN_OPTS, main
from sqe.features import EmbeddingSequence, read_embedding_file, write_embedding_file
from sqe.models import ModelConfig, init_model

MANIFEST_HEADER = "path,mos,snr,sti,t60,drr,c50"


def _write_wav(path, duration_s=0.2, freq=440.0, rate=16000):
    t = np.arange(int(duration_s * rate)) / rate
    clip = AudioClip(
        samples=(0.5 * np.sin(2 * np.pi * freq * t)).astype(np.float32),
        sample_rate=rate,
    )
    save_wav(path, clip)
    return path


def _write_seq(path, t=5, d=4, seed=0):
    rng = np.random.default_rng(seed)
    seq = EmbeddingSequence(
        data=rng.standard_normal((t, d)).astype(np.float32),
        frame_step_ms=160.0,
        source_tag="other",
    )
    write_embedding_file(seq, path)
    return path


def _write_manifest(path, rows):
    lines = [MANIFEST_HEADER] + rows
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _tiny_checkpoint(tmp_path, input_dim=4, tasks=("MOS",)):
    config = ModelConfig(
        variant="framewise_transformer",
        input_dim=input_dim,
        tasks=tasks,
        hidden_dim=8,
        ff_dim=8,
        dropout_p=0.0,
    )
    model = init_model(config, seed=0)
    path = tmp_path / "model.sqm"
    save_checkpoint(model, path)
    return path


class TestParsing:
    def test_top_level_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for command in ("features", "train", "predict", "eval", "profile"):
            assert command in out

    @pytest.mark.parametrize(
        "command,opts",
        [
            ("features", _MEL_OPTS),
            ("train", _TRAIN_OPTS),
            ("profile", _PROFILE_OPTS),
            ("train", _MODEL_OPTS),
        ],
    )
    def test_help_lists_every_flag_with_default(self, capsys, command, opts):
        assert main([command, "--help"]) == 0
        out = capsys.readouterr().out
        flat = " ".join(out.split())  # undo argparse line wrapping
        for name, _typ, default, _help in opts:
            assert "--" + name.replace("_", "-") in flat
            assert f"(default: {default})" in flat

    def test_unknown_flag_is_a_user_error(self, capsys):
        assert main(["profile", "--frobnicate"]) == 1
        err = capsys.readouterr().err
        assert "error:" in err

    def test_missing_subcommand(self, capsys):
        assert main([]) == 1

    def test_bad_boolean_value(self, capsys):
        assert main(["train", "--train", "x", "--val", "y", "--out", "z",
                     "--positional-encoding", "maybe"]) == 1

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "sqe", "--help"],
            capture_output=True,
            timeout=60,
        )
        assert proc.returncode == 0
        assert b"profile" in proc.stdout


class TestFeaturesCommand:
    def test_single_wav(self, tmp_path, capsys):
        wav = _write_wav(tmp_path / "clip.wav")
        out_dir = tmp_path / "feats"
        assert main(["features", str(wav), "--out-dir", str(out_dir)]) == 0
        out = capsys.readouterr().out
        lines = out.strip().split("\n")
        assert lines[0] == "input,output"
        produced = out_dir / "clip.sqe1"
        assert str(produced) in lines[1]
        seq = read_embedding_file(produced)
        assert seq.dim == 64
        assert seq.source_tag == "melspec"

    def test_manifest_input(self, tmp_path, capsys):
        for name in ("a.wav", "b.wav"):
            _write_wav(tmp_path / name)
        manifest = _write_manifest(
            tmp_path / "m.csv", ["a.wav,3.0,,,,,", "b.wav,4.0,,,,,"]
        )
        out_dir = tmp_path / "feats"
        assert main(["features", str(manifest), "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "a.sqe1").exists()
        assert (out_dir / "b.sqe1").exists()
        assert len(capsys.readouterr().out.strip().split("\n")) == 3

    def test_partial_failure_still_succeeds(self, tmp_path, capsys):
        _write_wav(tmp_path / "good.wav")
        manifest = _write_manifest(
            tmp_path / "m.csv", ["good.wav,,,,,,", "gone.wav,,,,,,"]
        )
        out_dir = tmp_path / "feats"
        assert main(["features", str(manifest), "--out-dir", str(out_dir)]) == 0
        captured = capsys.readouterr()
        assert "warning: " in captured.err
        assert "gone.wav" in captured.err
        assert (out_dir / "good.sqe1").exists()
        assert not (out_dir / "gone.sqe1").exists()

    def test_every_row_failing_is_an_error(self, tmp_path, capsys):
        manifest = _write_manifest(tmp_path / "m.csv", ["nope.wav,,,,,,"])
        assert main(["features", str(manifest), "--out-dir", str(tmp_path / "o")]) == 1
        assert "every row failed" in capsys.readouterr().err

    def test_header_only_manifest(self, tmp_path, capsys):
        manifest = _write_manifest(tmp_path / "m.csv", [])
        assert main(["features", str(manifest), "--out-dir", str(tmp_path / "o")]) == 1
        assert "no rows" in capsys.readouterr().err

    def test_duplicate_stems_get_distinct_outputs(self, tmp_path, capsys):
        (tmp_path / "x").mkdir()
        (tmp_path / "y").mkdir()
        _write_wav(tmp_path / "x" / "same.wav")
        _write_wav(tmp_path / "y" / "same.wav")
        manifest = _write_manifest(
            tmp_path / "m.csv", ["x/same.wav,,,,,,", "y/same.wav,,,,,,"]
        )
        out_dir = tmp_path / "feats"
        assert main(["features", str(manifest), "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "same.sqe1").exists()
        assert (out_dir / "same-1.sqe1").exists()

    def test_invalid_mel_geometry_is_a_user_error(self, tmp_path, capsys):
        wav = _write_wav(tmp_path / "clip.wav")
        rc = main(["features", str(wav), "--out-dir", str(tmp_path / "o"),
                   "--fmax", "9000"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestConfigPrecedence:
    def _runs_row(self, out):
        row = next(l for l in out.split("\n") if l.startswith("latency_runs,"))
        return row.split(",")[1]

    def test_defaults_then_file_then_flags(self, tmp_path, capsys):
        base = ["profile", "--input-dim", "4", "--hidden-dim", "8",
                "--ff-dim", "8", "--feature-source", "external", "--warmup", "0"]

        assert main(base + ["--runs", "4"]) == 0
        assert self._runs_row(capsys.readouterr().out) == "4"

        cfg = tmp_path / "sqe.cfg"
        cfg.write_text("runs = 3  # comment\nignored_key = 7\n", encoding="utf-8")
        assert main(base + ["--config", str(cfg)]) == 0
        assert self._runs_row(capsys.readouterr().out) == "3"

        assert main(base + ["--config", str(cfg), "--runs", "2"]) == 0
        assert self._runs_row(capsys.readouterr().out) == "2"

    def test_malformed_config_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("runs 3\n", encoding="utf-8")
        rc = main(["profile", "--input-dim", "4", "--config", str(cfg)])
        assert rc == 1
        assert "expected 'key = value'" in capsys.readouterr().err


class TestTrainCommand:
    def _dataset(self, tmp_path, n_train=6, n_val=2, dim=4):
        rows_train, rows_val = [], []
        for i in range(n_train + n_val):
            name = f"ex{i}.sqe1"
            _write_seq(tmp_path / name, t=5, d=dim, seed=i)
            row = f"{name},{2.0 + (i % 3)},,,,,"
            (rows_train if i < n_train else rows_val).append(row)
        train_m = _write_manifest(tmp_path / "train.csv", rows_train)
        val_m = _write_manifest(tmp_path / "val.csv", rows_val)
        return train_m, val_m

    def test_end_to_end(self, tmp_path, capsys):
        train_m, val_m = self._dataset(tmp_path)
        out = tmp_path / "model.sqm"
        hist = tmp_path / "history.csv"
        rc = main([
            "train", "--train", str(train_m), "--val", str(val_m),
            "--out", str(out), "--history", str(hist),
            "--hidden-dim", "8", "--ff-dim", "8", "--dropout", "0.0",
            "--max-epochs", "3", "--batch-size", "8", "--patience", "3",
        ])
        assert rc == 0
        captured = capsys.readouterr()
        assert "training finished: 3 epochs" in captured.err
        float(captured.out.strip())  # stdout is the best validation loss
        from sqe.checkpoint import load_checkpoint

        model = load_checkpoint(out)
        assert model.config.input_dim == 4
        header = hist.read_text(encoding="utf-8").split("\n")[0]
        assert header == "epoch,train_loss,val_loss,best_so_far"

    def test_mismatched_dims_name_the_row(self, tmp_path, capsys):
        train_m, val_m = self._dataset(tmp_path)
        _write_seq(tmp_path / "odd.sqe1", t=5, d=7, seed=99)
        rows = train_m.read_text(encoding="utf-8").strip().split("\n")[1:]
        _write_manifest(tmp_path / "train.csv", rows + ["odd.sqe1,3.0,,,,,"])
        rc = main([
            "train", "--train", str(train_m), "--val", str(val_m),
            "--out", str(tmp_path / "m.sqm"),
            "--hidden-dim", "8", "--ff-dim", "8", "--max-epochs", "1",
        ])
        assert rc == 1
        err = capsys.readouterr().err
        assert "odd.sqe1" in err
        assert "does not match expected 4" in err

    def test_missing_manifest_is_a_user_error(self, tmp_path, capsys):
        rc = main([
            "train", "--train", str(tmp_path / "none.csv"),
            "--val", str(tmp_path / "none.csv"), "--out", str(tmp_path / "m"),
        ])
        assert rc == 1


class TestPredictCommand:
    def test_single_embedding_file(self, tmp_path, capsys):
        ck = _tiny_checkpoint(tmp_path)
        feat = _write_seq(tmp_path / "u.sqe1", d=4)
        assert main(["predict", str(feat), "--checkpoint", str(ck)]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "path,task,prediction"
        path, task, value = lines[1].rsplit(",", 2)
        assert path.endswith("u.sqe1")
        assert task == "MOS"
        assert np.isfinite(float(value))

    def test_deterministic_across_calls(self, tmp_path, capsys):
        ck = _tiny_checkpoint(tmp_path)
        feat = _write_seq(tmp_path / "u.sqe1", d=4)
        main(["predict", str(feat), "--checkpoint", str(ck)])
        first = capsys.readouterr().out
        main(["predict", str(feat), "--checkpoint", str(ck)])
        assert capsys.readouterr().out == first

    def test_manifest_emits_row_per_task(self, tmp_path, capsys):
        ck = _tiny_checkpoint(tmp_path, tasks=("MOS", "SNR"))
        for i in range(2):
            _write_seq(tmp_path / f"u{i}.sqe1", d=4, seed=i)
        manifest = _write_manifest(
            tmp_path / "m.csv", ["u0.sqe1,,,,,,", "u1.sqe1,,,,,,"]
        )
        assert main(["predict", str(manifest), "--checkpoint", str(ck)]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 1 + 2 * 2
        assert lines[1].split(",")[-2] == "MOS"
        assert lines[2].split(",")[-2] == "SNR"

    def test_wav_input_goes_through_the_frontend(self, tmp_path, capsys):
        ck = _tiny_checkpoint(tmp_path, input_dim=64)
        wav = _write_wav(tmp_path / "clip.wav")
        assert main(["predict", str(wav), "--checkpoint", str(ck)]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 2

    def test_corrupt_checkpoint_is_a_user_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.sqm"
        bad.write_bytes(b"not a checkpoint")
        feat = _write_seq(tmp_path / "u.sqe1", d=4)
        assert main(["predict", str(feat), "--checkpoint", str(bad)]) == 1
        assert "error:" in capsys.readouterr().err


class TestEvalCommand:
    def _labeled_set(self, tmp_path, n):
        rows = []
        for i in range(n):
            _write_seq(tmp_path / f"e{i}.sqe1", d=4, seed=i)
            rows.append(f"e{i}.sqe1,{1.5 + 0.5 * i},,,,,")
        return _write_manifest(tmp_path / "eval.csv", rows)

    def test_insufficient_pairs(self, tmp_path, capsys):
        ck = _tiny_checkpoint(tmp_path)
        manifest = self._labeled_set(tmp_path, 3)
        assert main(["eval", str(manifest), "--checkpoint", str(ck)]) == 1
        assert "insufficient pairs" in capsys.readouterr().err

    def test_report_csv_on_stdout_table_on_stderr(self, tmp_path, capsys):
        ck = _tiny_checkpoint(tmp_path)
        manifest = self._labeled_set(tmp_path, 5)
        assert main(["eval", str(manifest), "--checkpoint", str(ck)]) == 0
        captured = capsys.readouterr()
        lines = captured.out.strip().split("\n")
        assert lines[0] == "task,n,pcc,rmse,rmse_map,a0,a1,a2,a3"
        mos_row = next(l for l in lines[1:] if l.startswith("MOS,"))
        assert mos_row.split(",")[1] == "5"
        assert "MOS" in captured.err  # human table went to stderr


class TestProfileCommand:
    def test_needs_checkpoint_or_input_dim(self, capsys):
        assert main(["profile"]) == 1
        assert "profile needs --checkpoint or --input-dim" in capsys.readouterr().err

    def test_from_checkpoint(self, tmp_path, capsys):
        ck = _tiny_checkpoint(tmp_path)
        rc = main(["profile", "--checkpoint", str(ck), "--runs", "2",
                   "--warmup", "0", "--feature-source", "external"])
        assert rc == 0
        captured = capsys.readouterr()
        assert captured.out.startswith("metric,value,unit,scope")
        assert "parameters" in captured.err

    def test_internal_faults_exit_two(self, tmp_path, capsys, monkeypatch):
        import sqe.cli as cli_mod

        def boom(*args, **kwargs):
            raise RuntimeError("wedged")

        monkeypatch.setattr(cli_mod.profiler_mod, "profile", boom)
        rc = main(["profile", "--input-dim", "4", "--runs", "2", "--warmup", "0",
                   "--feature-source", "external"])
        assert rc == 2
        assert "internal error: RuntimeError: wedged" in capsys.readouterr().err
