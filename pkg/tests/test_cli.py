"""Command-line interface: the full chain, option precedence, and exit codes."""

from __future__ import annotations

import json
import re
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

import ethnipipe.cli as cli
import ethnipipe.model as model
from ethnipipe.archive import load_checkpoint, read_archive
from ethnipipe.cache import PreprocessedCache, index_path_for, read_skip_log
from ethnipipe.dataset import CLASS_NAMES, read_splits
from ethnipipe.evaluation import parse_report
from ethnipipe.training import read_trainlog

TORCHVISION_INDICES = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def make_torchvision_npz(path, rng):
    spec = model.build_model_spec()
    conv_shapes = [(l.out_channels, l.in_channels) for l in spec.layers if l.kind == "conv"]
    payload = {}
    for idx, (cout, cin) in zip(TORCHVISION_INDICES, conv_shapes):
        payload[f"features.{idx}.weight"] = (
            rng.standard_normal((cout, cin, 3, 3)).astype(np.float32) * 0.05
        )
        payload[f"features.{idx}.bias"] = np.zeros(cout, dtype=np.float32)
    np.savez(path, **payload)


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth -> ingest -> preprocess -> split -> train, all through the CLI."""
    root = tmp_path_factory.mktemp("cli-chain")
    images = root / "images"
    manifest = root / "manifest.tsv"
    cache = root / "cache.bin"
    splits = root / "splits.tsv"
    train_run = root / "train-run"

    assert run("synth", "--out", images, "--per-class", 8, "--seed", 5) == 0
    assert run("ingest", "--root", images, "--out", manifest) == 0
    assert run(
        "preprocess", "--manifest", manifest, "--root", images, "--cache", cache,
        "--detector", "none", "--policy", "center-crop",
    ) == 0
    assert run(
        "split", "--manifest", manifest, "--out", splits,
        "--k", 2, "--ratios", "0.5,0.25,0.25", "--seed", 0,
    ) == 0
    assert run(
        "train", "--manifest", manifest, "--split", splits, "--cache", cache,
        "--fold", 0, "--arch", "surrogate", "--channels", "4,8", "--head-width", 16,
        "--epochs", 2, "--lr", 0.02, "--batch-size", 8, "--run-dir", train_run,
    ) == 0
    return SimpleNamespace(
        root=root, images=images, manifest=manifest, cache=cache, splits=splits,
        train_run=train_run, best=train_run / "checkpoints" / "fold0-best.epwa",
    )


class TestChainOutputs:
    def test_console_script_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "ethnipipe.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        for command in ("synth", "preprocess", "train", "convert-weights"):
            assert command in proc.stdout

    def test_synth_and_ingest_outputs(self, chain, capsys):
        assert sum(1 for _ in chain.images.rglob("*.png")) == 32
        assert chain.manifest.is_file()
        assert run("ingest", "--root", chain.images, "--out", chain.root / "m2.tsv") == 0
        assert "32 records, 0 skipped" in capsys.readouterr().out

    def test_preprocess_wrote_a_full_cache(self, chain):
        cache = PreprocessedCache(chain.cache)
        assert len(cache) == 32
        assert cache.get(cache.ids()[0]).shape == (80, 80, 3)
        skip_log = read_skip_log(chain.cache.parent / (chain.cache.name + ".skipped"))
        assert skip_log == {}

    def test_split_fold_sizes(self, chain):
        plans = read_splits(chain.splits)
        assert len(plans) == 2
        for plan in plans:
            assert (len(plan.train_ids), len(plan.val_ids), len(plan.test_ids)) == (16, 8, 8)

    def test_train_run_directory_layout(self, chain):
        run_dir = chain.train_run
        assert (run_dir / "checkpoints" / "fold0-best.epwa").is_file()
        assert (run_dir / "checkpoints" / "fold0-final.epwa").is_file()
        assert (run_dir / "logs" / "fold0-trainlog.tsv").is_file()
        assert (run_dir / "logs" / "fold0-trainlog.txt").is_file()
        assert (run_dir / "logs" / "fold0-curves.png").read_bytes()[:4] == b"\x89PNG"
        log = read_trainlog(run_dir / "logs" / "fold0-trainlog.tsv")
        assert len(log.entries) == 2

    def test_run_config_records_the_resolved_options(self, chain):
        payload = json.loads(
            (chain.train_run / "config" / "run-config.json").read_text()
        )
        assert payload["command"] == "train"
        assert payload["resolved"]["epochs"] == 2
        assert payload["resolved"]["lr"] == 0.02
        assert payload["resolved"]["arch"] == "surrogate"
        assert payload["resolved"]["init"] == "random"

    def test_checkpoint_is_loadable(self, chain):
        state = load_checkpoint(chain.best)
        assert state.spec.head_width == 16
        assert state.spec.input_shape == (80, 80, 3)


class TestSplitCommand:
    def test_two_runs_are_byte_identical(self, chain, tmp_path):
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        for out in (a, b):
            assert run(
                "split", "--manifest", chain.manifest, "--out", out,
                "--k", 2, "--ratios", "0.5,0.25,0.25", "--seed", 9,
            ) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_stdout_mentions_fold_sizes(self, chain, tmp_path, capsys):
        assert run(
            "split", "--manifest", chain.manifest, "--out", tmp_path / "s.tsv",
            "--k", 2, "--ratios", "0.5,0.25,0.25",
        ) == 0
        assert "fold0=16/8/8" in capsys.readouterr().out


class TestOptionPrecedence:
    def test_flags_beat_env_beats_config_file(self, chain, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"k": 4, "ratios": "0.5,0.25,0.25"}))
        out = tmp_path / "s.tsv"

        assert run("split", "--manifest", chain.manifest, "--out", out,
                   "--config", cfg) == 0
        assert len(read_splits(out)) == 4

        monkeypatch.setenv("ETHNIPIPE_K", "3")
        assert run("split", "--manifest", chain.manifest, "--out", out,
                   "--config", cfg) == 0
        assert len(read_splits(out)) == 3

        assert run("split", "--manifest", chain.manifest, "--out", out,
                   "--config", cfg, "--k", 2) == 0
        assert len(read_splits(out)) == 2

    def test_config_file_must_exist(self, chain, tmp_path, capsys):
        rc = run("split", "--manifest", chain.manifest, "--out", tmp_path / "s.tsv",
                 "--config", tmp_path / "nope.json")
        assert rc == 3
        assert "code=3" in capsys.readouterr().err

    def test_config_file_must_be_json(self, chain, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("not json {")
        rc = run("split", "--manifest", chain.manifest, "--out", tmp_path / "s.tsv",
                 "--config", bad)
        assert rc == 2


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("pp")
    assert run("synth", "--out", root / "img", "--per-class", 2, "--seed", 11) == 0
    assert run("ingest", "--root", root / "img", "--out", root / "m.tsv") == 0
    return root


class TestPreprocessCommand:
    def test_parallel_jobs_change_nothing(self, small_corpus):
        serial = small_corpus / "serial.bin"
        parallel = small_corpus / "parallel.bin"
        for cache, jobs in ((serial, 1), (parallel, 2)):
            assert run(
                "preprocess", "--manifest", small_corpus / "m.tsv",
                "--root", small_corpus / "img", "--cache", cache,
                "--detector", "none", "--policy", "center-crop", "--jobs", jobs,
            ) == 0
        assert serial.read_bytes() == parallel.read_bytes()
        assert index_path_for(serial).read_text() == index_path_for(parallel).read_text()

    def test_skip_policy_logs_every_miss(self, small_corpus, capsys):
        cache = small_corpus / "skippy.bin"
        assert run(
            "preprocess", "--manifest", small_corpus / "m.tsv",
            "--root", small_corpus / "img", "--cache", cache,
            "--detector", "none", "--policy", "skip",
            "--skip-log", small_corpus / "skips.tsv",
        ) == 0
        assert "0 tensors, 8 skipped" in capsys.readouterr().out
        skips = read_skip_log(small_corpus / "skips.tsv")
        assert len(skips) == 8
        assert set(skips.values()) == {"no detector configured"}
        assert len(PreprocessedCache(cache)) == 0

    def test_unknown_policy_is_a_config_error(self, small_corpus, tmp_path, capsys):
        # A bad policy via --config dodges argparse's choices= guard, so the
        # command's own validation has to catch it.
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"policy": "wing-it"}))
        rc = run(
            "preprocess", "--manifest", small_corpus / "m.tsv",
            "--root", small_corpus / "img", "--cache", small_corpus / "x.bin",
            "--config", cfg,
        )
        assert rc == 2
        assert "unknown policy" in capsys.readouterr().err


class TestEvaluateCommand:
    def test_table_output_and_artifacts(self, chain, tmp_path, capsys):
        run_dir = tmp_path / "eval"
        assert run(
            "evaluate", "--manifest", chain.manifest, "--split", chain.splits,
            "--cache", chain.cache, "--checkpoint", chain.best,
            "--folds", "0", "--run-dir", run_dir,
        ) == 0
        out = capsys.readouterr().out
        assert "Total Success rate" in out
        assert f"report files under {run_dir / 'reports'}" in out
        reports = run_dir / "reports"
        assert (reports / "report.txt").is_file()
        assert (reports / "report.tsv").is_file()
        assert (reports / "confusion.png").read_bytes()[:4] == b"\x89PNG"
        assert (reports / "accuracy.png").read_bytes()[:4] == b"\x89PNG"
        saved = parse_report((reports / "report.tsv").read_text())
        assert saved.confusion.sum() == 8

    def test_structured_stdout_round_trips(self, chain, tmp_path, capsys):
        assert run(
            "evaluate", "--manifest", chain.manifest, "--split", chain.splits,
            "--cache", chain.cache, "--checkpoint", chain.best,
            "--folds", "0", "--format", "structured", "--run-dir", tmp_path / "ev",
        ) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "#ethnipipe-report v1"
        assert lines[-1].startswith("report files under")
        report = parse_report("\n".join(lines[:-1]) + "\n")
        assert len(report.folds) == 1
        assert report.folds[0].fold_index == 0

    def test_checkpoint_fold_mismatch(self, chain, tmp_path, capsys):
        rc = run(
            "evaluate", "--manifest", chain.manifest, "--split", chain.splits,
            "--cache", chain.cache, "--checkpoint", chain.best,
            "--checkpoint", chain.best, "--folds", "0", "--run-dir", tmp_path / "ev",
        )
        assert rc == 2
        assert "one per fold" in capsys.readouterr().err


class TestPredictCommand:
    def test_prints_label_and_one_probability_line(self, chain, capsys):
        image = chain.images / "African" / "african_000.png"
        assert run(
            "predict", "--checkpoint", chain.best, "--image", image,
            "--detector", "none", "--policy", "center-crop",
        ) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 2
        kind, _, label = lines[0].partition("\t")
        assert kind == "label" and label in CLASS_NAMES
        cells = lines[1].split("\t")
        assert cells[0] == "probs" and len(cells) == 5
        probs = dict(cell.split("=") for cell in cells[1:])
        assert sorted(probs) == sorted(CLASS_NAMES)
        assert sum(float(v) for v in probs.values()) == pytest.approx(1.0, abs=1e-4)

    def test_missing_image_is_exit_3(self, chain, capsys):
        rc = run("predict", "--checkpoint", chain.best, "--image", "/no/such.png")
        assert rc == 3
        assert "code=3" in capsys.readouterr().err


class TestBenchmarkCommand:
    def test_stats_lines_and_artifact(self, chain, tmp_path, capsys):
        run_dir = tmp_path / "bench"
        assert run(
            "benchmark", "--checkpoint", chain.best, "--cache", chain.cache,
            "--reps", 5, "--warmup", 2, "--limit", 4, "--run-dir", run_dir,
        ) == 0
        out = capsys.readouterr().out
        assert "repetitions\t5" in out
        assert "warmup\t2" in out
        for stat in ("mean_ms", "p50_ms", "p95_ms"):
            assert re.search(rf"^{stat}\t\d+\.\d{{3}}$", out, flags=re.M), stat
        assert "hardware-dependent" in out
        tsv = (run_dir / "reports" / "latency.tsv").read_text().splitlines()
        assert len(tsv) == 5
        assert tsv[0] == "repetitions\t5"


class TestConvertWeightsCommand:
    def test_npz_to_archive(self, tmp_path, capsys, rng):
        src = tmp_path / "weights.npz"
        make_torchvision_npz(src, rng)
        out = tmp_path / "backbone.epwa"
        assert run("convert-weights", "--src", src, "--out", out) == 0
        assert "26 tensors" in capsys.readouterr().out
        assert len(read_archive(out).tensors) == 26

    def test_missing_source_is_exit_3(self, tmp_path, capsys):
        rc = run("convert-weights", "--src", tmp_path / "none.npz",
                 "--out", tmp_path / "o.epwa")
        assert rc == 3


class TestErrorReporting:
    def test_config_errors_exit_2_with_one_stderr_line(self, chain, tmp_path, capsys):
        rc = run("split", "--manifest", chain.manifest, "--out", tmp_path / "s.tsv",
                 "--ratios", "0.2,0.2")
        assert rc == 2
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        assert re.fullmatch(r"ethnipipe-error\tcode=2\tConfigError\t.+", err)

    def test_required_flag_missing_is_exit_2(self, capsys):
        rc = run("predict", "--image", "whatever.png")
        assert rc == 2
        assert "--checkpoint is required" in capsys.readouterr().err

    def test_missing_input_is_exit_3(self, chain, tmp_path, capsys):
        rc = run("train", "--manifest", tmp_path / "ghost.tsv",
                 "--split", chain.splits, "--cache", chain.cache)
        assert rc == 3
        err = capsys.readouterr().err.strip()
        assert re.fullmatch(r"ethnipipe-error\tcode=3\t\w+\t.+", err)

    def test_runtime_failure_is_exit_4(self, chain, tmp_path, capsys):
        corrupt = tmp_path / "corrupt.epwa"
        corrupt.write_bytes(b"garbage" * 4)
        image = chain.images / "African" / "african_000.png"
        rc = run("predict", "--checkpoint", corrupt, "--image", image)
        assert rc == 4
        err = capsys.readouterr().err.strip()
        assert re.fullmatch(r"ethnipipe-error\tcode=4\t\w+\t.+", err)
