"""Command-line interface.

Commands: synth, ingest, preprocess, split, train, evaluate, predict,
benchmark, convert-weights. Option values resolve with precedence
flags > environment (``ETHNIPIPE_<NAME>``) > ``--config`` JSON file >
built-in defaults; the resolved configuration is serialized into the run
directory so every run is replayable.

Exit codes: 0 success, 2 bad configuration, 3 missing input, 4 runtime
failure. Failures print a single machine-parseable ``ethnipipe-error`` line
to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import archive, dataset, evaluation, figures, model, synthetic, training
from .cache import CacheWriter, PreprocessedCache, write_skip_log
from .errors import ConfigError, EthnipipeError, MissingInputError
from .preprocess import (
    CascadeFaceDetector,
    POLICIES,
    Skip,
    preprocess_pipeline,
    read_image,
)

ENV_PREFIX = "ETHNIPIPE_"


def _resolve(args: argparse.Namespace, name: str, default, cast=None):
    """flags > ETHNIPIPE_* environment > --config file > default."""
    value = getattr(args, name, None)
    if value is None:
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            value = env
        else:
            file_cfg = getattr(args, "_file_config", {})
            value = file_cfg.get(name, default)
    if value is None or cast is None or not isinstance(value, str):
        return value
    try:
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name!r}: {value!r} ({exc})") from None


def _parse_ratios(text) -> tuple[float, float, float]:
    if isinstance(text, (tuple, list)):
        parts = [float(v) for v in text]
    else:
        parts = [float(v) for v in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigError(f"--ratios needs three comma-separated values, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _parse_int_list(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(","))


def _parse_str_list(text) -> tuple[str, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(v for v in str(text).split(",") if v)


def _make_run_dir(args: argparse.Namespace, command: str) -> Path:
    explicit = _resolve(args, "run_dir", None)
    if explicit is not None:
        run_dir = Path(explicit)
    else:
        tag = _resolve(args, "tag", command)
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{stamp}-{tag}"
    for sub in ("config", "checkpoints", "logs", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_run_config(run_dir: Path, command: str, resolved: dict) -> None:
    payload = {
        "command": command,
        "argv": sys.argv[1:],
        "resolved": {k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()},
    }
    (run_dir / "config" / "run-config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _require(args: argparse.Namespace, name: str, flag: str):
    value = _resolve(args, name, None)
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(_require(args, "out", "--out"))
    per_class = _resolve(args, "per_class", 100, int)
    seed = _resolve(args, "seed", 0, int)
    written = synthetic.generate_synthetic_dataset(out, per_class=per_class, seed=seed)
    print(f"wrote {len(written)} images under {out}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    root = Path(_require(args, "root", "--root"))
    out = Path(_require(args, "out", "--out"))
    labeling = None
    labels_map = _resolve(args, "labels_map", None)
    if labels_map is not None:
        labeling = json.loads(Path(labels_map).read_text(encoding="utf-8"))
    result = dataset.ingest_directory(root, labeling=labeling, source=_resolve(args, "source", None))
    dataset.write_manifest(result.manifest, out)
    print(f"manifest {out}: {len(result.manifest)} records, {len(result.skipped)} skipped")
    return 0


_WORKER_STATE: dict = {}


def _preprocess_init(detector_kind: str, policy: str, nlm: dict) -> None:
    _WORKER_STATE["detector"] = CascadeFaceDetector() if detector_kind == "cascade" else None
    _WORKER_STATE["policy"] = policy
    _WORKER_STATE["nlm"] = nlm


def _preprocess_one(item: tuple[str, str]):
    rid, path = item
    img = read_image(path)
    out = preprocess_pipeline(
        img,
        detector=_WORKER_STATE["detector"],
        policy=_WORKER_STATE["policy"],
        **_WORKER_STATE["nlm"],
    )
    return rid, out


def cmd_preprocess(args: argparse.Namespace) -> int:
    manifest_path = Path(_require(args, "manifest", "--manifest"))
    cache_path = Path(_require(args, "cache", "--cache"))
    manifest = dataset.read_manifest(manifest_path)
    root = Path(_resolve(args, "root", manifest_path.parent))
    policy = _resolve(args, "policy", "skip")
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r} (choose from {', '.join(POLICIES)})")
    detector_kind = _resolve(args, "detector", "cascade")
    if detector_kind not in ("cascade", "none"):
        raise ConfigError(f"unknown detector {detector_kind!r} (cascade or none)")
    jobs = _resolve(args, "jobs", 1, int)
    nlm = {
        "nlm_h": _resolve(args, "nlm_h", 3.0, float),
        "nlm_template": _resolve(args, "nlm_template", 7, int),
        "nlm_search": _resolve(args, "nlm_search", 21, int),
        "nlm_sigma": _resolve(args, "nlm_sigma", 0.0, float),
    }

    originals = [rec for rec in manifest.records if not rec.is_augmented]
    items = [(rec.id, str(root / rec.path)) for rec in originals]
    results: dict[str, object] = {}
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_preprocess_init,
            initargs=(detector_kind, policy, nlm),
        ) as pool:
            for rid, out in pool.map(_preprocess_one, items, chunksize=8):
                results[rid] = out
    else:
        _preprocess_init(detector_kind, policy, nlm)
        for item in items:
            rid, out = _preprocess_one(item)
            results[rid] = out

    skips: dict[str, str] = {}
    with CacheWriter(cache_path) as writer:
        for rec in originals:
            out = results[rec.id]
            if isinstance(out, Skip):
                skips[rec.id] = out.reason
            else:
                writer.add(rec.id, out)  # type: ignore[arg-type]
    skip_log = _resolve(args, "skip_log", None)
    if skip_log is None:
        skip_log = cache_path.with_suffix(cache_path.suffix + ".skipped")
    write_skip_log(skips, skip_log)
    print(f"cache {cache_path}: {len(originals) - len(skips)} tensors, {len(skips)} skipped")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    manifest = dataset.read_manifest(Path(_require(args, "manifest", "--manifest")))
    out = Path(_require(args, "out", "--out"))
    k = _resolve(args, "k", 10, int)
    ratios = _parse_ratios(_resolve(args, "ratios", "0.75,0.10,0.15"))
    seed = _resolve(args, "seed", 0, int)
    plans = dataset.kfold_split(manifest, k=k, ratios=ratios, seed=seed)
    dataset.write_splits(plans, out)
    sizes = ", ".join(
        f"fold{p.fold_index}={len(p.train_ids)}/{len(p.val_ids)}/{len(p.test_ids)}"
        for p in plans[:3]
    )
    more = "" if k <= 3 else f", … ({k} folds)"
    print(f"splits {out}: {sizes}{more}")
    return 0


def _build_initial_state(args: argparse.Namespace) -> tuple[model.ModelState, dict]:
    arch = _resolve(args, "arch", "vgg16")
    seed = _resolve(args, "seed", 0, int)
    if arch == "vgg16":
        head_width = _resolve(args, "head_width", model.DEFAULT_HEAD_WIDTH, int)
        spec = model.build_model_spec(head_width=head_width)
    elif arch == "surrogate":
        head_width = _resolve(args, "head_width", 64, int)
        channels = _parse_int_list(_resolve(args, "channels", "8,16"))
        spec = model.build_surrogate_spec(
            input_shape=model.DEFAULT_INPUT_SHAPE, channels=channels, head_width=head_width
        )
    else:
        raise ConfigError(f"unknown arch {arch!r} (vgg16 or surrogate)")

    weights_path = _resolve(args, "weights", None)
    if weights_path is not None:
        weights = archive.read_archive(Path(weights_path))
        state = model.load_backbone(spec, weights.tensors, head_seed=seed)
        init = f"pretrained backbone from {weights_path}"
    else:
        state = model.init_state(spec, seed=seed)
        init = "random"
    meta = {"arch": arch, "head_width": head_width, "init": init, "seed": seed}
    return state, meta


def cmd_train(args: argparse.Namespace) -> int:
    manifest = dataset.read_manifest(Path(_require(args, "manifest", "--manifest")))
    plans = dataset.read_splits(Path(_require(args, "split", "--split")))
    cache = PreprocessedCache(Path(_require(args, "cache", "--cache")))
    fold = _resolve(args, "fold", 0, int)
    by_index = {p.fold_index: p for p in plans}
    if fold not in by_index:
        raise ConfigError(f"fold {fold} not present in split file (has {sorted(by_index)})")
    plan = by_index[fold]

    cfg = training.TrainConfig(
        epochs=_resolve(args, "epochs", 50, int),
        learning_rate=_resolve(args, "lr", 1e-3, float),
        momentum=_resolve(args, "momentum", 0.9, float),
        batch_size=_resolve(args, "batch_size", 32, int),
        noise_sigma=_resolve(args, "sigma", 5.0, float),
        seed=_resolve(args, "seed", 0, int),
        freeze_mask=_parse_str_list(_resolve(args, "freeze", "")),
    )
    state, meta = _build_initial_state(args)

    run_dir = _make_run_dir(args, "train")
    _write_run_config(
        run_dir,
        "train",
        {
            "manifest": _resolve(args, "manifest", None),
            "split": _resolve(args, "split", None),
            "cache": _resolve(args, "cache", None),
            "fold": fold,
            "epochs": cfg.epochs,
            "lr": cfg.learning_rate,
            "momentum": cfg.momentum,
            "batch_size": cfg.batch_size,
            "sigma": cfg.noise_sigma,
            "seed": cfg.seed,
            "freeze": list(cfg.freeze_mask),
            **meta,
        },
    )

    def progress(stats: training.EpochStats) -> None:
        print(
            f"epoch {stats.epoch}/{cfg.epochs}: train_loss={stats.train_loss:.5f} "
            f"val_loss={stats.val_loss:.5f} val_acc={stats.val_acc:.4f} "
            f"({stats.seconds:.1f}s)",
            flush=True,
        )

    result = training.train(state, plan, manifest, cache, cfg, progress=progress)

    best_path = run_dir / "checkpoints" / f"fold{fold}-best.epwa"
    final_path = run_dir / "checkpoints" / f"fold{fold}-final.epwa"
    archive.save_checkpoint(result.best_state, best_path)
    archive.save_checkpoint(result.final_state, final_path)
    training.write_trainlog(result.log, run_dir / "logs" / f"fold{fold}-trainlog.tsv")
    (run_dir / "logs" / f"fold{fold}-trainlog.txt").write_text(
        result.log.render_table(), encoding="utf-8"
    )
    figures.save_training_curves(result.log, run_dir / "logs" / f"fold{fold}-curves.png")
    print(f"best epoch {result.best_epoch} "
          f"(val_acc={result.log.entries[result.best_epoch - 1].val_acc:.4f})")
    print(f"checkpoints: {best_path} {final_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = dataset.read_manifest(Path(_require(args, "manifest", "--manifest")))
    plans = dataset.read_splits(Path(_require(args, "split", "--split")))
    cache = PreprocessedCache(Path(_require(args, "cache", "--cache")))
    checkpoints = getattr(args, "checkpoint", None) or []
    if not checkpoints:
        raise ConfigError("--checkpoint is required (repeat it for per-fold checkpoints)")
    folds_flag = _resolve(args, "folds", None)
    if folds_flag is not None:
        wanted = _parse_int_list(folds_flag)
        by_index = {p.fold_index: p for p in plans}
        missing = [f for f in wanted if f not in by_index]
        if missing:
            raise ConfigError(f"folds {missing} not present in split file")
        plans = [by_index[f] for f in wanted]
    if len(checkpoints) == 1:
        checkpoints = checkpoints * len(plans)
    if len(checkpoints) != len(plans):
        raise ConfigError(
            f"{len(checkpoints)} checkpoints for {len(plans)} folds; give one "
            "checkpoint total or one per fold"
        )

    reports = []
    for plan, ckpt in zip(plans, checkpoints):
        state = archive.load_checkpoint(Path(ckpt))
        reports.append(
            evaluation.evaluate(state, plan.test_ids, manifest, cache, fold_index=plan.fold_index)
        )
    combined = evaluation.aggregate(reports)

    run_dir = _make_run_dir(args, "evaluate")
    _write_run_config(
        run_dir,
        "evaluate",
        {
            "manifest": _resolve(args, "manifest", None),
            "split": _resolve(args, "split", None),
            "cache": _resolve(args, "cache", None),
            "checkpoints": list(checkpoints),
            "folds": [p.fold_index for p in plans],
        },
    )
    table = evaluation.render_report(combined, format="table")
    structured = evaluation.render_report(combined, format="structured")
    reports_dir = run_dir / "reports"
    (reports_dir / "report.txt").write_text(table, encoding="utf-8")
    (reports_dir / "report.tsv").write_text(structured, encoding="utf-8")
    figures.save_confusion_heatmap(combined.confusion, reports_dir / "confusion.png")
    figures.save_accuracy_bars(combined, reports_dir / "accuracy.png")
    fmt = _resolve(args, "format", "table")
    print(evaluation.render_report(combined, format=fmt), end="")
    print(f"report files under {reports_dir}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    state = archive.load_checkpoint(Path(_require(args, "checkpoint", "--checkpoint")))
    image_path = Path(_require(args, "image", "--image"))
    if not image_path.is_file():
        raise MissingInputError(f"image not found: {image_path}")
    policy = _resolve(args, "policy", "center-crop")
    detector_kind = _resolve(args, "detector", "cascade")
    detector = CascadeFaceDetector() if detector_kind == "cascade" else None
    out = preprocess_pipeline(read_image(image_path), detector=detector, policy=policy)
    if isinstance(out, Skip):
        raise EthnipipeError(f"cannot preprocess {image_path}: {out.reason}")
    probs = model.forward(state, out[None].astype(state.dtype))[0]
    label = dataset.EthnicLabel(int(probs.argmax()))
    print(f"label\t{label.display_name}")
    print("probs\t" + "\t".join(
        f"{name}={p:.6f}" for name, p in zip(dataset.CLASS_NAMES, probs)
    ))
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    state = archive.load_checkpoint(Path(_require(args, "checkpoint", "--checkpoint")))
    cache = PreprocessedCache(Path(_require(args, "cache", "--cache")))
    limit = _resolve(args, "limit", 16, int)
    ids = cache.ids()[:limit]
    if not ids:
        raise MissingInputError("cache holds no tensors to benchmark")
    images = np.stack([cache.get(rid) for rid in ids])
    reps = _resolve(args, "reps", 50, int)
    warmup = _resolve(args, "warmup", 5, int)
    stats = evaluation.benchmark_latency(state, images, repetitions=reps, warmup=warmup)

    run_dir = _make_run_dir(args, "benchmark")
    _write_run_config(
        run_dir,
        "benchmark",
        {"cache": _resolve(args, "cache", None), "reps": reps, "warmup": warmup,
         "limit": limit, "checkpoint": _resolve(args, "checkpoint", None)},
    )
    lines = [
        f"repetitions\t{reps}",
        f"warmup\t{warmup}",
        f"mean_ms\t{stats.mean_ms:.3f}",
        f"p50_ms\t{stats.p50_ms:.3f}",
        f"p95_ms\t{stats.p95_ms:.3f}",
    ]
    (run_dir / "reports" / "latency.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)
    print("note\tsingle-image forward; ~10 ms per image is the design target, "
          "actual timing is hardware-dependent")
    return 0


def cmd_convert_weights(args: argparse.Namespace) -> int:
    src = Path(_require(args, "src", "--src"))
    out = Path(_require(args, "out", "--out"))
    converted = archive.convert_weights(src, out)
    print(f"archive {out}: {len(converted.tensors)} tensors from {src}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ethnipipe",
        description="Face-image ethnicity classification pipeline "
                    "(ingest, preprocess, split, train, evaluate).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file with default option values")
        return p

    p = add("synth", cmd_synth, "generate the synthetic fixture dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--seed", type=int)

    p = add("ingest", cmd_ingest, "scan a class-per-subdirectory tree into a manifest")
    p.add_argument("--root", help="dataset root directory")
    p.add_argument("--out", help="output manifest path")
    p.add_argument("--source", help="source tag recorded on every sample")
    p.add_argument("--labels-map", dest="labels_map",
                   help="JSON file mapping subdirectory names to class names")

    p = add("preprocess", cmd_preprocess, "detect, crop, resize, denoise into a tensor cache")
    p.add_argument("--manifest")
    p.add_argument("--cache", help="output cache path")
    p.add_argument("--root", help="directory image paths are relative to "
                                  "(default: the manifest's directory)")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--detector", choices=("cascade", "none"))
    p.add_argument("--jobs", type=int, help="parallel preprocessing workers")
    p.add_argument("--nlm-h", dest="nlm_h", type=float)
    p.add_argument("--nlm-template", dest="nlm_template", type=int)
    p.add_argument("--nlm-search", dest="nlm_search", type=int)
    p.add_argument("--nlm-sigma", dest="nlm_sigma", type=float)
    p.add_argument("--skip-log", dest="skip_log")

    p = add("split", cmd_split, "draw stratified train/val/test folds")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output split path")
    p.add_argument("--k", type=int)
    p.add_argument("--ratios", help="train,val,test fractions (default 0.75,0.10,0.15)")
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "fine-tune on one fold")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--cache")
    p.add_argument("--fold", type=int)
    p.add_argument("--arch", choices=("vgg16", "surrogate"))
    p.add_argument("--weights", help="pretrained backbone archive (.epwa)")
    p.add_argument("--head-width", dest="head_width", type=int)
    p.add_argument("--channels", help="surrogate conv widths, e.g. 8,16")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--sigma", type=float, help="balancing noise sigma (gray levels)")
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze", help="comma-separated layer names to exclude from updates")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--tag")

    p = add("evaluate", cmd_evaluate, "score checkpoints on fold test sets")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--cache")
    p.add_argument("--checkpoint", action="append",
                   help="checkpoint path; repeat for per-fold checkpoints")
    p.add_argument("--folds", help="comma-separated fold indices (default: all)")
    p.add_argument("--format", choices=("table", "structured"))
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--tag")

    p = add("predict", cmd_predict, "classify one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--detector", choices=("cascade", "none"))

    p = add("benchmark", cmd_benchmark, "measure single-image forward latency")
    p.add_argument("--checkpoint")
    p.add_argument("--cache")
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--limit", type=int, help="number of cached tensors to cycle through")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--tag")

    p = add("convert-weights", cmd_convert_weights,
            "convert a public pretrained VGG-16 file to the archive format")
    p.add_argument("--src", help="source .npz / .h5 / .epwa file")
    p.add_argument("--out", help="output .epwa path")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config_path = getattr(args, "config", None)
        if config_path is not None:
            try:
                file_config = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise MissingInputError(f"config file not found: {config_path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
            if not isinstance(file_config, dict):
                raise ConfigError(f"config file {config_path} must hold a JSON object")
            args._file_config = file_config
        return args.func(args)
    except ConfigError as exc:
        _print_error(2, exc)
        return 2
    except (MissingInputError, FileNotFoundError) as exc:
        _print_error(3, exc)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _print_error(4, exc)
        return 4


def _print_error(code: int, exc: Exception) -> None:
    message = str(exc).replace("\t", " ").replace("\n", " ")
    print(f"ethnipipe-error\tcode={code}\t{type(exc).__name__}\t{message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
