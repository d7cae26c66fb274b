"""Shared fixtures: a small synthetic corpus, preprocessed once per session."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from ethnipipe.cache import CacheWriter, PreprocessedCache
from ethnipipe.dataset import EthnicLabel, Manifest, SampleRecord, SplitPlan, ingest_directory
from ethnipipe.preprocess import preprocess_pipeline, read_image
from ethnipipe.synthetic import generate_synthetic_dataset

# One line per acceptance criterion, printed at the end of the run; populated
# by tests/test_acceptance.py.
ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status}  {name}")


def write_png(path, array):
    Image.fromarray(array).save(path)


def make_records(counts: dict[EthnicLabel, int], prefix: str = "s") -> Manifest:
    """A manifest of fake original records with the requested class counts."""
    records = []
    for label, n in counts.items():
        for i in range(n):
            rid = f"{prefix}-{label.name.lower()}-{i:04d}"
            records.append(SampleRecord(id=rid, path=f"{rid}.png", label=label, source="mem"))
    return Manifest(tuple(records))


@pytest.fixture(scope="session")
def portrait_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("portraits")
    generate_synthetic_dataset(root, per_class=6, seed=3)
    return root


@pytest.fixture(scope="session")
def corpus(portrait_root, tmp_path_factory):
    """Ingested manifest + preprocessed cache for 24 synthetic portraits.

    The face detector is skipped (center-crop policy) so the fixture stays
    fast; detector behavior has its own tests.
    """
    work = tmp_path_factory.mktemp("corpus")
    manifest = ingest_directory(portrait_root).manifest
    cache_path = work / "cache.bin"
    with CacheWriter(cache_path) as writer:
        for rec in manifest.records:
            img = read_image(portrait_root / rec.path)
            out = preprocess_pipeline(img, detector=None, policy="center-crop")
            writer.add(rec.id, out)
    return SimpleNamespace(
        root=portrait_root,
        manifest=manifest,
        cache_path=cache_path,
        cache=PreprocessedCache(cache_path),
    )


@pytest.fixture()
def tiny_plan(corpus):
    """4 train / 1 val / 1 test per class over the session corpus."""
    by_class: dict[EthnicLabel, list[str]] = {label: [] for label in EthnicLabel}
    for rec in corpus.manifest.records:
        by_class[rec.label].append(rec.id)
    train, val, test = [], [], []
    for ids in by_class.values():
        ids = sorted(ids)
        train.extend(ids[:4])
        val.append(ids[4])
        test.append(ids[5])
    return SplitPlan(
        fold_index=0, train_ids=tuple(train), val_ids=tuple(val), test_ids=tuple(test)
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
