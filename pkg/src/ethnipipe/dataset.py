"""Labeled-sample manifests, stratified fold splitting, and class balancing.

A manifest is an ordered, immutable list of sample records. All randomized
operations here are pure functions of their inputs plus an integer seed, so
re-running with the same arguments reproduces the same bytes on disk.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, MissingInputError

MANIFEST_HEADER = "#ethnipipe-manifest v1"
SPLIT_HEADER = "#ethnipipe-split v1"
SUBSET_NAMES = ("train", "val", "test")


class EthnicLabel(IntEnum):
    """The four target classes. Integer codes are stable across runs."""

    AFRICAN = 0
    ASIAN = 1
    CAUCASIAN = 2
    INDIAN = 3

    @property
    def display_name(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_name(cls, name: str) -> "EthnicLabel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class name: {name!r}") from None


CLASS_NAMES = tuple(label.display_name for label in EthnicLabel)
NUM_CLASSES = len(EthnicLabel)


@dataclass(frozen=True)
class SampleRecord:
    """One labeled face image reference.

    `augmented_from` names the parent record for noisy duplicates, and
    `noise_seed` is the RNG seed that regenerates the duplicate's pixels.
    Both are None for original samples.
    """

    id: str
    path: str
    label: EthnicLabel
    source: str = ""
    augmented_from: str | None = None
    noise_seed: int | None = None

    def __post_init__(self):
        for name in ("id", "path", "source"):
            value = getattr(self, name)
            if "\t" in value or "\n" in value:
                raise ValueError(f"record field {name!r} may not contain tabs or newlines")
        if not self.id:
            raise ValueError("record id may not be empty")
        if (self.augmented_from is None) != (self.noise_seed is None):
            raise ValueError("augmented_from and noise_seed must be set together")

    @property
    def is_augmented(self) -> bool:
        return self.augmented_from is not None


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    schema_version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValueError(f"duplicate record id: {rec.id!r}")
            seen.add(rec.id)
        for rec in self.records:
            if rec.augmented_from is not None:
                parent = self.find(rec.augmented_from)
                if parent is None:
                    raise ValueError(
                        f"record {rec.id!r} references missing parent {rec.augmented_from!r}"
                    )
                if parent.is_augmented:
                    raise ValueError(
                        f"record {rec.id!r} references augmented parent {rec.augmented_from!r}"
                    )

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> tuple[str, ...]:
        return tuple(rec.id for rec in self.records)

    def find(self, record_id: str) -> SampleRecord | None:
        return self._index().get(record_id)

    def get(self, record_id: str) -> SampleRecord:
        rec = self.find(record_id)
        if rec is None:
            raise MissingInputError(f"no record with id {record_id!r} in manifest")
        return rec

    def _index(self) -> dict[str, SampleRecord]:
        cached = self.__dict__.get("_id_index")
        if cached is None:
            cached = {rec.id: rec for rec in self.records}
            self.__dict__["_id_index"] = cached
        return cached

    def class_counts(self, ids: Iterable[str] | None = None) -> dict[EthnicLabel, int]:
        counts = {label: 0 for label in EthnicLabel}
        records = self.records if ids is None else (self.get(i) for i in ids)
        for rec in records:
            counts[rec.label] += 1
        return counts

    def extend(self, new_records: Iterable[SampleRecord]) -> "Manifest":
        """Return a new manifest with records appended (manifests are immutable)."""
        return Manifest(self.records + tuple(new_records), self.schema_version)


@dataclass(frozen=True)
class IngestResult:
    manifest: Manifest
    skipped: tuple[str, ...]


def _is_decodable_image(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (UnidentifiedImageError, OSError, ValueError):
        return False


def ingest_directory(
    root: Path | str,
    labeling: Mapping[str, EthnicLabel | str] | None = None,
    source: str | None = None,
) -> IngestResult:
    """Scan `root`, one class per immediate subdirectory, into a manifest.

    `labeling` maps subdirectory names to labels; by default subdirectory
    names must be class names. Non-decodable files are skipped and reported.
    Records are sorted by path so repeated ingests are byte-identical.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingInputError(f"ingest root does not exist: {root}")
    if source is None:
        source = root.name

    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    label_by_dir: dict[str, EthnicLabel] = {}
    for sub in subdirs:
        if labeling is not None:
            if sub.name not in labeling:
                raise ValueError(f"subdirectory {sub.name!r} has no label mapping")
            mapped = labeling[sub.name]
            label_by_dir[sub.name] = (
                mapped if isinstance(mapped, EthnicLabel) else EthnicLabel.from_name(mapped)
            )
        else:
            try:
                label_by_dir[sub.name] = EthnicLabel.from_name(sub.name)
            except ValueError:
                raise ValueError(
                    f"subdirectory {sub.name!r} is not a class name and no labeling map was given"
                ) from None

    records: list[SampleRecord] = []
    skipped: list[str] = []
    # Loose files directly under root belong to no class: count them as skipped.
    for entry in sorted(root.iterdir()):
        if entry.is_file():
            skipped.append(entry.relative_to(root).as_posix())

    for sub in subdirs:
        label = label_by_dir[sub.name]
        for path in sorted(p for p in sub.rglob("*") if p.is_file()):
            rel = path.relative_to(root).as_posix()
            if _is_decodable_image(path):
                records.append(SampleRecord(id=rel, path=rel, label=label, source=source))
            else:
                skipped.append(rel)

    if not records:
        raise ValueError(f"no images found under {root}")
    records.sort(key=lambda r: r.path)
    return IngestResult(Manifest(tuple(records)), tuple(skipped))


def write_manifest(manifest: Manifest, path: Path | str) -> None:
    lines = [MANIFEST_HEADER]
    for rec in manifest.records:
        lines.append(
            "\t".join(
                (
                    rec.id,
                    rec.path,
                    str(int(rec.label)),
                    rec.source,
                    rec.augmented_from if rec.augmented_from is not None else "-",
                    str(rec.noise_seed) if rec.noise_seed is not None else "-",
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path | str) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"manifest file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"{path}:{n}: expected 6 tab-separated fields, got {len(parts)}")
        rid, rpath, code, src, parent, noise_seed = parts
        records.append(
            SampleRecord(
                id=rid,
                path=rpath,
                label=EthnicLabel(int(code)),
                source=src,
                augmented_from=None if parent == "-" else parent,
                noise_seed=None if noise_seed == "-" else int(noise_seed),
            )
        )
    return Manifest(tuple(records))


# ---------------------------------------------------------------------------
# Fold splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """One fold's stratified train/val/test partition of manifest ids."""

    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int = 0

    def subset(self, name: str) -> tuple[str, ...]:
        if name not in SUBSET_NAMES:
            raise ValueError(f"unknown subset {name!r}")
        return getattr(self, f"{name}_ids")

    def all_ids(self) -> frozenset[str]:
        return frozenset(self.train_ids) | frozenset(self.val_ids) | frozenset(self.test_ids)


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Apportion `total` into len(ratios) integer parts summing exactly to total."""
    quotas = [r * total for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    remainder = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def _allocate_fold_counts(
    class_sizes: Sequence[int], ratios: Sequence[float], subset_totals: Sequence[int]
) -> list[list[int]]:
    """Round the per-class x per-subset quota table to integers.

    Row sums must equal class sizes, column sums must equal the subset
    totals, and every cell stays within floor/ceil of its real quota
    (so per-class proportions are exact to +/-1 sample). With 4 classes
    and 3 subsets the feasible roundings are few enough to enumerate;
    among exact solutions the one keeping the largest fractional parts
    wins, with lexicographic order breaking ties deterministically.
    """
    quotas = [[r * n for r in ratios] for n in class_sizes]
    floors = [[int(np.floor(q)) for q in row] for row in quotas]
    fracs = [[q - f for q, f in zip(qrow, frow)] for qrow, frow in zip(quotas, floors)]
    deficits = [n - sum(frow) for n, frow in zip(class_sizes, floors)]

    n_subsets = len(ratios)
    per_row_choices = []
    for c, d in enumerate(deficits):
        choices = [combo for combo in itertools.combinations(range(n_subsets), d)]
        per_row_choices.append(choices)

    target_extra = [t - sum(frow[s] for frow in floors) for s, t in enumerate(subset_totals)]

    best = None
    for combo in itertools.product(*per_row_choices):
        extra = [0] * n_subsets
        for cells in combo:
            for s in cells:
                extra[s] += 1
        if extra != target_extra:
            continue
        score = sum(fracs[c][s] for c, cells in enumerate(combo) for s in cells)
        key = (-score, combo)
        if best is None or key < best[0]:
            best = (key, combo)
    if best is None:
        # Controlled rounding of a 2-way table with consistent margins is
        # always feasible; reaching here means the margins were inconsistent.
        raise ValueError("no integer allocation matches the requested subset totals")

    counts = [list(frow) for frow in floors]
    for c, cells in enumerate(best[1]):
        for s in cells:
            counts[c][s] += 1
    return counts


def _fold_rng(seed: int, fold: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, fold])))


def kfold_split(
    manifest: Manifest,
    k: int,
    ratios: tuple[float, float, float] = (0.75, 0.10, 0.15),
    seed: int = 0,
) -> list[SplitPlan]:
    """Draw k independent stratified train/val/test partitions.

    Each fold is a fresh random re-split of the whole manifest at the given
    ratios (not a rotating-block k-fold), stratified by class, with subset
    sizes exact at the global level and exact to +/-1 per class.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(ratios) != 3:
        raise ValueError("ratios must be a (train, val, test) triple")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be nonnegative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1.0, got {sum(ratios)}")
    if any(rec.is_augmented for rec in manifest.records):
        raise ValueError("kfold_split operates on un-augmented manifests")

    ids_by_class: dict[EthnicLabel, list[str]] = {label: [] for label in EthnicLabel}
    for rec in manifest.records:
        ids_by_class[rec.label].append(rec.id)
    for label in EthnicLabel:
        if 0 < len(ids_by_class[label]) < k:
            raise ValueError(
                f"class {label.display_name} has {len(ids_by_class[label])} samples, fewer than k={k}"
            )

    present = [label for label in EthnicLabel if ids_by_class[label]]
    class_sizes = [len(ids_by_class[label]) for label in present]
    subset_totals = _largest_remainder(len(manifest), ratios)

    plans = []
    for fold in range(k):
        rng = _fold_rng(seed, fold)
        counts = _allocate_fold_counts(class_sizes, ratios, subset_totals)
        subsets: list[list[str]] = [[], [], []]
        for row, label in enumerate(present):
            ids = ids_by_class[label]
            perm = [ids[i] for i in rng.permutation(len(ids))]
            start = 0
            for s in range(3):
                subsets[s].extend(perm[start : start + counts[row][s]])
                start += counts[row][s]
        plans.append(
            SplitPlan(
                fold_index=fold,
                train_ids=tuple(subsets[0]),
                val_ids=tuple(subsets[1]),
                test_ids=tuple(subsets[2]),
                seed=seed,
            )
        )
    return plans


def write_splits(plans: Sequence[SplitPlan], path: Path | str) -> None:
    lines = [SPLIT_HEADER]
    for plan in plans:
        for subset in SUBSET_NAMES:
            for rid in plan.subset(subset):
                lines.append(f"{plan.fold_index}\t{subset}\t{rid}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_splits(path: Path | str) -> list[SplitPlan]:
    """Read fold plans back. The generation seed is not part of the file
    format, so loaded plans carry seed=0."""
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"split file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SPLIT_HEADER:
        raise FormatError(f"{path}: missing split header {SPLIT_HEADER!r}")
    by_fold: dict[int, dict[str, list[str]]] = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{n}: expected 3 tab-separated fields")
        fold, subset, rid = parts
        if subset not in SUBSET_NAMES:
            raise FormatError(f"{path}:{n}: unknown subset {subset!r}")
        by_fold.setdefault(int(fold), {s: [] for s in SUBSET_NAMES})[subset].append(rid)
    plans = []
    for fold in sorted(by_fold):
        sets = by_fold[fold]
        plans.append(
            SplitPlan(
                fold_index=fold,
                train_ids=tuple(sets["train"]),
                val_ids=tuple(sets["val"]),
                test_ids=tuple(sets["test"]),
            )
        )
    return plans


# ---------------------------------------------------------------------------
# Class balancing by noisy duplication
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BalanceResult:
    manifest: Manifest
    train_ids: tuple[str, ...]
    added: tuple[SampleRecord, ...]


def augment_pixels(parent: np.ndarray, sigma: float, noise_seed: int) -> np.ndarray:
    """Regenerate a noisy duplicate: clamp(parent + N(0, sigma^2)) on 8-bit pixels.

    Pure function of (parent, sigma, noise_seed), so stored seeds reproduce
    augmented pixels bit-identically.
    """
    if parent.dtype != np.uint8:
        raise ValueError(f"parent pixels must be uint8, got {parent.dtype}")
    rng = np.random.Generator(np.random.PCG64(noise_seed))
    noise = rng.normal(0.0, sigma, size=parent.shape)
    noisy = np.rint(parent.astype(np.float64) + noise)
    return np.clip(noisy, 0, 255).astype(np.uint8)


def balance_classes(
    manifest: Manifest,
    train_ids: Sequence[str],
    sigma: float = 5.0,
    seed: int = 0,
) -> BalanceResult:
    """Equalize per-class training counts by adding noisy-duplicate records.

    Every class is brought up to the majority class's count. Added records
    reference their parent via `augmented_from` and carry the noise seed that
    regenerates their pixels. Original records are untouched; a new manifest
    is returned. Applying the result again adds nothing (idempotent).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    train_records = [manifest.get(rid) for rid in train_ids]
    by_class: dict[EthnicLabel, list[SampleRecord]] = {label: [] for label in EthnicLabel}
    for rec in train_records:
        by_class[rec.label].append(rec)
    counts = {label: len(recs) for label, recs in by_class.items()}
    if any(n == 0 for n in counts.values()):
        empty = next(label for label, n in counts.items() if n == 0)
        raise ValueError(f"training subset has no samples for class {empty.display_name}")
    majority = max(counts.values())

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB417])))
    added: list[SampleRecord] = []
    existing_ids = set(manifest.ids())
    for label in EthnicLabel:
        deficit = majority - counts[label]
        if deficit == 0:
            continue
        # Duplicate only original records; shuffled round-robin spreads copies
        # evenly over the class's parents.
        parents = [rec for rec in by_class[label] if not rec.is_augmented]
        if not parents:
            raise ValueError(
                f"class {label.display_name} has only augmented training samples; cannot balance"
            )
        order = [parents[i] for i in rng.permutation(len(parents))]
        copy_counter: dict[str, int] = {}
        for i in range(deficit):
            parent = order[i % len(order)]
            n = copy_counter.get(parent.id, 0) + 1
            copy_counter[parent.id] = n
            new_id = f"{parent.id}::aug{n}"
            while new_id in existing_ids:
                n += 1
                copy_counter[parent.id] = n
                new_id = f"{parent.id}::aug{n}"
            existing_ids.add(new_id)
            added.append(
                SampleRecord(
                    id=new_id,
                    path=parent.path,
                    label=parent.label,
                    source=parent.source,
                    augmented_from=parent.id,
                    noise_seed=int(rng.integers(0, 2**63 - 1)),
                )
            )

    new_manifest = manifest.extend(added) if added else manifest
    return BalanceResult(
        manifest=new_manifest,
        train_ids=tuple(train_ids) + tuple(rec.id for rec in added),
        added=tuple(added),
    )
