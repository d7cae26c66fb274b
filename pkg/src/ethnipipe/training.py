"""Fine-tuning loop: SGD with momentum minimizing categorical cross-entropy,
plus hyper-parameter grid search and finite-difference gradient verification.

Augmented (noisy duplicate) records are never stored in the tensor cache;
their pixels are regenerated at batch time from the parent's cached tensor
and the record's stored noise seed, so ``TrainConfig.noise_sigma`` must match
the sigma used when the training subset was balanced.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model, nn
from .cache import PreprocessedCache
from .dataset import Manifest, SampleRecord, SplitPlan, balance_classes
from .dataset import augment_pixels
from .errors import ConfigError, FormatError, MissingInputError
from .preprocess import triplicate

TRAINLOG_HEADER = "#ethnipipe-trainlog v1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    noise_sigma: float = 5.0
    seed: int = 0
    freeze_mask: tuple[str, ...] = ()  # layer names excluded from updates

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        object.__setattr__(self, "freeze_mask", tuple(self.freeze_mask))


@dataclass
class OptimizerState:
    """Per-parameter velocity buffers for SGD with momentum."""

    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({key: np.zeros_like(value) for key, value in params.items()})


def sgd_step(
    state: model.ModelState,
    grads: Mapping[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
    momentum: float,
    frozen: frozenset[str] = frozenset(),
) -> tuple[model.ModelState, OptimizerState]:
    """v <- momentum*v + g; w <- w - lr*v for every non-frozen parameter.

    Updates in place and returns (state, opt). `frozen` holds layer names
    (e.g. 'conv1_1'), not parameter keys.
    """
    for key, grad in grads.items():
        if key.rsplit(".", 1)[0] in frozen:
            continue
        param = state.params[key]
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient for {key!r} has shape {grad.shape}, parameter is {param.shape}"
            )
        v = opt.velocity[key]
        v *= momentum
        v += grad
        param -= lr * v
    return state, opt


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    entries: list[EpochStats] = field(default_factory=list)

    def append(self, stats: EpochStats) -> None:
        if stats.epoch != len(self.entries) + 1:
            raise ValueError(f"epoch {stats.epoch} logged out of order")
        self.entries.append(stats)

    def key(self) -> tuple:
        """The deterministic part of the log: everything except wall-clock."""
        return tuple((e.epoch, e.train_loss, e.val_loss, e.val_acc) for e in self.entries)

    def to_text(self) -> str:
        lines = [TRAINLOG_HEADER, "epoch\ttrain_loss\tval_loss\tval_acc\tseconds"]
        for e in self.entries:
            lines.append(
                f"{e.epoch}\t{e.train_loss!r}\t{e.val_loss!r}\t{e.val_acc!r}\t{e.seconds:.3f}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainLog":
        lines = text.splitlines()
        if not lines or lines[0] != TRAINLOG_HEADER:
            raise FormatError(f"missing train-log header {TRAINLOG_HEADER!r}")
        log = cls()
        for line in lines[2:]:
            if not line:
                continue
            epoch, train_loss, val_loss, val_acc, seconds = line.split("\t")
            log.append(
                EpochStats(int(epoch), float(train_loss), float(val_loss),
                           float(val_acc), float(seconds))
            )
        return log

    def render_table(self) -> str:
        header = f"{'epoch':>5}  {'train loss':>10}  {'val loss':>10}  {'val acc':>8}  {'sec':>7}"
        rows = [header, "-" * len(header)]
        for e in self.entries:
            rows.append(
                f"{e.epoch:>5}  {e.train_loss:>10.5f}  {e.val_loss:>10.5f}"
                f"  {e.val_acc:>8.4f}  {e.seconds:>7.2f}"
            )
        return "\n".join(rows) + "\n"


def write_trainlog(log: TrainLog, path: Path | str) -> None:
    Path(path).write_text(log.to_text(), encoding="utf-8")


def read_trainlog(path: Path | str) -> TrainLog:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"train log not found: {path}")
    return TrainLog.from_text(path.read_text(encoding="utf-8"))


@dataclass
class TrainResult:
    final_state: model.ModelState
    best_state: model.ModelState
    best_epoch: int
    log: TrainLog


def resolve_tensor(
    record: SampleRecord, manifest: Manifest, cache: PreprocessedCache, sigma: float
) -> np.ndarray:
    """The (80, 80, 3) network input for a record.

    Original records come straight from the cache; augmented records are
    rebuilt from the parent's cached tensor plus the stored noise seed.
    """
    if record.augmented_from is None:
        return cache.get(record.id)
    parent = cache.get(record.augmented_from)
    gray = np.rint(parent[:, :, 0] * 255.0).astype(np.uint8)
    assert record.noise_seed is not None
    return triplicate(augment_pixels(gray, sigma, record.noise_seed))


def _batch_from(
    records: Sequence[SampleRecord],
    manifest: Manifest,
    cache: PreprocessedCache,
    sigma: float,
) -> tuple[np.ndarray, np.ndarray]:
    batch = np.stack([resolve_tensor(rec, manifest, cache, sigma) for rec in records])
    labels = np.array([int(rec.label) for rec in records], dtype=np.intp)
    return batch, labels


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


def normalization_stats(
    ids: Sequence[str], cache: PreprocessedCache
) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the cached tensors for `ids` (float64
    accumulation, zero-variance channels fall back to std 1)."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for rid in ids:
        tensor = cache.get(rid).astype(np.float64)
        total += tensor.sum(axis=(0, 1))
        total_sq += (tensor**2).sum(axis=(0, 1))
        count += tensor.shape[0] * tensor.shape[1]
    if count == 0:
        raise ValueError("cannot compute normalization statistics over zero ids")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.sqrt(var)
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def _evaluate_loss_acc(
    state: model.ModelState,
    records: Sequence[SampleRecord],
    manifest: Manifest,
    cache: PreprocessedCache,
    sigma: float,
    batch_size: int,
) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch, labels = _batch_from(chunk, manifest, cache, sigma)
        probs = model.forward(state, batch.astype(state.dtype), mode="eval")
        total_loss += nn.cross_entropy(probs, labels) * len(chunk)
        correct += int((probs.argmax(axis=1) == labels).sum())
    n = len(records)
    return total_loss / n, correct / n


def train(
    state: model.ModelState,
    plan: SplitPlan,
    manifest: Manifest,
    cache: PreprocessedCache,
    cfg: TrainConfig,
    progress: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Fine-tune `state` on one fold.

    The training subset is balanced by noisy duplication (sigma and seed from
    `cfg`), input standardization statistics are computed over the original
    (un-augmented) training tensors and stored on the state, then SGD runs
    for `cfg.epochs` epochs with a seeded shuffle per epoch. The best model
    by validation accuracy (ties: lower validation loss, then earlier epoch)
    is kept alongside the final one.
    """
    if not plan.train_ids or not plan.val_ids:
        raise ValueError("plan must provide non-empty train and val subsets")
    balanced = balance_classes(manifest, plan.train_ids, sigma=cfg.noise_sigma, seed=cfg.seed)
    train_records = sorted(
        (balanced.manifest.get(rid) for rid in balanced.train_ids), key=lambda r: r.id
    )
    val_records = [manifest.get(rid) for rid in plan.val_ids]
    for rec in train_records + val_records:
        if not rec.is_augmented and rec.id not in cache:
            raise MissingInputError(f"preprocessed cache is missing id {rec.id!r}")

    mean, std = normalization_stats(plan.train_ids, cache)
    state.norm_mean, state.norm_std = mean, std
    frozen = frozenset(cfg.freeze_mask)
    opt = OptimizerState.zeros_like(state.params)

    log = TrainLog()
    best: tuple[float, float, int] | None = None  # (-acc, loss, epoch)
    best_state = state.copy()
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(train_records))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_records[i] for i in order[start : start + cfg.batch_size]]
            batch, labels = _batch_from(chunk, balanced.manifest, cache, cfg.noise_sigma)
            loss, _, grads = model.loss_and_grads(state, batch.astype(state.dtype), labels)
            sgd_step(state, grads, opt, cfg.learning_rate, cfg.momentum, frozen)
            loss_sum += loss * len(chunk)
        train_loss = loss_sum / len(train_records)
        val_loss, val_acc = _evaluate_loss_acc(
            state, val_records, manifest, cache, cfg.noise_sigma, cfg.batch_size
        )
        stats = EpochStats(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_acc=val_acc,
            seconds=time.perf_counter() - started,
        )
        log.append(stats)
        if progress is not None:
            progress(stats)
        rank = (-val_acc, val_loss, epoch)
        if best is None or rank < best:
            best = rank
            best_state = state.copy()
            best_epoch = epoch
    return TrainResult(final_state=state, best_state=best_state, best_epoch=best_epoch, log=log)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

_GRID_KEYS = ("learning_rate", "momentum", "batch_size", "epochs", "noise_sigma", "head_width")


@dataclass(frozen=True)
class GridResult:
    params: tuple[tuple[str, object], ...]
    mean_val_accuracy: float
    fold_accuracies: tuple[float, ...]

    def as_dict(self) -> dict:
        return dict(self.params)


def grid_search(
    grid: Mapping[str, Sequence],
    plans: Sequence[SplitPlan],
    manifest: Manifest,
    cache: PreprocessedCache,
    base_cfg: TrainConfig,
    state_factory: Callable[[Mapping[str, object]], model.ModelState],
) -> list[GridResult]:
    """Train every point of the cartesian product of `grid` on every plan
    and rank points by mean best-epoch validation accuracy (descending),
    ties broken by the point's sorted-key JSON serialization.

    `state_factory` receives the candidate's parameter dict and must return
    a fresh initial state (this is where `head_width` takes effect).
    """
    if not grid:
        raise ConfigError("hyper-parameter grid is empty")
    if not plans:
        raise ConfigError("grid search needs at least one fold plan")
    for key, values in grid.items():
        if key not in _GRID_KEYS:
            raise ConfigError(f"unknown grid key {key!r} (supported: {', '.join(_GRID_KEYS)})")
        if not values:
            raise ConfigError(f"grid key {key!r} has an empty candidate list")

    keys = sorted(grid)
    results: list[GridResult] = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        cfg_fields = {k: v for k, v in params.items() if k != "head_width"}
        cfg = replace(base_cfg, **cfg_fields)
        accs = []
        for plan in plans:
            result = train(state_factory(params), plan, manifest, cache, cfg)
            accs.append(max(e.val_acc for e in result.log.entries))
        results.append(
            GridResult(
                params=tuple(sorted(params.items())),
                mean_val_accuracy=float(np.mean(accs)),
                fold_accuracies=tuple(accs),
            )
        )
    results.sort(
        key=lambda r: (-r.mean_val_accuracy, json.dumps(r.as_dict(), sort_keys=True))
    )
    return results


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def _loss_and_pattern(
    state: model.ModelState, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Loss plus the activation pattern: relu sign masks and pool argmax
    indices. Two points with the same pattern lie on the same smooth piece
    of the loss surface."""
    probs, cache = model.forward_with_cache(state, batch, mode="eval")
    pattern: list[np.ndarray] = []
    for layer, saved in zip(state.spec.layers, cache):
        if layer.kind == "relu":
            pattern.append(saved > 0)
        elif layer.kind == "pool":
            pattern.append(saved[1])
    return nn.cross_entropy(probs, labels), pattern


def gradient_check(
    state: model.ModelState,
    batch: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-3,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over `num_coords` sampled parameter coordinates.

    Runs in float64 regardless of the state's dtype; float32 round-off would
    otherwise drown the comparison. Coordinates whose +/-epsilon perturbation
    flips a relu sign or a pool argmax are skipped and resampled: across such
    a kink the loss is not differentiable, so a central difference there
    estimates nothing the analytic gradient should match.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    work = state.astype(np.float64)
    batch64 = batch.astype(np.float64)

    loss, _, grads = model.loss_and_grads(work, batch64, labels)
    if not np.isfinite(loss):
        raise ValueError(f"loss is not finite: {loss}")
    _, base_pattern = _loss_and_pattern(work, batch64, labels)

    rng = np.random.default_rng(seed)
    keys = sorted(work.params)
    sizes = np.array([work.params[k].size for k in keys])
    bounds = np.cumsum(sizes)
    order = rng.permutation(int(bounds[-1]))

    worst = 0.0
    checked = 0
    for flat in order:
        if checked >= num_coords:
            break
        key_idx = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[key_idx - 1] if key_idx else 0))
        param = work.params[keys[key_idx]].reshape(-1)
        original = param[offset]

        param[offset] = original + epsilon
        loss_hi, pattern_hi = _loss_and_pattern(work, batch64, labels)
        param[offset] = original - epsilon
        loss_lo, pattern_lo = _loss_and_pattern(work, batch64, labels)
        param[offset] = original
        if not (np.isfinite(loss_hi) and np.isfinite(loss_lo)):
            raise ValueError("perturbed loss is not finite")
        smooth = all(
            np.array_equal(a, b) and np.array_equal(a, c)
            for a, b, c in zip(base_pattern, pattern_hi, pattern_lo)
        )
        if not smooth:
            continue

        numeric = (loss_hi - loss_lo) / (2 * epsilon)
        analytic = float(grads[keys[key_idx]].reshape(-1)[offset])
        scale = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
        checked += 1
    if checked < num_coords:
        raise ValueError(
            f"only {checked} of the requested {num_coords} coordinates avoid "
            "relu/pool kinks at this epsilon"
        )
    return worst
