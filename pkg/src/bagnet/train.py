"""Loss, optimiser, fold splitting, and the train / evaluate loops."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, load_sample
from .errors import ConfigurationError, SampleLoadError, ShapeError, TrainingDivergedError
from .metrics import (
    aggregate_folds,
    compute_metrics,
    confusion,
    threshold,
    write_metrics_csv,
)
from .model import BagnetConfig, ModelParams, bagnet_forward, init_params
from .tensor import INFER, TRAIN, Tape, Tensor, record_op

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 12
    folds: int = 3
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bce_clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.folds < 1:
            raise ConfigurationError("folds must be >= 1 (1 disables cross-validation)")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if not 0 < self.bce_clamp_eps < 0.5:
            raise ConfigurationError("bce_clamp_eps must lie in (0, 0.5)")


def split_config_dict(d: dict):
    """Split a flat JSON config into (TrainConfig kwargs, BagnetConfig kwargs)."""
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(BagnetConfig)}
    unknown = set(d) - train_keys - model_keys
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return ({k: v for k, v in d.items() if k in train_keys}, {k: v for k, v in d.items() if k in model_keys})


# --------------------------------------------------------------------------
# Loss and optimiser
# --------------------------------------------------------------------------

def bce_loss(pred: Tensor, target, clamp_eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [eps, 1 - eps] first."""
    y = np.asarray(getattr(target, "data", target))
    if y.shape != pred.shape:
        raise ShapeError(f"bce_loss: pred shape {pred.shape} != target shape {y.shape}")
    p_raw = pred.data
    y = y.astype(p_raw.dtype)
    lo, hi = p_raw.dtype.type(clamp_eps), p_raw.dtype.type(1 - clamp_eps)
    p = np.clip(p_raw, lo, hi)
    count = p.size
    value = -(y * np.log(p) + (1 - y) * np.log1p(-p)).sum() / count
    out = np.asarray(value, dtype=p_raw.dtype).reshape(1, 1, 1, 1)

    def vjp(g):
        inside = (p_raw >= lo) & (p_raw <= hi)
        grad = (p - y) / (p * (1 - p)) / count
        return (g.reshape(()) * grad * inside,)

    return record_op("bce", out, (pred,), vjp)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: Sequence[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(t.data) for t in tensors], v=[np.zeros_like(t.data) for t in tensors], t=0)


def adam_step(tensors: Sequence[Tensor], grads, state: AdamState, config: TrainConfig, lr: Optional[float] = None):
    """One bias-corrected Adam update, in place on ``tensors`` and ``state``.

    ``grads`` defaults to each tensor's ``.grad``; a missing gradient counts
    as zero.
    """
    if grads is None:
        grads = [t.grad for t in tensors]
    if not (len(tensors) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step: parameter, gradient and state lists differ in length")
    lr = config.learning_rate if lr is None else lr
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for i, (t, g) in enumerate(zip(tensors, grads)):
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.shape or state.m[i].shape != t.shape or state.v[i].shape != t.shape:
            raise ShapeError(f"adam_step: shape mismatch for parameter {t.name or i}: {t.shape} vs grad {g.shape}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.data = (t.data - step).astype(t.dtype)
    return tensors, state


def kfold_split(n: int, k: int, seed: int) -> list:
    """Seeded shuffle of 0..n-1 cut into k contiguous chunks; the first n % k are one larger."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [chunk.tolist() for chunk in np.array_split(perm, k)]


# --------------------------------------------------------------------------
# Train / evaluate
# --------------------------------------------------------------------------

@dataclass
class RunRecord:
    train_config: dict
    model_config: dict
    seed: int
    folds: list = field(default_factory=list)
    aggregate: Optional[dict] = None
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    def write(self, path) -> None:
        """Deterministic JSON (no timing); timing goes to ``timing.json`` next to it."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (path.parent / "timing.json").write_text(json.dumps({"wall_clock_seconds": self.wall_clock}) + "\n")


def _load_arrays(manifest: DatasetManifest, indices, target_size, skip_errors=False):
    images, masks, ids = [], [], []
    for i in indices:
        s = manifest.samples[i]
        try:
            img, msk = load_sample(s, target_size, manifest.base_dir)
        except SampleLoadError:
            if not skip_errors:
                raise
            log.exception("skipping sample %s", s.id)
            continue
        images.append(img.data)
        masks.append(msk.data)
        ids.append(s.id)
    return images, masks, ids


def _assert_binary(mask: np.ndarray, where: str):
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError(f"non-binary mask reached {where}")


def predict_probs(params: ModelParams, images: np.ndarray, batch_size: int = 12) -> np.ndarray:
    """Infer-mode probabilities for an (n, c, h, w) array."""
    out = []
    for start in range(0, len(images), batch_size):
        batch = Tensor(images[start:start + batch_size].astype(params.dtype))
        out.append(bagnet_forward(batch, params, INFER).data)
    return np.concatenate(out)


def score_predictions(probs, masks, ids, t: float = 0.5) -> list:
    """``[(id, MetricsReport)]`` for probability maps against binary masks."""
    rows = []
    for sid, prob, gt in zip(ids, probs, masks):
        _assert_binary(gt, "metrics")
        rows.append((sid, compute_metrics(confusion(threshold(prob, t), gt.astype(np.uint8)))))
    return rows


def evaluate_arrays(params, images, masks, ids, t: float = 0.5) -> list:
    """``[(id, MetricsReport)]`` for the given image/mask arrays."""
    return score_predictions(predict_probs(params, np.asarray(images)), masks, ids, t)


def train_fold(
    params: ModelParams,
    images: np.ndarray,
    masks: np.ndarray,
    config: TrainConfig,
    fold: int = 0,
    lr_schedule: Optional[Callable[[int], float]] = None,
    on_step: Optional[Callable] = None,
):
    """Optimise ``params`` in place; returns (epoch_losses, step_losses, adam_state)."""
    tensors = params.tensors()
    state = AdamState.zeros_like(tensors)
    n = len(images)
    if n == 0:
        raise ValueError("no training samples")
    _assert_binary(masks, "the loss")
    epoch_losses, step_losses = [], []
    for epoch in range(config.epochs):
        lr = config.learning_rate if lr_schedule is None else lr_schedule(epoch)
        order = np.random.default_rng([config.seed, fold, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = Tensor(images[idx].astype(params.dtype))
            with Tape() as tape:
                pred = bagnet_forward(x, params, TRAIN)
                loss = bce_loss(pred, masks[idx], config.bce_clamp_eps)
            value = loss.item()
            if not np.isfinite(value):
                log.error("non-finite loss at fold %d epoch %d batch %d", fold, epoch, b)
                raise TrainingDivergedError(f"non-finite loss at fold {fold}, epoch {epoch}, batch {b}")
            tape.backward(loss)
            adam_step(tensors, None, state, config, lr=lr)
            step_losses.append(value)
            total += value * len(idx)
            if on_step is not None:
                on_step(epoch, b, value)
        epoch_losses.append(total / n)
        log.info("fold %d epoch %d/%d loss %.6f", fold, epoch + 1, config.epochs, epoch_losses[-1])
    return epoch_losses, step_losses, state


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    model_config: Optional[BagnetConfig] = None,
    out_dir=None,
    folds_to_run: Optional[Sequence[int]] = None,
    lr_schedule: Optional[Callable[[int], float]] = None,
) -> RunRecord:
    """Cross-validated training.

    With ``config.folds == 1`` the model trains on every sample and is
    evaluated on the same samples. Each fold starts from
    ``init_params(model_config, seed + fold)`` and writes ``fold_<k>.ckpt``;
    the run writes ``run_record.json`` and ``metrics.csv`` into ``out_dir``.
    """
    started = time.perf_counter()
    if len(manifest) == 0:
        raise ValueError("manifest has no samples")
    if model_config is None:
        model_config = BagnetConfig(input_size=manifest.target_size)
    if tuple(model_config.input_size) != tuple(manifest.target_size):
        raise ConfigurationError(
            f"model input_size {model_config.input_size} != manifest target_size {manifest.target_size}"
        )
    images, masks, ids = _load_arrays(manifest, range(len(manifest)), model_config.input_size)
    images, masks = np.concatenate(images), np.concatenate(masks)

    n = len(manifest)
    if config.folds == 1:
        splits = [(list(range(n)), list(range(n)))]
    else:
        chunks = kfold_split(n, config.folds, config.seed)
        splits = [
            (sorted(i for j, c in enumerate(chunks) if j != f for i in c), chunks[f]) for f in range(config.folds)
        ]
    selected = range(len(splits)) if folds_to_run is None else list(folds_to_run)
    for f in selected:
        if not 0 <= f < len(splits):
            raise ConfigurationError(f"fold {f} out of range for {len(splits)} fold(s)")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    record = RunRecord(train_config=asdict(config), model_config=model_config.to_dict(), seed=config.seed)
    csv_rows, per_fold_reports = [], []
    for f in selected:
        train_idx, test_idx = splits[f]
        params = init_params(model_config, config.seed + f)
        epoch_losses, step_losses, state = train_fold(
            params, images[train_idx], masks[train_idx], config, fold=f, lr_schedule=lr_schedule
        )
        rows = evaluate_arrays(params, images[test_idx], masks[test_idx], [ids[i] for i in test_idx])
        per_fold_reports.append([r for _, r in rows])
        csv_rows += [(f, sid, r) for sid, r in rows]
        record.folds.append(
            {
                "fold": f,
                "train_ids": [ids[i] for i in train_idx],
                "test_ids": [ids[i] for i in test_idx],
                "epoch_losses": epoch_losses,
                "step_losses": step_losses,
                "metrics": [{"id": sid, **r.as_dict()} for sid, r in rows],
            }
        )
        if out is not None:
            save_checkpoint(params, state, out / f"fold_{f}.ckpt")

    agg = aggregate_folds(per_fold_reports)
    record.aggregate = {"mean": agg.mean.as_dict(), "std": agg.std.as_dict(), "n_folds": agg.n_folds}
    record.wall_clock = time.perf_counter() - started
    if out is not None:
        record.write(out / "run_record.json")
        write_metrics_csv(out / "metrics.csv", csv_rows)
    return record


def evaluate(
    checkpoint,
    manifest: DatasetManifest,
    csv_path=None,
    indices: Optional[Sequence[int]] = None,
    skip_errors: bool = False,
    overlays_dir=None,
    fold=0,
) -> list:
    """Score a checkpoint on (a subset of) a manifest; returns ``[(id, MetricsReport)]``."""
    if isinstance(checkpoint, ModelParams):
        params = checkpoint
    else:
        params, _ = load_checkpoint(checkpoint)
    if tuple(params.config.input_size) != tuple(manifest.target_size):
        raise ConfigurationError(
            f"checkpoint input_size {params.config.input_size} != manifest target_size {manifest.target_size}"
        )
    indices = range(len(manifest)) if indices is None else indices
    images, masks, ids = _load_arrays(manifest, indices, params.config.input_size, skip_errors)
    if not ids:
        return []
    images, masks = np.concatenate(images), np.concatenate(masks)
    probs = predict_probs(params, images)
    rows = score_predictions(probs, masks, ids)
    if csv_path is not None:
        write_metrics_csv(csv_path, [(fold, sid, r) for sid, r in rows])
    if overlays_dir is not None:
        from .overlay import write_overlay

        od = Path(overlays_dir)
        od.mkdir(parents=True, exist_ok=True)
        for sid, img, prob in zip(ids, images, probs):
            write_overlay(img[0], threshold(prob, 0.5)[0], od / f"{sid}.png")
    return rows
