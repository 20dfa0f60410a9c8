"""Training protocol: early stopping, k-fold cross-validation, median-epoch refit
and recording-level inference by median aggregation of patch probabilities."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import PatchDataset, balance_by_replication, split_folds
from .metrics import Metrics, evaluate
from .models import (
    GENDERS,
    CoughCNN,
    ModelConfig,
    build_model,
    check_gender_coverage,
    gender_code,
    image_to_input,
    route_gender_specific,
    save_model,
)
from .nn import Adam, Tensor, no_grad
from .nn import functional as F

log = logging.getLogger(__name__)

ALL = "all"


class HarnessError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    k_folds: int = 5
    seed: int = 0
    eval_batch_size: int = 64

    def validate(self) -> None:
        for name in ("lr", "batch_size", "max_epochs", "patience", "k_folds", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise HarnessError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise HarnessError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if self.seed < 0:
            raise HarnessError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise HarnessError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    epochs_trained: int  # epoch of the kept (best) snapshot
    best_val_loss: float
    epochs_run: int
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train_loss, val_loss)


@dataclass
class FoldResult:
    fold_id: int
    epochs_trained: dict[str, int]
    best_val_loss: dict[str, float]
    metrics: Metrics
    predictions: list[tuple[str, float, int]]
    history: dict[str, list[tuple[int, float, float]]]


@dataclass
class CVResult:
    folds: list[FoldResult]
    mean: dict[str, float | None]
    models: list[dict[str, CoughCNN]]


class EarlyStopping:
    """Stop once the validation loss has not strictly decreased for `patience` epochs."""

    def __init__(self, patience: int, max_epochs: int):
        self.patience = patience
        self.max_epochs = max_epochs
        self.best_loss = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's loss; returns True when it is a new best."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = float(val_loss)
            self.best_epoch = self.epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience or self.epoch >= self.max_epochs


def _child_seq(seq: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seq.entropy, spawn_key=tuple(seq.spawn_key) + tuple(key))


def _as_seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _arrays(ds: PatchDataset, model_config: ModelConfig):
    images = np.stack([it.patch.image for it in ds.items]) if len(ds) else None
    labels = ds.labels
    codes = None
    if model_config.uses_gender_input:
        if any(it.gender is None for it in ds.items):
            raise HarnessError("gender_based model: some patches have no gender")
        codes = np.stack([gender_code(it.gender) for it in ds.items])
    return images, labels, codes


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample would break batch-norm statistics
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches.pop()
    return batches


def _train_epoch(model: CoughCNN, opt: Adam, images, labels, codes, batch_size, rng) -> float:
    model.train()
    total, count = 0.0, 0
    for idx in _batches(len(labels), batch_size, rng):
        if len(idx) < 2:
            continue
        x = Tensor(image_to_input(images[idx]))
        loss = F.softmax_cross_entropy(model(x, None if codes is None else codes[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += float(loss.data) * len(idx)
        count += len(idx)
    return total / max(count, 1)


def dataset_loss(model: CoughCNN, ds: PatchDataset, batch_size: int = 64) -> float:
    """Mean patch-level cross-entropy in eval mode (no statistics updates)."""
    images, labels, codes = _arrays(ds, model.config)
    model.eval()
    total = 0.0
    with no_grad():
        for s in range(0, len(labels), batch_size):
            sl = slice(s, s + batch_size)
            logits = model(Tensor(image_to_input(images[sl])), None if codes is None else codes[sl])
            total += float(F.softmax_cross_entropy(logits, labels[sl]).data) * len(labels[sl])
    return total / len(labels)


def _check_trainable(ds: PatchDataset, what: str) -> None:
    if len(ds) == 0:
        raise HarnessError(f"{what} is empty")
    n_neg, n_pos = ds.counts()
    if n_neg == 0 or n_pos == 0:
        raise HarnessError(f"{what} holds a single class (negative={n_neg}, positive={n_pos})")


def train_fold(
    train_ds: PatchDataset,
    val_ds: PatchDataset | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed=0,
    val_loss_fn=None,
) -> tuple[CoughCNN, TrainLog]:
    """Train with Adam/cross-entropy and early stopping on the validation loss.

    `train_ds` is expected to be balanced already. After every epoch the
    validation loss is computed (by `val_loss_fn(model, epoch)` when given,
    otherwise on `val_ds`); training stops after `patience` epochs without a
    strict improvement or at `max_epochs`, and the best epoch's parameters are
    restored.
    """
    train_config.validate()
    _check_trainable(train_ds, "training split")
    if val_loss_fn is None and (val_ds is None or len(val_ds) == 0):
        raise HarnessError("validation split is empty")
    seq = _as_seq(seed)
    model = build_model(model_config, np.random.default_rng(_child_seq(seq, 0)))
    shuffle_rng = np.random.default_rng(_child_seq(seq, 1))
    opt = Adam(model.parameters(), lr=train_config.lr)
    images, labels, codes = _arrays(train_ds, model_config)

    stopper = EarlyStopping(train_config.patience, train_config.max_epochs)
    best_state = None
    history = []
    while not stopper.should_stop:
        train_loss = _train_epoch(model, opt, images, labels, codes, train_config.batch_size, shuffle_rng)
        epoch = stopper.epoch + 1
        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(model, epoch))
        else:
            val_loss = dataset_loss(model, val_ds, train_config.eval_batch_size)
        history.append((epoch, train_loss, val_loss))
        log.debug("epoch %d train_loss=%.5f val_loss=%.5f", epoch, train_loss, val_loss)
        if stopper.update(val_loss):
            best_state = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
    if best_state is None:
        raise HarnessError("validation loss was never finite; nothing to keep")
    model.load_state_dict(best_state)
    model.eval()
    return model, TrainLog(stopper.best_epoch, stopper.best_loss, stopper.epoch, history)


def fit_epochs(train_ds: PatchDataset, model_config: ModelConfig, train_config: TrainConfig, epochs: int,
               seed=0) -> tuple[CoughCNN, list[float]]:
    """Train for a fixed number of epochs without validation or early stopping."""
    _check_trainable(train_ds, "training material")
    seq = _as_seq(seed)
    model = build_model(model_config, np.random.default_rng(_child_seq(seq, 0)))
    shuffle_rng = np.random.default_rng(_child_seq(seq, 1))
    opt = Adam(model.parameters(), lr=train_config.lr)
    images, labels, codes = _arrays(train_ds, model_config)
    losses = [_train_epoch(model, opt, images, labels, codes, train_config.batch_size, shuffle_rng)
              for _ in range(epochs)]
    model.eval()
    return model, losses


# --- recording-level inference ----------------------------------------------

def median_probability(probs) -> float:
    """Median of patch probabilities (even count: mean of the two middle values)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no patch probabilities to aggregate")
    return float(np.median(p))


def patch_probabilities(models, patches, gender: str | None = None, batch_size: int = 64) -> np.ndarray:
    """Positive-class probability of every patch of one recording.

    `models` is a single model, or a ``{gender: model}`` mapping for
    gender-specific inference.
    """
    if not patches:
        raise ValueError("recording has no patches")
    model = route_gender_specific(models, gender) if isinstance(models, dict) else models
    codes = None
    if model.config.uses_gender_input:
        if gender is None:
            raise ValueError("gender_based model requires the recording's gender")
        codes = np.repeat(gender_code(gender)[None], len(patches), axis=0)
    images = np.stack([getattr(p, "image", p) for p in patches])
    out = []
    for s in range(0, len(patches), batch_size):
        out.append(model.predict_proba(image_to_input(images[s:s + batch_size]),
                                       None if codes is None else codes[s:s + batch_size]))
    return np.concatenate(out)


def predict_recording(models, patches, gender: str | None = None) -> float:
    return median_probability(patch_probabilities(models, patches, gender))


# --- cross-validation --------------------------------------------------------

def model_groups(model_config: ModelConfig, records) -> list[str]:
    """Names of the independently trained models: ``["all"]`` or one per gender."""
    if model_config.gender_mode != "gender_specific":
        return [ALL]
    present = {r.gender for r in records}
    if None in present:
        raise HarnessError("gender_specific mode: some records have no gender")
    check_gender_coverage(GENDERS, present)
    return list(GENDERS)


def _group_ds(ds: PatchDataset, group: str) -> PatchDataset:
    return ds if group == ALL else ds.subset(lambda it: it.gender == group)


def _group_records(records, group: str):
    return list(records) if group == ALL else [r for r in records if r.gender == group]


def _predictor(models: dict[str, CoughCNN]):
    return models[ALL] if ALL in models else models


def _mean_metrics(folds: list[FoldResult]) -> dict[str, float | None]:
    mean = {}
    for key in ("auc", "sensitivity", "specificity"):
        vals = [getattr(f.metrics, key) for f in folds]
        good = [v for v in vals if v is not None]
        if len(good) < len(vals):
            warnings.warn(f"{key} undefined in {len(vals) - len(good)} fold(s); excluded from the mean",
                          RuntimeWarning, stacklevel=3)
        mean[key] = float(np.mean(good)) if good else None
    return mean


def _fold_job(job):
    train_ds, val_ds, model_config, train_config, seed = job
    return train_fold(train_ds, val_ds, model_config, train_config, seed=seed)


def cross_validate(records, patches_by_id, model_config: ModelConfig, train_config: TrainConfig,
                   on_fold=None, workers: int = 1) -> CVResult:
    """k-fold cross-validation over manifest folds with recording-level metrics.

    Only the training split is balanced. Per-fold metrics come from median
    aggregated recording scores on the validation split; the mean is taken
    over folds where a metric is defined. With ``workers > 1`` the fold models
    are trained in separate processes; every fold draws from its own seed, so
    results do not depend on the worker count.
    """
    train_config.validate()
    model_config.validate()
    labelled = [r for r in records if not r.is_test]
    groups = model_groups(model_config, labelled)
    k = train_config.k_folds
    root = np.random.SeedSequence(train_config.seed)
    splits, jobs = [], []
    for fold in range(k):
        train_recs, val_recs = split_folds(labelled, k, fold)
        if not val_recs:
            raise HarnessError(f"fold {fold} has no validation recordings")
        splits.append(val_recs)
        for gi, group in enumerate(groups):
            train_ds = balance_by_replication(
                _group_ds(PatchDataset.from_records(train_recs, patches_by_id), group))
            val_ds = PatchDataset.from_records(_group_records(val_recs, group), patches_by_id)
            if len(val_ds) == 0:
                raise HarnessError(f"fold {fold} has no validation recordings for model group {group!r}")
            jobs.append((train_ds, val_ds, model_config, train_config, _child_seq(root, fold, gi)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trained = list(pool.map(_fold_job, jobs))
    else:
        trained = map(_fold_job, jobs)

    folds, fold_models = [], []
    trained = iter(trained)
    for fold, val_recs in enumerate(splits):
        models, epochs, best, history = {}, {}, {}, {}
        for group in groups:
            model, tlog = next(trained)
            models[group], epochs[group], best[group] = model, tlog.epochs_trained, tlog.best_val_loss
            history[group] = tlog.history
            log.info("fold %d [%s]: best epoch %d of %d, val loss %.5f", fold, group,
                     tlog.epochs_trained, tlog.epochs_run, tlog.best_val_loss)
        predictor = _predictor(models)
        preds = [(r.id, predict_recording(predictor, patches_by_id[r.id], r.gender), r.label) for r in val_recs]
        scores = np.array([p[1] for p in preds])
        labels = np.array([p[2] for p in preds])
        metrics = evaluate(scores, labels)
        if metrics.auc is None:
            warnings.warn(f"fold {fold}: validation split has a single class; AUC undefined", RuntimeWarning,
                          stacklevel=2)
        result = FoldResult(fold, epochs, best, metrics, preds, history)
        folds.append(result)
        fold_models.append(models)
        if on_fold is not None:
            on_fold(result, models)
    return CVResult(folds, _mean_metrics(folds), fold_models)


def median_epochs(epochs) -> int:
    """Lower median: the order statistic at index floor((k - 1) / 2)."""
    e = sorted(int(x) for x in epochs)
    if not e:
        raise ValueError("no fold epochs")
    return e[(len(e) - 1) // 2]


def refit_full(records, patches_by_id, fold_results: list[FoldResult], model_config: ModelConfig,
               train_config: TrainConfig) -> tuple[dict[str, CoughCNN], dict[str, int]]:
    """Retrain on all non-test material for the median fold epoch count (per model group)."""
    labelled = [r for r in records if not r.is_test]
    groups = model_groups(model_config, labelled)
    root = np.random.SeedSequence(train_config.seed)
    full = PatchDataset.from_records(labelled, patches_by_id)
    models, epochs = {}, {}
    for gi, group in enumerate(groups):
        n = median_epochs(f.epochs_trained[group] for f in fold_results)
        ds = balance_by_replication(_group_ds(full, group))
        models[group], _ = fit_epochs(ds, model_config, train_config, n,
                                      seed=_child_seq(root, train_config.k_folds, gi))
        epochs[group] = n
        log.info("refit [%s]: %d epochs on %d patches", group, n, len(ds))
    return models, epochs


# --- run directory -----------------------------------------------------------

def checkpoint_name(group: str) -> str:
    return "checkpoint.bin" if group == ALL else f"checkpoint_{group}.bin"


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "train_loss", "val_loss"))
        for epoch, tl, vl in history:
            w.writerow((epoch, repr(float(tl)), repr(float(vl))))


def write_predictions(path, rows) -> None:
    """rows: iterables of (id, score, label-or-None[, extra...])."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "score", "label"))
        for rid, score, label, *_ in rows:
            w.writerow((rid, repr(float(score)), "" if label is None else int(label)))


def run_experiment(run_dir, records, patches_by_id, model_config: ModelConfig, train_config: TrainConfig,
                   extra_config: dict | None = None, workers: int = 1) -> tuple[CVResult, dict]:
    """Cross-validate, refit on everything, and write the run directory.

    Layout: ``config.json``, ``fold<k>/checkpoint*.bin``, ``fold<k>/log*.csv``,
    ``final/checkpoint*.bin``, ``metrics.json``, ``predictions.csv``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = {"model": model_config.to_dict(), "train": train_config.to_dict()}
    if extra_config:
        config.update(extra_config)
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))

    def save_fold(result: FoldResult, models):
        fold_dir = run_dir / f"fold{result.fold_id}"
        fold_dir.mkdir(exist_ok=True)
        for group, model in models.items():
            save_model(fold_dir / checkpoint_name(group), model, {**(extra_config or {}), "group": group})
            _write_history(fold_dir / ("log.csv" if group == ALL else f"log_{group}.csv"), result.history[group])

    cv = cross_validate(records, patches_by_id, model_config, train_config, on_fold=save_fold, workers=workers)
    final_models, refit_epochs = refit_full(records, patches_by_id, cv.folds, model_config, train_config)
    final_dir = run_dir / "final"
    final_dir.mkdir(exist_ok=True)
    for group, model in final_models.items():
        save_model(final_dir / checkpoint_name(group), model, {**(extra_config or {}), "group": group})

    metrics = {
        "mean": cv.mean,
        "folds": [
            {"fold": f.fold_id, **f.metrics.to_dict(), "epochs_trained": f.epochs_trained,
             "best_val_loss": f.best_val_loss, "n_val_recordings": len(f.predictions)}
            for f in cv.folds
        ],
        "refit_epochs": refit_epochs,
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    write_predictions(run_dir / "predictions.csv", [p for f in cv.folds for p in f.predictions])
    return cv, metrics
