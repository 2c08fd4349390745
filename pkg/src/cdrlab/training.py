"""Optimization loop: batches -> models -> loss -> Adam, with early stopping."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteGradient, ParamStore, adam_step, forward_backward
from .config import ExperimentConfig, TrainConfig
from .contrastive import (
    cdr_loss,
    cdr_uncontrolled_loss,
    naive_dr_loss,
    same_domain_loss,
    uncontrolled_candidates,
)
from .datagen import (
    ControlledBatch,
    Dataset,
    DatasetError,
    FrameCache,
    build_cdr_batch,
    build_naive_batch,
    build_same_domain_batch,
    split_train_val,
)
from .models import Encoder, ForwardModel, GRUPredictor, add_bilinear


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_good: ParamStore):
        super().__init__(message)
        self.last_good = last_good


class DataLeakError(AssertionError):
    pass


@dataclass
class Models:
    params: ParamStore
    encoder: Encoder
    kind: str
    paradigm: str
    forward: ForwardModel | None = None
    gru: GRUPredictor | None = None

    @property
    def similarity_w(self):
        return self.params["similarity.w"] if self.kind == "bilinear" else None


def build_models(cfg: ExperimentConfig, paradigm: str | None = None, params: ParamStore | None = None,
                 kind: str | None = None, seed: int | None = None) -> Models:
    """Create (or re-attach to ``params``) the encoder and the paradigm's predictor."""
    paradigm = paradigm or cfg.training.paradigm
    kind = kind or TrainConfig(paradigm=paradigm, similarity=cfg.training.similarity).similarity_kind
    seed = cfg.training.seed if seed is None else seed
    params = params if params is not None else ParamStore()
    enc = Encoder(cfg.model, cfg.renderer.resolution, params, np.random.default_rng([seed, 0, 1]))
    fwd = gru = None
    if paradigm == "controlled":
        scale = cfg.scene.controlled.action_range[1]
        fwd = ForwardModel(cfg.model, params, scale, np.random.default_rng([seed, 0, 2]))
    else:
        gru = GRUPredictor(cfg.model, params, np.random.default_rng([seed, 0, 3]))
    if kind == "bilinear":
        add_bilinear(params, cfg.model.latent_dim)
    return Models(params, enc, kind, paradigm, fwd, gru)


def candidate_count(cfg: ExperimentConfig, paradigm: str | None = None) -> int:
    """Number of scores in each InfoNCE row (the N of the MI bound)."""
    paradigm = paradigm or cfg.training.paradigm
    n = cfg.training.batch_size
    if paradigm == "controlled":
        return n
    return uncontrolled_candidates(cfg.model.horizons, n, cfg.training.within_sequence_negatives)


def batch_loss(models: Models, batch, variant: str, within_sequence_negatives: bool = True) -> ad.Tensor:
    w = models.similarity_w
    if isinstance(batch, ControlledBatch):
        n = batch.pred_obs.shape[0]
        z = models.encoder(np.concatenate([batch.pred_obs, batch.label_obs], axis=0))
        pred = models.forward(z[:n], batch.actions)
        label = z[n:]
        if variant == "cdr":
            return cdr_loss(pred, label, models.kind, w)
        if variant == "naive":
            return naive_dr_loss(pred, label, models.kind, w)
        return same_domain_loss(pred, label, models.kind, list(zip(batch.pred_domains, batch.label_domains)), w)
    b, c = batch.context_obs.shape[:2]
    k = batch.label_obs.shape[0]
    img = batch.context_obs.shape[2:]
    flat = np.concatenate([batch.context_obs.reshape((b * c,) + img), batch.label_obs.reshape((k * b,) + img)])
    z = models.encoder(flat)
    d = z.shape[1]
    ctx = z[:b * c].reshape(b, c, d)
    preds = models.gru(ctx)
    labels = [z[b * c + i * b: b * c + (i + 1) * b] for i in range(k)]
    return cdr_uncontrolled_loss(preds, labels, models.kind, w, within_sequence_negatives)


def make_batch(cfg: ExperimentConfig, dataset: Dataset, rng, variant: str, cache: FrameCache | None,
               training: bool = False):
    """One batch. Training batches draw fresh domains per item when configured;
    evaluation batches always use the domains stored with each episode."""
    tc = cfg.training
    kw = dict(resolution=cfg.renderer.resolution, horizons=cfg.model.horizons, context=cfg.model.context)
    resample = None
    if training and tc.resample_domains:
        resample = cfg.renderer.domain_kwargs()
    if variant == "cdr":
        return build_cdr_batch(dataset, rng, tc.batch_size, tc.paradigm, cache, resample=resample, **kw)
    if variant == "naive":
        return build_naive_batch(dataset, rng, tc.batch_size, tc.paradigm, cache, resample=resample, **kw)
    return build_same_domain_batch(dataset, rng, tc.batch_size, tc.paradigm,
                                   **cfg.renderer.domain_kwargs(), **kw)


def batches_per_epoch(cfg: ExperimentConfig, dataset: Dataset) -> int:
    return max(1, dataset.n_transitions() // cfg.training.batch_size)


def cache_for(cfg: ExperimentConfig, dataset: Dataset, variant: str | None = None,
              training: bool = False) -> FrameCache | None:
    variant = variant or cfg.training.loss
    if variant == "same_domain":
        return None
    if training and cfg.training.resample_domains:
        return None
    which = ("a", "b") if variant == "cdr" else ("a",)
    return FrameCache(dataset, cfg.renderer.resolution, which)


def evaluate_loss(models: Models, dataset: Dataset, cfg: ExperimentConfig, cache: FrameCache | None = None,
                  seed: int = 0, n_batches: int | None = None, variant: str | None = None) -> float:
    """Mean loss over a fixed, seeded sweep of batches. Parameters are untouched."""
    variant = variant or cfg.training.loss
    n_batches = n_batches or batches_per_epoch(cfg, dataset)
    rng = np.random.default_rng([cfg.training.seed, seed, 77])
    total = 0.0
    with ad.no_grad():
        for _ in range(n_batches):
            batch = make_batch(cfg, dataset, rng, variant, cache)
            total += float(batch_loss(models, batch, variant, cfg.training.within_sequence_negatives).data)
    return total / n_batches


def format_metric(epoch: int, split: str, loss: float, n: int) -> str:
    mi = math.log(n) - loss
    return f"epoch={epoch} split={split} loss={loss:.17g} mi_bound={mi:.17g}"


@dataclass
class TrainResult:
    params: ParamStore
    metrics: list[str]
    timing: list[str]
    best_val: float
    best_epoch: int
    epochs_run: int
    stopped_early: bool
    train_seeds: set = field(default_factory=set)
    val_seeds: set = field(default_factory=set)
    history: list[dict] = field(default_factory=list)


def train(cfg: ExperimentConfig, dataset: Dataset, caches: tuple | None = None,
          val_batches: int | None = None, log=None) -> TrainResult:
    """Train encoder + predictor on ``dataset`` (split internally into train/val).

    Epoch 0 records the loss of the freshly initialized model. Each later
    epoch runs ``transitions // N`` Adam steps, then evaluates the validation
    sweep; the best-validation parameters are returned.
    """
    tc = cfg.training
    if dataset.paradigm != tc.paradigm:
        raise DatasetError(f"dataset paradigm {dataset.paradigm!r} does not match training paradigm {tc.paradigm!r}")
    train_ds, val_ds = split_train_val(dataset, cfg.data.val_fraction)
    if train_ds.seeds & val_ds.seeds:
        raise DataLeakError("train and validation episode seeds overlap")
    if caches is None:
        caches = (cache_for(cfg, train_ds, training=True), cache_for(cfg, val_ds))
    train_cache, val_cache = caches
    models = build_models(cfg)
    n = candidate_count(cfg)
    steps = batches_per_epoch(cfg, train_ds)
    rng = np.random.default_rng([tc.seed, 1])
    metrics, timing, history = [], [], []

    def record(epoch, split, loss, ms):
        metrics.append(format_metric(epoch, split, loss, n))
        timing.append(f"epoch={epoch} split={split} wall_ms={ms:.0f}")
        history.append({"epoch": epoch, "split": split, "loss": loss, "mi_bound": math.log(n) - loss})
        if log:
            log(metrics[-1])

    t0 = time.perf_counter()
    sweep = val_batches or batches_per_epoch(cfg, val_ds)
    init_train = evaluate_loss(models, train_ds, cfg, train_cache, seed=1, n_batches=min(steps, sweep))
    record(0, "train", init_train, (time.perf_counter() - t0) * 1e3)
    t0 = time.perf_counter()
    best_val = evaluate_loss(models, val_ds, cfg, val_cache, seed=2, n_batches=val_batches)
    record(0, "val", best_val, (time.perf_counter() - t0) * 1e3)
    if not math.isfinite(best_val):
        raise TrainingDiverged("non-finite validation loss at initialization", models.params.copy())
    best = models.params.copy()
    best_epoch, bad, epoch = 0, 0, 0
    stopped = False
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for _ in range(steps):
            batch = make_batch(cfg, train_ds, rng, tc.loss, train_cache, training=True)
            loss, grads = forward_backward(
                lambda: batch_loss(models, batch, tc.loss, tc.within_sequence_negatives), models.params)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch}", best)
            try:
                adam_step(models.params, grads, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), best) from exc
            total += loss
        record(epoch, "train", total / steps, (time.perf_counter() - t0) * 1e3)
        t0 = time.perf_counter()
        val = evaluate_loss(models, val_ds, cfg, val_cache, seed=2, n_batches=val_batches)
        record(epoch, "val", val, (time.perf_counter() - t0) * 1e3)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch}", best)
        if val < best_val:
            best_val, best_epoch, bad = val, epoch, 0
            best = models.params.copy()
        else:
            bad += 1
            if bad >= tc.patience:
                stopped = True
                break
    return TrainResult(best, metrics, timing, best_val, best_epoch, epoch, stopped,
                       train_ds.seeds, val_ds.seeds, history)


def load_models(cfg: ExperimentConfig, params: ParamStore, paradigm: str | None = None,
                kind: str | None = None) -> Models:
    return build_models(cfg, paradigm, params, kind)
