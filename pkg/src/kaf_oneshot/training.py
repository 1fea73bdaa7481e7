"""Optimizers, training loops, evaluation, and run-record export.

Everything here is deterministic: a (dataset, TrainConfig) pair maps to a
bit-identical RunRecord, model, and checkpoint. Per-step sampling seeds
are derived from the config seed through SeedSequence, so no global RNG
state is involved anywhere.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import Dataset, sample_episode, sample_pairs
from .errors import MetricError, NumericError, ParameterError, TrainingError
from .losses import EmbeddingSet, contrastive_loss_batch, silhouette_score
from .models import (
    MatchingModel,
    SiameseModel,
    build_att_siamese,
    build_matching_embedder,
    build_mnist_siamese,
    matching_episode_loss,
    matching_forward,
)
from .tensor import Tensor, global_norm

THREADS_ENV = "KAF_ONESHOT_THREADS"


@dataclass
class TrainConfig:
    lr: float = 0.0005
    epochs: int = 10
    batch_size: int = 32
    margin: float = 2.0
    seed: int = 0
    activation: str = "relu"
    dataset: str = "synthetic"
    subset: int | None = None
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = 5.0
    kaf_d: int = 20
    kaf_bound: float = 3.0
    n_way: int = 5
    k_shot: int = 1
    episode_queries: int = 5
    eval_trials: int = 200

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "margin"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"TrainConfig: {name} must be positive, got {getattr(self, name)}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"TrainConfig: optimizer {self.optimizer!r} not one of adam, sgd")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed"] = int(self.seed)
        return d


@dataclass
class RunRecord:
    config: dict
    epoch_losses: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    seed: int = 0

    def metrics_json(self) -> str:
        """Deterministic metrics document; wall-clock stays out of it."""
        doc = {"config": self.config, "final_metrics": self.final_metrics, "seed": self.seed,
               "epoch_losses": self.epoch_losses}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_metrics(path, record: RunRecord) -> None:
    with open(path, "w") as fh:
        fh.write(record.metrics_json())


def write_loss_curve(path, record: RunRecord) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "seconds"])
        for i, (loss, secs) in enumerate(zip(record.epoch_losses, record.epoch_seconds), start=1):
            writer.writerow([i, repr(float(loss)), repr(float(secs))])


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def adam_step(param: Tensor, grad: Tensor, m: Tensor, v: Tensor, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on param, m and v."""
    if t < 1:
        raise ParameterError(f"adam_step: step index must be >= 1, got {t}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + epsilon)


class Adam:
    def __init__(self, model, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.model = model
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p, _ in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, p, _ in model.named_params()}

    def step(self):
        self.t += 1
        for name, p, g in self.model.named_params():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"adam: non-finite gradient in {name}")
            adam_step(p, g, self.m[name], self.v[name], self.t,
                      self.lr, self.beta1, self.beta2, self.epsilon)


class SGD:
    def __init__(self, model, lr: float):
        self.model = model
        self.lr = lr
        self.t = 0

    def step(self):
        self.t += 1
        for name, p, g in self.model.named_params():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"sgd: non-finite gradient in {name}")
            p -= self.lr * g


def make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    return SGD(model, cfg.lr)


def clip_gradients(model, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    grads = [g for _, _, g in model.named_params()]
    norm = global_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _step_seed(seed: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFF, spawn_key=tuple(tags))


def build_siamese_for(ds: Dataset, cfg: TrainConfig) -> SiameseModel:
    """Backbone choice follows the image extent: 28 -> digit net, 100 -> face net."""
    h = ds.images.shape[2]
    opts = dict(kaf_d=cfg.kaf_d, kaf_bound=cfg.kaf_bound)
    if h == 28:
        return build_mnist_siamese(cfg.activation, seed=cfg.seed, **opts)
    if h == 100:
        return build_att_siamese(cfg.activation, seed=cfg.seed, **opts)
    raise ParameterError(f"no Siamese backbone for {h}x{h} inputs (use 28 or 100)")


def siamese_step(model: SiameseModel, opt, batch, cfg: TrainConfig) -> float:
    """One optimizer step on a pair batch; returns the batch mean loss.

    A non-finite loss is returned untouched without stepping, so the
    caller can report divergence at the exact step it appeared.
    """
    e1, e2 = model.forward_pair(batch.x1, batch.x2, train=True)
    loss, g1, g2 = contrastive_loss_batch(e1, e2, batch.y, cfg.margin)
    if not np.isfinite(loss):
        return loss
    model.backward_pair(g1, g2)
    if cfg.clip_norm:
        clip_gradients(model, cfg.clip_norm)
    opt.step()
    model.zero_grads()
    model.clear_caches()
    return loss


def train_siamese(ds: Dataset, cfg: TrainConfig, model: SiameseModel | None = None):
    """Contrastive training over sampled pair batches.

    An epoch is len(ds)//batch_size with-replacement batches. Returns the
    trained model and a complete RunRecord; a non-finite loss aborts with
    a TrainingError carrying the global step index.
    """
    model = model or build_siamese_for(ds, cfg)
    opt = make_optimizer(model, cfg)
    steps = max(1, len(ds) // cfg.batch_size)
    record = RunRecord(config={**cfg.to_dict(), "dataset_size": len(ds), "model": model.model_kind},
                       seed=cfg.seed)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for step in range(steps):
            batch = sample_pairs(ds, cfg.batch_size, _step_seed(cfg.seed, 1, epoch, step))
            loss = siamese_step(model, opt, batch, cfg)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"train_siamese: non-finite loss at step {epoch * steps + step}",
                    step=epoch * steps + step,
                )
            total += loss
        record.epoch_losses.append(total / steps)
        record.epoch_seconds.append(time.perf_counter() - t0)
    try:
        record.final_metrics["silhouette"] = eval_silhouette(model, ds)
    except MetricError:
        record.final_metrics["silhouette"] = None
    return model, record


def matching_step(model: MatchingModel, opt, episode, cfg: TrainConfig) -> float:
    """One optimizer step on an episode; returns the mean query NLL."""
    ns = episode.support_images.shape[0]
    stacked = np.concatenate([episode.support_images, episode.query_images], axis=0)
    emb = model.forward(stacked, train=True)
    loss, gs, gq = matching_episode_loss(
        emb[:ns], episode.support_labels, emb[ns:], episode.query_labels
    )
    if not np.isfinite(loss):
        return loss
    model.backward(np.concatenate([gs, gq], axis=0))
    if cfg.clip_norm:
        clip_gradients(model, cfg.clip_norm)
    opt.step()
    model.zero_grads()
    model.clear_caches()
    return loss


def train_matching(ds: Dataset, cfg: TrainConfig, n_way: int | None = None,
                   k_shot: int | None = None, model: MatchingModel | None = None):
    """Episodic training of the matching embedder with the NLL loss.

    An epoch is len(ds)//(N*K + queries) episodes, one optimizer step each.
    """
    n_way = n_way or cfg.n_way
    k_shot = k_shot or cfg.k_shot
    model = model or build_matching_embedder(cfg.activation, seed=cfg.seed,
                                             kaf_d=cfg.kaf_d, kaf_bound=cfg.kaf_bound)
    opt = make_optimizer(model, cfg)
    per_episode = n_way * k_shot + cfg.episode_queries
    steps = max(1, len(ds) // per_episode)
    record = RunRecord(config={**cfg.to_dict(), "dataset_size": len(ds), "model": model.model_kind,
                               "n_way": n_way, "k_shot": k_shot},
                       seed=cfg.seed)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for step in range(steps):
            episode = sample_episode(ds, n_way, k_shot, cfg.episode_queries,
                                     _step_seed(cfg.seed, 2, epoch, step))
            loss = matching_step(model, opt, episode, cfg)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"train_matching: non-finite loss at step {epoch * steps + step}",
                    step=epoch * steps + step,
                )
            total += loss
        record.epoch_losses.append(total / steps)
        record.epoch_seconds.append(time.perf_counter() - t0)
    record.final_metrics["oneshot_accuracy"] = eval_oneshot(
        model, ds, n_way, cfg.eval_trials, seed=cfg.seed
    )
    return model, record


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def embed_dataset(model, ds: Dataset, batch: int = 256) -> Tensor:
    chunks = [model.embed(ds.images[lo : lo + batch]) for lo in range(0, len(ds), batch)]
    return np.concatenate(chunks, axis=0)


def eval_silhouette(model, ds: Dataset) -> float:
    """Silhouette of the embedded dataset under the model's metric space."""
    emb = embed_dataset(model, ds)
    return silhouette_score(EmbeddingSet(emb, ds.labels))


def _oneshot_trial(model, ds: Dataset, n_way: int, k_shot: int, seed) -> bool:
    episode = sample_episode(ds, n_way, k_shot, 1, seed)
    ns = episode.support_images.shape[0]
    emb = model.embed(np.concatenate([episode.support_images, episode.query_images], axis=0))
    probs, classes = matching_forward(emb[:ns], episode.support_labels, emb[ns])
    return bool(classes[int(np.argmax(probs))] == episode.query_labels[0])


def eval_oneshot(model, ds: Dataset, n_way: int, trials: int, seed: int = 0,
                 k_shot: int = 1, threads: int | None = None) -> float:
    """Mean correctness over fresh one-query episodes.

    Per-trial seeds come from one spawn of the master seed, so the result
    is independent of evaluation order or thread count. KAF_ONESHOT_THREADS
    (or `threads`) caps the fan-out; evaluation forwards are cache-free and
    safe to run concurrently on a frozen model.
    """
    if trials < 1:
        raise ParameterError(f"eval_oneshot: trials must be positive, got {trials}")
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or "1")
    seeds = _step_seed(seed, 3).spawn(trials)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda s: _oneshot_trial(model, ds, n_way, k_shot, s), seeds
            ))
    else:
        results = [_oneshot_trial(model, ds, n_way, k_shot, s) for s in seeds]
    return float(np.mean(results))
