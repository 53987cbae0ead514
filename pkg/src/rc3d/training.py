"""Losses, accuracy metrics, the classifier trainer and the depth-GAN trainer."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .datagen import ClipSet, augment_clip
from .flow import FarnebackParams
from .models import ConfigError, NetworkGraph, classifier_inputs, run_classifier
from .nn import Module
from .optim import make_optimizer
from .tensor import Function, InvalidArgument, Tensor, backward, no_grad, working_dtype

BCE_EPS = 1e-7
DEPTH_SOURCES = ("generated", "real")


# ---------------------------------------------------------------------------
# losses (accumulated in float64)

class MSELoss(Function):
    @staticmethod
    def forward(ctx, y_hat, y):
        diff = y_hat.astype(np.float64) - y.astype(np.float64)
        ctx.save(diff)
        return np.asarray(np.mean(diff * diff), dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        (diff,) = ctx.saved
        return (grad * 2.0 * diff / diff.size).astype(working_dtype()), None


def mse_loss(y_hat: Tensor, y) -> Tensor:
    """Mean of squared differences over every element."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y_hat.shape != y.shape:
        raise InvalidArgument(f"prediction {y_hat.shape} and target {y.shape} differ")
    if y.size == 0:
        raise InvalidArgument("empty prediction")
    return MSELoss.apply(y_hat, Tensor(y))


class BCELoss(Function):
    @staticmethod
    def forward(ctx, q, y):
        q64 = q.astype(np.float64)
        qc = np.clip(q64, BCE_EPS, 1.0 - BCE_EPS)
        y64 = y.astype(np.float64)
        ctx.save(qc, y64, (q64 >= BCE_EPS) & (q64 <= 1.0 - BCE_EPS))
        return np.asarray(np.mean(-y64 * np.log(qc) - (1.0 - y64) * np.log1p(-qc)), dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        qc, y, inside = ctx.saved
        g = (-y / qc + (1.0 - y) / (1.0 - qc)) / qc.size
        return (grad * np.where(inside, g, 0.0)).astype(working_dtype()), None


def bce_loss(y_hat: Tensor, y) -> Tensor:
    """Binary cross-entropy averaged over whatever shape the scores have.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != y_hat.shape:
        y = np.broadcast_to(y, y_hat.shape)
    if np.any((y < 0) | (y > 1)):
        raise InvalidArgument("binary targets must lie in [0, 1]")
    return BCELoss.apply(y_hat, Tensor(y))


class CrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels):
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        idx = labels.astype(int)
        ctx.save(np.exp(logp), idx)
        return np.asarray(-logp[np.arange(len(idx)), idx].mean(), dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        p, idx = ctx.saved
        g = p.copy()
        g[np.arange(len(idx)), idx] -= 1.0
        return (grad * g / len(idx)).astype(working_dtype()), None


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax + negative log-likelihood, mean over the batch."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidArgument(f"logits {logits.shape} and labels {labels.shape} do not match")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InvalidArgument("label outside the class range")
    return CrossEntropy.apply(logits, Tensor(labels.astype(np.float64)))


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Metrics:
    validation_accuracy: float
    training_accuracy: float

    @property
    def variance(self) -> float:
        """Generalization gap: training minus validation accuracy."""
        return self.training_accuracy - self.validation_accuracy

    def row(self, model: str) -> dict:
        return {"model": model, "validation": round(self.validation_accuracy, 4),
                "training": round(self.training_accuracy, 4), "variance": round(self.variance, 4)}


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("cannot score an empty split")
    return 100.0 * float(np.mean(predicted == labels))


# ---------------------------------------------------------------------------
# classifier training

@dataclass
class TrainHyper:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    augment: bool = True
    noise_sigma: float = 0.03
    max_rotation: float = 30.0
    flow: FarnebackParams = field(default_factory=FarnebackParams)
    # "generated" feeds the depth stream from the generator, "real" from the dataset
    depth_source: str = "generated"

    def __post_init__(self):
        if self.depth_source not in DEPTH_SOURCES:
            raise ConfigError(f"depth_source must be one of {DEPTH_SOURCES}, got {self.depth_source!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")


@dataclass
class TrainResult:
    metrics: Metrics
    best_state: dict
    best_epoch: int
    history: list[dict]
    timings: list[dict]


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


def predict(net, clips: ClipSet, generator: Module | None = None, batch_size: int = 32,
            flow: FarnebackParams = FarnebackParams(), depth_source: str = "generated",
            cache: dict | None = None) -> np.ndarray:
    """Argmax class per clip.

    ``cache`` keeps each batch's derived stream inputs between calls; it is
    only valid while the clips, generator and flow settings stay fixed.
    """
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    preds = []
    with no_grad():
        for k, idx in enumerate(_batches(len(clips), batch_size, np.arange(len(clips)))):
            if cache is not None and k in cache:
                inputs = cache[k]
            else:
                depth = clips.depth[idx] if depth_source == "real" else None
                inputs = classifier_inputs(net, clips.rgb[idx], generator, flow, depth)
                if cache is not None:
                    cache[k] = inputs
            preds.append(run_classifier(net, inputs).data.argmax(axis=1))
    if hasattr(net, "train"):
        net.train(was_training)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def evaluate(net, clips: ClipSet, generator: Module | None = None, batch_size: int = 32,
             flow: FarnebackParams = FarnebackParams(), depth_source: str = "generated",
             cache: dict | None = None) -> float:
    """Argmax accuracy in percent, no augmentation."""
    if len(clips) == 0:
        raise ConfigError("cannot evaluate an empty split")
    return accuracy(predict(net, clips, generator, batch_size, flow, depth_source, cache), clips.labels)


def _augment_batch(rgb: np.ndarray, depth: np.ndarray | None, idx, epoch: int, hyper: TrainHyper):
    """Per-sample augmentation; depth, when present, shares the clip's rotation."""
    out_rgb, out_depth = [], []
    for k, i in enumerate(idx):
        rng = np.random.default_rng([hyper.seed, epoch, int(i)])
        if depth is None:
            out_rgb.append(augment_clip(rgb[k], rng, hyper.noise_sigma, hyper.max_rotation))
        else:
            both = augment_clip(np.concatenate([rgb[k], depth[k]]), rng, hyper.noise_sigma, hyper.max_rotation)
            out_rgb.append(both[:3])
            out_depth.append(both[3:])
    return np.stack(out_rgb), (np.stack(out_depth) if depth is not None else None)


def train_classifier(net: NetworkGraph, train: ClipSet, valid: ClipSet, hyper: TrainHyper,
                     generator: Module | None = None,
                     log: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch training with per-epoch evaluation of both splits.

    Epoch 0 is the untrained network. The returned state is the one with the
    best validation accuracy (earliest on ties).
    """
    if len(train) == 0 or len(valid) == 0:
        raise ConfigError("training needs non-empty train and valid splits")
    params = net.parameters()
    opt = make_optimizer(params, hyper.optimizer, hyper.lr, momentum=hyper.momentum)
    history, timings = [], []
    # the generator is frozen, so unaugmented stream inputs never change
    caches = {"train": {}, "valid": {}}

    def record(epoch: int, loss: float | None, t0: float) -> dict:
        rec = {"epoch": epoch,
               "train_accuracy": evaluate(net, train, generator, flow=hyper.flow,
                                          depth_source=hyper.depth_source, cache=caches["train"]),
               "valid_accuracy": evaluate(net, valid, generator, flow=hyper.flow,
                                          depth_source=hyper.depth_source, cache=caches["valid"]),
               "train_loss": None if loss is None else round(loss, 6)}
        history.append(rec)
        timings.append({"epoch": epoch, "wall_time": round(time.perf_counter() - t0, 3)})
        if log:
            log(rec)
        return rec

    t0 = time.perf_counter()
    best = record(0, None, t0)
    best_state, best_epoch = net.state_dict(), 0
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        net.train()
        order = np.random.default_rng([hyper.seed, epoch]).permutation(len(train))
        total, seen = 0.0, 0
        for idx in _batches(len(train), hyper.batch_size, order):
            rgb = train.rgb[idx]
            depth = train.depth[idx] if hyper.depth_source == "real" else None
            if hyper.augment:
                rgb, depth = _augment_batch(rgb, depth, idx, epoch, hyper)
            inputs = classifier_inputs(net, rgb, generator, hyper.flow, depth)
            loss = cross_entropy(run_classifier(net, inputs), train.labels[idx])
            opt.zero_grad()
            backward(loss, params)
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        rec = record(epoch, total / seen, t0)
        if rec["valid_accuracy"] > best["valid_accuracy"]:
            best, best_state, best_epoch = rec, net.state_dict(), epoch
    final = history[-1]
    metrics = Metrics(final["valid_accuracy"], final["train_accuracy"])
    return TrainResult(metrics, best_state, best_epoch, history, timings)


# ---------------------------------------------------------------------------
# adversarial depth training

@dataclass
class GanSchedule:
    generator_pretrain_epochs: int = 10
    critic_pretrain_epochs: int = 5
    adversarial_epochs: int = 2
    switch_ratio: int = 1
    # "fixed" alternates switch_ratio critic steps per generator step;
    # "threshold" skips critic steps while its loss is below loss_threshold
    switch_mode: str = "fixed"
    loss_threshold: float = 0.5

    def __post_init__(self):
        counts = (self.generator_pretrain_epochs, self.critic_pretrain_epochs, self.adversarial_epochs)
        if min(counts) < 0:
            raise InvalidArgument("epoch counts must be non-negative")
        if self.switch_ratio < 1:
            raise InvalidArgument("switch_ratio must be at least 1")
        if self.switch_mode not in ("fixed", "threshold"):
            raise InvalidArgument(f"switch_mode must be 'fixed' or 'threshold', got {self.switch_mode!r}")


@dataclass
class GanHyper:
    lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 8
    # weight of the per-pixel MSE term in the adversarial generator loss
    mse_weight: float = 100.0
    seed: int = 0


@dataclass
class GanResult:
    generator_state: dict
    pretrained_state: dict
    critic_state: dict
    critic_accuracy: float
    pretrain_mse: float
    generator_mse: float
    baseline_mse: float
    history: list[dict]


def frame_pairs(clips: ClipSet) -> tuple[np.ndarray, np.ndarray]:
    """Flatten clips into (frames, 3, H, W) RGB and (frames, 1, H, W) depth."""
    n, _, t, h, w = clips.rgb.shape
    rgb = clips.rgb.transpose(0, 2, 1, 3, 4).reshape(n * t, 3, h, w)
    depth = clips.depth.transpose(0, 2, 1, 3, 4).reshape(n * t, 1, h, w)
    return np.ascontiguousarray(rgb), np.ascontiguousarray(depth)


def generate_depth(generator: Module, rgb: np.ndarray, batch_size: int = 32) -> np.ndarray:
    was = generator.training
    generator.eval()
    out = []
    with no_grad():
        for s in range(0, len(rgb), batch_size):
            out.append(generator(Tensor(rgb[s:s + batch_size])).data)
    generator.train(was)
    return np.concatenate(out)


def critic_accuracy(critic: Module, fakes: np.ndarray, reals: np.ndarray, batch_size: int = 32) -> float:
    """Percent of images the critic labels correctly (real if p > 0.5)."""
    was = critic.training
    critic.eval()
    correct = 0
    with no_grad():
        for arr, label in ((fakes, 0), (reals, 1)):
            for s in range(0, len(arr), batch_size):
                p = ops.sigmoid(critic(Tensor(arr[s:s + batch_size]))).data[:, 0]
                correct += int(np.sum((p > 0.5) == bool(label)))
    critic.train(was)
    return 100.0 * correct / (len(fakes) + len(reals))


def depth_mse(generator: Module, rgb: np.ndarray, depth: np.ndarray) -> float:
    pred = generate_depth(generator, rgb)
    return float(np.mean((pred.astype(np.float64) - depth) ** 2))


def train_gan(generator: Module, critic: Module, train: ClipSet, valid: ClipSet, schedule: GanSchedule,
              hyper: GanHyper, log: Callable[[dict], None] | None = None) -> GanResult:
    """Generator pretraining, critic pretraining, then alternating updates."""
    if len(train) == 0 or len(valid) == 0:
        raise ConfigError("GAN training needs non-empty train and valid splits")
    rgb, depth = frame_pairs(train)
    v_rgb, v_depth = frame_pairs(valid)
    g_params, c_params = generator.parameters(), critic.parameters()
    g_opt = make_optimizer(g_params, "adam", hyper.lr)
    c_opt = make_optimizer(c_params, "adam", hyper.critic_lr)
    history = []
    bs = hyper.batch_size

    def emit(rec):
        history.append(rec)
        if log:
            log(rec)

    # phase 1: generator alone on per-pixel MSE
    generator.train()
    for epoch in range(1, schedule.generator_pretrain_epochs + 1):
        order = np.random.default_rng([hyper.seed, 1, epoch]).permutation(len(rgb))
        total = 0.0
        for idx in _batches(len(rgb), bs, order):
            loss = mse_loss(generator(Tensor(rgb[idx])), depth[idx])
            g_opt.zero_grad()
            backward(loss, g_params)
            g_opt.step()
            total += loss.item() * len(idx)
        emit({"phase": 1, "epoch": epoch, "generator_mse": round(total / len(rgb), 6),
              "valid_mse": round(depth_mse(generator, v_rgb, v_depth), 6)})
    pretrained = generator.state_dict()
    pretrain_mse = depth_mse(generator, v_rgb, v_depth)

    # phase 2: critic alone on frozen pre-adversarial fakes vs real depth
    fakes = generate_depth(generator, rgb)
    images = np.concatenate([fakes, depth])
    labels = np.concatenate([np.zeros(len(fakes)), np.ones(len(depth))]).reshape(-1, 1)
    critic.train()
    for epoch in range(1, schedule.critic_pretrain_epochs + 1):
        order = np.random.default_rng([hyper.seed, 2, epoch]).permutation(len(images))
        total = 0.0
        for step, idx in enumerate(_batches(len(images), bs, order)):
            drop_rng = np.random.default_rng([hyper.seed, 2, epoch, step])
            loss = bce_loss(ops.sigmoid(critic(Tensor(images[idx]), drop_rng)), labels[idx])
            c_opt.zero_grad()
            backward(loss, c_params)
            c_opt.step()
            total += loss.item() * len(idx)
        emit({"phase": 2, "epoch": epoch, "critic_bce": round(total / len(images), 6)})
    v_fakes = generate_depth(generator, v_rgb)
    held_out = critic_accuracy(critic, v_fakes, v_depth)
    emit({"phase": 2, "critic_valid_accuracy": round(held_out, 4)})

    # phase 3: alternate critic and generator updates
    for epoch in range(1, schedule.adversarial_epochs + 1):
        order = np.random.default_rng([hyper.seed, 3, epoch]).permutation(len(rgb))
        g_total = c_total = 0.0
        for step, idx in enumerate(_batches(len(rgb), bs, order)):
            c_loss_val = None
            for k in range(schedule.switch_ratio):
                drop_rng = np.random.default_rng([hyper.seed, 3, epoch, step, k])
                fake = generate_depth(generator, rgb[idx])
                batch = np.concatenate([fake, depth[idx]])
                target = np.concatenate([np.zeros(len(idx)), np.ones(len(idx))]).reshape(-1, 1)
                c_loss = bce_loss(ops.sigmoid(critic(Tensor(batch), drop_rng)), target)
                c_loss_val = c_loss.item()
                if schedule.switch_mode == "threshold" and c_loss_val < schedule.loss_threshold:
                    break
                c_opt.zero_grad()
                backward(c_loss, c_params)
                c_opt.step()
            c_total += (c_loss_val or 0.0) * len(idx)
            drop_rng = np.random.default_rng([hyper.seed, 3, epoch, step, schedule.switch_ratio])
            pred = generator(Tensor(rgb[idx]))
            adv = bce_loss(ops.sigmoid(critic(pred, drop_rng)), np.ones((len(idx), 1)))
            g_loss = adv + mse_loss(pred, depth[idx]) * hyper.mse_weight
            g_opt.zero_grad()
            c_opt.zero_grad()
            backward(g_loss, g_params)
            g_opt.step()
            c_opt.zero_grad()
            g_total += g_loss.item() * len(idx)
        emit({"phase": 3, "epoch": epoch, "generator_loss": round(g_total / len(rgb), 6),
              "critic_bce": round(c_total / len(rgb), 6)})

    baseline = float(np.mean((v_depth - depth.mean()) ** 2))
    return GanResult(generator_state=generator.state_dict(), pretrained_state=pretrained,
                     critic_state=critic.state_dict(), critic_accuracy=held_out,
                     pretrain_mse=pretrain_mse, generator_mse=depth_mse(generator, v_rgb, v_depth), baseline_mse=baseline,
                     history=history)
