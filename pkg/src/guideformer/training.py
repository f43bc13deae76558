"""Training loop: cross-entropy + AdamW + cosine schedule, fully deterministic.

All stochastic choices of a run — shuffle order, horizontal flips, and
stochastic-depth masks — come from one counter-based stream keyed by the
seed, whose exact state is stored in every checkpoint. Restoring a
checkpoint therefore resumes the run bit-for-bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, ContractError
from .model import Model, ModelConfig, build_variant
from .rng import named_rng, pack_state, unpack_state
from .serial import Checkpoint, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class, batch-averaged.

    logits [b, k]; labels: b ints in [0, k). Uses the stable log-sum-exp
    softmax path.
    """
    labels = np.asarray(labels)
    b, k = logits.shape
    if k < 2:
        raise ContractError(f"need at least 2 classes, got {k}")
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label outside [0, {k}): {labels.min()}..{labels.max()}")
    logp = T.log_softmax_lastdim(logits)
    pick = np.zeros((b, k), dtype=logits.dtype)
    pick[np.arange(b), labels] = -1.0 / b
    return T.tsum(logp * Tensor(pick))


def cosine_lr(step: int, total: int, warmup: int, peak: float) -> float:
    """Linear 0 -> peak over ``warmup`` steps, then cosine decay toward 0."""
    if not 0 <= step < total:
        raise ContractError(f"step {step} outside [0, {total})")
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    span = max(1, total - warmup)
    t = (step - warmup) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Decay applies only to matrices and convolution kernels (ndim >= 2);
    biases, norm parameters, and aggregation vectors are exempt.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    seed: int = 0
    precision: str = "f32"  # f32 | f64

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(
                f"warmup ({self.warmup_epochs}) must be shorter than the run ({self.epochs})"
            )
        if self.lr < 0:
            raise ConfigurationError("peak learning rate must be nonnegative")
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy, no augmentation, stochastic depth off."""
    dtype = model.parameters()[0].dtype
    n = len(dataset)
    correct = 0
    with no_grad():
        for start in range(0, n, batch_size):
            imgs = dataset.images[start : start + batch_size].astype(dtype)
            labels = dataset.labels[start : start + batch_size]
            logits, _ = model(Tensor(imgs))
            correct += int((logits.data.argmax(axis=-1) == labels).sum())
    return correct / n


# -- checkpoint contents ------------------------------------------------------


def _encode_text(s: str) -> np.ndarray:
    return np.array([float(ord(ch)) for ch in s], dtype=np.float64)


def _decode_text(arr: np.ndarray) -> str:
    return "".join(chr(int(v)) for v in np.asarray(arr).reshape(-1))


def _meta_tensors(config: ModelConfig, seed: int, precision: str) -> dict[str, np.ndarray]:
    scalar = lambda v: np.array([float(v)], dtype=np.float64)
    return {
        "meta.variant": _encode_text(config.name),
        "meta.guidance": _encode_text(config.guidance),
        "meta.scale_mode": _encode_text(config.scale_mode),
        "meta.num_classes": scalar(config.num_classes),
        "meta.input_size": scalar(config.input_size),
        "meta.mlp_ratio": scalar(config.mlp_ratio),
        "meta.drop_path": scalar(config.drop_path),
        "meta.leff": scalar(1 if config.leff else 0),
        "meta.seed": scalar(seed),
        "meta.precision": scalar(0 if precision == "f32" else 1),
    }


def snapshot(model: Model, opt: AdamW, gen, seed: int, precision: str) -> Checkpoint:
    """Bundle model parameters, optimizer moments, and run state."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        tensors[f"param.{name}"] = p.data
    for name in model.named_parameters():
        tensors[f"opt.m.{name}"] = opt.m[name]
        tensors[f"opt.v.{name}"] = opt.v[name]
    tensors.update(_meta_tensors(model.config, seed, precision))
    return Checkpoint(step=opt.t, rng_state=pack_state(gen), tensors=tensors)


def config_from_checkpoint(ckpt: Checkpoint):
    """Recover (ModelConfig, init seed, precision) from a checkpoint's metadata."""
    t = ckpt.tensors
    try:
        name = _decode_text(t["meta.variant"])
        config = build_variant(
            name,
            num_classes=int(t["meta.num_classes"][0]),
            guidance=_decode_text(t["meta.guidance"]),
            scale_mode=_decode_text(t["meta.scale_mode"]),
            mlp_ratio=int(t["meta.mlp_ratio"][0]),
            drop_path=float(t["meta.drop_path"][0]),
            leff=bool(t["meta.leff"][0]),
        )
    except KeyError as missing:
        raise ContractError(f"checkpoint lacks metadata entry {missing}") from None
    seed = int(t["meta.seed"][0])
    precision = "f32" if int(t["meta.precision"][0]) == 0 else "f64"
    return config, seed, precision


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Rebuild the saved model exactly (architecture + weights)."""
    config, seed, precision = config_from_checkpoint(ckpt)
    dtype = np.float32 if precision == "f32" else np.float64
    model = Model(config, seed=seed, dtype=dtype)
    _load_params(model, ckpt)
    return model


def _load_params(model: Model, ckpt: Checkpoint):
    for name, p in model.named_parameters().items():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise ContractError(f"checkpoint is missing tensor {key!r}")
        arr = ckpt.tensors[key]
        if arr.shape != p.shape:
            raise ContractError(f"{key!r}: shape {arr.shape} does not match model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
        p.grad = None


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          val_dataset: Dataset | None = None, out_dir: str | None = None,
          resume_from: str | None = None, log=None) -> list[tuple]:
    """Run (or resume) the full recipe; returns per-epoch history rows.

    History rows are (epoch, mean train loss, train accuracy, val accuracy);
    val accuracy is NaN when no validation set is given. With ``out_dir``,
    each epoch appends to ``history.csv`` and writes
    ``checkpoint_ep{E}.sgck``. ``resume_from`` restores a checkpoint written
    by this function and continues from its epoch boundary.
    """
    cfg.validate()
    n = len(dataset)
    if cfg.batch_size > n:
        raise ConfigurationError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs
    dtype = cfg.dtype
    if model.parameters()[0].dtype != dtype:
        model.cast(dtype)
    opt = AdamW(model.named_parameters(), weight_decay=cfg.weight_decay)
    gen = named_rng(cfg.seed, "train")
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _load_params(model, ckpt)
        for name in model.named_parameters():
            try:
                opt.m[name] = ckpt.tensors[f"opt.m.{name}"].astype(dtype, copy=True)
                opt.v[name] = ckpt.tensors[f"opt.v.{name}"].astype(dtype, copy=True)
            except KeyError as missing:
                raise ContractError(f"checkpoint lacks optimizer state {missing}") from None
        opt.t = ckpt.step
        gen = unpack_state(ckpt.rng_state)
        if ckpt.step % steps_per_epoch:
            raise ContractError(
                f"checkpoint step {ckpt.step} is not an epoch boundary "
                f"({steps_per_epoch} steps per epoch)"
            )
        start_epoch = ckpt.step // steps_per_epoch
    history: list[tuple] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    history_path = os.path.join(out_dir, "history.csv") if out_dir is not None else None
    for epoch in range(start_epoch, cfg.epochs):
        perm = gen.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            imgs = dataset.images[idx].astype(dtype)
            flips = gen.random(len(idx)) < 0.5
            imgs[flips] = imgs[flips, :, ::-1, :]
            labels = dataset.labels[idx]
            logits, _ = model(Tensor(imgs), gen=gen)
            loss = cross_entropy(logits, labels)
            backward(loss)
            opt.step(cosine_lr(opt.t, total_steps, warmup_steps, cfg.lr))
            opt.zero_grad()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=-1) == labels).sum())
        train_loss = loss_sum / n
        train_acc = correct / n
        val_acc = evaluate(model, val_dataset) if val_dataset is not None else float("nan")
        row = (epoch, train_loss, train_acc, val_acc)
        history.append(row)
        if log is not None:
            log(f"epoch {epoch}: loss={train_loss:.4f} train_acc={train_acc:.4f} val_acc={val_acc:.4f}")
        if out_dir is not None:
            with open(history_path, "a", encoding="utf-8") as f:
                f.write(f"{epoch},{train_loss!r},{train_acc!r},{val_acc!r}\n")
            save_checkpoint(
                os.path.join(out_dir, f"checkpoint_ep{epoch + 1:03d}.sgck"),
                snapshot(model, opt, gen, cfg.seed, cfg.precision),
            )
    return history
