"""Loss, optimizer, learning-rate schedules, and the train/eval loops."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as kt
from .serial import save_params
from .tensor import NumericError, Tape, Tensor, backward


def smoothed_targets(labels, num_classes: int, smoothing: float) -> np.ndarray:
    """Rows sum to 1: true class gets 1 - eps + eps/K, the rest eps/K."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    q = np.full((labels.size, num_classes), smoothing / num_classes)
    q[np.arange(labels.size), labels] = 1.0 - smoothing + smoothing / num_classes
    return q


def cross_entropy_smoothed(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean over the batch of -sum_c q_c log softmax(logits)_c."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must be [B, K>=2], got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    q = smoothed_targets(labels, logits.shape[1], smoothing).astype(logits.dtype)
    per_sample = kt.sum(kt.log_softmax(logits, axis=-1) * Tensor(q), axis=-1)
    return kt.mean(per_sample * (-1.0))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

_DECAY_EXEMPT_SUFFIXES = (".bias", ".gamma", ".beta", "b_delta", "a_log")


def is_decay_exempt(name: str) -> bool:
    return name.endswith(_DECAY_EXEMPT_SUFFIXES)


class AdamW:
    """Decoupled weight decay with bias-corrected moments.

    Decay is skipped for norm/bias parameters and for the scanner's b_delta
    and a_log (decaying the state matrix toward zero would destabilize the
    recurrence). Per-parameter learning-rate multipliers implement layer-wise
    decay; step order follows the parameter list, so updates are deterministic.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 multipliers=None):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.multipliers = dict(multipliers or {})
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            lr_p = lr * self.multipliers.get(p.name, 1.0)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and not is_decay_exempt(p.name):
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr_p * update).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    base_lr: float = 1e-3
    warmup_epochs: int = 2
    total_epochs: int = 30
    layer_decay: float = 0.75
    steps_per_epoch: int = 1


def lr_at(sched: Schedule, step: int) -> float:
    """Linear warmup to base_lr, then cosine to ~0; exact base_lr at warmup end."""
    warmup = sched.warmup_epochs * sched.steps_per_epoch
    total = max(sched.total_epochs * sched.steps_per_epoch, warmup + 1)
    if warmup > 0 and step < warmup:
        return sched.base_lr * (step + 1) / warmup
    progress = min((step - warmup) / (total - warmup), 1.0)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def layer_multiplier(sched: Schedule, layer_index: int, depth: int) -> float:
    """Backbone layer i (1-based) trains at base_lr * decay^(depth - i)."""
    return sched.layer_decay ** (depth - layer_index)


def lr_multipliers(param_names, sched: Schedule, depth: int) -> dict:
    """Newly inserted parameters and the head are exempt (multiplier 1)."""
    mults = {}
    for name in param_names:
        if name.startswith("blocks."):
            layer = int(name.split(".")[1]) + 1
            mults[name] = layer_multiplier(sched, layer, depth)
        elif name.startswith("embed."):
            mults[name] = layer_multiplier(sched, 0, depth)
        else:
            mults[name] = 1.0
    return mults


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    base_lr: float = 1e-3
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    layer_decay: float = 0.75
    scan_mode: str = "sequential"
    workers: int = 1
    stop_at_val_top1: float | None = None


def evaluate(model, data, k: int = 1, batch_size: int = 64,
             mode="sequential", workers=1) -> float:
    """Top-k accuracy over (X, y) arrays; runs without a tape."""
    return _eval_stats(model, data, k, batch_size, mode, workers)[0]


def _eval_stats(model, data, k, batch_size, mode, workers, smoothing=0.0):
    x, y = data
    hits = 0
    losses = []
    for lo in range(0, len(y), batch_size):
        xb = Tensor(x[lo:lo + batch_size])
        logits = model.forward_video(xb, mode=mode, workers=workers)
        losses.append(float(cross_entropy_smoothed(
            logits, y[lo:lo + batch_size], smoothing).data) * len(xb.data))
        topk = np.argsort(-logits.data, axis=1)[:, :k]
        hits += int((topk == y[lo:lo + batch_size, None]).any(axis=1).sum())
    return hits / len(y), float(np.sum(losses) / len(y))


def _history_csv(history) -> str:
    lines = ["epoch,split,loss,top1,lr"]
    for row in history:
        lines.append("%d,%s,%.6f,%.6f,%.8f"
                     % (row["epoch"], row["split"], row["loss"], row["top1"], row["lr"]))
    return "\n".join(lines) + "\n"


def train(model, train_data, val_data, cfg: TrainConfig, out_dir=None):
    """Deterministic training loop; returns the history row list.

    Shuffles are derived from cfg.seed alone, so two runs with identical
    inputs produce byte-identical history CSVs. On a non-finite loss the
    last epoch's parameters are restored, the checkpoint is written, and
    NumericError is raised.
    """
    x_train, y_train = train_data
    n = len(y_train)
    if n == 0:
        raise ValueError("training dataset is empty")
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    sched = Schedule(base_lr=cfg.base_lr, warmup_epochs=cfg.warmup_epochs,
                     total_epochs=cfg.epochs, layer_decay=cfg.layer_decay,
                     steps_per_epoch=steps_per_epoch)
    params = model.parameters()
    mults = lr_multipliers([p.name for p in params], sched, model.cfg.depth)
    opt = AdamW(params, weight_decay=cfg.weight_decay, multipliers=mults)
    shuffle_rng = np.random.default_rng(cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint():
        if out is not None:
            save_params(out / "model.kino", params)

    def write_history():
        if out is not None:
            (out / "history.csv").write_text(_history_csv(history))

    history = []
    last_good = [p.data.copy() for p in params]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        hits = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = Tensor(x_train[idx])
            lr = lr_at(sched, step)
            model.zero_grads()
            try:
                with Tape():
                    logits = model.forward_video(xb, mode=cfg.scan_mode,
                                                 workers=cfg.workers)
                    loss = cross_entropy_smoothed(logits, y_train[idx],
                                                  cfg.label_smoothing)
                    loss_val = float(loss.data)
                    if not np.isfinite(loss_val):
                        raise NumericError("non-finite loss")
                    backward(loss)
            except NumericError as exc:
                for p, saved in zip(params, last_good):
                    p.data = saved
                checkpoint()
                write_history()
                raise NumericError(
                    f"training diverged at epoch {epoch}, step {step} ({exc}); "
                    f"last good checkpoint retained") from exc
            opt.step(lr)
            losses.append(loss_val)
            hits += int((np.argmax(logits.data, axis=1) == y_train[idx]).sum())
            step += 1

        train_top1 = hits / n
        train_loss = float(np.mean(losses))
        lr_now = lr_at(sched, step - 1)
        history.append({"epoch": epoch, "split": "train", "loss": train_loss,
                        "top1": train_top1, "lr": lr_now})
        val_top1, val_loss = _eval_stats(model, val_data, 1, cfg.batch_size,
                                         cfg.scan_mode, cfg.workers,
                                         cfg.label_smoothing)
        history.append({"epoch": epoch, "split": "val", "loss": val_loss,
                        "top1": val_top1, "lr": lr_now})
        last_good = [p.data.copy() for p in params]
        checkpoint()
        write_history()
        if cfg.stop_at_val_top1 is not None and val_top1 >= cfg.stop_at_val_top1:
            break
    return history
