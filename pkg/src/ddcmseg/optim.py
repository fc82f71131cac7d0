"""Weighted cross-entropy loss, Adam+AMSGrad, the composite learning-rate
schedule, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PatchSampler, TileDataset, compute_class_stats, sample_epoch
from .errors import NumericError, ShapeError
from .graph import ModelGraph
from .models import save_checkpoint
from .tensor import DTYPE, Tape, Tensor4, record_op

# Initial learning rate and decay factors of the reference training recipe.
BASE_LR = 8.5e-5 / math.sqrt(2.0)


def weighted_ce_loss(log_probs: Tensor4, labels: np.ndarray, weights: np.ndarray) -> Tensor4:
    """Class-weighted negative log-likelihood, averaged over all pixels.

    ``labels`` is (n, h, w) or (n, 1, h, w) integer class indices; ``weights``
    one non-negative factor per class.  The loss is
    -mean(weights[label] * log_prob[label]) with the plain pixel count as the
    normalizer (weights stay inside the mean).  Gradients flow to
    ``log_probs`` only.
    """
    lab = np.asarray(labels)
    if lab.ndim == 4:
        if lab.shape[1] != 1:
            raise ShapeError(f"labels must be (n, 1, h, w), got {lab.shape}")
        lab = lab[:, 0]
    if lab.ndim != 3:
        raise ShapeError(f"labels must be (n, h, w) or (n, 1, h, w), got {lab.shape}")
    n, c, h, w = log_probs.shape
    if lab.shape != (n, h, w):
        raise ShapeError(f"labels shape {lab.shape} does not match predictions {(n, h, w)}")
    lab = lab.astype(np.int64)
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"label out of range: values must lie in [0, {c})")
    wvec = np.asarray(weights, dtype=np.float64)
    if wvec.shape != (c,):
        raise ShapeError(f"weights must have shape ({c},), got {wvec.shape}")

    picked = np.take_along_axis(log_probs.data, lab[:, None], axis=1)[:, 0]
    wpix = wvec[lab]
    count = n * h * w
    value = -(wpix * picked.astype(np.float64)).sum() / count
    out_data = np.full((1, 1, 1, 1), value, DTYPE)

    def _backward(g: np.ndarray) -> None:
        if log_probs.requires_grad:
            dlp = np.zeros(log_probs.shape, DTYPE)
            scale = -g[0, 0, 0, 0] / DTYPE(count)
            np.put_along_axis(dlp, lab[:, None], (wpix * scale).astype(DTYPE)[:, None], axis=1)
            log_probs.accumulate_grad(dlp)

    return record_op(out_data, (log_probs,), _backward)


@dataclass
class TrainSchedule:
    """lr(iter, epoch) = base * (1 - iter/max_iter)^power * gamma^(epoch // period),
    doubled for bias parameters."""

    base_lr: float = BASE_LR
    bias_lr_mult: float = 2.0
    poly_power: float = 0.9
    max_iter: float = 1e8
    step_gamma: float = 0.85
    step_period: int = 15


def lr_at(schedule: TrainSchedule, iteration: int, epoch: int, is_bias: bool) -> float:
    if iteration >= schedule.max_iter:
        raise ValueError(f"iteration {iteration} exceeds max_iter {schedule.max_iter}")
    lr = schedule.base_lr
    lr *= (1.0 - iteration / schedule.max_iter) ** schedule.poly_power
    lr *= schedule.step_gamma ** (epoch // schedule.step_period)
    if is_bias:
        lr *= schedule.bias_lr_mult
    return lr


def is_bias_param(name: str) -> bool:
    """Additive per-channel parameters (conv biases, BN shifts) get 2x LR."""
    return name.endswith(".bias") or name.endswith(".beta")


class AdamAmsgrad:
    """Adam with the AMSGrad maximum of second-moment estimates.

    Weight decay is added to the gradient as an L2 term before the moment
    updates.  ``v_max`` never decreases, giving a non-increasing effective
    step size per coordinate.
    """

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros(t.shape, DTYPE) for _, t in self.params]
        self.v = [np.zeros(t.shape, DTYPE) for _, t in self.params]
        self.v_max = [np.zeros(t.shape, DTYPE) for _, t in self.params]

    def step(self, lr: float, lr_bias: float | None = None) -> None:
        if lr_bias is None:
            lr_bias = lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name!r}; step aborted")
            if self.weight_decay:
                g = g + DTYPE(self.weight_decay) * p.data
            m, v, vmax = self.m[i], self.v[i], self.v_max[i]
            m *= DTYPE(self.beta1)
            m += DTYPE(1.0 - self.beta1) * g
            v *= DTYPE(self.beta2)
            v += DTYPE(1.0 - self.beta2) * (g * g)
            np.maximum(vmax, v, out=vmax)
            step_size = DTYPE(lr_bias if is_bias_param(name) else lr)
            p.data -= step_size * (m / DTYPE(bc1)) / (np.sqrt(vmax / DTYPE(bc2)) + DTYPE(self.eps))

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    epochs_run: int
    epoch_losses: list[float]
    epoch_accuracies: list[float]
    log_rows: list[str]
    best_epoch: int
    best_loss: float
    last_path: Path | None
    best_path: Path | None


def train(graph: ModelGraph, dataset: TileDataset, schedule: TrainSchedule,
          epochs: int, out_dir=None, batch_size: int = 5, patch_size: int = 256,
          patches_per_epoch: int = 5000, seed: int = 1, weight_decay: float = 5e-5,
          log_stream=None) -> TrainResult:
    """Sample patches, optimize the weighted cross-entropy, checkpoint.

    Writes ``train.csv`` (one ``epoch,iter,lr,loss,acc`` row per iteration),
    ``last.ckpt`` every epoch and ``best.ckpt`` whenever the epoch mean loss
    improves.  A non-finite loss aborts with :class:`NumericError`, leaving
    the checkpoints from the last completed epoch in place.
    """
    num_classes = len(dataset.class_names)
    stats = compute_class_stats(dataset)
    weights = stats.weights
    sampler = PatchSampler(patch_size=patch_size, patches_per_epoch=patches_per_epoch,
                           seed=seed)
    optimizer = AdamAmsgrad(graph.named_parameters(), weight_decay=weight_decay)
    iters_per_epoch = patches_per_epoch // batch_size
    if iters_per_epoch < 1:
        raise ValueError("patches_per_epoch must be at least batch_size")

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "train.csv", "w")

    rows = ["epoch,iter,lr,loss,acc"]
    epoch_losses: list[float] = []
    epoch_accs: list[float] = []
    best_loss = math.inf
    best_epoch = -1
    global_iter = 0

    def emit(row: str) -> None:
        rows.append(row)
        if log_file is not None:
            log_file.write(row + "\n")

    if log_file is not None:
        log_file.write(rows[0] + "\n")

    try:
        for epoch in range(epochs):
            stream = sample_epoch(dataset, sampler, epoch=epoch)
            losses = []
            accs = []
            for _ in range(iters_per_epoch):
                images = []
                labels = []
                for _ in range(batch_size):
                    img, lab = next(stream)
                    images.append(img)
                    labels.append(lab)
                x = Tensor4(np.stack(images))
                y = np.stack(labels)
                lr_w = lr_at(schedule, global_iter, epoch, False)
                lr_b = lr_at(schedule, global_iter, epoch, True)
                with Tape() as tape:
                    out = graph.forward(x, train=True)
                    loss = weighted_ce_loss(out, y, weights)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericError(
                        f"training diverged at epoch {epoch} iter {global_iter}: loss={loss_val}"
                    )
                tape.backward(loss)
                optimizer.step(lr_w, lr_b)
                graph.zero_grad()
                acc = float((out.data.argmax(axis=1) == y).mean())
                losses.append(loss_val)
                accs.append(acc)
                emit(f"{epoch},{global_iter},{lr_w:.8e},{loss_val:.8e},{acc:.8e}")
                global_iter += 1

            epoch_loss = float(np.mean(losses))
            epoch_acc = float(np.mean(accs))
            epoch_losses.append(epoch_loss)
            epoch_accs.append(epoch_acc)
            if log_stream is not None:
                log_stream.write(
                    f"epoch {epoch + 1}/{epochs}  loss {epoch_loss:.4f}  "
                    f"acc {epoch_acc:.4f}  lr {lr_at(schedule, global_iter - 1, epoch, False):.3e}\n"
                )
                log_stream.flush()
            if out_path is not None:
                save_checkpoint(graph, out_path / "last.ckpt")
                if epoch_loss < best_loss:
                    save_checkpoint(graph, out_path / "best.ckpt")
            if epoch_loss < best_loss:
                best_loss = epoch_loss
                best_epoch = epoch
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(
        epochs_run=len(epoch_losses),
        epoch_losses=epoch_losses,
        epoch_accuracies=epoch_accs,
        log_rows=rows,
        best_epoch=best_epoch,
        best_loss=best_loss,
        last_path=None if out_path is None else out_path / "last.ckpt",
        best_path=None if out_path is None else out_path / "best.ckpt",
    )
