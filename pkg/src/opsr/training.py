"""Full-batch MSE training with Adam, milestone LR decay, best-validation-
SSIM checkpointing, and a finite-difference gradient audit harness.

Every epoch feeds all training LR tiles to the model in a single batch.
The learning rate is lr * gamma^(number of milestones <= epoch). Validation
runs every ``eval_every`` epochs (and at the final epoch); the parameter
snapshot with the highest validation SSIM is the training result. A NaN
loss aborts with a DivergenceError carrying the last finite state.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .data import stack_pairs
from .tensor_ops import Rng


@dataclass
class TrainConfig:
    epochs: int = 50000
    lr: float = 1e-4
    milestones: tuple = (5000, 40000)
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_gain: float = 0.02
    eval_every: int = 50

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if any(m2 <= m1 for m1, m2 in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if any(m >= self.epochs for m in self.milestones):
            raise ValueError("every milestone must be < epochs")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        if self.epochs < 1 or self.eval_every < 1:
            raise ValueError("epochs and eval_every must be >= 1")


class DivergenceError(RuntimeError):
    """Loss became non-finite; carries the last finite epoch and loss."""

    def __init__(self, epoch, last_loss):
        super().__init__(f"non-finite loss at epoch {epoch} (last finite loss {last_loss})")
        self.epoch = epoch
        self.last_loss = last_loss


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)  # per-epoch training loss
    lrs: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (epoch, psnr, ssim, sam)
    best_epoch: int = -1
    best_ssim: float = -math.inf
    wall_time_s: float = 0.0

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("epoch,loss,lr\n")
            for i, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
                f.write(f"{i},{loss!r},{lr!r}\n")

    def summary(self):
        best = next((e for e in self.evals if e[0] == self.best_epoch), None)
        return {
            "epochs": len(self.losses),
            "best_epoch": self.best_epoch,
            "best_ssim": self.best_ssim,
            "best_psnr_db": best[1] if best else None,
            "best_sam_deg": best[3] if best else None,
            "final_loss": self.losses[-1] if self.losses else None,
            "wall_time_s": self.wall_time_s,
        }


def mse_loss(pred, target):
    """Mean squared error and its gradient wrt pred."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.value, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p.value, dtype=np.float64) for p in params]
        self.step = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad.astype(np.float64)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.value = (p.value.astype(np.float64) - update).astype(p.value.dtype)


def lr_at(config, epoch):
    """lr * gamma^(number of milestones <= epoch); non-increasing in epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr * config.gamma ** passed


def train(model, train_pairs, val_pairs, config, progress=None):
    """Full-batch training; returns (best_state, log) where best_state is
    (state_tensors, epoch, val_ssim) at the highest validation SSIM."""
    if not train_pairs or not val_pairs:
        raise ValueError("train and validation pair sets must be non-empty")
    x, y = stack_pairs(train_pairs)
    params = model.params()
    state = AdamState(params)
    log = TrainLog()
    best_state = None
    t0 = time.monotonic()

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        pred = model.forward(x, training=True)
        loss, grad = mse_loss(pred, y)
        if not math.isfinite(loss):
            log.wall_time_s = time.monotonic() - t0
            raise DivergenceError(epoch, log.losses[-1] if log.losses else None)
        log.losses.append(loss)
        log.lrs.append(lr)
        model.backward(grad, need_input_grad=False)
        adam_step(params, state, lr, config.beta1, config.beta2, config.eps)

        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            report = M.evaluate(model, val_pairs)
            log.evals.append((epoch, report.psnr_db, report.ssim, report.sam_deg))
            if report.ssim > log.best_ssim:
                log.best_ssim = report.ssim
                log.best_epoch = epoch
                best_state = (model.copy_state(), epoch, report.ssim)
            if progress is not None:
                progress(epoch, loss, report)

    log.wall_time_s = time.monotonic() - t0
    return best_state, log


def grad_audit(model, pair, n_coords=100, seed=0, h=1e-6):
    """Max relative error between analytic loss gradients and central finite
    differences at n_coords randomly sampled weight coordinates.

    The model and data are cast to float64 for the audit so the finite
    differences are limited by truncation error, not storage precision.
    The step is kept small so a ReLU preactivation rarely changes sign
    inside the difference interval, where a kink would corrupt the check.
    Relative error uses |a - b| / max(|a|, |b|, 1e-3); the floor keeps
    near-zero gradient entries from reporting spurious blowups.
    """
    if n_coords < 1:
        raise ValueError(f"n_coords must be >= 1, got {n_coords}")
    model.astype(np.float64)
    x = pair.lr_upsampled[None].astype(np.float64)
    y = pair.hr[None].astype(np.float64)
    params = model.params()

    def loss_fn(training=True):
        pred = model.forward(x, training=training)
        return mse_loss(pred, y)

    loss, grad = loss_fn()
    model.backward(grad, need_input_grad=False)
    analytic = [p.grad.copy() for p in params]

    rng = Rng(seed)
    sizes = np.array([p.value.size for p in params])
    cum = np.cumsum(sizes)
    flat_idx = rng.integers(0, int(cum[-1]), size=n_coords)
    max_rel = 0.0
    for fi in flat_idx:
        pi = int(np.searchsorted(cum, fi, side="right"))
        off = int(fi - (cum[pi - 1] if pi else 0))
        flat = params[pi].value.reshape(-1)
        orig = flat[off]
        flat[off] = orig + h
        lp, _ = loss_fn()
        flat[off] = orig - h
        lm, _ = loss_fn()
        flat[off] = orig
        fd = (lp - lm) / (2 * h)
        a = float(analytic[pi].reshape(-1)[off])
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
        max_rel = max(max_rel, rel)
    return max_rel
