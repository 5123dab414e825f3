"""Loss, training loop and evaluation helpers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .config import RunConfig
from .data import synth_dataset
from .io import save_checkpoint
from .metrics import dice
from .network import ShuffleMixerNet, build_model
from .optim import Adam
from .tensor import NonFiniteError, Tensor, backward, no_grad

DTYPES = {"f32": np.float32, "f64": np.float64}


def one_hot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    return np.eye(classes, dtype=dtype)[labels]


def segmentation_loss(logits, target: np.ndarray, eps: float = 1e-5):
    """0.5 * soft Dice loss (foreground classes) + 0.5 * voxel cross-entropy."""
    classes = logits.shape[-1]
    onehot = Tensor(one_hot(target, classes, logits.dtype))
    ce = ops.scale(ops.mean(ops.sum(ops.mul(ops.log_softmax(logits), onehot), axis=-1)), -1.0)
    probs = ops.softmax(logits)
    axes = tuple(range(logits.ndim - 1))
    fg = lambda t: ops.narrow(t, -1, 1, classes - 1)  # noqa: E731
    inter = ops.sum(ops.mul(fg(probs), fg(onehot)), axis=axes)
    denom = ops.add(ops.sum(fg(probs), axis=axes), ops.sum(fg(onehot), axis=axes))
    soft = ops.div(ops.add(ops.scale(inter, 2.0), eps), ops.add(denom, eps))
    dice_loss = ops.sub(1.0, ops.mean(soft))
    return ops.add(ops.scale(dice_loss, 0.5), ops.scale(ce, 0.5))


def predict(model: ShuffleMixerNet, volumes: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Eval-mode label prediction for ``(N, H, W, D, Ci)`` volumes."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(volumes), batch_size):
            logits = model(Tensor(volumes[i:i + batch_size]))
            out.append(np.argmax(logits.data, axis=-1).astype(np.uint8))
    return np.concatenate(out)


def mean_foreground_dice(pred: np.ndarray, labels: np.ndarray, classes: int) -> float:
    scores = [dice(pred[i] == k, labels[i] == k) for i in range(len(pred)) for k in range(1, classes)]
    return float(np.mean(scores))


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    dice_trace: list = field(default_factory=list)
    best_dice: float = 0.0
    best_step: int = -1
    seconds: float = 0.0
    model: Optional[ShuffleMixerNet] = None


def _assert_finite_params(model: ShuffleMixerNet, step: int) -> None:
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            raise NonFiniteError(name, where=f"parameter after step {step}")


def train(run: RunConfig, log: Callable[[str], None] = print, out_dir: Optional[Path] = None,
          max_dice_stop: Optional[float] = None) -> TrainResult:
    """Train on the synthetic task; deterministic given ``run``.

    Log lines are ``key=value`` records.  With ``out_dir`` the final and best
    (by train-set Dice) checkpoints are written there.
    """
    cfg = run.pyramid()
    dtype = DTYPES[run.precision]
    cases = synth_dataset(run.synth(), run.seed)
    volumes = np.stack([v for v, _ in cases]).astype(dtype)
    labels = np.stack([lab for _, lab in cases])
    model = build_model(cfg, run.seed, dtype=dtype)
    opt = Adam(model.parameters(), lr=run.lr)
    order_rng = np.random.Generator(np.random.PCG64(run.seed + 1))
    result = TrainResult(model=model)
    queue: list[int] = []
    t0 = time.perf_counter()
    classes = cfg.out_channels
    for step in range(run.steps):
        while len(queue) < run.batch_size:
            queue.extend(order_rng.permutation(len(volumes)).tolist())
        idx, queue = queue[:run.batch_size], queue[run.batch_size:]
        model.train()
        loss = segmentation_loss(model(Tensor(volumes[idx])), labels[idx])
        backward(loss)
        opt.step()
        _assert_finite_params(model, step)
        value = loss.data.item()
        result.losses.append(value)
        log(f"step={step} loss={value:.9e}")
        last = step == run.steps - 1
        if (step + 1) % run.eval_every == 0 or last:
            score = mean_foreground_dice(predict(model, volumes, run.batch_size), labels, classes)
            result.dice_trace.append((step, score))
            log(f"step={step} train_dice={score:.6f}")
            if score > result.best_dice:
                result.best_dice, result.best_step = score, step
                if out_dir is not None:
                    save_checkpoint(Path(out_dir) / "best.smck", model)
            if max_dice_stop is not None and score >= max_dice_stop:
                break
    result.seconds = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.smck", model)
    return result
