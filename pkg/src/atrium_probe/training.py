"""Loss, optimization loop, early stopping and best-checkpoint selection.

The loop is deliberately generic: it trains whatever module it is given on
(input, mask) pairs, so the same code drives the CNN baselines, the full
frozen-backbone segmenter, and the head-only path over precomputed token
grids. Mini-batch order is a pure function of the config seed.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .evaluation import binarize, dice

METHOD_DEFAULTS = {
    # method family -> (learning_rate, batch_size, max_epochs)
    "vit_head": (1e-3, 32, 35),
    "baseline": (1e-4, 24, 75),
}

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    method: str
    learning_rate: float
    batch_size: int
    max_epochs: int
    patience: int = 10
    seed: int = 0
    early_stop_metric: str = "val_dice"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.early_stop_metric not in ("val_dice", "val_loss"):
            raise ValueError(f"unknown early_stop_metric {self.early_stop_metric!r}")


def default_config(method: str, **overrides) -> TrainConfig:
    """Per-method defaults: the ViT head trains at lr 1e-3 / batch 32 /
    35 epochs, the baselines at lr 1e-4 / batch 24 / 75 epochs."""
    family = "vit_head" if method == "vit_head" else "baseline"
    lr, batch, epochs = METHOD_DEFAULTS[family]
    cfg = dict(
        method=method, learning_rate=lr, batch_size=batch, max_epochs=epochs
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor,
                    reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy on raw logits in the fused stable form
    max(l, 0) - l*y + log(1 + exp(-|l|)).

    Evaluated as y*softplus(-l) + (1-y)*softplus(l), which is the same
    quantity but with the exact derivative sigma(l) - y at every point.
    The piecewise spelling above disagrees with it at l = 0 (clamp and
    abs pick conflicting subgradients there), and zero-initialized biases
    make exact-zero logits common at the first step.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    y = targets.to(logits.dtype)
    if not bool(((y == 0) | (y == 1)).all()):
        raise ValueError("targets must be binary {0,1}")
    loss = y * torch.nn.functional.softplus(-logits) \
        + (1 - y) * torch.nn.functional.softplus(logits)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class TrainedCheckpoint:
    """Parameters of the best-validation epoch (not the last one), with
    the run history and the config that produced it."""

    tensors: dict[str, torch.Tensor]
    best_epoch: int
    best_val_metric: float
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def _to_float_tensor(a) -> torch.Tensor:
    if torch.is_tensor(a):
        return a.to(torch.float32)
    # np.array copies, so read-only slice views convert without fuss
    return torch.from_numpy(np.array(a, dtype=np.float32))


def _collate(dataset, indices) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for i in indices:
        x, y = dataset[i]
        xs.append(_to_float_tensor(x))
        ys.append(_to_float_tensor(y))
    return torch.stack(xs), torch.stack(ys)[:, None]


@torch.no_grad()
def _validate(model, val_set, batch_size) -> tuple[float, float]:
    """Mean val loss and mean per-slice Dice (both-empty slices score 1)."""
    model.eval()
    total_loss, dices, n = 0.0, [], 0
    for start in range(0, len(val_set), batch_size):
        xb, yb = _collate(val_set, range(start, min(start + batch_size, len(val_set))))
        logits = model(xb)
        total_loss += float(bce_with_logits(logits, yb, reduction="sum"))
        n += yb.numel()
        for i in range(len(xb)):
            pred = binarize(logits[i, 0])
            dices.append(dice(pred, yb[i, 0].numpy().astype(np.uint8)))
    return total_loss / n, float(np.mean(dices))


def train(model, train_set, val_set, cfg: TrainConfig, run_dir=None) -> TrainedCheckpoint:
    """Adam on the model's trainable parameters with per-epoch shuffled
    mini-batches (last partial batch kept). After each epoch the val
    metric is computed; training stops once it fails to improve for
    cfg.patience consecutive epochs or at cfg.max_epochs, and the
    checkpoint returned is from the best epoch.

    A non-finite training loss aborts with a diagnostic rather than
    silently producing a junk checkpoint.
    """
    if not len(train_set):
        raise ValueError("empty training set")
    if not len(val_set):
        raise ValueError("empty validation set")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters")
    optimizer = torch.optim.Adam(
        params, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )

    maximize = cfg.early_stop_metric == "val_dice"
    best_metric = None
    best_epoch = 0
    best_tensors: dict[str, torch.Tensor] = {}
    history: list[dict] = []
    epochs_without_improvement = 0

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = rng.permutation(len(train_set))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            xb, yb = _collate(train_set, perm[start : start + cfg.batch_size])
            optimizer.zero_grad()
            loss = bce_with_logits(model(xb), yb)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch offset {start} (lr={cfg.learning_rate})"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += loss.detach().item() * len(xb)
            seen += len(xb)

        val_loss, val_dice = _validate(model, val_set, cfg.batch_size)
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / seen,
                "val_loss": val_loss,
                "val_dice": val_dice,
            }
        )

        metric = val_dice if maximize else val_loss
        improved = best_metric is None or (
            metric > best_metric if maximize else metric < best_metric
        )
        if improved:
            best_metric = metric
            best_epoch = epoch
            best_tensors = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience:
                break

    ckpt = TrainedCheckpoint(
        tensors=best_tensors,
        best_epoch=best_epoch,
        best_val_metric=float(best_metric),
        history=history,
        config=asdict(cfg),
    )
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_history_csv(history, run_dir / "history.csv")
        save_checkpoint(ckpt, run_dir / "best.ckpt")
    return ckpt


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "val_dice"])
        for row in history:
            w.writerow(
                [row["epoch"], repr(row["train_loss"]),
                 repr(row["val_loss"]), repr(row["val_dice"])]
            )


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            {
                "epoch": int(r["epoch"]),
                "train_loss": float(r["train_loss"]),
                "val_loss": float(r["val_loss"]),
                "val_dice": float(r["val_dice"]),
            }
            for r in reader
        ]


def save_checkpoint(ckpt: TrainedCheckpoint, path) -> None:
    """Atomic (write-temp-then-rename) checkpoint save."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "tensors": {k: v.cpu() for k, v in ckpt.tensors.items()},
        "best_epoch": ckpt.best_epoch,
        "best_val_metric": ckpt.best_val_metric,
        "history": ckpt.history,
        "config": ckpt.config,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> TrainedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    for key in ("tensors", "best_epoch", "best_val_metric", "history", "config"):
        if key not in payload:
            raise ValueError(f"checkpoint {path} missing field {key!r}")
    return TrainedCheckpoint(
        tensors=payload["tensors"],
        best_epoch=payload["best_epoch"],
        best_val_metric=payload["best_val_metric"],
        history=payload["history"],
        config=payload["config"],
    )
