"""Training loop: combined cross-entropy / soft-Dice loss, momentum or
Adam updates, plateau-based early stopping, and bitwise-resumable
checkpoints.

Determinism contract: a (seed, config, dataset) triple fixes every batch
order, every update, and therefore every logged number. Per-epoch shuffle
seeds are dealt from one run-level generator whose state is stored in
each checkpoint, so a resumed run continues the exact stream.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.batches import batch_iter
from .data.checkpoint import load_checkpoint, require_matching_config, save_checkpoint
from .engine.tensor import Tape, Tensor, backward, log_softmax, softmax
from .errors import ConfigurationError, ContractError, NumericError
from .metrics import evaluate
from .model import ModelConfig, forward, init_weights

OPTIMIZERS = ("sgd-momentum", "adam")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 400
    patience: int = 10
    plateau_tol: float = 1e-4
    lambda_ce: float = 0.5
    lambda_dice: float = 0.5
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("lr, batch_size, max_epochs, patience must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer {self.optimizer!r} not one of {OPTIMIZERS}")
        if self.weight_decay < 0 or self.plateau_tol <= 0:
            raise ConfigurationError("weight_decay must be >= 0 and plateau_tol > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float
    wall_s: float


@dataclass
class RunLog:
    epochs: list[EpochStats] = field(default_factory=list)
    stop_reason: str = "max_epochs"

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "stop_reason": self.stop_reason}


class PlateauStopper:
    """Stop once the monitored value moved less than ``tol`` for
    ``patience`` consecutive epochs; the first frozen epoch resets
    nothing, so the stop lands on the (patience+1)-th frozen epoch."""

    def __init__(self, tol: float = 1e-4, patience: int = 10):
        self.tol = tol
        self.patience = patience
        self.last: float | None = None
        self.streak = 0

    def update(self, value: float) -> bool:
        if self.last is not None and abs(value - self.last) < self.tol:
            self.streak += 1
        else:
            self.streak = 0
        self.last = value
        return self.streak >= self.patience

    def state(self) -> dict:
        return {"last": self.last, "streak": self.streak}

    def load_state(self, s: dict) -> None:
        self.last = s["last"]
        self.streak = s["streak"]


# --------------------------------------------------------------------------
# loss

def segmentation_loss(
    logits: Tensor,
    masks: np.ndarray,
    num_classes: int,
    lambda_ce: float = 0.5,
    lambda_dice: float = 0.5,
    eps: float = 1e-5,
) -> Tensor:
    """lambda_ce * cross-entropy + lambda_dice * (1 - mean soft Dice)."""
    b, h, w, k = logits.shape
    if k != num_classes or masks.shape != (b, h, w):
        raise ContractError(
            f"logits {logits.shape} and masks {masks.shape} disagree for {num_classes} classes"
        )
    if masks.max(initial=0) >= num_classes:
        raise ContractError(f"mask labels exceed num_classes {num_classes}")
    onehot = Tensor(np.eye(num_classes, dtype=logits.data.dtype)[masks])
    ce = -((log_softmax(logits, axis=-1) * onehot).sum() * (1.0 / (b * h * w)))
    probs = softmax(logits, axis=-1)
    inter = (probs * onehot).sum(axis=(0, 1, 2))
    denom = probs.sum(axis=(0, 1, 2)) + Tensor(onehot.data.sum(axis=(0, 1, 2)))
    soft_dice = ((inter * 2.0) + eps) / (denom + eps)
    return ce * lambda_ce + (1.0 - soft_dice.mean()) * lambda_dice


# --------------------------------------------------------------------------
# optimizers

def _fresh(arr: np.ndarray) -> Tensor:
    t = Tensor._wrap(arr)
    t.requires_grad = True
    return t


class SgdMomentum:
    name = "sgd-momentum"

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict) -> dict[str, Tensor]:
        new = {}
        for name, p in params.items():
            g = grads[p] + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            new[name] = _fresh(p.data - self.lr * buf)
        return new

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"opt.momentum.{k}": v for k, v in self.buffers.items()}

    def state_header(self) -> dict:
        return {"name": self.name}

    def load_state(self, tensors: dict[str, np.ndarray], header: dict) -> None:
        self.buffers = {
            k[len("opt.momentum.") :]: v.copy()
            for k, v in tensors.items()
            if k.startswith("opt.momentum.")
        }


class Adam:
    name = "adam"

    def __init__(self, lr: float, weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        new = {}
        for name, p in params.items():
            g = grads[p] + self.weight_decay * p.data
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[name] = _fresh(p.data - self.lr * update)
        return new

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.adam_m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.adam_v.{k}": v for k, v in self.v.items()})
        return out

    def state_header(self) -> dict:
        return {"name": self.name, "t": self.t}

    def load_state(self, tensors: dict[str, np.ndarray], header: dict) -> None:
        self.t = int(header["t"])
        self.m = {k[len("opt.adam_m.") :]: v.copy() for k, v in tensors.items() if k.startswith("opt.adam_m.")}
        self.v = {k[len("opt.adam_v.") :]: v.copy() for k, v in tensors.items() if k.startswith("opt.adam_v.")}


def make_optimizer(tc: TrainConfig):
    if tc.optimizer == "adam":
        return Adam(tc.lr, weight_decay=tc.weight_decay)
    return SgdMomentum(tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)


# --------------------------------------------------------------------------
# inference helpers

def _stack_images(samples, dtype) -> np.ndarray:
    imgs = [np.asarray(s[0]) for s in samples]
    x = np.stack(imgs).astype(dtype, copy=False)
    if x.ndim == 3:
        x = x[..., None]
    return x


def predict_masks(params: dict[str, Tensor], cfg: ModelConfig, images, batch_size: int = 8) -> list[np.ndarray]:
    """Argmax class masks for a list of images, in input order."""
    dtype = next(iter(params.values())).dtype
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        x = np.stack([np.asarray(im) for im in chunk]).astype(dtype, copy=False)
        if x.ndim == 3:
            x = x[..., None]
        logits = forward(Tensor(x), params, cfg)
        out.extend(np.argmax(logits.data, axis=-1).astype(np.uint8))
    return out


def validation_mean_dice(params, cfg: ModelConfig, samples, batch_size: int = 8) -> float:
    preds = predict_masks(params, cfg, [s[0] for s in samples], batch_size)
    return evaluate(preds, [s[1] for s in samples], cfg.num_classes).mean_dice


# --------------------------------------------------------------------------
# checkpoint plumbing

def _checkpoint_payload(cfg, tc, params, opt, run_rng, epoch_done, history, best, stopper):
    header = {
        "model": cfg.to_dict(),
        "train": tc.to_dict(),
        "epoch": epoch_done,
        "rng_state": run_rng.bit_generator.state,
        "history": history,
        "best_val_dice": best,
        "plateau": stopper.state(),
        "optimizer": opt.state_header(),
    }
    tensors = {f"param.{k}": v.data for k, v in params.items()}
    tensors.update(opt.state_tensors())
    return header, tensors


def load_model_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict, dict]:
    """Read a checkpoint into (config, trainable params, header, raw tensors)."""
    header, tensors = load_checkpoint(path)
    if "model" not in header:
        raise ContractError(f"{path}: checkpoint header lacks a model config")
    cfg = ModelConfig.from_dict(header["model"])
    params = {
        k[len("param.") :]: _fresh(v) for k, v in tensors.items() if k.startswith("param.")
    }
    if not params:
        raise ContractError(f"{path}: checkpoint holds no parameter tensors")
    return cfg, params, header, tensors


# --------------------------------------------------------------------------
# main loop

def train_run(
    cfg: ModelConfig,
    tc: TrainConfig,
    train_set,
    val_set=None,
    out_dir=None,
    resume=None,
    dtype=np.float32,
) -> tuple[dict[str, Tensor], RunLog]:
    """Train to plateau or epoch budget; returns final params and the log.

    ``out_dir`` (optional) receives ``last.tdck`` every epoch and
    ``best.tdck`` whenever validation mean Dice improves. ``resume`` names
    a ``last.tdck`` to continue from; the continued trajectory is bitwise
    identical to the uninterrupted run.
    """
    if not train_set:
        raise ContractError("empty training set")
    val = val_set if val_set else train_set
    params = init_weights(cfg, tc.seed, dtype=dtype)
    opt = make_optimizer(tc)
    run_rng = np.random.default_rng(tc.seed)
    stopper = PlateauStopper(tc.plateau_tol, tc.patience)
    history: list[dict] = []
    walls: list[float] = []
    best = float("-inf")
    start_epoch = 0
    if resume is not None:
        r_cfg, params, header, tensors = load_model_checkpoint(resume)
        require_matching_config(header, cfg.to_dict(), "model")
        if header["optimizer"]["name"] != opt.name:
            raise ContractError(
                f"checkpoint optimizer {header['optimizer']['name']!r} != configured {opt.name!r}"
            )
        opt.load_state(tensors, header["optimizer"])
        run_rng.bit_generator.state = header["rng_state"]
        history = list(header["history"])
        walls = [0.0] * len(history)
        best = header["best_val_dice"]
        stopper.load_state(header["plateau"])
        start_epoch = int(header["epoch"])

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    stop_reason = "max_epochs"
    for epoch in range(start_epoch, tc.max_epochs):
        t0 = time.perf_counter()
        shuffle_seed = int(run_rng.integers(0, 2**63))
        losses = []
        for bi, batch in enumerate(batch_iter(train_set, tc.batch_size, shuffle_seed)):
            x = Tensor(_stack_images(batch, dtype))
            masks = np.stack([np.asarray(s[1]) for s in batch])
            with Tape() as tape:
                logits = forward(x, params, cfg)
                loss = segmentation_loss(
                    logits, masks, cfg.num_classes, tc.lambda_ce, tc.lambda_dice
                )
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericError(
                    f"non-finite loss {lval} at epoch {epoch} batch {bi} "
                    f"(epoch shuffle seed {shuffle_seed})"
                )
            grads = backward(tape, loss, params=params.values())
            params = opt.step(params, grads)
            losses.append(lval)
        val_dice = validation_mean_dice(params, cfg, val, tc.batch_size)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val_dice, "lr": tc.lr}
        )
        walls.append(time.perf_counter() - t0)
        should_stop = stopper.update(val_dice)
        if val_dice > best:
            best = val_dice
            if out_dir is not None:
                save_checkpoint(
                    out_dir / "best.tdck",
                    *_checkpoint_payload(cfg, tc, params, opt, run_rng, epoch + 1, history, best, stopper),
                )
        if out_dir is not None:
            save_checkpoint(
                out_dir / "last.tdck",
                *_checkpoint_payload(cfg, tc, params, opt, run_rng, epoch + 1, history, best, stopper),
            )
        if should_stop:
            stop_reason = "early_stop"
            break
    log = RunLog(
        epochs=[
            EpochStats(h["epoch"], h["train_loss"], h["val_dice"], h["lr"], w)
            for h, w in zip(history, walls)
        ],
        stop_reason=stop_reason,
    )
    return params, log
