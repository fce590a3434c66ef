"""Optimizers, the deterministic training loop and accuracy evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledDataset, batch_iter
from .errors import ContractError, DomainError
from .nn import InstrumentedModel, block_start, freeze_prefix, load_arrays, model_from_arrays, model_meta, save_arrays
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    """``momentum`` is the SGD velocity coefficient and doubles as Adam's beta1.

    Weight decay is coupled: ``wd * theta`` is added to the gradient before
    the update rule sees it.
    """

    kind: str = "adam"
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise DomainError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        if self.kind == "adam" and not (0.0 <= self.beta2 < 1.0 and self.adam_epsilon > 0):
            raise DomainError("invalid Adam beta2/epsilon")

    @property
    def beta1(self) -> float:
        return self.momentum

    def to_dict(self) -> dict:
        return asdict(self)


# Small-learning-rate settings for large-scale runs; the desk defaults use larger rates.
FULL_SCALE_TRAIN_ADAM = OptimizerConfig("adam", 1e-4, 0.9, 5e-4)
FULL_SCALE_BS_SGD = OptimizerConfig("sgd", 1e-4, 0.0, 0.0)
FULL_SCALE_SALUN_SGD = OptimizerConfig("sgd", 1e-4, 0.9, 5e-4)
FULL_SCALE_SCRUB_ADAM = OptimizerConfig("adam", 1e-4, 0.9, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    freeze_k: int | None = None
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------


def _check_shapes(params, grads, *states):
    for i, p in enumerate(params):
        shapes = [np.shape(grads[i])] + [np.shape(s[i]) for s in states]
        if any(s != p.shape for s in shapes):
            raise ContractError(f"parameter {i}: shape mismatch between params, grads and state")


def _mask_at(masks, i):
    """None when every entry is trainable, False when none is, else the boolean mask."""
    if masks is None or masks[i] is None:
        return None
    m = masks[i]
    if m.all():
        return None
    return m if m.any() else False


def sgd_step(params: Sequence[Tensor], grads, state: dict, cfg: OptimizerConfig, masks=None) -> None:
    """In-place SGD with momentum: ``v <- mu*v + (g + wd*theta)``, ``theta <- theta - lr*v``.

    ``state["velocity"]`` holds one array per parameter. Masked-out entries
    keep both their value and their velocity.
    """
    vel = state["velocity"]
    _check_shapes(params, grads, vel)
    lr, mu, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    for i, p in enumerate(params):
        m = _mask_at(masks, i)
        if m is False:
            continue
        g = grads[i] + wd * p.data if wd else grads[i]
        v = mu * vel[i] + g
        new = p.data - lr * v
        if m is not None:
            v = np.where(m, v, vel[i])
            new = np.where(m, new, p.data)
        vel[i] = v
        p.data = new


def adam_step(params: Sequence[Tensor], grads, state: dict, cfg: OptimizerConfig, t: int, masks=None) -> None:
    """In-place bias-corrected Adam step number ``t`` (1-based)."""
    if t < 1:
        raise DomainError("Adam step index starts at 1")
    m1, m2 = state["m"], state["v"]
    _check_shapes(params, grads, m1, m2)
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_epsilon
    lr, wd = cfg.learning_rate, cfg.weight_decay
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        keep = _mask_at(masks, i)
        if keep is False:
            continue
        g = grads[i] + wd * p.data if wd else grads[i]
        m = b1 * m1[i] + (1.0 - b1) * g
        v = b2 * m2[i] + (1.0 - b2) * (g * g)
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if keep is not None:
            m = np.where(keep, m, m1[i])
            v = np.where(keep, v, m2[i])
            new = np.where(keep, new, p.data)
        m1[i], m2[i] = m, v
        p.data = new


class Optimizer:
    """Holds per-parameter state and applies :func:`sgd_step` / :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimizerConfig, masks=None):
        self.params = list(params)
        self.cfg = cfg
        self.masks = None if masks is None else list(masks)
        self.t = 0
        zeros = lambda: [np.zeros(p.shape) for p in self.params]  # noqa: E731
        self.state = {"velocity": zeros()} if cfg.kind == "sgd" else {"m": zeros(), "v": zeros()}

    def step(self) -> None:
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        self.t += 1
        if self.cfg.kind == "sgd":
            sgd_step(self.params, grads, self.state, self.cfg, self.masks)
        else:
            adam_step(self.params, grads, self.state, self.cfg, self.t, self.masks)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt/t": np.array(self.t, dtype=np.int64)}
        for key, arrs in self.state.items():
            for i, a in enumerate(arrs):
                out[f"opt/{key}/{i}"] = a
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt/t"])
        for key, arrs in self.state.items():
            for i in range(len(arrs)):
                arrs[i] = np.array(arrays[f"opt/{key}/{i}"], dtype=np.float64)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: InstrumentedModel
    loss_curve: list[float]
    optimizer: Optimizer
    dropped_batches: int = 0
    access_log: Counter = field(default_factory=Counter)


def combine_masks(model: InstrumentedModel, freeze_k: int | None, masks=None) -> list[np.ndarray] | None:
    if freeze_k is None and masks is None:
        return None
    out = [np.ones(p.shape, dtype=bool) for p in model.parameters()]
    if freeze_k is not None:
        out = [a & b for a, b in zip(out, freeze_prefix(model, freeze_k))]
    if masks is not None:
        out = [a & np.asarray(b, dtype=bool) for a, b in zip(out, masks)]
    return out


def frozen_norm_count(model: InstrumentedModel, freeze_k: int | None) -> int:
    """Norm layers inside the frozen prefix; they keep their running statistics."""
    if freeze_k is None:
        return 0
    return min(freeze_k - 1, model.num_norm_layers)


def train(
    model: InstrumentedModel,
    dataset: LabeledDataset,
    train_cfg: TrainConfig,
    opt_cfg: OptimizerConfig,
    *,
    masks=None,
    optimizer: Optimizer | None = None,
    start_epoch: int = 0,
    relabel: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    access_log: Counter | None = None,
) -> TrainResult:
    """Train ``model`` in place with mini-batch cross-entropy.

    Each epoch visits ``batch_iter(dataset, batch_size, seed, epoch)``. A final
    batch of a single sample is skipped when the model has batch norm.
    ``relabel(indices, labels)`` may replace the labels of a batch before the
    loss is formed. ``access_log`` is incremented with the tag of every sample
    the optimizer consumes.
    """
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    if dataset.num_classes != model.arch.num_classes:
        raise DomainError("dataset class count does not match the model")
    if access_log is None:
        access_log = Counter()
    all_masks = combine_masks(model, train_cfg.freeze_k, masks)
    params = model.parameters()
    if optimizer is None:
        optimizer = Optimizer(params, opt_cfg, all_masks)
    live = [True] * len(params) if all_masks is None else [bool(m.any()) for m in all_masks]
    saved_flags = [p.requires_grad for p in params]
    for p, on in zip(params, live):
        p.requires_grad = on
    any_live = any(live)
    frozen_norms = frozen_norm_count(model, train_cfg.freeze_k)
    # A frozen prefix runs its norms in eval mode, so its output is a fixed
    # function of the input: compute it once instead of at every step.
    start = 0
    if any_live and train_cfg.freeze_k is not None and train_cfg.freeze_k > 1:
        start = block_start(model, train_cfg.freeze_k)
    inputs = model.forward_prefix(dataset.inputs, start) if start else dataset.inputs

    curve: list[float] = []
    dropped = 0
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            losses = []
            for idx in batch_iter(len(dataset), train_cfg.batch_size, train_cfg.seed, epoch, train_cfg.shuffle):
                if len(idx) < 2 and model.has_batch_norm:
                    dropped += 1
                    logger.info("epoch %d: dropped a batch of size %d (batch norm needs >= 2)", epoch, len(idx))
                    continue
                x = inputs[idx]
                y = dataset.labels[idx]
                if relabel is not None:
                    y = relabel(idx, y)
                access_log.update(dataset.tags[idx].tolist())
                if not any_live:
                    with T.no_grad():
                        loss = T.softmax_cross_entropy(model.forward(x, "eval", start=start), y)
                    losses.append(loss.item())
                    continue
                optimizer.zero_grad()
                logits = model.forward(x, "train", eval_norms_below=frozen_norms, start=start)
                loss = T.softmax_cross_entropy(logits, y)
                T.backward(loss)
                optimizer.step()
                losses.append(loss.item())
            curve.append(float(np.mean(losses)) if losses else float("nan"))
    finally:
        for p, flag in zip(params, saved_flags):
            p.requires_grad = flag
            p.grad = None
    return TrainResult(model, curve, optimizer, dropped, access_log)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_logits(model: InstrumentedModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    with T.no_grad():
        outs = [model.forward(inputs[i : i + batch_size], "eval").data for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate_accuracy(model: InstrumentedModel, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit (ties -> lowest class) equals the label."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate accuracy on an empty dataset")
    pred = np.argmax(predict_logits(model, dataset.inputs, batch_size), axis=1)
    return float(np.mean(pred == dataset.labels))


def write_loss_curve(path, curve: Sequence[float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve):
            w.writerow([i, format(v, ".17g")])


# ---------------------------------------------------------------------------
# training checkpoints
# ---------------------------------------------------------------------------


def config_digest(*configs) -> str:
    blob = json.dumps([c.to_dict() if hasattr(c, "to_dict") else c for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    model: InstrumentedModel
    optimizer_cfg: OptimizerConfig
    optimizer_arrays: dict[str, np.ndarray]
    epoch: int
    digest: str

    def restore_optimizer(self, masks=None) -> Optimizer:
        opt = Optimizer(self.model.parameters(), self.optimizer_cfg, masks)
        opt.load_state_arrays(self.optimizer_arrays)
        return opt


def save_checkpoint(path, model: InstrumentedModel, optimizer: Optimizer, epoch: int, digest: str) -> None:
    meta = model_meta(model)
    meta["training"] = {"epoch": epoch, "digest": digest, "optimizer": optimizer.cfg.to_dict()}
    arrays = model.state_arrays()
    arrays.update(optimizer.state_arrays())
    save_arrays(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if "training" not in meta:
        raise DomainError(f"{path} is a model snapshot without training state")
    model = model_from_arrays({k: v for k, v in arrays.items() if not k.startswith("opt/")}, meta)
    tr = meta["training"]
    return Checkpoint(
        model=model,
        optimizer_cfg=OptimizerConfig(**tr["optimizer"]),
        optimizer_arrays={k: v for k, v in arrays.items() if k.startswith("opt/")},
        epoch=int(tr["epoch"]),
        digest=tr["digest"],
    )
