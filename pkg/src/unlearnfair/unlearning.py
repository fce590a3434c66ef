"""Exact unlearning (retraining) and five approximate unlearning procedures.

Every procedure starts from a trained model and returns a new model; the
input model is never modified. Lower-level functions take explicit seeds;
:func:`run_method` derives them per purpose from one run seed.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import FORGET_TRAIN, QUADRANTS, ClassSplitDataset, LabeledDataset, batch_iter, make_rng
from .errors import ConfigError, DomainError
from .metrics import AttackConfig, fgsm
from .nn import InstrumentedModel, ModelArch, init_params
from .training import (
    Optimizer,
    OptimizerConfig,
    TrainConfig,
    combine_masks,
    frozen_norm_count,
    train,
)

METHODS = ("retrain", "cf", "rl", "bs", "salun", "scrub")


@dataclass(frozen=True)
class ScrubConfig:
    max_steps_per_epoch: int = 4
    min_steps_per_epoch: int = 8
    distill_temperature: float = 1.0
    retain_ce_weight: float = 1.0

    def __post_init__(self):
        if self.max_steps_per_epoch < 0 or self.min_steps_per_epoch < 0:
            raise DomainError("SCRUB step counts must be non-negative")
        if self.distill_temperature <= 0:
            raise DomainError("distill_temperature must be positive")
        if self.retain_ce_weight < 0:
            raise DomainError("retain_ce_weight must be non-negative")


@dataclass(frozen=True)
class UnlearnMethod:
    kind: str
    epochs: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    freeze_k: int | None = None
    fraction: float = 0.5  # salun
    eta: float = 0.1  # bs
    static_targets: bool = False  # bs
    scrub: ScrubConfig = field(default_factory=ScrubConfig)

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ConfigError(f"unknown unlearning method {self.kind!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must be in (0, 1]")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UnlearnResult:
    model: InstrumentedModel
    accesses: Counter = field(default_factory=Counter)
    loss_curve: list[float] = field(default_factory=list)
    steps: int = 0
    info: dict = field(default_factory=dict)


@dataclass
class UnlearnAudit:
    method: str
    seed: int
    epochs: int
    freeze_k: int | None
    accesses: dict[str, int]
    optimizer_steps: int
    wall_time_s: float
    info: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return d


def derive_seed(seed: int, purpose: str) -> int:
    return int(make_rng(seed, purpose).integers(0, 2**62))


def _counter(c: Counter) -> Counter:
    out = Counter({q: 0 for q in QUADRANTS})
    out.update(c)
    return out


# ---------------------------------------------------------------------------
# exact unlearning
# ---------------------------------------------------------------------------


def retrain(
    arch: ModelArch, split: ClassSplitDataset, train_cfg: TrainConfig, opt_cfg: OptimizerConfig, seed: int
) -> UnlearnResult:
    """Fresh initialization trained on the retain set only."""
    model = init_params(arch, seed)
    model.lineage.append("retrain")
    res = train(model, split.retain_train, train_cfg, opt_cfg)
    return UnlearnResult(model, _counter(res.access_log), res.loss_curve, res.optimizer.t)


# ---------------------------------------------------------------------------
# approximate unlearning
# ---------------------------------------------------------------------------


def cf_unlearn(
    model: InstrumentedModel,
    split: ClassSplitDataset,
    epochs: int,
    opt_cfg: OptimizerConfig,
    *,
    batch_size: int = 32,
    seed: int = 0,
    freeze_k: int | None = None,
) -> UnlearnResult:
    """Catastrophic forgetting: keep training on the retain set."""
    student = model.clone()
    student.lineage.append("cf")
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, freeze_k=freeze_k)
    res = train(student, split.retain_train, cfg, opt_cfg)
    return UnlearnResult(student, _counter(res.access_log), res.loss_curve, res.optimizer.t)


def redraw_labels(rng: np.random.Generator, count: int, num_classes: int, forget_class: int) -> np.ndarray:
    """Uniform labels from ``{0..C-1} \\ {forget_class}``."""
    if num_classes < 2:
        raise DomainError("random relabeling needs at least 2 classes")
    draw = rng.integers(0, num_classes - 1, size=count)
    return draw + (draw >= forget_class)


def _random_label_train(
    model: InstrumentedModel,
    split: ClassSplitDataset,
    epochs: int,
    opt_cfg: OptimizerConfig,
    batch_size: int,
    seed: int,
    label_seed: int,
    freeze_k: int | None,
    masks=None,
) -> tuple[Counter, list[float], int, list[np.ndarray]]:
    data = split.retain_train.concat(split.forget_train)
    is_forget = data.tags == FORGET_TRAIN
    rng = make_rng(label_seed, "rl-labels")
    f, C = split.forget_class, data.num_classes
    drawn: list[np.ndarray] = []

    def relabel(idx, y):
        sel = is_forget[idx]
        if not sel.any():
            return y
        y = y.copy()
        new = redraw_labels(rng, int(sel.sum()), C, f)
        drawn.append(new)
        y[sel] = new
        return y

    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, freeze_k=freeze_k)
    res = train(model, data, cfg, opt_cfg, masks=masks, relabel=relabel)
    return res.access_log, res.loss_curve, res.optimizer.t, drawn


def rl_unlearn(
    model: InstrumentedModel,
    split: ClassSplitDataset,
    epochs: int,
    opt_cfg: OptimizerConfig,
    label_seed: int,
    *,
    batch_size: int = 32,
    seed: int = 0,
    freeze_k: int | None = None,
) -> UnlearnResult:
    """Random labels: train on retain ∪ forget, redrawing every forget label at each step."""
    if split.num_classes < 2:
        raise DomainError("random relabeling needs at least 2 classes")
    student = model.clone()
    student.lineage.append("rl")
    acc, curve, steps, drawn = _random_label_train(
        student, split, epochs, opt_cfg, batch_size, seed, label_seed, freeze_k
    )
    return UnlearnResult(student, _counter(acc), curve, steps, {"drawn_labels": drawn})


def boundary_targets(model: InstrumentedModel, inputs: np.ndarray, forget_class: int, eta: float) -> np.ndarray:
    """Label each forget sample with the model's prediction on its FGSM neighbour.

    When the perturbed prediction is still ``forget_class`` the runner-up
    logit wins (ties resolved towards the lower class index).
    """
    labels = np.full(len(inputs), forget_class)
    x_adv = fgsm(model, inputs, labels, AttackConfig(eta=eta))
    with T.no_grad():
        logits = model.forward(x_adv, "eval").data
    order = np.argsort(-logits, axis=1, kind="stable")
    targets = order[:, 0].copy()
    stuck = targets == forget_class
    targets[stuck] = order[stuck, 1]
    return targets


def bs_unlearn(
    model: InstrumentedModel,
    split: ClassSplitDataset,
    epochs: int,
    opt_cfg: OptimizerConfig,
    *,
    eta: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
    freeze_k: int | None = None,
    static_targets: bool = False,
) -> UnlearnResult:
    """Boundary shrink: fine-tune on forget samples toward their nearest wrong class.

    Targets are recomputed from the current model at the start of every
    epoch unless ``static_targets``.
    """
    forget = split.forget_train
    if len(forget) == 0:
        raise DomainError("boundary shrink needs a non-empty forget set")
    student = model.clone()
    student.lineage.append("bs")
    optimizer = Optimizer(student.parameters(), opt_cfg, combine_masks(student, freeze_k))
    accesses: Counter = Counter()
    curve: list[float] = []
    targets = None
    history = []
    for epoch in range(epochs):
        if targets is None or not static_targets:
            targets = boundary_targets(student, forget.inputs, split.forget_class, eta)
            history.append(targets)
        cur = targets
        cfg = TrainConfig(epochs=epoch + 1, batch_size=batch_size, seed=seed, freeze_k=freeze_k)
        res = train(
            student,
            forget,
            cfg,
            opt_cfg,
            optimizer=optimizer,
            start_epoch=epoch,
            relabel=lambda idx, y, cur=cur: cur[idx],
            access_log=accesses,
        )
        curve.extend(res.loss_curve)
    return UnlearnResult(student, _counter(accesses), curve, optimizer.t, {"targets": history})


def saliency_mask(grads: list[np.ndarray], fraction: float, eligible: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Select the ``round(fraction * N)`` eligible scalars with the largest |gradient|.

    Scalars are ranked over all parameters jointly (flattened in parameter
    order); equal saliencies go to the lower global index.
    """
    if not 0.0 < fraction <= 1.0:
        raise DomainError("fraction must be in (0, 1]")
    flat = np.concatenate([np.abs(np.asarray(g, dtype=np.float64)).reshape(-1) for g in grads])
    ok = np.ones(flat.shape, dtype=bool)
    if eligible is not None:
        ok = np.concatenate([np.asarray(e, dtype=bool).reshape(-1) for e in eligible])
    candidates = np.flatnonzero(ok)
    count = int(np.floor(fraction * candidates.size + 0.5))
    order = np.lexsort((candidates, -flat[candidates]))
    chosen = np.zeros(flat.shape, dtype=bool)
    chosen[candidates[order[:count]]] = True
    out, start = [], 0
    for g in grads:
        n = np.size(g)
        out.append(chosen[start : start + n].reshape(np.shape(g)))
        start += n
    return out


def forget_gradients(model: InstrumentedModel, forget: LabeledDataset) -> list[np.ndarray]:
    """Gradient of the mean forget-set cross-entropy at the current parameters (eval mode)."""
    params = model.parameters()
    for p in params:
        p.grad = None
    loss = T.softmax_cross_entropy(model.forward(forget.inputs, "eval"), forget.labels)
    T.backward(loss)
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    return grads


def salun_unlearn(
    model: InstrumentedModel,
    split: ClassSplitDataset,
    epochs: int,
    fraction: float,
    opt_cfg: OptimizerConfig,
    label_seed: int,
    *,
    batch_size: int = 32,
    seed: int = 0,
    freeze_k: int | None = None,
) -> UnlearnResult:
    """Random-label unlearning restricted to the most forget-salient scalars."""
    if len(split.forget_train) == 0:
        raise DomainError("saliency needs a non-empty forget set")
    student = model.clone()
    student.lineage.append("salun")
    eligible = combine_masks(student, freeze_k)
    mask = saliency_mask(forget_gradients(student, split.forget_train), fraction, eligible)
    acc, curve, steps, drawn = _random_label_train(
        student, split, epochs, opt_cfg, batch_size, seed, label_seed, freeze_k, masks=mask
    )
    selected = int(sum(m.sum() for m in mask))
    return UnlearnResult(student, _counter(acc), curve, steps, {"mask": mask, "mask_size": selected, "drawn_labels": drawn})


def scrub_unlearn(
    teacher: InstrumentedModel,
    split: ClassSplitDataset,
    epochs: int,
    cfg: ScrubConfig,
    opt_cfg: OptimizerConfig,
    *,
    batch_size: int = 32,
    seed: int = 0,
    freeze_k: int | None = None,
) -> UnlearnResult:
    """Teacher-student unlearning with alternating max and min passes.

    Max steps ascend KL(student || teacher) on forget batches; min steps
    descend KL on retain batches plus ``retain_ce_weight`` times the retain
    cross-entropy. The teacher only ever runs in eval mode without a graph.
    """
    student = teacher.clone()
    student.lineage.append("scrub")
    masks = combine_masks(student, freeze_k)
    optimizer = Optimizer(student.parameters(), opt_cfg, masks)
    params = student.parameters()
    live = [True] * len(params) if masks is None else [bool(m.any()) for m in masks]
    saved = [p.requires_grad for p in params]
    frozen_norms = frozen_norm_count(student, freeze_k)
    accesses: Counter = Counter()
    curve: list[float] = []
    Tmp = cfg.distill_temperature

    def step(ds: LabeledDataset, idx: np.ndarray, ascend: bool) -> float | None:
        if len(idx) < 2 and student.has_batch_norm:
            return None
        x, y = ds.inputs[idx], ds.labels[idx]
        accesses.update(ds.tags[idx].tolist())
        with T.no_grad():
            t_logits = teacher.forward(x, "eval").data
        optimizer.zero_grad()
        s_logits = student.forward(x, "train", eval_norms_below=frozen_norms)
        kl = T.kl_divergence(s_logits, t_logits, Tmp)
        if ascend:
            loss = T.scale(kl, -1.0)
        elif cfg.retain_ce_weight:
            loss = T.add(kl, T.scale(T.softmax_cross_entropy(s_logits, y), cfg.retain_ce_weight))
        else:
            loss = kl
        if any(live):
            T.backward(loss)
            optimizer.step()
        return loss.item()

    try:
        for p, on in zip(params, live):
            p.requires_grad = on
        for epoch in range(epochs):
            losses = []
            if len(split.forget_train):
                for idx in batch_iter(split.forget_train, batch_size, seed, 2 * epoch)[: cfg.max_steps_per_epoch]:
                    v = step(split.forget_train, idx, ascend=True)
                    if v is not None:
                        losses.append(v)
            for idx in batch_iter(split.retain_train, batch_size, seed, 2 * epoch + 1)[: cfg.min_steps_per_epoch]:
                v = step(split.retain_train, idx, ascend=False)
                if v is not None:
                    losses.append(v)
            curve.append(float(np.mean(losses)) if losses else 0.0)
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
            p.grad = None
    return UnlearnResult(student, _counter(accesses), curve, optimizer.t)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def run_method(
    method: UnlearnMethod,
    original: InstrumentedModel,
    split: ClassSplitDataset,
    *,
    arch: ModelArch,
    train_cfg: TrainConfig,
    train_opt: OptimizerConfig,
    seed: int,
) -> tuple[InstrumentedModel, UnlearnAudit]:
    """Run one method and record what it touched.

    ``train_cfg``/``train_opt`` describe how the original model was trained;
    retraining reuses them with a fresh initialization.
    """
    kind = method.kind
    common = dict(batch_size=method.batch_size, seed=derive_seed(seed, f"shuffle-{kind}"), freeze_k=method.freeze_k)
    label_seed = derive_seed(seed, "rl-labels")
    t0 = time.perf_counter()
    if kind == "retrain":
        cfg = TrainConfig(
            epochs=train_cfg.epochs,
            batch_size=train_cfg.batch_size,
            seed=derive_seed(seed, "shuffle-retrain"),
            shuffle=train_cfg.shuffle,
        )
        res = retrain(arch, split, cfg, train_opt, derive_seed(seed, "init-retrain"))
        epochs = train_cfg.epochs
    elif kind == "cf":
        res = cf_unlearn(original, split, method.epochs, method.optimizer, **common)
        epochs = method.epochs
    elif kind == "rl":
        # rl and salun share the shuffle stream so salun(fraction=1) replays rl exactly
        common["seed"] = derive_seed(seed, "shuffle-rl")
        res = rl_unlearn(original, split, method.epochs, method.optimizer, label_seed, **common)
        epochs = method.epochs
    elif kind == "salun":
        common["seed"] = derive_seed(seed, "shuffle-rl")
        res = salun_unlearn(original, split, method.epochs, method.fraction, method.optimizer, label_seed, **common)
        epochs = method.epochs
    elif kind == "bs":
        res = bs_unlearn(
            original, split, method.epochs, method.optimizer, eta=method.eta, static_targets=method.static_targets, **common
        )
        epochs = method.epochs
    elif kind == "scrub":
        res = scrub_unlearn(original, split, method.epochs, method.scrub, method.optimizer, **common)
        epochs = method.epochs
    else:  # pragma: no cover - guarded by UnlearnMethod
        raise ConfigError(f"unknown unlearning method {kind!r}")
    wall = time.perf_counter() - t0
    info = {}
    if "mask_size" in res.info:
        info["mask_size"] = res.info["mask_size"]
    audit = UnlearnAudit(
        method=kind,
        seed=seed,
        epochs=epochs,
        freeze_k=None if kind == "retrain" else method.freeze_k,
        accesses={k: int(v) for k, v in sorted(res.accesses.items())},
        optimizer_steps=res.steps,
        wall_time_s=wall,
        info=info,
    )
    return res.model, audit


__all__ = [
    "METHODS",
    "ScrubConfig",
    "UnlearnMethod",
    "UnlearnAudit",
    "UnlearnResult",
    "retrain",
    "cf_unlearn",
    "rl_unlearn",
    "bs_unlearn",
    "salun_unlearn",
    "scrub_unlearn",
    "saliency_mask",
    "redraw_labels",
    "boundary_targets",
    "run_method",
    "derive_seed",
]
