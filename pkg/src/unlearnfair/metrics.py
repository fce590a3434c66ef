"""Fairness-gap and robustness measurements.

A model's fairness profile holds, for every normalization layer l, the
per-class feature variance sigma_c^l (trace of the class covariance divided
by the feature dimension) and the gap eps^l = max_c sigma_c^l - min_c sigma_c^l.
Robustness is accuracy under a single-step fast-gradient-sign attack.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import LabeledDataset, labels_present
from .errors import ContractError, DomainError
from .tensor import Tensor


def class_variance(features, ddof: int = 0) -> float:
    """Mean per-dimension variance of a set of feature vectors.

    Equals ``trace(cov) / d`` for the covariance with divisor ``N - ddof``.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise DomainError("features must be a 2-d array of vectors")
    if f.shape[0] < 2:
        raise DomainError(f"need at least 2 feature vectors, got {f.shape[0]}")
    if ddof not in (0, 1):
        raise DomainError("ddof must be 0 or 1")
    centered = f - f.mean(axis=0)
    per_dim = (centered * centered).sum(axis=0) / (f.shape[0] - ddof)
    return float(per_dim.mean())


def fairness_gap(sigmas: Mapping[int, float]) -> float:
    if not sigmas:
        raise DomainError("fairness gap needs at least one class")
    vals = list(sigmas.values())
    return float(max(vals) - min(vals))


@dataclass
class FairnessProfile:
    """Per-layer class variances and gaps; ``sigmas[l - 1][c]`` is sigma_c^l."""

    split: str
    classes: list[int]
    sigmas: list[dict[int, float]]
    gaps: list[float]

    @property
    def num_layers(self) -> int:
        return len(self.gaps)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "classes": list(self.classes),
            "layers": [
                {"layer": l + 1, "gap": self.gaps[l], "sigma": {str(c): s[c] for c in sorted(s)}}
                for l, s in enumerate(self.sigmas)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FairnessProfile":
        layers = sorted(d["layers"], key=lambda e: e["layer"])
        return cls(
            split=d["split"],
            classes=[int(c) for c in d["classes"]],
            sigmas=[{int(c): float(v) for c, v in e["sigma"].items()} for e in layers],
            gaps=[float(e["gap"]) for e in layers],
        )


def fairness_profile(
    model,
    eval_ds: LabeledDataset,
    classes: Sequence[int] | None = None,
    *,
    ddof: int = 0,
    split: str = "retain_test",
    batch_size: int = 512,
) -> FairnessProfile:
    """Capture normalized features per class (eval mode) and reduce them to a profile."""
    classes = labels_present(eval_ds) if classes is None else sorted(int(c) for c in classes)
    if not classes:
        raise DomainError("no classes to profile")
    L = model.num_norm_layers
    sigmas: list[dict[int, float]] = [dict() for _ in range(L)]
    for c in classes:
        idx = eval_ds.class_indices(c)
        if len(idx) < 2:
            raise DomainError(f"class {c} has {len(idx)} samples; at least 2 are needed")
        model.clear_capture()
        with T.no_grad():
            for i in range(0, len(idx), batch_size):
                model.forward(eval_ds.inputs[idx[i : i + batch_size]], "eval", capture=True)
        for l in range(1, L + 1):
            sigmas[l - 1][c] = class_variance(model.features(l), ddof=ddof)
        model.clear_capture()
    return FairnessProfile(split, list(classes), sigmas, [fairness_gap(s) for s in sigmas])


@dataclass
class Preservation:
    deviations: list[float]
    max_deviation: float

    def to_dict(self) -> dict:
        return {"deviations": list(self.deviations), "max_deviation": self.max_deviation}


def fairness_preservation(profile_u: FairnessProfile, profile_ref: FairnessProfile) -> Preservation:
    """Per-layer ``|eps_u^l - eps_ref^l|`` and its maximum over layers."""
    if profile_u.num_layers != profile_ref.num_layers:
        raise ContractError(f"profiles have {profile_u.num_layers} vs {profile_ref.num_layers} layers")
    if list(profile_u.classes) != list(profile_ref.classes):
        raise ContractError("profiles were computed over different class sets")
    dev = [abs(a - b) for a, b in zip(profile_u.gaps, profile_ref.gaps)]
    return Preservation(dev, max(dev) if dev else 0.0)


# ---------------------------------------------------------------------------
# adversarial robustness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    eta: float = 0.1
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.eta < 0:
            raise DomainError("eta must be non-negative")
        if not self.clip_min < self.clip_max:
            raise DomainError("clip_min must be below clip_max")


def _logits(model, x: Tensor) -> Tensor:
    if hasattr(model, "forward"):
        return model.forward(x, "eval")
    return model(x)


def fgsm(model, x, y, cfg: AttackConfig) -> np.ndarray:
    """``clip(x + eta * sign(grad_x CE(model(x), y)))`` computed from one backward pass."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.size and (x.min() < cfg.clip_min or x.max() > cfg.clip_max):
        raise DomainError("attack inputs must lie inside the clip range")
    if cfg.eta == 0.0:
        return x
    params = model.parameters() if hasattr(model, "parameters") else []
    saved = [p.requires_grad for p in params]
    try:
        for p in params:
            p.requires_grad = False
        xt = Tensor(x, requires_grad=True)
        loss = T.softmax_cross_entropy(_logits(model, xt), y)
        T.backward(loss)
        step = np.sign(xt.grad)
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
    return np.clip(x + cfg.eta * step, cfg.clip_min, cfg.clip_max)


def adversarial_accuracy(model, dataset: LabeledDataset, cfg: AttackConfig, batch_size: int = 256) -> float:
    """Accuracy on FGSM-perturbed inputs, each sample attacked with its own label."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate accuracy on an empty dataset")
    correct = 0
    for i in range(0, len(dataset), batch_size):
        x = dataset.inputs[i : i + batch_size]
        y = dataset.labels[i : i + batch_size]
        x_adv = fgsm(model, x, y, cfg)
        with T.no_grad():
            pred = np.argmax(_logits(model, Tensor(x_adv)).data, axis=1)
        correct += int((pred == y).sum())
    return correct / len(dataset)


@dataclass
class RobustnessReport:
    clean_accuracy: float
    adversarial: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "adversarial": [{"eta": e, "accuracy": self.adversarial[e]} for e in sorted(self.adversarial)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessReport":
        return cls(d["clean_accuracy"], {float(e["eta"]): float(e["accuracy"]) for e in d["adversarial"]})


def robustness_report(model, dataset: LabeledDataset, etas: Sequence[float], clip=(0.0, 1.0)) -> RobustnessReport:
    clean = adversarial_accuracy(model, dataset, AttackConfig(0.0, *clip))
    adv = {float(e): adversarial_accuracy(model, dataset, AttackConfig(float(e), *clip)) for e in etas}
    return RobustnessReport(clean, adv)


# ---------------------------------------------------------------------------
# fairness <-> robustness
# ---------------------------------------------------------------------------


@dataclass
class Correlation:
    value: float
    degenerate: bool
    n: int

    def to_dict(self) -> dict:
        return {"spearman": self.value, "degenerate": self.degenerate, "n": self.n}


def fairness_robustness_correlation(runs: Sequence[tuple[float, float]]) -> Correlation:
    """Spearman rank correlation (average ranks for ties) of gap deviation vs adversarial accuracy.

    If either variable is constant the statistic is undefined; it is then
    reported as 0 with ``degenerate=True``.
    """
    if len(runs) < 3:
        raise DomainError(f"need at least 3 runs, got {len(runs)}")
    dev = rankdata([r[0] for r in runs], method="average")
    acc = rankdata([r[1] for r in runs], method="average")
    dc, ac = dev - dev.mean(), acc - acc.mean()
    denom = np.sqrt((dc * dc).sum() * (ac * ac).sum())
    if denom == 0.0:
        return Correlation(0.0, True, len(runs))
    return Correlation(float((dc * ac).sum() / denom), False, len(runs))
