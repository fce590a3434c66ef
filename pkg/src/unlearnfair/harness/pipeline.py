"""Train -> unlearn -> profile -> attack -> report, each stage persisting its output.

Output directory layout (format 1)::

    checkpoints/<model>/seed<s>.npz   model snapshots; <model> is "original" or a method name
    train/loss_seed<s>.csv            per-epoch mean loss of the original model
    audits/<method>/seed<s>.json      UnlearnAudit including wall time
    measures/<model>/seed<s>.json     accuracy quadruple and fairness profile
    attacks/<model>/seed<s>.json      RobustnessReport
    report.json                       canonical report (no wall-clock values)
    timings.json                      wall time per job, kept out of the report
    tables/{accuracy,robustness}.{csv,txt}
    plots/fairness_gap.svg

Each stage reads only what earlier stages wrote, so running the stages one
by one produces the same files as :func:`run_experiment`.
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable, Sequence

from .. import __version__
from ..data import QUADRANTS, ClassSplitDataset
from ..errors import StageError, UnlearnFairError
from ..metrics import FairnessProfile, RobustnessReport, fairness_profile, robustness_report
from ..nn import init_params, load_model, save_model
from ..training import TrainConfig, evaluate_accuracy, train, write_loss_curve
from ..unlearning import derive_seed, run_method
from .config import ExperimentConfig
from .report import build_report, canonical_dumps, emit_gap_plot, emit_tables, report_profiles

logger = logging.getLogger(__name__)

ORIGINAL = "original"
STAGES = ("train", "unlearn", "profile", "attack", "report")


def _seed_file(root: Path, sub: str, model: str, seed: int, ext: str) -> Path:
    return root / sub / model / f"seed{seed}.{ext}"


def checkpoint_path(cfg: ExperimentConfig, model: str, seed: int) -> Path:
    return _seed_file(cfg.output_dir, "checkpoints", model, seed, "npz")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_dumps(obj), encoding="utf-8")


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _guard(stage: str, method: str | None, seed: int | None, fn: Callable):
    try:
        return fn()
    except StageError:
        raise
    except (UnlearnFairError, OSError, ValueError, ArithmeticError, KeyError) as exc:
        raise StageError(stage, str(exc) or type(exc).__name__, method, seed) from exc


def _models(cfg: ExperimentConfig) -> list[str]:
    return [ORIGINAL] + [m.name for m in cfg.methods]


def _split(cfg: ExperimentConfig, stage: str) -> ClassSplitDataset:
    return _guard(stage, None, None, cfg.load_split)


def stage_train(cfg: ExperimentConfig) -> None:
    """Train one original model per seed on the full training set."""
    split = _split(cfg, "train")
    full = split.full_train()
    for seed in cfg.seeds:

        def job():
            model = init_params(cfg.arch, seed)
            model.lineage.append(ORIGINAL)
            tc = TrainConfig(cfg.train_cfg.epochs, cfg.train_cfg.batch_size, derive_seed(seed, "shuffle-train"))
            res = train(model, full, tc, cfg.train_opt)
            save_model(model, checkpoint_path(cfg, ORIGINAL, seed))
            write_loss_curve(cfg.output_dir / "train" / f"loss_seed{seed}.csv", res.loss_curve)

        logger.info("train seed=%d", seed)
        _guard("train", None, seed, job)


def stage_unlearn(cfg: ExperimentConfig, methods: Sequence[str] | None = None) -> None:
    """Run every configured method (or the named subset) for every seed."""
    names = [m.name for m in cfg.methods] if methods is None else list(methods)
    specs = [cfg.method(n) for n in names]
    split = _split(cfg, "unlearn")
    for seed in cfg.seeds:
        original = _guard("unlearn", None, seed, lambda: load_model(checkpoint_path(cfg, ORIGINAL, seed)))
        for spec in specs:

            def job():
                model, audit = run_method(
                    spec.method,
                    original,
                    split,
                    arch=cfg.arch,
                    train_cfg=cfg.train_cfg,
                    train_opt=cfg.train_opt,
                    seed=seed,
                )
                save_model(model, checkpoint_path(cfg, spec.name, seed))
                record = audit.to_dict(include_timing=True)
                record["name"] = spec.name
                _write_json(_seed_file(cfg.output_dir, "audits", spec.name, seed, "json"), record)

            logger.info("unlearn method=%s seed=%d", spec.name, seed)
            _guard("unlearn", spec.name, seed, job)


def stage_profile(cfg: ExperimentConfig) -> None:
    """Accuracy on the four quadrants plus the retain-test fairness profile, for every model."""
    split = _split(cfg, "profile")
    quads = split.quadrants()
    classes = sorted(c for c in range(split.num_classes) if c != cfg.forget_class)
    for name in _models(cfg):
        for seed in cfg.seeds:

            def job():
                model = load_model(checkpoint_path(cfg, name, seed))
                acc = {q: evaluate_accuracy(model, quads[q]) for q in QUADRANTS}
                prof = fairness_profile(model, split.retain_test, classes, ddof=cfg.ddof)
                _write_json(
                    _seed_file(cfg.output_dir, "measures", name, seed, "json"),
                    {"model": name, "seed": seed, "accuracy": acc, "profile": prof.to_dict()},
                )

            _guard("profile", None if name == ORIGINAL else name, seed, job)


def stage_attack(cfg: ExperimentConfig, etas: Sequence[float] | None = None) -> None:
    """FGSM accuracy on the retain-test set at each eta (``etas`` overrides the config)."""
    etas = cfg.etas if etas is None else tuple(float(e) for e in etas)
    split = _split(cfg, "attack")
    for name in _models(cfg):
        for seed in cfg.seeds:

            def job():
                model = load_model(checkpoint_path(cfg, name, seed))
                rep = robustness_report(model, split.retain_test, etas)
                _write_json(_seed_file(cfg.output_dir, "attacks", name, seed, "json"), rep.to_dict())

            _guard("attack", None if name == ORIGINAL else name, seed, job)


def _load_measures(cfg: ExperimentConfig, name: str, seed: int) -> dict:
    m = _read_json(_seed_file(cfg.output_dir, "measures", name, seed, "json"), "profile results")
    a = _read_json(_seed_file(cfg.output_dir, "attacks", name, seed, "json"), "attack results")
    return {
        "accuracy": m["accuracy"],
        "profile": FairnessProfile.from_dict(m["profile"]),
        "robustness": RobustnessReport.from_dict(a).to_dict(),
    }


def stage_report(cfg: ExperimentConfig) -> dict:
    """Assemble report.json, tables, the gap plot and timings.json from saved artifacts."""
    out = cfg.output_dir

    def collect():
        original = {s: _load_measures(cfg, ORIGINAL, s) for s in cfg.seeds}
        runs, timings = {}, []
        for spec in cfg.methods:
            for s in cfg.seeds:
                audit = _read_json(_seed_file(out, "audits", spec.name, s, "json"), "audit")
                timings.append({"method": spec.name, "seed": s, "wall_time_s": audit.pop("wall_time_s")})
                runs[(spec.name, s)] = {**_load_measures(cfg, spec.name, s), "audit": audit}
        return original, runs, timings

    original, runs, timings = _guard("report", None, None, collect)

    def assemble():
        report = build_report(
            version=__version__,
            config={k: v for k, v in cfg.raw.items() if k != "output_dir"},
            config_digest=cfg.digest,
            forget_class=cfg.forget_class,
            seeds=cfg.seeds,
            methods=[(m.name, m.kind) for m in cfg.methods],
            original=original,
            runs=runs,
        )
        _write_json(out / "report.json", report)
        emit_tables(report, out / "tables")
        emit_gap_plot(report_profiles(report), out / "plots" / "fairness_gap.svg")
        _write_json(out / "timings.json", {"jobs": timings})
        return report

    return _guard("report", None, None, assemble)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """All stages in order; returns the report dict that was written to ``report.json``."""
    t0 = time.perf_counter()
    stage_train(cfg)
    stage_unlearn(cfg)
    stage_profile(cfg)
    stage_attack(cfg)
    report = stage_report(cfg)
    logger.info("experiment finished in %.1f s", time.perf_counter() - t0)
    return report
