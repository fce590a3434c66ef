"""Report assembly and rendering: canonical JSON, CSV/text tables, SVG gap plot.

Every number in the tables and the plot is read from the report dict; no
metric is recomputed at render time.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from ..data import QUADRANTS
from ..errors import ContractError, NumericError
from ..metrics import FairnessProfile, fairness_preservation, fairness_robustness_correlation

ACCURACY_COLUMNS = ("D_r^train", "D_f^train", "D_r^test", "D_f^test")
REPORT_FORMAT = 1


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise NumericError(f"cannot serialize non-finite value {x!r}")
    return format(x, ".17g")


def canonical_dumps(obj) -> str:
    """JSON with sorted keys, two-space indent and floats at 17 significant digits."""
    out: list[str] = []
    _emit(obj, 0, out)
    out.append("\n")
    return "".join(out)


def _emit(obj, depth: int, out: list[str]) -> None:
    pad = "  " * (depth + 1)
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(_json_string(obj))
    elif isinstance(obj, Mapping):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = sorted((str(k), v) for k, v in obj.items())
        for i, (k, v) in enumerate(items):
            out.append(pad + _json_string(k) + ": ")
            _emit(v, depth + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append("  " * depth + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad)
            _emit(v, depth + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append("  " * depth + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def _json_string(s: str) -> str:
    return json.dumps(s, ensure_ascii=True)


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def _mean_profile(profiles: Sequence[FairnessProfile]) -> FairnessProfile:
    first = profiles[0]
    sigmas = [
        {c: _mean([p.sigmas[l][c] for p in profiles]) for c in first.classes} for l in range(first.num_layers)
    ]
    gaps = [_mean([p.gaps[l] for p in profiles]) for l in range(first.num_layers)]
    return FairnessProfile(first.split, list(first.classes), sigmas, gaps)


def build_report(
    *,
    version: str,
    config: dict,
    config_digest: str,
    forget_class: int,
    seeds: Sequence[int],
    methods: Sequence[tuple[str, str]],
    original: Mapping[int, dict],
    runs: Mapping[tuple[str, int], dict],
) -> dict:
    """Reduce per-job measurements into the report dict.

    ``original[seed]`` and ``runs[(name, seed)]`` hold ``accuracy`` (quadrant
    -> float), ``profile`` (FairnessProfile) and ``robustness`` (dict from
    RobustnessReport.to_dict); runs also carry ``audit`` without timing.
    ``methods`` lists ``(name, kind)`` in report order.
    """
    orig_rows = []
    for s in seeds:
        o = original[s]
        orig_rows.append(
            {"seed": s, "accuracy": dict(o["accuracy"]), "profile": o["profile"].to_dict(), "robustness": o["robustness"]}
        )

    run_rows = []
    deviation: dict[tuple[str, int], float] = {}
    for name, kind in methods:
        for s in seeds:
            r = runs[(name, s)]
            pres = fairness_preservation(r["profile"], original[s]["profile"])
            deviation[(name, s)] = pres.max_deviation
            run_rows.append(
                {
                    "method": name,
                    "kind": kind,
                    "seed": s,
                    "accuracy": dict(r["accuracy"]),
                    "profile": r["profile"].to_dict(),
                    "preservation": pres.to_dict(),
                    "robustness": r["robustness"],
                    "audit": r["audit"],
                }
            )

    etas = _etas(original, runs)
    summary = {"original": _summary([original[s] for s in seeds], None, etas)}
    for name, _ in methods:
        summary[name] = _summary([runs[(name, s)] for s in seeds], [deviation[(name, s)] for s in seeds], etas)

    return {
        "format": REPORT_FORMAT,
        "artifact_version": version,
        "config": config,
        "config_digest": config_digest,
        "forget_class": forget_class,
        "seeds": list(seeds),
        "methods": [name for name, _ in methods],
        "etas": etas,
        "original": orig_rows,
        "runs": run_rows,
        "summary": summary,
        "preservation_ordering": _ordering(methods, seeds, deviation),
        "correlation": _correlations(methods, seeds, deviation, runs, etas),
    }


def _etas(original, runs) -> list[float]:
    sets = {tuple(e["eta"] for e in o["robustness"]["adversarial"]) for o in list(original.values()) + list(runs.values())}
    if len(sets) != 1:
        raise ContractError("attack results were computed with different eta lists; re-run the attack stage")
    return list(next(iter(sets)))


def _adv(robustness: dict, eta: float) -> float:
    for e in robustness["adversarial"]:
        if e["eta"] == eta:
            return e["accuracy"]
    raise ContractError(f"no attack result at eta={eta}")


def _summary(entries: Sequence[dict], deviations, etas) -> dict:
    out = {
        "accuracy": {q: _mean([e["accuracy"][q] for e in entries]) for q in QUADRANTS},
        "profile": _mean_profile([e["profile"] for e in entries]).to_dict(),
        "robustness": {
            "clean_accuracy": _mean([e["robustness"]["clean_accuracy"] for e in entries]),
            "adversarial": [{"eta": eta, "accuracy": _mean([_adv(e["robustness"], eta) for e in entries])} for eta in etas],
        },
    }
    if deviations is not None:
        out["max_deviation"] = _mean(deviations)
    return out


def _ordering(methods, seeds, deviation) -> dict | None:
    """Per-seed check that exact retraining preserves the gap at least as well as random labels."""
    exact = next((n for n, k in methods if k == "retrain"), None)
    rl = next((n for n, k in methods if k == "rl"), None)
    if exact is None or rl is None:
        return None
    per_seed = []
    for s in seeds:
        a, b = deviation[(exact, s)], deviation[(rl, s)]
        per_seed.append({"seed": s, "retrain": a, "reference": b, "holds": a <= b})
    held = sum(e["holds"] for e in per_seed)
    return {
        "statement": "max_deviation(retrain) <= max_deviation(reference)",
        "reference": rl,
        "per_seed": per_seed,
        "holds_count": held,
        "violating_seeds": [e["seed"] for e in per_seed if not e["holds"]],
    }


def _correlations(methods, seeds, deviation, runs, etas) -> list[dict] | None:
    pairs = [(name, s) for name, _ in methods for s in seeds]
    if len(pairs) < 3:
        return None
    out = []
    for eta in etas:
        data = [(deviation[p], _adv(runs[p]["robustness"], eta)) for p in pairs]
        c = fairness_robustness_correlation(data)
        out.append({"eta": eta, **c.to_dict()})
    return out


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def _table_rows(report: dict) -> tuple[list[str], list[list], list[str], list[list]]:
    summary = report["summary"]
    acc_header = ["method", *ACCURACY_COLUMNS]
    acc_rows = [[m, *(summary[m]["accuracy"][q] for q in QUADRANTS)] for m in report["methods"]]
    rob_header = ["method", "clean"] + [f"eta={float(e)!r}" for e in report["etas"]]
    rob_rows = []
    for m in report["methods"]:
        r = summary[m]["robustness"]
        rob_rows.append([m, r["clean_accuracy"], *(e["accuracy"] for e in r["adversarial"])])
    return acc_header, acc_rows, rob_header, rob_rows


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([row[0], *(format_float(v) for v in row[1:])])
    return buf.getvalue()


def _text(header, rows) -> str:
    cells = [list(header)] + [[row[0], *(f"{v:.4f}" for v in row[1:])] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for r in cells:
        parts = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
    return "\n".join(lines) + "\n"


def emit_tables(report: dict, out_dir) -> dict[str, Path]:
    """Write accuracy and robustness tables (CSV and aligned text), seed means per method."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    acc_h, acc_r, rob_h, rob_r = _table_rows(report)
    files = {
        "accuracy.csv": _csv(acc_h, acc_r),
        "accuracy.txt": _text(acc_h, acc_r),
        "robustness.csv": _csv(rob_h, rob_r),
        "robustness.txt": _text(rob_h, rob_r),
    }
    paths = {}
    for name, body in files.items():
        p = out_dir / name
        p.write_text(body, encoding="utf-8")
        paths[name] = p
    return paths


# ---------------------------------------------------------------------------
# gap plot
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")
_W, _H = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 64, 150, 24, 48


def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    mag = 10 ** math.floor(math.log10(v))
    for step in (1, 2, 2.5, 5, 10):
        if step * mag >= v:
            return step * mag
    return 10 * mag


def gap_plot_svg(profiles: Mapping[str, FairnessProfile | Sequence[float]]) -> str:
    """SVG text: one polyline per entry, layer index on x, fairness gap on y."""
    series = {}
    for name, p in profiles.items():
        series[name] = list(p.gaps) if isinstance(p, FairnessProfile) else [float(v) for v in p]
    if not series:
        raise ContractError("nothing to plot")
    lengths = {len(g) for g in series.values()}
    if len(lengths) != 1:
        raise ContractError(f"profiles disagree on the number of layers: {sorted(lengths)}")
    L = lengths.pop()
    if L < 1:
        raise ContractError("profiles have no layers")
    for g in series.values():
        for v in g:
            format_float(v)
    ymax = _nice_max(max(max(g) for g in series.values()))
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def xy(l: int, v: float) -> tuple[float, float]:
        x = _LEFT + (pw * (l - 1) / (L - 1) if L > 1 else pw / 2)
        y = _TOP + ph * (1.0 - v / ymax)
        return x, y

    o = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        '<g font-family="sans-serif" font-size="11" fill="black">',
        f'<line x1="{_LEFT}" y1="{_TOP + ph}" x2="{_LEFT + pw}" y2="{_TOP + ph}" stroke="black"/>',
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + ph}" stroke="black"/>',
    ]
    for l in range(1, L + 1):
        x, y = xy(l, 0.0)
        o.append(f'<line x1="{x:.2f}" y1="{y:.2f}" x2="{x:.2f}" y2="{y + 4:.2f}" stroke="black"/>')
        o.append(f'<text x="{x:.2f}" y="{y + 16:.2f}" text-anchor="middle">{l}</text>')
    for i in range(5):
        v = ymax * i / 4
        x, y = xy(1, v)
        o.append(f'<line x1="{_LEFT - 4}" y1="{y:.2f}" x2="{_LEFT}" y2="{y:.2f}" stroke="black"/>')
        o.append(f'<text x="{_LEFT - 6}" y="{y + 4:.2f}" text-anchor="end">{v:.3g}</text>')
    o.append(f'<text x="{_LEFT + pw / 2:.2f}" y="{_H - 10}" text-anchor="middle">normalization layer</text>')
    o.append(
        f'<text x="14" y="{_TOP + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {_TOP + ph / 2:.2f})">fairness gap</text>'
    )
    o.append("</g>")
    for i, (name, gaps) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join("{:.2f},{:.2f}".format(*xy(l + 1, v)) for l, v in enumerate(gaps))
        o.append(f'<polyline data-name="{escape(name)}" fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = _TOP + 14 + 16 * i
        lx = _W - _RIGHT + 12
        o.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        o.append(f'<text x="{lx + 24}" y="{ly}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    o.append("</svg>")
    return "\n".join(o) + "\n"


def emit_gap_plot(profiles: Mapping[str, FairnessProfile | Sequence[float]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(gap_plot_svg(profiles), encoding="utf-8")
    return path


def report_profiles(report: dict) -> dict[str, FairnessProfile]:
    """Seed-mean profiles from the report summary, original model first."""
    names = ["original", *report["methods"]]
    return {n: FairnessProfile.from_dict(report["summary"][n]["profile"]) for n in names}
