"""
Global test-set evaluation, multi-seed aggregation and every on-disk result format:
history CSVs, key=value summaries, SVG curves and the method comparison table.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import numpy as np
from dotenv import dotenv_values

from .errors import DataFormatError, UsageError
from .segmentation_model import ParamSet, binarize, dice, predict
from .synth_data import SampleArrays
from .tensor_core import pixel_bce

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "dice", "ce_loss", "mia_auc", "wall_ms")
METRICS = ("dice", "ce_loss", "mia_auc")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    dice: float
    ce_loss: float
    mia_auc: Optional[float] = None
    wall_ms: float = 0.0


@dataclass
class ExperimentHistory:
    method: str
    seed: int
    records: List[RoundRecord] = field(default_factory=list)
    summary: Dict[str, str] = field(default_factory=dict)

    def append(self, record: RoundRecord):
        if self.records and record.round <= self.records[-1].round:
            raise UsageError(f"round {record.round} does not follow round {self.records[-1].round}")
        if not 0.0 <= record.dice <= 1.0 or record.ce_loss < 0:
            raise UsageError(f"round {record.round}: dice {record.dice} or CE {record.ce_loss} out of range")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> Optional[RoundRecord]:
        return self.records[-1] if self.records else None

    def series(self, metric: str) -> List[Tuple[int, float]]:
        return [(r.round, getattr(r, metric)) for r in self.records if getattr(r, metric) is not None]

    def best_so_far(self, metric: str = "dice") -> List[float]:
        return list(np.maximum.accumulate([v for _, v in self.series(metric)])) if self.records else []

    def final_metric(self, metric: str) -> Optional[float]:
        values = self.series(metric)
        return values[-1][1] if values else None


def evaluate(params: ParamSet, test_set: SampleArrays, batch_size: int = 64, threshold: float = 0.5) -> Tuple[float, float]:
    """Mean per-image Dice and mean per-image BCE of an eval-mode forward pass."""
    if len(test_set) == 0:
        raise UsageError("cannot evaluate on an empty test set")
    probs = predict(params, test_set.images, batch_size=batch_size)
    return score_predictions(probs, test_set.masks, threshold)


def score_predictions(probs: np.ndarray, masks: np.ndarray, threshold: float = 0.5) -> Tuple[float, float]:
    preds = binarize(probs, threshold)
    dices = [dice(p, m) for p, m in zip(preds, masks)]
    losses = pixel_bce(probs, masks).reshape(len(probs), -1).mean(axis=1)
    return float(np.mean(dices)), float(np.mean(losses))


# seeds -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedAggregate:
    method: str
    n_seeds: int
    means: Dict[str, float]
    stds: Dict[str, float]

    def mean(self, metric: str) -> Optional[float]:
        return self.means.get(metric)

    def std(self, metric: str) -> Optional[float]:
        return self.stds.get(metric)


def aggregate_seeds(histories: Sequence[ExperimentHistory]) -> SeedAggregate:
    """Mean and sample std (n-1) of every final metric; std is 0 with a single seed."""
    if not histories:
        raise UsageError("no histories to aggregate")
    methods = {h.method for h in histories}
    if len(methods) != 1:
        raise UsageError(f"histories mix methods {sorted(methods)}")
    ordered = sorted(histories, key=lambda h: h.seed)
    means, stds = {}, {}
    for metric in METRICS:
        values = [h.final_metric(metric) for h in ordered]
        values = [v for v in values if v is not None]
        if not values:
            continue
        arr = np.asarray(values, dtype=np.float64)
        means[metric] = float(arr.mean())
        stds[metric] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return SeedAggregate(ordered[0].method, len(ordered), means, stds)


# history CSV -----------------------------------------------------------------------


def format_optional(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_history_csv(history: ExperimentHistory, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in history.records:
                writer.writerow([r.round, format_optional(r.dice), format_optional(r.ce_loss), format_optional(r.mia_auc), f"{r.wall_ms:.1f}"])
    except OSError as exc:
        raise OSError(f"cannot write history {path}: {exc}") from exc
    return path


def read_history_csv(path: Union[str, Path], method: str = "", seed: int = 0) -> ExperimentHistory:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read history {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise DataFormatError(f"expected header {','.join(CSV_COLUMNS)}", 0, str(path))
    history = ExperimentHistory(method, seed)
    for line, row in enumerate(rows[1:], start=2):
        try:
            history.append(
                RoundRecord(
                    round=int(row[0]),
                    dice=float(row[1]),
                    ce_loss=float(row[2]),
                    mia_auc=float(row[3]) if row[3] else None,
                    wall_ms=float(row[4]),
                )
            )
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"line {line}: {exc}", 0, str(path)) from None
    return history


# summaries -------------------------------------------------------------------------


def write_summary(path: Union[str, Path], sections: Mapping[str, Iterable[Tuple[str, str]]]) -> Path:
    """Key=value text; each section becomes a ``# name`` comment followed by its pairs."""
    lines = []
    for name, items in sections.items():
        lines.append(f"# {name}")
        lines.extend(f"{key}={value}" for key, value in items)
        lines.append("")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write summary {path}: {exc}") from exc
    return path


def read_summary(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"summary not found: {path}")
    return {k: (v or "") for k, v in dotenv_values(path, interpolate=False).items()}


def history_summary_items(history: ExperimentHistory) -> List[Tuple[str, str]]:
    final = history.final
    items = [("method", history.method), ("seed", str(history.seed)), ("rounds_recorded", str(len(history)))]
    if final is not None:
        items += [("final_dice", format_optional(final.dice)), ("final_ce_loss", format_optional(final.ce_loss))]
    auc = history.final_metric("mia_auc")
    items.append(("final_mia_auc", format_optional(auc)))
    return items


# curves ----------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")


def emit_curves_svg(
    curves: Mapping[str, Sequence[Tuple[float, float]]],
    path: Union[str, Path],
    title: str,
    y_label: str,
    y_range: Optional[Tuple[float, float]] = None,
    width: int = 640,
    height: int = 400,
) -> Path:
    """Line chart with one polyline per curve; axes and ticks are plain line/text elements."""
    left, right, top, bottom = 60, 150, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    points = [p for series in curves.values() for p in series]
    x_max = max([x for x, _ in points], default=1.0) or 1.0
    if y_range is None:
        ys = [y for _, y in points] or [0.0, 1.0]
        lo, hi = min(ys), max(ys)
        y_range = (lo, hi if hi > lo else lo + 1.0)
    y_lo, y_hi = y_range

    def sx(x: float) -> float:
        return left + plot_w * x / x_max

    def sy(y: float) -> float:
        return top + plot_h * (1.0 - (y - y_lo) / (y_hi - y_lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for i in range(6):
        y = y_lo + (y_hi - y_lo) * i / 5
        out.append(f'<line x1="{left - 4}" y1="{sy(y):.1f}" x2="{left}" y2="{sy(y):.1f}" stroke="black"/>')
        out.append(
            f'<text x="{left - 8}" y="{sy(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{y:.2f}</text>'
        )
    for i in range(6):
        x = x_max * i / 5
        out.append(f'<line x1="{sx(x):.1f}" y1="{top + plot_h}" x2="{sx(x):.1f}" y2="{top + plot_h + 4}" stroke="black"/>')
        out.append(
            f'<text x="{sx(x):.1f}" y="{top + plot_h + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{x:g}</text>'
        )
    out.append(
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">Round</text>'
    )
    out.append(
        f'<text x="16" y="{top + plot_h / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {top + plot_h / 2:.1f})">{escape(y_label)}</text>'
    )
    for i, (name, series) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in series)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 16 * i + 8
        out.append(f'<line x1="{left + plot_w + 12}" y1="{ly}" x2="{left + plot_w + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{left + plot_w + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>'
        )
    out.append("</svg>")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(out) + "\n", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write curves {path}: {exc}") from exc
    return path


def mean_curve(histories: Sequence[ExperimentHistory], metric: str) -> List[Tuple[int, float]]:
    """Per-round mean over seeds, restricted to rounds every seed recorded."""
    per_seed = [dict(h.series(metric)) for h in histories]
    if not per_seed:
        return []
    rounds = sorted(set.intersection(*(set(s) for s in per_seed)))
    return [(r, float(np.mean([s[r] for s in per_seed]))) for r in rounds]


# comparison table ------------------------------------------------------------------


def _pm(agg: SeedAggregate, metric: str, digits: int = 3) -> str:
    mean = agg.mean(metric)
    if mean is None:
        return "n/a"
    return f"{mean:.{digits}f} ± {agg.std(metric):.{digits}f}"


def render_table(aggregates: Sequence[SeedAggregate]) -> str:
    header = ("Method", "Seeds", "Mean Dice ↑", "CE Loss ↓", "MI Risk AUC ↓")
    rows = [(a.method, str(a.n_seeds), _pm(a, "dice"), _pm(a, "ce_loss"), _pm(a, "mia_auc")) for a in aggregates]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    return "\n".join([line(header), line("-" * w for w in widths)] + [line(r) for r in rows]) + "\n"


# acceptance orderings --------------------------------------------------------------


@dataclass(frozen=True)
class AcceptanceCheck:
    name: str
    passed: bool
    detail: str


def _slope(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    x = np.arange(len(values), dtype=np.float64)
    return float(np.polyfit(x, np.asarray(values, dtype=np.float64), 1)[0])


def check_acceptance(
    aggregates: Mapping[str, SeedAggregate],
    histories: Mapping[str, Sequence[ExperimentHistory]],
) -> List[AcceptanceCheck]:
    """Qualitative utility, privacy and curve-shape orderings between methods.

    Checks whose methods are missing from the runs are skipped.
    """
    checks: List[AcceptanceCheck] = []

    def final(method: str, metric: str) -> Optional[float]:
        agg = aggregates.get(method)
        return agg.mean(metric) if agg else None

    def add(name: str, needed: Iterable[Optional[float]], passed, detail: str):
        if any(v is None for v in needed):
            return
        checks.append(AcceptanceCheck(name, bool(passed()), detail))

    avg, cen, bn = final("fedavg", "dice"), final("centralized", "dice"), final("fedbn", "dice")
    dp, loc = final("fedavg_dp", "dice"), final("local_only", "dice")
    add("centralized >= fedavg - 0.02", (avg, cen), lambda: cen >= avg - 0.02, f"centralized {cen}, fedavg {avg}")
    add("fedbn within 0.03 of fedavg", (avg, bn), lambda: abs(bn - avg) <= 0.03, f"fedbn {bn}, fedavg {avg}")
    add("fedavg_dp <= fedavg - 0.02", (avg, dp), lambda: dp <= avg - 0.02, f"fedavg_dp {dp}, fedavg {avg}")
    add("local_only < fedavg", (avg, loc), lambda: loc < avg, f"local_only {loc}, fedavg {avg}")
    if avg is not None:
        seeds = [h.final_metric("dice") for h in histories.get("fedavg", ())]
        add(
            "fedavg dice >= 0.70 (every seed >= 0.65)",
            (avg,),
            lambda: avg >= 0.70 and all(v is not None and v >= 0.65 for v in seeds),
            f"mean {avg}, seeds {seeds}",
        )

    a_avg, a_dp = final("fedavg", "mia_auc"), final("fedavg_dp", "mia_auc")
    a_prox, a_bn = final("fedprox", "mia_auc"), final("fedbn", "mia_auc")
    add("auc fedavg_dp < fedprox", (a_dp, a_prox), lambda: a_dp < a_prox, f"fedavg_dp {a_dp}, fedprox {a_prox}")
    add("auc fedavg >= 0.55", (a_avg,), lambda: a_avg >= 0.55, f"fedavg {a_avg}")
    add("auc fedavg_dp <= fedavg - 0.10", (a_dp, a_avg), lambda: a_dp <= a_avg - 0.10, f"fedavg_dp {a_dp}, fedavg {a_avg}")
    add("auc fedprox <= fedbn", (a_prox, a_bn), lambda: a_prox <= a_bn + 0.02, f"fedprox {a_prox}, fedbn {a_bn}")
    add("auc fedbn within 0.05 of fedavg", (a_bn, a_avg), lambda: abs(a_bn - a_avg) <= 0.05, f"fedbn {a_bn}, fedavg {a_avg}")

    for h in histories.get("fedavg", ()):
        best = h.best_so_far("dice")
        add(
            f"fedavg seed {h.seed} dice plateaus",
            (best[-1] if best else None,),
            lambda: _slope([v for _, v in h.series("dice")][-5:]) < 0.002,
            f"last-5 slope {_slope([v for _, v in h.series('dice')][-5:]):.4f}",
        )
    for h in histories.get("fedavg_dp", ()):
        aucs = [v for _, v in h.series("mia_auc")]
        add(
            f"fedavg_dp seed {h.seed} auc stays in [0.35, 0.60]",
            (aucs[-1] if aucs else None,),
            lambda: all(0.35 <= v <= 0.60 for v in aucs),
            f"range [{min(aucs, default=math.nan):.3f}, {max(aucs, default=math.nan):.3f}]",
        )
    for h in histories.get("fedavg", ()):
        last = h.final_metric("mia_auc")
        add(f"fedavg seed {h.seed} auc ends above 0.55", (last,), lambda: last > 0.55, f"final {last}")
    if dp is not None and avg is not None:
        add("fedavg_dp final dice below fedavg", (dp, avg), lambda: dp < avg, f"fedavg_dp {dp}, fedavg {avg}")
    return checks
