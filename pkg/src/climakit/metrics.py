"""Pixel-level ranking metrics over streaming score histograms.

The accumulator keeps one positive and one negative histogram over a declared
score range. Binning arithmetic is pinned: with scale = bins / (hi - lo), a
score s falls into bin floor((s - lo) * scale) computed in float64, clamped to
[0, bins - 1], and s == hi lands in the top bin. Merging accumulators is an
elementwise 64-bit add, so it is exact, commutative, and associative.

AUROC follows the rank formulation with half credit for ties:
sum_b pos_b * (neg_below_b + 0.5 * neg_b) / (pos_total * neg_total), evaluated
in exact integer arithmetic. Average precision walks thresholds from the top
bin down and accumulates precision * delta-recall. FPR@95TPR picks the highest
threshold whose TPR reaches 0.95 and reports the FPR there, without
interpolating inside a bin.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DataError,
    DegenerateClassError,
    DimensionMismatchError,
    ZeroVarianceError,
)

DEFAULT_BINS = 4096

# Mask sentinels shared with the compositor: 0 in-distribution, 255 anomaly,
# 128 excluded from scoring.
PIXEL_IN_DISTRIBUTION = 0
PIXEL_ANOMALY = 255
PIXEL_IGNORE = 128


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation. Raises ZeroVarianceError on constant input."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ConfigError("pearson needs two equal-length 1-D sequences")
    if x.size < 2:
        raise ConfigError("pearson needs at least 2 samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ConfigError("pearson inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if den == 0.0:
        raise ZeroVarianceError("pearson undefined for constant input")
    return float((dx * dy).sum() / den)


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel anomaly scores with the range they were declared in."""

    values: np.ndarray  # (H, W) float32
    declared_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.size == 0:
            raise DataError(f"score map must be 2-D and non-empty, got {self.values.shape}")
        if self.values.dtype != np.float32:
            raise DataError(f"score map must be float32, got {self.values.dtype}")
        lo, hi = self.declared_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ConfigError(f"bad declared range [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


_RAW_MAGIC = b"CSM1"
_RAW_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved


def load_score_map(
    path: str | Path, declared_range: tuple[float, float] = (0.0, 1.0)
) -> ScoreMap:
    """Read a score map: 16-bit grayscale PNG (value / 65535) or raw CSM1.

    Raw layout: magic ``CSM1``, u32 width, u32 height, u32 reserved, all
    little-endian, followed by width*height float32 values row-major. Values
    are clamped into declared_range at load.
    """
    path = Path(path)
    try:
        with path.open("rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise DataError(f"cannot read score map {path}: {exc}")
    if head == _RAW_MAGIC:
        values = _load_raw_scores(path)
    else:
        values = _load_png_scores(path)
    lo, hi = declared_range
    np.clip(values, lo, hi, out=values)
    return ScoreMap(values=values, declared_range=declared_range)


def _load_raw_scores(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, width, height, _reserved = _RAW_HEADER.unpack_from(blob)
    if magic != _RAW_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expected = _RAW_HEADER.size + width * height * 4
    if width == 0 or height == 0 or len(blob) != expected:
        raise DataError(
            f"{path}: payload mismatch, {width}x{height} needs {expected} bytes, "
            f"file has {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size).reshape(height, width)
    values = values.astype(np.float32)  # owned, native order
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite score values")
    return values


def _load_png_scores(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read score map {path}: {exc}")
    if img.mode not in ("I", "I;16"):
        raise DataError(f"{path}: expected 16-bit grayscale PNG, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.int64)
    if arr.min() < 0 or arr.max() > 65535:
        raise DataError(f"{path}: pixel values outside 16-bit range")
    return (arr / 65535.0).astype(np.float32)


def save_score_map(values: np.ndarray, path: str | Path) -> None:
    """Write scores in [0, 1]: ``.png`` as 16-bit grayscale, ``.csm`` as raw CSM1."""
    path = Path(path)
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"score map must be 2-D, got {arr.shape}")
    if path.suffix == ".csm":
        height, width = arr.shape
        header = _RAW_HEADER.pack(_RAW_MAGIC, width, height, 0)
        path.write_bytes(header + arr.astype("<f4").tobytes())
    elif path.suffix == ".png":
        if arr.min() < 0 or arr.max() > 1:
            raise DataError("PNG score maps require values in [0, 1]")
        quantized = np.round(arr.astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(quantized).save(path)
    else:
        raise ConfigError(f"unsupported score map suffix {path.suffix!r}")


@dataclass
class MetricAccumulator:
    """Dual positive/negative score histogram with 64-bit counts."""

    bins: int = DEFAULT_BINS
    value_range: tuple[float, float] = (0.0, 1.0)
    pos: np.ndarray = field(default=None)  # int64[bins]
    neg: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")
        lo, hi = self.value_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ConfigError(f"bad value range [{lo}, {hi}]")
        if self.pos is None:
            self.pos = np.zeros(self.bins, dtype=np.int64)
        if self.neg is None:
            self.neg = np.zeros(self.bins, dtype=np.int64)
        for name, hist in (("pos", self.pos), ("neg", self.neg)):
            if hist.shape != (self.bins,) or hist.dtype != np.int64:
                raise ConfigError(f"{name} histogram must be int64[{self.bins}]")

    @property
    def pos_total(self) -> int:
        return int(self.pos.sum())

    @property
    def neg_total(self) -> int:
        return int(self.neg.sum())

    def accumulate(self, scores: np.ndarray, mask: np.ndarray) -> None:
        """Fold one image into the histograms.

        scores: (H, W) float array; mask: (H, W) uint8 with sentinel values
        {0, 255, 128}. Ignored pixels contribute to neither histogram.
        """
        scores = np.asarray(scores)
        mask = np.asarray(mask)
        if scores.shape != mask.shape:
            raise DimensionMismatchError(
                f"scores {scores.shape} vs mask {mask.shape}"
            )
        if mask.dtype != np.uint8:
            raise DataError(f"mask must be uint8, got {mask.dtype}")
        sentinel_counts = np.bincount(mask.ravel(), minlength=256)
        legal = {PIXEL_IN_DISTRIBUTION, PIXEL_ANOMALY, PIXEL_IGNORE}
        bad = [v for v in np.flatnonzero(sentinel_counts) if int(v) not in legal]
        if bad:
            raise DataError(f"mask contains non-sentinel values {bad}")
        lo, hi = self.value_range
        scaled = (scores.astype(np.float64, copy=False) - lo) * (self.bins / (hi - lo))
        if np.isnan(scaled).any():
            raise DataError("scores contain NaN")
        idx = scaled.astype(np.int32)
        np.clip(idx, 0, self.bins - 1, out=idx)
        # Route each pixel into one of three histogram segments: negatives at
        # [0, B), positives at [B, 2B), ignored at [2B, 3B), one bincount total.
        lut = np.zeros(256, dtype=np.int32)
        lut[PIXEL_ANOMALY] = self.bins
        lut[PIXEL_IGNORE] = 2 * self.bins
        idx += lut[mask]
        counts = np.bincount(idx.ravel(), minlength=3 * self.bins)
        self.neg += counts[: self.bins]
        self.pos += counts[self.bins : 2 * self.bins]

    def __add__(self, other: "MetricAccumulator") -> "MetricAccumulator":
        return merge(self, other)


def merge(a: MetricAccumulator, b: MetricAccumulator) -> MetricAccumulator:
    """Exact elementwise merge; requires identical binning and range."""
    if a.bins != b.bins or a.value_range != b.value_range:
        raise ConfigError(
            f"cannot merge accumulators with different layouts: "
            f"{a.bins}@{a.value_range} vs {b.bins}@{b.value_range}"
        )
    return MetricAccumulator(
        bins=a.bins,
        value_range=a.value_range,
        pos=a.pos + b.pos,
        neg=a.neg + b.neg,
    )


def _hist_lists(acc: MetricAccumulator) -> tuple[list[int], list[int], int, int]:
    pos = acc.pos.tolist()
    neg = acc.neg.tolist()
    return pos, neg, sum(pos), sum(neg)


def auroc(acc: MetricAccumulator) -> float:
    """Tie-aware rank AUROC, exact up to the single final division."""
    pos, neg, p_total, n_total = _hist_lists(acc)
    if p_total == 0 or n_total == 0:
        raise DegenerateClassError(
            f"need both classes, got pos={p_total} neg={n_total}"
        )
    below = 0
    doubled = 0  # 2x numerator, keeps the tie credit integral
    for pb, nb in zip(pos, neg):
        if pb:
            doubled += pb * (2 * below + nb)
        below += nb
    return doubled / (2 * p_total * n_total)


def average_precision(acc: MetricAccumulator) -> float:
    """Precision-weighted recall steps over descending thresholds."""
    pos, neg, p_total, _ = _hist_lists(acc)
    if p_total == 0:
        raise DegenerateClassError("average precision needs positive pixels")
    tp = 0
    fp = 0
    ap = 0.0
    for b in range(len(pos) - 1, -1, -1):
        pb, nb = pos[b], neg[b]
        if pb == 0 and nb == 0:
            continue
        tp += pb
        fp += nb
        if pb:
            ap += (pb / p_total) * (tp / (tp + fp))
    return ap


def fpr_at_95tpr(acc: MetricAccumulator) -> float:
    """FPR at the highest threshold bin whose TPR reaches 0.95.

    Conservative: the whole bin that crosses 0.95 is included, no
    interpolation. Constant scores therefore give 1.0.
    """
    pos, neg, p_total, n_total = _hist_lists(acc)
    if p_total == 0 or n_total == 0:
        raise DegenerateClassError(
            f"need both classes, got pos={p_total} neg={n_total}"
        )
    tp = 0
    fp = 0
    for b in range(len(pos) - 1, -1, -1):
        tp += pos[b]
        fp += neg[b]
        if 20 * tp >= 19 * p_total:  # tp / p_total >= 0.95 without rounding
            return fp / n_total
    return 1.0  # unreachable: the lowest occupied bin always reaches TPR 1


@dataclass(frozen=True)
class ExactMetrics:
    auroc: float
    ap: float
    fpr95: float


MAX_EXACT_ENTRIES = 1_000_000


def exact_metrics(scores: np.ndarray, labels: np.ndarray) -> ExactMetrics:
    """Sort-based metrics on raw scores with full tie handling.

    labels: 1 for anomaly, 0 for in-distribution. Bounded to 10^6 entries;
    use the accumulator for anything larger.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionMismatchError(f"scores {s.shape} vs labels {y.shape}")
    if s.size == 0:
        raise DataError("exact_metrics needs at least one entry")
    if s.size > MAX_EXACT_ENTRIES:
        raise DataError(
            f"exact_metrics is bounded to {MAX_EXACT_ENTRIES} entries, got {s.size}"
        )
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")

    values, inverse = np.unique(s, return_inverse=True)
    pos_v = np.bincount(inverse, weights=y, minlength=len(values))
    all_v = np.bincount(inverse, minlength=len(values))
    neg_v = all_v - pos_v
    # Descending threshold order.
    pos_v = pos_v[::-1]
    neg_v = neg_v[::-1]
    p_total = float(pos_v.sum())
    n_total = float(neg_v.sum())
    if p_total == 0 or n_total == 0:
        raise DegenerateClassError(
            f"need both classes, got pos={int(p_total)} neg={int(n_total)}"
        )

    cum_tp = np.cumsum(pos_v)
    cum_fp = np.cumsum(neg_v)
    neg_below = n_total - cum_fp  # negatives strictly below each value
    auroc_val = float(np.sum(pos_v * (neg_below + 0.5 * neg_v)) / (p_total * n_total))

    with np.errstate(invalid="ignore"):
        precision = cum_tp / (cum_tp + cum_fp)
    ap_val = float(np.sum((pos_v / p_total) * np.where(pos_v > 0, precision, 0.0)))

    reached = np.flatnonzero(20.0 * cum_tp >= 19.0 * p_total)
    fpr_val = float(cum_fp[reached[0]] / n_total)
    return ExactMetrics(auroc=auroc_val, ap=ap_val, fpr95=fpr_val)


@dataclass(frozen=True)
class EvalReport:
    """Metrics for one group of images."""

    group_by: str
    key: tuple[str, ...]
    auroc: float
    ap: float
    fpr95: float
    pos_total: int
    neg_total: int
    image_count: int

    def to_json(self) -> dict:
        return {
            "group_by": self.group_by,
            "key": list(self.key),
            "auroc": None if math.isnan(self.auroc) else self.auroc,
            "ap": None if math.isnan(self.ap) else self.ap,
            "fpr95": None if math.isnan(self.fpr95) else self.fpr95,
            "pos_total": self.pos_total,
            "neg_total": self.neg_total,
            "image_count": self.image_count,
        }


GROUP_MODES = ("all", "scene", "weather", "scene_weather")


def _group_key(entry, group_by: str) -> tuple[str, ...]:
    scene = str(getattr(entry.scene, "value", entry.scene))
    weather = str(getattr(entry.weather, "value", entry.weather))
    if group_by == "all":
        return ("all",)
    if group_by == "scene":
        return (scene,)
    if group_by == "weather":
        return (weather,)
    if group_by == "scene_weather":
        return (scene, weather)
    raise ConfigError(f"group_by must be one of {GROUP_MODES}, got {group_by!r}")


def _report_from_acc(
    group_by: str, key: tuple[str, ...], acc: MetricAccumulator, image_count: int
) -> EvalReport:
    try:
        a, ap_, f = auroc(acc), average_precision(acc), fpr_at_95tpr(acc)
    except DegenerateClassError:
        a = ap_ = f = float("nan")
    return EvalReport(
        group_by=group_by,
        key=key,
        auroc=a,
        ap=ap_,
        fpr95=f,
        pos_total=acc.pos_total,
        neg_total=acc.neg_total,
        image_count=image_count,
    )


def grouped_report(
    entries: Sequence,
    accumulators: Sequence[MetricAccumulator],
    group_by: str = "scene_weather",
) -> list[EvalReport]:
    """Merge per-image accumulators by group and compute metrics per group.

    entries is any sequence with .scene and .weather attributes, parallel to
    accumulators. Returns group reports in sorted key order plus a pooled
    report over everything, keyed ("all",). Merge order never matters.
    """
    if len(entries) != len(accumulators):
        raise ConfigError("entries and accumulators must be parallel")
    if not entries:
        raise DataError("nothing to report on")
    groups: dict[tuple[str, ...], MetricAccumulator] = {}
    counts: dict[tuple[str, ...], int] = {}
    pooled: MetricAccumulator | None = None
    for entry, acc in zip(entries, accumulators):
        key = _group_key(entry, group_by)
        if key in groups:
            groups[key] = merge(groups[key], acc)
            counts[key] += 1
        else:
            groups[key] = acc
            counts[key] = 1
        pooled = acc if pooled is None else merge(pooled, acc)
    reports = [
        _report_from_acc(group_by, key, groups[key], counts[key])
        for key in sorted(groups)
    ]
    if group_by != "all":
        reports.append(_report_from_acc(group_by, ("all",), pooled, len(entries)))
    return reports


def per_image_report(
    entries: Sequence,
    accumulators: Sequence[MetricAccumulator],
    group_by: str = "scene_weather",
) -> list[EvalReport]:
    """Alternative aggregation: mean of per-image metrics inside each group.

    Images missing one of the two classes are skipped; image_count reports how
    many images actually contributed.
    """
    if len(entries) != len(accumulators):
        raise ConfigError("entries and accumulators must be parallel")
    if not entries:
        raise DataError("nothing to report on")
    buckets: dict[tuple[str, ...], list[MetricAccumulator]] = {}
    for entry, acc in zip(entries, accumulators):
        buckets.setdefault(_group_key(entry, group_by), []).append(acc)
    if group_by != "all":
        buckets[("all",)] = list(accumulators)
    reports = []
    for key in sorted(buckets):
        vals = []
        pos_total = neg_total = 0
        for acc in buckets[key]:
            pos_total += acc.pos_total
            neg_total += acc.neg_total
            try:
                vals.append((auroc(acc), average_precision(acc), fpr_at_95tpr(acc)))
            except DegenerateClassError:
                continue
        if vals:
            means = [sum(col) / len(vals) for col in zip(*vals)]
        else:
            means = [float("nan")] * 3
        reports.append(
            EvalReport(
                group_by=group_by,
                key=key,
                auroc=means[0],
                ap=means[1],
                fpr95=means[2],
                pos_total=pos_total,
                neg_total=neg_total,
                image_count=len(vals),
            )
        )
    return reports


def condition_reports(
    entries: Sequence, accumulators: Sequence[MetricAccumulator]
) -> list[EvalReport]:
    """Scenario table rows: one row per scene under clear and under adverse
    weather (everything except clear), plus an overall average row."""
    if len(entries) != len(accumulators):
        raise ConfigError("entries and accumulators must be parallel")
    if not entries:
        raise DataError("nothing to report on")
    groups: dict[tuple[str, str], MetricAccumulator] = {}
    counts: dict[tuple[str, str], int] = {}
    pooled: MetricAccumulator | None = None
    for entry, acc in zip(entries, accumulators):
        scene = str(getattr(entry.scene, "value", entry.scene))
        weather = str(getattr(entry.weather, "value", entry.weather))
        condition = "clear" if weather == "clear" else "adverse"
        key = (scene, condition)
        if key in groups:
            groups[key] = merge(groups[key], acc)
            counts[key] += 1
        else:
            groups[key] = acc
            counts[key] = 1
        pooled = acc if pooled is None else merge(pooled, acc)
    reports = [
        _report_from_acc("scene_condition", key, groups[key], counts[key])
        for key in sorted(groups)
    ]
    reports.append(_report_from_acc("scene_condition", ("average",), pooled, len(entries)))
    return reports


def _fmt(x: float) -> str:
    return "   n/a" if math.isnan(x) else f"{x:.4f}"


def render_report_table(reports: Sequence[EvalReport], title: str = "") -> str:
    """Aligned text table, one row per report."""
    key_width = max([len(" / ".join(r.key)) for r in reports] + [len("group")])
    header = (
        f"{'group':<{key_width}}  {'auroc':>7}  {'ap':>7}  {'fpr95':>7}  "
        f"{'pos_px':>12}  {'neg_px':>12}  {'images':>6}"
    )
    lines = []
    if title:
        lines.append(title)
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        lines.append(
            f"{' / '.join(r.key):<{key_width}}  {_fmt(r.auroc):>7}  {_fmt(r.ap):>7}  "
            f"{_fmt(r.fpr95):>7}  {r.pos_total:>12}  {r.neg_total:>12}  "
            f"{r.image_count:>6}"
        )
    return "\n".join(lines)


def reports_to_json(reports: Iterable[EvalReport]) -> list[dict]:
    return [r.to_json() for r in reports]
