"""Dataset manifests, statistics, curation, and validation.

A dataset lives under one root with the naming convention
``<split>/<scene>/<weather>/<id>.png`` plus a sibling ``<id>_mask.png``.
The manifest is JSONL, one entry per image, and is the source of truth for
split membership; files never move during curation.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path, PurePosixPath

import numpy as np

from .compositor import load_mask, pixel_fraction, refine_mask, RefineConfig
from .errors import ConfigError, DataError, InfeasibleQuotaError
from .metrics import PIXEL_ANOMALY
from .scene import SceneKind, TimeOfDay, Weather

SPLITS = ("train", "test", "unassigned")

MANIFEST_FIELDS = (
    "image_path",
    "mask_path",
    "scene",
    "weather",
    "time_of_day",
    "categories",
    "pixel_fraction",
    "split",
)


@dataclass(frozen=True)
class ManifestEntry:
    """One dataset image: file locations, scenario cell, and mask summary."""

    image_path: str  # POSIX-style, relative to the dataset root
    mask_path: str
    scene: SceneKind
    weather: Weather
    time_of_day: TimeOfDay
    categories: tuple[str, ...]
    pixel_fraction: float
    split: str = "unassigned"

    def __post_init__(self):
        object.__setattr__(self, "scene", SceneKind(self.scene))
        object.__setattr__(self, "weather", Weather(self.weather))
        object.__setattr__(self, "time_of_day", TimeOfDay(self.time_of_day))
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.image_path or not self.mask_path:
            raise DataError("manifest entry needs both image_path and mask_path")
        if not 0.0 <= self.pixel_fraction <= 1.0:
            raise DataError(f"pixel_fraction {self.pixel_fraction} outside [0, 1]")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> dict:
        return {
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "scene": self.scene.value,
            "weather": self.weather.value,
            "time_of_day": self.time_of_day.value,
            "categories": list(self.categories),
            "pixel_fraction": self.pixel_fraction,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        missing = [k for k in MANIFEST_FIELDS if k not in obj]
        if missing:
            raise DataError(f"manifest entry missing fields {missing}")
        try:
            return cls(
                image_path=obj["image_path"],
                mask_path=obj["mask_path"],
                scene=obj["scene"],
                weather=obj["weather"],
                time_of_day=obj["time_of_day"],
                categories=tuple(obj["categories"]),
                pixel_fraction=float(obj["pixel_fraction"]),
                split=obj["split"],
            )
        except ValueError as exc:
            raise DataError(f"bad manifest entry {obj.get('image_path')!r}: {exc}")


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    """Atomic write: the manifest appears complete or not at all."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
    tmp.replace(path)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}")
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: bad JSON: {exc}")
        entries.append(ManifestEntry.from_json(obj))
    return entries


@dataclass(frozen=True)
class ScanResult:
    entries: list[ManifestEntry]
    warnings: list[str]


def scan_dataset(root: str | Path, recompute_fractions: bool = True) -> ScanResult:
    """Recover a manifest from a dataset tree by its naming convention.

    Orphan images (no mask) and unrecognized directory names produce warnings
    instead of failing the scan. categories cannot be recovered from files and
    come back empty. With recompute_fractions=False, pixel_fraction is a 0.0
    placeholder.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    entries: list[ManifestEntry] = []
    warnings: list[str] = []
    for image_path in sorted(root.glob("*/*/*/*.png")):
        if image_path.stem.endswith("_mask"):
            continue
        rel = image_path.relative_to(root)
        split, scene_name, weather_name = rel.parts[:3]
        if split not in SPLITS:
            warnings.append(f"{rel}: unknown split directory {split!r}")
            continue
        try:
            scene = SceneKind(scene_name)
            weather = Weather(weather_name)
        except ValueError:
            warnings.append(f"{rel}: unrecognized scene/weather directories")
            continue
        mask_path = image_path.with_name(image_path.stem + "_mask.png")
        if not mask_path.exists():
            warnings.append(f"{rel}: orphan image without {mask_path.name}")
            continue
        fraction = 0.0
        if recompute_fractions:
            fraction = pixel_fraction(load_mask(mask_path))
        entries.append(
            ManifestEntry(
                image_path=str(PurePosixPath(*rel.parts)),
                mask_path=str(PurePosixPath(*rel.parts[:-1], mask_path.name)),
                scene=scene,
                weather=weather,
                time_of_day=(
                    TimeOfDay.NIGHT if weather is Weather.NIGHT else TimeOfDay.DAYTIME
                ),
                categories=(),
                pixel_fraction=fraction,
                split=split,
            )
        )
    return ScanResult(entries=entries, warnings=warnings)


ALL_CELLS = tuple((s, w) for s in SceneKind for w in Weather)


def uniform_quotas(target_total: int) -> dict[tuple[str, str], int]:
    """Spread a total across the 36 scene/weather cells as evenly as possible.

    The first (total mod 36) cells in canonical enum order get one extra.
    """
    if target_total < 1:
        raise ConfigError(f"target_total must be >= 1, got {target_total}")
    base, remainder = divmod(target_total, len(ALL_CELLS))
    quotas = {}
    for i, (scene, weather) in enumerate(ALL_CELLS):
        quotas[(scene.value, weather.value)] = base + (1 if i < remainder else 0)
    return quotas


@dataclass(frozen=True)
class CurationFilters:
    min_fraction: float = 0.0
    max_fraction: float = 1.0
    require_refined_mask: bool = False

    def __post_init__(self):
        if not 0.0 <= self.min_fraction <= self.max_fraction <= 1.0:
            raise ConfigError(
                f"need 0 <= min_fraction <= max_fraction <= 1, got "
                f"[{self.min_fraction}, {self.max_fraction}]"
            )


def selection_hash(seed: int, relative_path: str) -> int:
    """Keyed 64-bit hash that orders entries within a curation cell."""
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(relative_path.encode("utf-8"), digest_size=8, key=key)
    return int.from_bytes(digest.digest(), "little")


def curate(
    entries: list[ManifestEntry],
    target_total: int,
    quotas: dict[tuple[str, str], int] | None = None,
    filters: CurationFilters | None = None,
    seed: int = 0,
    root: str | Path | None = None,
) -> list[ManifestEntry]:
    """Assign a balanced test split; everything unselected becomes train.

    Selection per cell is the quota-smallest keyed hash of each eligible
    entry's image path, so the same manifest, quotas, and seed always pick the
    same entries, and no entry ever moves on disk. Raises InfeasibleQuotaError
    listing every cell whose quota exceeds its eligible entries.
    """
    filters = filters or CurationFilters()
    if quotas is None:
        quotas = uniform_quotas(target_total)
    total = sum(quotas.values())
    if total != target_total:
        raise ConfigError(f"quotas sum to {total}, target_total is {target_total}")
    if any(q < 0 for q in quotas.values()):
        raise ConfigError("quotas must be non-negative")
    if filters.require_refined_mask and root is None:
        raise ConfigError("require_refined_mask needs the dataset root")

    eligible_by_cell: dict[tuple[str, str], list[ManifestEntry]] = {}
    for entry in entries:
        if not filters.min_fraction <= entry.pixel_fraction <= filters.max_fraction:
            continue
        if filters.require_refined_mask:
            mask = load_mask(Path(root) / entry.mask_path)
            if not np.array_equal(refine_mask(mask, RefineConfig()).grid, mask.grid):
                continue
        cell = (entry.scene.value, entry.weather.value)
        eligible_by_cell.setdefault(cell, []).append(entry)

    shortfalls = []
    for cell, quota in sorted(quotas.items()):
        available = len(eligible_by_cell.get(cell, []))
        if quota > available:
            shortfalls.append((cell, available, quota))
    if shortfalls:
        raise InfeasibleQuotaError(shortfalls)

    selected: set[str] = set()
    for cell, quota in quotas.items():
        if quota == 0:
            continue
        ranked = sorted(
            eligible_by_cell[cell],
            key=lambda e: (selection_hash(seed, e.image_path), e.image_path),
        )
        selected.update(e.image_path for e in ranked[:quota])
    return [
        replace(entry, split="test" if entry.image_path in selected else "train")
        for entry in entries
    ]


@dataclass(frozen=True)
class DatasetStats:
    """Aggregate mask statistics for one manifest."""

    image_count: int
    fraction_histogram: np.ndarray  # int64[hist_bins]
    hist_range: tuple[float, float]
    heatmap: np.ndarray  # float64 (grid_h, grid_w), sums to 1 when any anomaly
    cell_counts: np.ndarray  # int64 (n_scenes, n_weathers)
    category_counts: dict[str, int]

    def to_json(self) -> dict:
        return {
            "image_count": self.image_count,
            "fraction_histogram": self.fraction_histogram.tolist(),
            "hist_range": list(self.hist_range),
            "heatmap": self.heatmap.tolist(),
            "cell_counts": {
                f"{scene.value}/{weather.value}": int(
                    self.cell_counts[i_s, i_w]
                )
                for i_s, scene in enumerate(SceneKind)
                for i_w, weather in enumerate(Weather)
            },
            "category_counts": dict(sorted(self.category_counts.items())),
        }


def _nearest_grid(mask_bits: np.ndarray, grid_w: int, grid_h: int) -> np.ndarray:
    """Nearest-neighbor resample of a bool mask onto (grid_h, grid_w)."""
    h, w = mask_bits.shape
    src_y = np.minimum(((np.arange(grid_h) + 0.5) * h / grid_h).astype(np.int64), h - 1)
    src_x = np.minimum(((np.arange(grid_w) + 0.5) * w / grid_w).astype(np.int64), w - 1)
    return mask_bits[src_y][:, src_x]


def compute_stats(
    entries: list[ManifestEntry],
    root: str | Path,
    hist_bins: int = 50,
    hist_range: tuple[float, float] = (0.0, 0.25),
    grid_w: int = 64,
    grid_h: int = 32,
) -> DatasetStats:
    """Fraction histogram, spatial anomaly heatmap, and cell/category counts.

    The heatmap is the normalized sum of per-image nearest-resampled anomaly
    grids; fractions above the histogram range land in the top bin. An empty
    manifest yields a valid all-zero report.
    """
    root = Path(root)
    lo, hi = hist_range
    if not lo < hi:
        raise ConfigError(f"hist_range must be increasing, got {hist_range}")
    fractions = np.array([e.pixel_fraction for e in entries], dtype=np.float64)
    idx = ((fractions - lo) / (hi - lo) * hist_bins).astype(np.int64)
    np.clip(idx, 0, hist_bins - 1, out=idx)
    hist = np.bincount(idx, minlength=hist_bins).astype(np.int64)

    heat = np.zeros((grid_h, grid_w), dtype=np.float64)
    for entry in entries:
        mask = load_mask(root / entry.mask_path)
        heat += _nearest_grid(mask.grid == PIXEL_ANOMALY, grid_w, grid_h)
    total = heat.sum()
    if total > 0:
        heat /= total

    scene_index = {scene: i for i, scene in enumerate(SceneKind)}
    weather_index = {weather: i for i, weather in enumerate(Weather)}
    cells = np.zeros((len(SceneKind), len(Weather)), dtype=np.int64)
    categories: Counter = Counter()
    for entry in entries:
        cells[scene_index[entry.scene], weather_index[entry.weather]] += 1
        categories.update(entry.categories)
    return DatasetStats(
        image_count=len(entries),
        fraction_histogram=hist,
        hist_range=hist_range,
        heatmap=heat,
        cell_counts=cells,
        category_counts=dict(categories),
    )


@dataclass(frozen=True)
class Violation:
    kind: str
    path: str
    detail: str


FRACTION_TOLERANCE = 1e-6


def validate(
    entries: list[ManifestEntry], root: str | Path, recompute: bool = True
) -> list[Violation]:
    """Check manifest entries against the files they reference.

    Finds missing files, image/mask dimension mismatches, illegal mask
    values, and stored fractions drifting from the mask contents.
    """
    from PIL import Image

    root = Path(root)
    violations: list[Violation] = []
    for entry in entries:
        image_file = root / entry.image_path
        mask_file = root / entry.mask_path
        if not image_file.exists():
            violations.append(Violation("missing_image", entry.image_path, "file not found"))
            continue
        if not mask_file.exists():
            violations.append(Violation("missing_mask", entry.mask_path, "file not found"))
            continue
        try:
            with Image.open(image_file) as img:
                image_size = img.size
        except OSError as exc:
            violations.append(Violation("unreadable_image", entry.image_path, str(exc)))
            continue
        try:
            mask = load_mask(mask_file)
        except DataError as exc:
            violations.append(Violation("bad_mask", entry.mask_path, str(exc)))
            continue
        if image_size != (mask.width, mask.height):
            violations.append(
                Violation(
                    "dimension_mismatch",
                    entry.image_path,
                    f"image {image_size} vs mask {(mask.width, mask.height)}",
                )
            )
            continue
        if recompute:
            actual = pixel_fraction(mask)
            if abs(actual - entry.pixel_fraction) > FRACTION_TOLERANCE:
                violations.append(
                    Violation(
                        "fraction_mismatch",
                        entry.image_path,
                        f"manifest {entry.pixel_fraction:.8f} vs mask {actual:.8f}",
                    )
                )
    return violations
