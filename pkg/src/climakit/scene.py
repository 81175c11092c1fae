"""Semantic scene inputs: label maps, class schemas, and drivable regions.

A semantic map is an 8-bit single-channel image whose pixel values are class
ids. The class schema names every legal id and marks which ids count as
drivable ground. The default schema follows the common 19-class driving
trainId convention (road=0, sidewalk=1, ..., bicycle=18).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DataError,
    EmptyRegionError,
    UnknownClassIdError,
)


class SceneKind(str, Enum):
    """Driving scenario categories."""

    CITY_STREET = "city_street"
    HIGHWAY = "highway"
    TUNNEL = "tunnel"
    GAS_STATION = "gas_station"
    RESIDENTIAL = "residential"
    PARKING_LOT = "parking_lot"


class Weather(str, Enum):
    """Weather categories; everything except CLEAR counts as adverse."""

    CLEAR = "clear"
    RAIN = "rain"
    FOG = "fog"
    SNOW = "snow"
    CLOUDY = "cloudy"
    NIGHT = "night"


class TimeOfDay(str, Enum):
    DAYTIME = "daytime"
    NIGHT = "night"
    DAWN_DUSK = "dawn_dusk"


ADVERSE_WEATHERS = tuple(w for w in Weather if w is not Weather.CLEAR)

# 19-class trainId convention used by the default schema.
DEFAULT_CLASS_TABLE: dict[int, str] = {
    0: "road",
    1: "sidewalk",
    2: "building",
    3: "wall",
    4: "fence",
    5: "pole",
    6: "traffic_light",
    7: "traffic_sign",
    8: "vegetation",
    9: "terrain",
    10: "sky",
    11: "person",
    12: "rider",
    13: "car",
    14: "truck",
    15: "bus",
    16: "train",
    17: "motorcycle",
    18: "bicycle",
}

DEFAULT_DRIVABLE_IDS = frozenset({0, 1})


@dataclass(frozen=True)
class ClassSchema:
    """Legal class ids, their names, and the subset considered drivable."""

    names: dict[int, str]
    drivable_ids: frozenset[int] = DEFAULT_DRIVABLE_IDS

    def __post_init__(self):
        if not self.names:
            raise ConfigError("schema has no classes")
        for cid in self.names:
            if not 0 <= cid <= 255:
                raise ConfigError(f"class id {cid} outside 8-bit range")
        missing = set(self.drivable_ids) - set(self.names)
        if missing:
            raise ConfigError(f"drivable ids {sorted(missing)} not in schema")

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.names


DEFAULT_SCHEMA = ClassSchema(names=dict(DEFAULT_CLASS_TABLE))


def parse_schema_config(text: str) -> ClassSchema:
    """Parse a schema config: one ``id<TAB>name`` line per class plus a
    ``drivable:`` line listing drivable ids.

    Blank lines and lines starting with ``#`` are skipped.
    """
    names: dict[int, str] = {}
    drivable: frozenset[int] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("drivable:"):
            body = line[len("drivable:"):].strip()
            try:
                ids = frozenset(int(tok) for tok in body.split())
            except ValueError:
                raise ConfigError(f"line {lineno}: bad drivable id list {body!r}")
            if not ids:
                raise ConfigError(f"line {lineno}: drivable list is empty")
            drivable = ids
            continue
        if "\t" not in line:
            raise ConfigError(f"line {lineno}: expected 'id<TAB>name', got {raw!r}")
        id_part, name = line.split("\t", 1)
        try:
            cid = int(id_part)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad class id {id_part!r}")
        if cid in names:
            raise ConfigError(f"line {lineno}: duplicate class id {cid}")
        names[cid] = name.strip()
    if not names:
        raise ConfigError("schema config declares no classes")
    if drivable is None:
        raise ConfigError("schema config is missing the 'drivable:' line")
    return ClassSchema(names=names, drivable_ids=drivable)


def load_schema_config(path: str | Path) -> ClassSchema:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read schema config {path}: {exc}")
    return parse_schema_config(text)


def format_schema_config(schema: ClassSchema) -> str:
    lines = [f"{cid}\t{name}" for cid, name in sorted(schema.names.items())]
    lines.append("drivable: " + " ".join(str(i) for i in sorted(schema.drivable_ids)))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SceneAttributes:
    """Scenario metadata attached to one image."""

    scene: SceneKind
    weather: Weather
    time_of_day: TimeOfDay
    caption: str = ""

    def __post_init__(self):
        # Coerce raw strings so manifests and sidecar files load directly.
        object.__setattr__(self, "scene", SceneKind(self.scene))
        object.__setattr__(self, "weather", Weather(self.weather))
        object.__setattr__(self, "time_of_day", TimeOfDay(self.time_of_day))


@dataclass(frozen=True)
class SemanticMap:
    """A class-id grid plus the schema that interprets it."""

    labels: np.ndarray  # (H, W) uint8
    schema: ClassSchema = DEFAULT_SCHEMA

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DataError(f"semantic map must be 2-D, got shape {self.labels.shape}")
        if self.labels.dtype != np.uint8:
            raise DataError(f"semantic map must be uint8, got {self.labels.dtype}")
        if self.labels.size == 0:
            raise DataError("semantic map has zero area")
        present = np.flatnonzero(np.bincount(self.labels.ravel(), minlength=256))
        unknown = [int(c) for c in present if int(c) not in self.schema]
        if unknown:
            raise UnknownClassIdError(f"class ids {unknown} not in schema")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class RegionMask:
    """A binary pixel region within one image."""

    bits: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.dtype != np.bool_:
            raise DataError("region mask must be a 2-D bool grid")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def horizon_row(self) -> int:
        """Topmost row containing any region pixel."""
        rows = np.flatnonzero(self.bits.any(axis=1))
        if rows.size == 0:
            raise EmptyRegionError("region is empty, horizon row undefined")
        return int(rows[0])

    def contains(self, x: int, y: int) -> bool:
        if not (0 <= x < self.width and 0 <= y < self.height):
            return False
        return bool(self.bits[y, x])


def load_semantic_map(path: str | Path, schema: ClassSchema = DEFAULT_SCHEMA) -> SemanticMap:
    """Read an 8-bit single-channel label image and validate it against schema."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise DataError(f"cannot read semantic map {path}: {exc}")
    if img.mode not in ("L", "P"):
        raise DataError(
            f"semantic map {path} must be 8-bit single-channel, got mode {img.mode!r}"
        )
    labels = np.asarray(img if img.mode == "L" else img.getchannel(0), dtype=np.uint8)
    return SemanticMap(labels=labels, schema=schema)


def save_semantic_map(map_: SemanticMap, path: str | Path) -> None:
    Image.fromarray(map_.labels, mode="L").save(path)


def extract_drivable_region(
    map_: SemanticMap, drivable_ids: frozenset[int] | set[int] | None = None
) -> RegionMask:
    """Region of pixels whose class id is in drivable_ids.

    Defaults to the schema's own drivable set. Raises EmptyRegionError when no
    pixel matches: downstream placement has nothing to anchor on.
    """
    ids = frozenset(map_.schema.drivable_ids if drivable_ids is None else drivable_ids)
    if not ids:
        raise ConfigError("drivable id set is empty")
    outside = ids - set(map_.schema.names)
    if outside:
        raise ConfigError(f"drivable ids {sorted(outside)} not in schema")
    lut = np.zeros(256, dtype=bool)
    lut[list(ids)] = True
    bits = lut[map_.labels]
    if not bits.any():
        raise EmptyRegionError(f"no pixels with class ids {sorted(ids)}")
    return RegionMask(bits=bits)


def class_palette(schema: ClassSchema = DEFAULT_SCHEMA) -> np.ndarray:
    """Deterministic (256, 3) uint8 palette spreading class hues evenly."""
    palette = np.zeros((256, 3), dtype=np.uint8)
    for cid in schema.names:
        hue = (cid * 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.55, 0.85)
        palette[cid] = (round(r * 255), round(g * 255), round(b * 255))
    return palette


def colorize_semantic_map(map_: SemanticMap) -> np.ndarray:
    """Render a label grid to an (H, W, 3) uint8 image via the class palette."""
    return class_palette(map_.schema)[map_.labels]
