"""Procedural semantic maps for demos, calibration runs, and smoke tests.

Each map is a simple forward-facing road layout: sky over a skyline, a road
trapezoid narrowing toward the horizon, sidewalk strips, vegetation flanks,
and an ego hood band at the bottom. Geometry jitters a little per seed so a
batch of toy scenes is not one image repeated.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .pipeline import ImageJob, derive_seed
from .placer import keyed_rng
from .scene import SceneAttributes, SceneKind, SemanticMap, TimeOfDay, Weather

TOY_WIDTH = 1024
TOY_HEIGHT = 512

_SKY = 10
_BUILDING = 2
_VEGETATION = 8
_SIDEWALK = 1
_ROAD = 0
_HOOD = 13  # ego vehicle, class "car"

ALL_CELLS = tuple((s, w) for s in SceneKind for w in Weather)


def make_toy_semantic_map(
    seed: int, width: int = TOY_WIDTH, height: int = TOY_HEIGHT
) -> SemanticMap:
    """Deterministic toy label grid keyed by seed."""
    if width < 32 or height < 32:
        raise ConfigError(f"toy maps need at least 32x32, got {width}x{height}")
    rng = keyed_rng(derive_seed(seed, "toymap"), 0)
    horizon = int(round(height * rng.uniform(0.48, 0.52)))
    hood = int(round(height * rng.uniform(0.84, 0.86)))
    sky_end = int(round(horizon * rng.uniform(0.55, 0.75)))
    w_top = rng.uniform(0.05, 0.07) * width
    w_bottom = rng.uniform(0.60, 0.70) * width

    labels = np.full((height, width), _VEGETATION, dtype=np.uint8)
    labels[:sky_end] = _SKY
    # Skyline band: buildings with vegetation gaps at seed-chosen columns.
    band = labels[sky_end:horizon]
    band[:] = _BUILDING
    n_gaps = int(rng.integers(2, 5))
    for _ in range(n_gaps):
        g0 = int(rng.integers(0, width))
        g1 = min(width, g0 + int(rng.integers(width // 32, width // 8)))
        band[:, g0:g1] = _VEGETATION

    rows = np.arange(horizon, hood)
    t = (rows - horizon) / max(1, hood - 1 - horizon)
    road_w = w_top + t * (w_bottom - w_top)
    walk_w = np.maximum(2.0, 0.05 * road_w)
    center = width / 2.0
    cols = np.arange(width)
    half_road = road_w[:, None] / 2.0
    half_walk = half_road + walk_w[:, None]
    off = np.abs(cols[None, :] - center)
    section = labels[horizon:hood]
    section[off <= half_walk] = _SIDEWALK
    section[off <= half_road] = _ROAD

    labels[hood:] = _HOOD
    return SemanticMap(labels=labels)


def toy_attrs(index: int) -> SceneAttributes:
    """Scenario metadata for the index-th toy image, cycling all 36 cells."""
    scene, weather = ALL_CELLS[index % len(ALL_CELLS)]
    time = TimeOfDay.NIGHT if weather is Weather.NIGHT else TimeOfDay.DAYTIME
    return SceneAttributes(scene=scene, weather=weather, time_of_day=time)


def toy_jobs(
    count: int,
    seed: int,
    split: str = "train",
    width: int = TOY_WIDTH,
    height: int = TOY_HEIGHT,
) -> list[ImageJob]:
    """Generation jobs over fresh toy maps; ids are zero-padded indices."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    return [
        ImageJob(
            image_id=f"{i:06d}",
            map_=make_toy_semantic_map(derive_seed(seed, f"map{i}"), width, height),
            attrs=toy_attrs(i),
            split=split,
        )
        for i in range(count)
    ]
