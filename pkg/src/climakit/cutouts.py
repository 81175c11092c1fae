"""Bundled procedural object cutouts.

The toolkit ships no binary assets; cutouts are synthesized on demand from
the concept name alone, so any concept string yields the same RGBA patch on
every machine. Shapes are star-convex blobs covering roughly 70% of their
canvas, which keeps pasted-mask areas predictable.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

from .compositor import ObjectCutout

CANVAS = 96

DEFAULT_CONCEPTS = (
    "sofa",
    "dog",
    "cow",
    "sheep",
    "deer",
    "cardboard_box",
    "tire",
    "ball",
    "chair",
    "barrel",
    "traffic_cone",
    "suitcase",
    "mattress",
    "shopping_cart",
    "trash_bag",
    "rock",
)


def _concept_rng(concept: str) -> np.random.Generator:
    digest = hashlib.blake2b(concept.encode("utf-8"), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@lru_cache(maxsize=256)
def get_cutout(concept: str) -> ObjectCutout:
    """Deterministic RGBA cutout for a concept name."""
    if not concept:
        raise ValueError("concept must be a non-empty string")
    rng = _concept_rng(concept)

    # Star-convex silhouette: radius modulated by a few random harmonics.
    n_harmonics = int(rng.integers(2, 5))
    amps = rng.uniform(0.02, 0.06, size=n_harmonics)
    phases = rng.uniform(0, 2 * np.pi, size=n_harmonics)
    orders = rng.integers(2, 7, size=n_harmonics)
    base_radius = float(rng.uniform(0.44, 0.47))

    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    cx = cy = (CANVAS - 1) / 2
    dx = (xx - cx) / CANVAS
    dy = (yy - cy) / CANVAS
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    radius = np.full_like(rho, base_radius)
    for amp, phase, order in zip(amps, phases, orders):
        radius += amp * np.sin(order * theta + phase)
    inside = rho <= radius

    hue = float(rng.uniform(0, 1))
    sat = float(rng.uniform(0.45, 0.8))
    val = float(rng.uniform(0.5, 0.85))
    base = np.array(_hsv_to_rgb(hue, sat, val), dtype=np.float64) * 255

    shade = 1.0 + 0.25 * (0.5 - yy / CANVAS)  # lit from above
    speckle = rng.normal(0.0, 10.0, size=(CANVAS, CANVAS))
    rgb = base[None, None, :] * shade[:, :, None] + speckle[:, :, None]
    rgba = np.zeros((CANVAS, CANVAS, 4), dtype=np.uint8)
    rgba[:, :, :3] = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    rgba[:, :, 3] = np.where(inside, 255, 0).astype(np.uint8)
    return ObjectCutout(rgba=rgba, category=concept)


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
