"""Perspective-aware pseudo-box placement and box-set matching.

Boxes are placed on a drivable region with heights tied to apparent depth:
an anchor row near the bottom of the frame is close to the camera and gets a
tall box, an anchor near the horizon gets a short one. Matching between two
box sets is an optimal assignment under an L1-center + (1 - IoU) cost.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    EmptyRegionError,
    InfeasibleConfigError,
)
from .scene import RegionMask

# Rejection-sampling budget for one box before the config is declared infeasible.
MAX_ATTEMPTS_PER_BOX = 10_000


def _stream_key(parts: tuple[int, ...]) -> np.uint64:
    raw = "/".join(str(int(p)) for p in parts).encode("ascii")
    digest = hashlib.blake2b(raw, digest_size=8).digest()
    return np.uint64(int.from_bytes(digest, "little"))


def keyed_rng(seed: int, *streams: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream ids).

    Each (seed, streams) pair owns an independent stream, so per-box draws do
    not depend on how many attempts earlier boxes consumed.
    """
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), _stream_key(streams)], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SamplerConfig:
    """Placement sampler parameters.

    h_max defaults to half the image height at sampling time when left None.
    """

    n: int = 64
    s_h: float = 24.0
    aspect_min: float = 0.5
    aspect_max: float = 1.5
    h_min: float = 12.0
    h_max: float | None = None
    require_ground_contact: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.s_h <= 0:
            raise ConfigError(f"s_h must be positive, got {self.s_h}")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ConfigError(
                f"need 0 < aspect_min <= aspect_max, got [{self.aspect_min}, {self.aspect_max}]"
            )
        if self.h_min <= 0:
            raise ConfigError(f"h_min must be positive, got {self.h_min}")
        if self.h_max is not None and self.h_max < self.h_min:
            raise ConfigError(f"h_max {self.h_max} < h_min {self.h_min}")

    def resolved_h_max(self, image_h: int) -> float:
        return image_h / 2 if self.h_max is None else float(self.h_max)

    def digest(self) -> str:
        """Stable 16-hex-digit fingerprint of the config, used in headers."""
        payload = json.dumps(
            {
                "n": self.n,
                "s_h": self.s_h,
                "aspect_min": self.aspect_min,
                "aspect_max": self.aspect_max,
                "h_min": self.h_min,
                "h_max": self.h_max,
                "require_ground_contact": self.require_ground_contact,
            },
            sort_keys=True,
        ).encode("ascii")
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class PseudoBox:
    """Axis-aligned box in pixel coordinates, center (cx, cy), size (w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ConfigError(f"box size must be positive, got w={self.w} h={self.h}")
        for v in (self.cx, self.cy, self.w, self.h):
            if not math.isfinite(v):
                raise ConfigError("box coordinates must be finite")

    @property
    def anchor_row(self) -> float:
        """Bottom edge row: where the object meets the ground."""
        return self.cy + self.h / 2

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def inside(self, image_w: int, image_h: int, tol: float = 1e-6) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 >= -tol and y0 >= -tol and x1 <= image_w + tol and y1 <= image_h + tol


@dataclass(frozen=True)
class BoxSet:
    """A sampled collection of boxes plus the context it was drawn in."""

    boxes: tuple[PseudoBox, ...]
    image_w: int
    image_h: int
    seed: int
    config: SamplerConfig | None = None
    config_digest: str = ""

    def __post_init__(self):
        if self.image_w <= 0 or self.image_h <= 0:
            raise ConfigError("image dimensions must be positive")
        for i, box in enumerate(self.boxes):
            if not box.inside(self.image_w, self.image_h):
                raise DataError(f"box {i} exceeds image bounds {box.bounds}")
        if self.config is not None and not self.config_digest:
            object.__setattr__(self, "config_digest", self.config.digest())

    def __len__(self) -> int:
        return len(self.boxes)


def perspective_height(anchor_row: float, image_h: int, cfg: SamplerConfig) -> float:
    """Box height implied by the anchor row under the depth prior.

    The normalized distance from the bottom edge, y_hat = (image_h -
    anchor_row) / image_h, is floored at 1/image_h so the height stays finite
    at the very bottom of the frame. Height is s_h / y_hat clamped into
    [h_min, h_max]. Monotone non-decreasing in anchor_row.
    """
    if image_h <= 0:
        raise ConfigError(f"image_h must be positive, got {image_h}")
    if not 0 <= anchor_row <= image_h:
        raise ConfigError(f"anchor_row {anchor_row} outside [0, {image_h}]")
    eps = 1.0 / image_h
    y_hat = max(eps, (image_h - anchor_row) / image_h)
    raw = cfg.s_h / y_hat
    return min(max(raw, cfg.h_min), cfg.resolved_h_max(image_h))


def _draw_anchor(
    rng: np.random.Generator,
    region: RegionMask,
    region_pixels: np.ndarray | None,
) -> tuple[int, int]:
    """One candidate bottom-center pixel (x, y)."""
    if region_pixels is not None:
        idx = int(rng.integers(0, len(region_pixels)))
        ay, ax = region_pixels[idx]
        return int(ax), int(ay)
    ax = int(rng.integers(0, region.width))
    ay = int(rng.integers(0, region.height))
    return ax, ay


def _sample_one(
    rng: np.random.Generator,
    region: RegionMask,
    region_pixels: np.ndarray | None,
    cfg: SamplerConfig,
    fixed_height: bool,
) -> PseudoBox:
    img_w, img_h = region.width, region.height
    h_max = cfg.resolved_h_max(img_h)
    for _ in range(MAX_ATTEMPTS_PER_BOX):
        ax, ay = _draw_anchor(rng, region, region_pixels)
        if fixed_height:
            h = float(rng.uniform(cfg.h_min, h_max))
        else:
            h = perspective_height(ay, img_h, cfg)
        w = float(rng.uniform(cfg.aspect_min, cfg.aspect_max)) * h
        if w > img_w or h > ay:
            continue  # cannot fit above the anchor or across the frame
        cx = min(max(float(ax), w / 2), img_w - w / 2)
        if cfg.require_ground_contact and not region.contains(int(round(cx)), ay):
            continue  # horizontal clamp shifted the foot off the region
        return PseudoBox(cx=cx, cy=ay - h / 2, w=w, h=h)
    raise InfeasibleConfigError(
        f"no valid placement after {MAX_ATTEMPTS_PER_BOX} attempts"
    )


def sample_pseudo_boxes(region: RegionMask, cfg: SamplerConfig, seed: int) -> BoxSet:
    """Draw cfg.n boxes whose feet stand on the region, sized by depth.

    Deterministic in (region, cfg, seed): box i uses its own counter-based
    stream keyed by (seed, i). Raises InfeasibleConfigError when any box
    exhausts its rejection budget.
    """
    region_pixels = np.argwhere(region.bits) if cfg.require_ground_contact else None
    if region_pixels is not None and len(region_pixels) == 0:
        raise EmptyRegionError("cannot sample boxes on an empty region")
    boxes = tuple(
        _sample_one(keyed_rng(seed, i), region, region_pixels, cfg, fixed_height=False)
        for i in range(cfg.n)
    )
    return BoxSet(
        boxes=boxes, image_w=region.width, image_h=region.height, seed=seed, config=cfg
    )


def sample_uniform_boxes(region: RegionMask, cfg: SamplerConfig, seed: int) -> BoxSet:
    """Depth-blind baseline: same anchors, heights uniform in [h_min, h_max].

    Used to contrast placement_report statistics against the depth prior; the
    height draw is independent of the anchor row.
    """
    region_pixels = np.argwhere(region.bits) if cfg.require_ground_contact else None
    if region_pixels is not None and len(region_pixels) == 0:
        raise EmptyRegionError("cannot sample boxes on an empty region")
    boxes = tuple(
        _sample_one(keyed_rng(seed, i), region, region_pixels, cfg, fixed_height=True)
        for i in range(cfg.n)
    )
    return BoxSet(
        boxes=boxes, image_w=region.width, image_h=region.height, seed=seed, config=cfg
    )


def iou(a: PseudoBox, b: PseudoBox) -> float:
    """Intersection-over-union of two boxes in the same pixel frame."""
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    # The bounds round-trip (cx +/- w/2) can lose an ulp, letting the ratio
    # creep past 1 for identical boxes; the true value never exceeds 1.
    return min(inter / union, 1.0)


def match_cost(pred: PseudoBox, pseudo: PseudoBox, image_w: int, image_h: int) -> float:
    """Pairing cost: L1 distance of centers normalized by the image size,
    plus (1 - IoU) so disjoint boxes cost a full extra unit."""
    if image_w <= 0 or image_h <= 0:
        raise ConfigError("image dimensions must be positive")
    l1 = abs(pred.cx - pseudo.cx) / image_w + abs(pred.cy - pseudo.cy) / image_h
    return l1 + (1.0 - iou(pred, pseudo))


@dataclass(frozen=True)
class Assignment:
    """Result of an optimal assignment: row index -> column index."""

    mapping: dict[int, int]
    total_cost: float


def hungarian_match(costs: np.ndarray) -> Assignment:
    """Minimum-cost bijection over min(n, m) indices of an n x m cost matrix.

    Shortest-augmenting-path formulation with row/column potentials, O(k^3)
    in the larger dimension. Entries must be finite and non-negative.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] == 0:
        raise ConfigError(f"cost matrix must be 2-D and non-empty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ConfigError("cost matrix contains non-finite entries")
    if np.any(c < 0):
        raise ConfigError("cost matrix contains negative entries")

    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape

    # 1-based arrays; p[j] is the row matched to column j, 0 when free.
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = c[i0 - 1]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    mapping: dict[int, int] = {}
    for j in range(1, m + 1):
        if p[j]:
            row_idx, col_idx = p[j] - 1, j - 1
            if transposed:
                row_idx, col_idx = col_idx, row_idx
            mapping[row_idx] = col_idx
    total = float(sum(costs[i][j] for i, j in sorted(mapping.items())))
    return Assignment(mapping=mapping, total_cost=total)


@dataclass(frozen=True)
class PairTerm:
    pred_index: int
    pseudo_index: int
    l1: float
    iou_term: float  # 1 - IoU

    @property
    def cost(self) -> float:
        return self.l1 + self.iou_term


@dataclass(frozen=True)
class BoxLoss:
    total: float
    assignment: Assignment
    terms: tuple[PairTerm, ...]


def box_loss(pred: BoxSet, pseudo: BoxSet) -> BoxLoss:
    """Optimal-assignment loss between a predicted and a reference box set.

    Both sets must live in the same image frame. When sizes differ, the
    excess boxes of the larger set stay unmatched and contribute nothing.
    """
    if (pred.image_w, pred.image_h) != (pseudo.image_w, pseudo.image_h):
        raise DimensionMismatchError(
            f"box sets in different frames: {(pred.image_w, pred.image_h)} vs "
            f"{(pseudo.image_w, pseudo.image_h)}"
        )
    if len(pred) == 0 or len(pseudo) == 0:
        raise DataError("box sets must be non-empty")
    w, h = pred.image_w, pred.image_h
    costs = np.array(
        [[match_cost(a, b, w, h) for b in pseudo.boxes] for a in pred.boxes]
    )
    assignment = hungarian_match(costs)
    terms = []
    for i, j in sorted(assignment.mapping.items()):
        a, b = pred.boxes[i], pseudo.boxes[j]
        l1 = abs(a.cx - b.cx) / w + abs(a.cy - b.cy) / h
        terms.append(PairTerm(pred_index=i, pseudo_index=j, l1=l1, iou_term=1.0 - iou(a, b)))
    total = float(sum(t.cost for t in terms))
    return BoxLoss(total=total, assignment=assignment, terms=tuple(terms))


@dataclass(frozen=True)
class PlacementReport:
    n: int
    ground_contact_fraction: float
    depth_size_pearson: float
    out_of_region_count: int


def placement_report(box_set: BoxSet, region: RegionMask) -> PlacementReport:
    """Summary statistics of a placement: how many boxes stand on the region
    and how strongly box height tracks the anchor row."""
    from .metrics import pearson

    if (region.width, region.height) != (box_set.image_w, box_set.image_h):
        raise DimensionMismatchError("region and box set have different frames")
    if len(box_set) < 2:
        raise DataError("placement report needs at least 2 boxes")
    contacts = 0
    for box in box_set.boxes:
        x = int(round(box.cx))
        y = int(round(box.anchor_row))
        y = min(y, region.height - 1)
        if region.contains(x, y):
            contacts += 1
    rows = [box.anchor_row for box in box_set.boxes]
    heights = [box.h for box in box_set.boxes]
    return PlacementReport(
        n=len(box_set),
        ground_contact_fraction=contacts / len(box_set),
        depth_size_pearson=pearson(rows, heights),
        out_of_region_count=len(box_set) - contacts,
    )


_HEADER_PREFIX = "boxset v1"


def save_boxset(box_set: BoxSet, path: str | Path) -> None:
    """Write one header line plus one ``cx cy w h`` record per box.

    Floats are written with repr precision so values round-trip bit-exactly.
    """
    lines = [
        f"{_HEADER_PREFIX} w={box_set.image_w} h={box_set.image_h} "
        f"seed={box_set.seed} config={box_set.config_digest or '-'}"
    ]
    for box in box_set.boxes:
        lines.append(f"{box.cx!r} {box.cy!r} {box.w!r} {box.h!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_boxset(path: str | Path) -> BoxSet:
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise DataError(f"cannot read box set {path}: {exc}")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(_HEADER_PREFIX):
        raise DataError(f"{path}: missing '{_HEADER_PREFIX}' header")
    fields: dict[str, str] = {}
    for tok in lines[0][len(_HEADER_PREFIX):].split():
        if "=" not in tok:
            raise DataError(f"{path}: bad header token {tok!r}")
        k, v = tok.split("=", 1)
        fields[k] = v
    try:
        image_w = int(fields["w"])
        image_h = int(fields["h"])
        seed = int(fields["seed"])
        digest = fields.get("config", "-")
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad header: {exc}")
    boxes = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 fields")
        try:
            cx, cy, w, h = (float(t) for t in parts)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: bad float")
        boxes.append(PseudoBox(cx=cx, cy=cy, w=w, h=h))
    return BoxSet(
        boxes=tuple(boxes),
        image_w=image_w,
        image_h=image_h,
        seed=seed,
        config=None,
        config_digest="" if digest == "-" else digest,
    )
