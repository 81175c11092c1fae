"""Copy-paste compositing and anomaly-mask hygiene.

Masks use three sentinel values: 0 for in-distribution pixels, 255 for
anomaly pixels, 128 for pixels excluded from scoring. Pasting touches only
the integer target rectangle of the box; everything outside is preserved
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, DimensionMismatchError, EmptyRegionError
from .metrics import PIXEL_ANOMALY, PIXEL_IGNORE, PIXEL_IN_DISTRIBUTION
from .placer import PseudoBox

# A paste pixel is anomalous when its resampled alpha reaches this value.
ALPHA_THRESHOLD = 128

# Refinement iterates its denoise pass until the mask stops changing; random
# masks settle within a few passes, the cap only guards pathological input.
# Keep the cap even: if the pass ever 2-cycles, an even cap returns the same
# phase on repeated calls, preserving idempotence.
MAX_REFINE_PASSES = 16


@dataclass(frozen=True)
class SceneImage:
    """8-bit RGB image."""

    rgb: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3 or self.rgb.dtype != np.uint8:
            raise DataError(f"scene image must be (H, W, 3) uint8, got {self.rgb.shape}")
        if self.rgb.size == 0:
            raise DataError("scene image has zero area")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class ObjectCutout:
    """RGBA object patch; alpha is the paste mask."""

    rgba: np.ndarray  # (H, W, 4) uint8
    category: str = ""

    def __post_init__(self):
        if self.rgba.ndim != 3 or self.rgba.shape[2] != 4 or self.rgba.dtype != np.uint8:
            raise DataError(f"cutout must be (H, W, 4) uint8, got {self.rgba.shape}")
        if not self.rgba[:, :, 3].any():
            raise DataError("cutout alpha is entirely zero")


@dataclass(frozen=True)
class AnomalyMask:
    """Sentinel-valued mask: {0, 255, 128}."""

    grid: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        if self.grid.ndim != 2 or self.grid.dtype != np.uint8:
            raise DataError(f"mask must be (H, W) uint8, got {self.grid.shape}")
        counts = np.bincount(self.grid.ravel(), minlength=256)
        legal = {PIXEL_IN_DISTRIBUTION, PIXEL_ANOMALY, PIXEL_IGNORE}
        bad = [int(v) for v in np.flatnonzero(counts) if int(v) not in legal]
        if bad:
            raise DataError(f"mask contains non-sentinel values {bad}")

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]


def load_image(path: str | Path) -> SceneImage:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}")
    return SceneImage(rgb=np.asarray(img.convert("RGB"), dtype=np.uint8))


def save_image(image: SceneImage, path: str | Path) -> None:
    Image.fromarray(image.rgb, mode="RGB").save(path)


def load_cutout(path: str | Path, category: str = "") -> ObjectCutout:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read cutout {path}: {exc}")
    return ObjectCutout(rgba=np.asarray(img.convert("RGBA"), dtype=np.uint8), category=category)


def load_mask(path: str | Path) -> AnomalyMask:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}")
    if img.mode != "L":
        raise DataError(f"mask {path} must be 8-bit grayscale, got mode {img.mode!r}")
    return AnomalyMask(grid=np.asarray(img, dtype=np.uint8))


def save_mask(mask: AnomalyMask, path: str | Path) -> None:
    Image.fromarray(mask.grid, mode="L").save(path)


def _target_rect(box: PseudoBox, image_w: int, image_h: int) -> tuple[int, int, int, int]:
    """Integer paste rectangle (x0, y0, tw, th); must lie inside the image."""
    tw = int(round(box.w))
    th = int(round(box.h))
    x0 = int(round(box.cx - box.w / 2))
    y0 = int(round(box.cy - box.h / 2))
    if tw < 1 or th < 1:
        raise DataError(f"box rasterizes to an empty rectangle: {box}")
    if x0 < 0 or y0 < 0 or x0 + tw > image_w or y0 + th > image_h:
        raise DataError(
            f"box rect [{x0}, {y0}, {x0 + tw}, {y0 + th}] exceeds image "
            f"{image_w}x{image_h}"
        )
    return x0, y0, tw, th


def resample_cutout(cutout: ObjectCutout, width: int, height: int) -> np.ndarray:
    """Bilinear RGBA resample to an exact pixel size."""
    if width < 1 or height < 1:
        raise ConfigError(f"target size must be positive, got {width}x{height}")
    img = Image.fromarray(cutout.rgba, mode="RGBA")
    return np.asarray(img.resize((width, height), Image.BILINEAR), dtype=np.uint8)


@dataclass(frozen=True)
class PasteResult:
    image: SceneImage
    mask: AnomalyMask


def harmonize(cutout: ObjectCutout, scene: SceneImage, box: PseudoBox) -> ObjectCutout:
    """Color-transfer the cutout toward its destination surroundings.

    Per channel, the cutout's mean/std over its solid pixels (alpha >= 128)
    are mapped onto the scene's mean/std over a ring of width max(4, box.h/8)
    around the box. A degenerate ring (box covering the whole frame) falls
    back to whole-image statistics; a flat cutout channel keeps scale 1 and
    only shifts its mean. Alpha is returned untouched.
    """
    x0, y0, tw, th = _target_rect(box, scene.width, scene.height)
    ring_w = max(4, int(round(box.h / 8)))
    ex0 = max(0, x0 - ring_w)
    ey0 = max(0, y0 - ring_w)
    ex1 = min(scene.width, x0 + tw + ring_w)
    ey1 = min(scene.height, y0 + th + ring_w)
    ring = np.ones((ey1 - ey0, ex1 - ex0), dtype=bool)
    ring[y0 - ey0 : y0 - ey0 + th, x0 - ex0 : x0 - ex0 + tw] = False
    ring_pixels = scene.rgb[ey0:ey1, ex0:ex1][ring]
    if ring_pixels.size == 0:
        ring_pixels = scene.rgb.reshape(-1, 3)

    alpha = cutout.rgba[:, :, 3]
    solid = alpha >= ALPHA_THRESHOLD
    if not solid.any():
        solid = alpha > 0
    src_pixels = cutout.rgba[:, :, :3][solid].astype(np.float64)
    dst_pixels = ring_pixels.astype(np.float64)

    out = cutout.rgba.copy()
    rgb = cutout.rgba[:, :, :3].astype(np.float64)
    for ch in range(3):
        mu_c = src_pixels[:, ch].mean()
        sd_c = src_pixels[:, ch].std()
        mu_r = dst_pixels[:, ch].mean()
        sd_r = dst_pixels[:, ch].std()
        scale = 1.0 if sd_c == 0 else sd_r / sd_c
        rgb[:, :, ch] = (rgb[:, :, ch] - mu_c) * scale + mu_r
    out[:, :, :3] = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    return ObjectCutout(rgba=out, category=cutout.category)


def paste_object(
    scene: SceneImage,
    cutout: ObjectCutout,
    box: PseudoBox,
    harmonize_colors: bool = False,
) -> PasteResult:
    """Resample the cutout into the box and alpha-blend it onto the scene.

    The mask marks exactly the pixels whose resampled alpha reaches 128.
    Pixels outside the integer box rectangle are preserved bit-exactly, and
    inside the rectangle zero-alpha pixels stay untouched as well.
    """
    x0, y0, tw, th = _target_rect(box, scene.width, scene.height)
    patch_src = harmonize(cutout, scene, box) if harmonize_colors else cutout
    patch = resample_cutout(patch_src, tw, th)

    out = scene.rgb.copy()
    region = out[y0 : y0 + th, x0 : x0 + tw].astype(np.float64)
    alpha = patch[:, :, 3].astype(np.float64)[:, :, None]
    fg = patch[:, :, :3].astype(np.float64)
    blended = np.round((alpha * fg + (255.0 - alpha) * region) / 255.0)
    out[y0 : y0 + th, x0 : x0 + tw] = np.clip(blended, 0, 255).astype(np.uint8)

    mask = np.zeros((scene.height, scene.width), dtype=np.uint8)
    mask[y0 : y0 + th, x0 : x0 + tw][patch[:, :, 3] >= ALPHA_THRESHOLD] = PIXEL_ANOMALY
    return PasteResult(image=SceneImage(rgb=out), mask=AnomalyMask(grid=mask))


@dataclass(frozen=True)
class RefineConfig:
    median_radius: int = 2
    open_close_kernel: int = 3
    keep_largest_component: bool = False

    def __post_init__(self):
        if self.median_radius < 0:
            raise ConfigError(f"median_radius must be >= 0, got {self.median_radius}")
        if self.open_close_kernel < 1 or self.open_close_kernel % 2 == 0:
            raise ConfigError(
                f"open_close_kernel must be odd and >= 1, got {self.open_close_kernel}"
            )


# 4-connectivity for component analysis.
_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _denoise_pass(binary: np.ndarray, cfg: RefineConfig) -> np.ndarray:
    """One median -> open -> close sweep on a bool grid.

    Border conventions: the median replicates edge pixels; dilation treats
    the outside as background and erosion as foreground, so opening and
    closing never invent or destroy mass purely at the frame edge.
    """
    out = binary
    if cfg.median_radius > 0:
        size = 2 * cfg.median_radius + 1
        out = ndimage.median_filter(out.astype(np.uint8), size=size, mode="nearest").astype(bool)
    k = cfg.open_close_kernel
    if k > 1:
        structure = np.ones((k, k), dtype=bool)
        out = ndimage.binary_erosion(out, structure=structure, border_value=1)
        out = ndimage.binary_dilation(out, structure=structure, border_value=0)
        out = ndimage.binary_dilation(out, structure=structure, border_value=0)
        out = ndimage.binary_erosion(out, structure=structure, border_value=1)
    return out


def _keep_largest(binary: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(binary, structure=_CONN4)
    if count <= 1:
        return binary
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(sizes.argmax())  # ties break to the first-raster blob


def refine_mask(mask: AnomalyMask | np.ndarray, cfg: RefineConfig | None = None) -> AnomalyMask:
    """Denoise the anomaly plane of a mask; idempotent.

    Applies median filtering followed by a morphological open and close
    (optionally keeping only the largest 4-connected component), repeated
    until the mask reaches a fixpoint so that refining a refined mask is a
    no-op. Ignore pixels are never touched and act as background for the
    filters.
    """
    cfg = cfg or RefineConfig()
    grid = mask.grid if isinstance(mask, AnomalyMask) else np.asarray(mask)
    AnomalyMask(grid=grid)  # validate sentinels
    ignore = grid == PIXEL_IGNORE
    binary = grid == PIXEL_ANOMALY
    for _ in range(MAX_REFINE_PASSES):
        step = _denoise_pass(binary, cfg)
        if cfg.keep_largest_component and step.any():
            step = _keep_largest(step)
        step &= ~ignore
        if np.array_equal(step, binary):
            break
        binary = step
    out = np.zeros_like(grid)
    out[binary] = PIXEL_ANOMALY
    out[ignore] = PIXEL_IGNORE
    return AnomalyMask(grid=out)


def pixel_fraction(mask: AnomalyMask | np.ndarray) -> float:
    """Fraction of non-ignored pixels marked anomalous."""
    grid = mask.grid if isinstance(mask, AnomalyMask) else np.asarray(mask)
    scored = grid != PIXEL_IGNORE
    total = int(scored.sum())
    if total == 0:
        raise EmptyRegionError("every pixel is ignored, fraction undefined")
    return int((grid[scored] == PIXEL_ANOMALY).sum()) / total


def merge_masks(a: AnomalyMask, b: AnomalyMask) -> AnomalyMask:
    """Union of anomaly pixels; ignore wins only where neither marks anomaly."""
    if a.grid.shape != b.grid.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.grid.shape} vs {b.grid.shape}")
    out = np.maximum(a.grid, b.grid)
    return AnomalyMask(grid=out)
