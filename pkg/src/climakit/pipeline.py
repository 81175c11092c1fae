"""Per-image anomaly synthesis and the dataset generation loop.

The local compositing path and the backend-driven path share one routine
and one seed-derivation scheme, so a dataset composited in-process is
bit-identical to one produced through the in-process backend or through an
HTTP endpoint that runs the same backend.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compositor import (
    AnomalyMask,
    PasteResult,
    RefineConfig,
    SceneImage,
    merge_masks,
    paste_object,
    pixel_fraction,
    refine_mask,
    save_image,
    save_mask,
)
from .cutouts import DEFAULT_CONCEPTS, get_cutout
from .datasetkit import ManifestEntry, read_manifest
from .errors import ConfigError
from .genclient import (
    GenerationClient,
    InpaintRequest,
    SceneGenRequest,
    build_prompt,
    scene_context_string,
)
from .placer import BoxSet, PseudoBox, SamplerConfig, keyed_rng, sample_pseudo_boxes
from .scene import SceneAttributes, SemanticMap, colorize_semantic_map, extract_drivable_region

# Candidate boxes use per-box streams 0..n-1; loop-level draws live past 2^32
# so the two families can never collide.
STREAM_COUNT = 2**32 + 1
STREAM_PICK = 2**32 + 2
STREAM_CONCEPT = 2**32 + 3


def derive_seed(seed: int, name: str) -> int:
    """Stable 64-bit sub-seed for a named piece of work under a run seed."""
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8, key=key)
    return int.from_bytes(digest.digest(), "little")


@dataclass(frozen=True)
class SynthesisConfig:
    """How many anomalies to place per image and what they can be."""

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    k_min: int = 1
    k_max: int = 3
    concepts: tuple[str, ...] = DEFAULT_CONCEPTS
    refine: bool = True
    refine_cfg: RefineConfig = field(default_factory=RefineConfig)

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        if not 0 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 0 <= k_min <= k_max, got [{self.k_min}, {self.k_max}]")
        if self.k_max > self.sampler.n:
            raise ConfigError(
                f"k_max {self.k_max} exceeds the {self.sampler.n} sampled candidates"
            )
        if not self.concepts:
            raise ConfigError("concept list is empty")
        if any(not c for c in self.concepts):
            raise ConfigError("concept names must be non-empty")


@dataclass(frozen=True)
class SynthesizedImage:
    image: SceneImage
    mask: AnomalyMask
    boxes: tuple[PseudoBox, ...]
    concepts: tuple[str, ...]
    candidates: BoxSet
    fraction: float


def _choose_placements(
    candidates: BoxSet, image_seed: int, cfg: SynthesisConfig
) -> tuple[tuple[PseudoBox, ...], tuple[str, ...]]:
    """Draw the anomaly count, distinct boxes, and concepts for one image."""
    k = int(
        keyed_rng(image_seed, STREAM_COUNT).integers(cfg.k_min, cfg.k_max + 1)
    )
    picks = keyed_rng(image_seed, STREAM_PICK).choice(
        len(candidates), size=k, replace=False
    )
    concept_ids = keyed_rng(image_seed, STREAM_CONCEPT).integers(
        0, len(cfg.concepts), size=k
    )
    boxes = tuple(candidates.boxes[int(i)] for i in picks)
    concepts = tuple(cfg.concepts[int(c)] for c in concept_ids)
    return boxes, concepts


def synthesize_one(
    map_: SemanticMap,
    attrs: SceneAttributes,
    image_id: str,
    seed: int,
    cfg: SynthesisConfig | None = None,
    client: GenerationClient | None = None,
) -> SynthesizedImage:
    """Build one anomaly image from a semantic map.

    Every random draw is keyed by derive_seed(seed, image_id), never by call
    order, so images can be produced in any order or in parallel. With a
    client, the base scene and each inpaint go through it; without one, the
    same placements are composited in-process.
    """
    cfg = cfg or SynthesisConfig()
    image_seed = derive_seed(seed, image_id)
    region = extract_drivable_region(map_)
    candidates = sample_pseudo_boxes(region, cfg.sampler, image_seed)
    boxes, concepts = _choose_placements(candidates, image_seed, cfg)

    if client is None:
        image = SceneImage(rgb=colorize_semantic_map(map_))
    else:
        result = client.request_scene(
            SceneGenRequest(semantic_map=map_, prompt=build_prompt(attrs), seed=image_seed)
        )
        image = result.image

    mask = AnomalyMask(grid=np.zeros((map_.height, map_.width), dtype=np.uint8))
    context = scene_context_string(attrs)
    for j, (box, concept) in enumerate(zip(boxes, concepts)):
        if client is None:
            pasted: PasteResult = paste_object(
                image, get_cutout(concept), box, harmonize_colors=True
            )
            image, box_mask = pasted.image, pasted.mask
        else:
            reply = client.request_inpaint(
                InpaintRequest(
                    image=image,
                    box=box,
                    concept=concept,
                    scene_context=context,
                    seed=derive_seed(image_seed, f"inpaint{j}"),
                )
            )
            image, box_mask = reply.image, reply.mask
        mask = merge_masks(mask, box_mask)

    if cfg.refine:
        mask = refine_mask(mask, cfg.refine_cfg)
    return SynthesizedImage(
        image=image,
        mask=mask,
        boxes=boxes,
        concepts=concepts,
        candidates=candidates,
        fraction=pixel_fraction(mask),
    )


@dataclass(frozen=True)
class ImageJob:
    """One unit of dataset generation."""

    image_id: str
    map_: SemanticMap
    attrs: SceneAttributes
    split: str = "train"


def entry_for(job: ImageJob, synth: SynthesizedImage) -> ManifestEntry:
    scene = job.attrs.scene.value
    weather = job.attrs.weather.value
    stem = f"{job.split}/{scene}/{weather}/{job.image_id}"
    return ManifestEntry(
        image_path=f"{stem}.png",
        mask_path=f"{stem}_mask.png",
        scene=job.attrs.scene,
        weather=job.attrs.weather,
        time_of_day=job.attrs.time_of_day,
        categories=tuple(sorted(set(synth.concepts))),
        pixel_fraction=synth.fraction,
        split=job.split,
    )


class ManifestJournal:
    """Append-only manifest writer that makes re-runs resumable.

    Completed ids are read back from the manifest file itself, so an
    interrupted run skips finished work and can never record an image twice.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.done: set[str] = set()
        if self.path.exists():
            for entry in read_manifest(self.path):
                self.done.add(Path(entry.image_path).stem)

    def record(self, entry: ManifestEntry) -> None:
        stem = Path(entry.image_path).stem
        with self._lock:
            if stem in self.done:
                return
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
            self.done.add(stem)


def run_generation(
    jobs: Iterable[ImageJob],
    root: str | Path,
    seed: int,
    cfg: SynthesisConfig | None = None,
    client: GenerationClient | None = None,
    manifest_name: str = "manifest.jsonl",
    jobs_in_flight: int = 1,
    on_progress: Callable[[str], None] | None = None,
) -> list[ManifestEntry]:
    """Synthesize every job into a dataset tree and journal the manifest.

    Manifest lines are flushed in job order no matter how many workers run,
    so the output file is byte-stable across thread timings. Returns the
    entries for all jobs, including ones finished by an earlier run.
    """
    if jobs_in_flight < 1:
        raise ConfigError(f"jobs_in_flight must be >= 1, got {jobs_in_flight}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    journal = ManifestJournal(root / manifest_name)
    jobs = list(jobs)
    seen: set[str] = set()
    for job in jobs:
        if job.image_id in seen:
            raise ConfigError(f"duplicate image id {job.image_id!r}")
        seen.add(job.image_id)

    def produce(job: ImageJob) -> ManifestEntry:
        try:
            synth = synthesize_one(job.map_, job.attrs, job.image_id, seed, cfg, client)
        except Exception as exc:
            if on_progress:
                on_progress(f"{job.image_id}: failed: {exc}")
            raise
        entry = entry_for(job, synth)
        image_file = root / entry.image_path
        image_file.parent.mkdir(parents=True, exist_ok=True)
        save_image(synth.image, image_file)
        save_mask(synth.mask, root / entry.mask_path)
        return entry

    pre_done = {i for i, job in enumerate(jobs) if job.image_id in journal.done}
    pending = [(i, job) for i, job in enumerate(jobs) if i not in pre_done]
    if pre_done and on_progress:
        on_progress(f"resuming: {len(pre_done)} image(s) already recorded")

    flush_lock = threading.Lock()
    next_flush = 0
    flushable: dict[int, ManifestEntry] = {}

    def flush(index: int, entry: ManifestEntry) -> None:
        # Journal strictly in job order so an interrupted run leaves a prefix
        # (plus whatever an earlier run already recorded).
        nonlocal next_flush
        with flush_lock:
            flushable[index] = entry
            while True:
                while next_flush in pre_done:
                    next_flush += 1
                if next_flush not in flushable:
                    break
                journal.record(flushable.pop(next_flush))
                next_flush += 1

    if jobs_in_flight == 1:
        for i, job in pending:
            flush(i, produce(job))
            if on_progress:
                on_progress(f"{job.image_id}: done")
    else:
        with ThreadPoolExecutor(max_workers=jobs_in_flight) as pool:
            futures = [(pool.submit(produce, job), i, job) for i, job in pending]
            for future, i, job in futures:
                flush(i, future.result())
                if on_progress:
                    on_progress(f"{job.image_id}: done")

    by_stem = {Path(e.image_path).stem: e for e in read_manifest(root / manifest_name)}
    return [by_stem[job.image_id] for job in jobs if job.image_id in by_stem]
