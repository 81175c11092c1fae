"""Release gate: ten numbered checks over the whole toolkit.

Each test prints one PASS/FAIL line, so ``pytest tests/test_acceptance.py -s``
reads as a checklist. The slow checks (6, 8, 9) synthesize full-size data and
keep the suite honest at the cost of a few minutes of runtime.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from contextlib import contextmanager
from functools import reduce
from pathlib import Path

import numpy as np
import pytest

from climakit.cli import main as cli_main
from climakit.compositor import (
    AnomalyMask,
    ObjectCutout,
    SceneImage,
    load_mask,
    paste_object,
    pixel_fraction,
    refine_mask,
    save_mask,
)
from climakit.cutouts import DEFAULT_CONCEPTS, get_cutout
from climakit.datasetkit import (
    ALL_CELLS,
    ManifestEntry,
    curate,
    read_manifest,
    uniform_quotas,
    write_manifest,
)
from climakit.errors import BackendError, DimensionMismatchError, EditLeakageError
from climakit.genclient import (
    GenerationClient,
    InpaintRequest,
    RetryPolicy,
    SceneGenRequest,
    build_prompt,
    scene_context_string,
)
from climakit.metrics import (
    MetricAccumulator,
    auroc,
    average_precision,
    exact_metrics,
    fpr_at_95tpr,
    merge,
    save_score_map,
)
from climakit.mockserver import MockService
from climakit.pipeline import SynthesisConfig, run_generation
from climakit.placer import (
    PseudoBox,
    SamplerConfig,
    hungarian_match,
    perspective_height,
    placement_report,
    sample_pseudo_boxes,
    sample_uniform_boxes,
)
from climakit.scene import RegionMask, extract_drivable_region, save_semantic_map
from climakit.toydata import make_toy_semantic_map, toy_attrs, toy_jobs
from conftest import make_scored_instance
from oracles import brute_force_min_cost, naive_threshold_metrics

FAST_RETRY = RetryPolicy(max_retries=3, base_delay_ms=1.0, factor=1.0)


@contextmanager
def check(num: int, label: str):
    status = "FAIL"
    try:
        yield
        status = "PASS"
    finally:
        print(f"[criterion {num:2d}] {status}  {label}")


def acc_over(scores: np.ndarray, labels: np.ndarray) -> MetricAccumulator:
    acc = MetricAccumulator()
    mask = np.where(labels.reshape(1, -1) == 1, 255, 0).astype(np.uint8)
    acc.accumulate(scores.reshape(1, -1).astype(np.float64), mask)
    return acc


def test_01_metric_engines_agree():
    with check(1, "histogram metrics within 3e-3 of exact; exact matches naive to 1e-12; < 10 s"):
        started = time.perf_counter()
        for seed in range(200):
            scores, labels = make_scored_instance(seed)
            assert scores.size <= 5000
            m = exact_metrics(scores, labels)
            acc = acc_over(scores, labels)
            assert abs(auroc(acc) - m.auroc) <= 0.003
            assert abs(average_precision(acc) - m.ap) <= 0.003
            assert abs(fpr_at_95tpr(acc) - m.fpr95) <= 0.003
            auroc_n, ap_n, fpr_n = naive_threshold_metrics(scores, labels)
            assert abs(m.auroc - auroc_n) <= 1e-12
            assert abs(m.ap - ap_n) <= 1e-12
            assert abs(m.fpr95 - fpr_n) <= 1e-12
        assert time.perf_counter() - started < 10.0


def test_02_trivial_metric_identities():
    with check(2, "perfect detector scores (1, 1, 0) exactly; constant scores 0.5 / FPR95 1"):
        r = np.random.default_rng(2)
        labels = (r.random(4096) < 0.3).astype(np.int64)
        labels[:2] = [1, 0]

        perfect = labels.astype(np.float64)
        m = exact_metrics(perfect, labels)
        assert (m.auroc, m.ap, m.fpr95) == (1.0, 1.0, 0.0)
        acc = acc_over(perfect, labels)
        assert (auroc(acc), average_precision(acc), fpr_at_95tpr(acc)) == (1.0, 1.0, 0.0)

        constant = np.full(labels.size, 0.37)
        m = exact_metrics(constant, labels)
        assert abs(m.auroc - 0.5) <= 1e-12
        assert m.fpr95 == 1.0
        acc = acc_over(constant, labels)
        assert abs(auroc(acc) - 0.5) <= 1e-12
        assert fpr_at_95tpr(acc) == 1.0


def test_03_assignment_matches_brute_force():
    with check(3, "assignment cost equals permutation minimum, 500 matrices per size 2..7; < 30 s"):
        started = time.perf_counter()
        r = np.random.default_rng(3)
        for size in range(2, 8):
            for trial in range(500):
                if trial % 2:
                    costs = r.random((size, size))
                else:
                    # Integer entries force plentiful ties between assignments.
                    costs = r.integers(0, 10, (size, size)).astype(np.float64)
                assert hungarian_match(costs).total_cost == brute_force_min_cost(costs)
        assert time.perf_counter() - started < 30.0


def test_04_perspective_prior_contrast():
    with check(4, "height rule monotone; sampled boxes track depth (r >= 0.9), uniform ones do not (|r| < 0.3)"):
        r = np.random.default_rng(4)
        for _ in range(20):
            image_h = int(r.integers(64, 2049))
            cfg = SamplerConfig(
                s_h=float(r.uniform(4.0, 200.0)),
                h_min=float(r.uniform(1.0, 20.0)),
                h_max=float(r.uniform(40.0, image_h)),
            )
            heights = [perspective_height(row, image_h, cfg) for row in range(image_h)]
            assert all(b >= a for a, b in zip(heights, heights[1:]))

        toy_region = extract_drivable_region(make_toy_semantic_map(0))
        rect = np.zeros((512, 1024), dtype=bool)
        rect[256:, :] = True
        for region in (toy_region, RegionMask(bits=rect)):
            for seed in range(20):
                report = placement_report(
                    sample_pseudo_boxes(region, SamplerConfig(), seed), region
                )
                assert report.ground_contact_fraction == 1.0
                assert report.depth_size_pearson >= 0.9
            for seed in range(100):
                report = placement_report(
                    sample_uniform_boxes(region, SamplerConfig(), seed), region
                )
                assert abs(report.depth_size_pearson) < 0.3


def test_05_compositor_conservation():
    with check(5, "pastes conserve outside pixels; opaque fraction exact; refine idempotent on 100 masks"):
        r = np.random.default_rng(5)
        w = h = 128
        for i in range(100):
            scene = SceneImage(rgb=r.integers(0, 256, (h, w, 3), dtype=np.uint8))
            bw = int(r.integers(8, 49))
            bh = int(r.integers(8, 49))
            x0 = int(r.integers(0, w - bw + 1))
            y0 = int(r.integers(0, h - bh + 1))
            box = PseudoBox(cx=x0 + bw / 2, cy=y0 + bh / 2, w=float(bw), h=float(bh))

            pasted = paste_object(
                scene, get_cutout(DEFAULT_CONCEPTS[i % len(DEFAULT_CONCEPTS)]), box,
                harmonize_colors=True,
            )
            outside = np.ones((h, w), dtype=bool)
            outside[y0:y0 + bh, x0:x0 + bw] = False
            assert np.array_equal(pasted.image.rgb[outside], scene.rgb[outside])
            assert not pasted.mask.grid[outside].any()

            opaque = ObjectCutout(
                rgba=np.dstack([
                    r.integers(0, 256, (32, 32, 3), dtype=np.uint8),
                    np.full((32, 32), 255, dtype=np.uint8),
                ]),
                category="block",
            )
            solid = paste_object(scene, opaque, box)
            assert pixel_fraction(solid.mask) == (bw * bh) / (w * h)

        for seed in range(100):
            grid = (np.random.default_rng(seed).random((64, 64)) < 0.35)
            once = refine_mask(grid.astype(np.uint8) * 255)
            twice = refine_mask(once)
            assert np.array_equal(once.grid, twice.grid)


def test_06_anomaly_area_calibration(tmp_path):
    with check(6, "mean anomaly pixel fraction over 200 stub scenes within [1.9%, 2.9%]"):
        entries = run_generation(toy_jobs(200, seed=0), tmp_path / "calib", seed=0)
        mean = sum(e.pixel_fraction for e in entries) / len(entries)
        assert 0.019 <= mean <= 0.029


def test_07_curation_balances_cells():
    with check(7, "10,230 entries curate to 1,200 with every cell exactly at quota, reproducibly"):
        entries = []
        for j in range(10230):
            attrs = toy_attrs(j)
            stem = f"train/{attrs.scene.value}/{attrs.weather.value}/{j:06d}"
            entries.append(ManifestEntry(
                image_path=f"{stem}.png",
                mask_path=f"{stem}_mask.png",
                scene=attrs.scene,
                weather=attrs.weather,
                time_of_day=attrs.time_of_day,
                categories=("cone",),
                pixel_fraction=0.02,
            ))
        cell_of = lambda e: (e.scene.value, e.weather.value)
        assert len({cell_of(e) for e in entries}) == len(ALL_CELLS) == 36

        curated = curate(entries, 1200, seed=3)
        chosen = [e for e in curated if e.split == "test"]
        assert len(chosen) == 1200
        counts = Counter(cell_of(e) for e in chosen)
        assert counts == uniform_quotas(1200)

        assert curate(entries, 1200, seed=3) == curated
        other = [e for e in curate(entries, 1200, seed=4) if e.split == "test"]
        assert Counter(cell_of(e) for e in other) == counts
        assert {e.image_path for e in other} != {e.image_path for e in chosen}


def test_08_stub_pipeline_end_to_end(tmp_path):
    with check(8, "sample/generate/refine/curate/eval chain scores perfectly in every scenario group"):
        maps_dir = tmp_path / "maps"
        maps_dir.mkdir()
        for i in range(50):
            save_semantic_map(make_toy_semantic_map(i), maps_dir / f"toy{i:02d}.png")
        assert cli_main(["sample", "--maps", str(maps_dir),
                         "--out", str(tmp_path / "boxes"), "--seed", "5"]) == 0
        assert len(list((tmp_path / "boxes").glob("*.boxes.txt"))) == 50

        generated = tmp_path / "generated"
        assert cli_main(["generate", "--stub", "--toy", "50", "--seed", "5",
                         "--out", str(generated), "--jobs", "1"]) == 0

        refined = tmp_path / "refined"
        assert cli_main(["refine", "--root", str(generated), "--out", str(refined)]) == 0
        assert cli_main(["curate", "--manifest", str(refined / "manifest.jsonl"),
                         "--total", "36", "--seed", "4"]) == 0

        chosen = [e for e in read_manifest(refined / "manifest.jsonl") if e.split == "test"]
        assert len(chosen) == 36
        scores = tmp_path / "scores"
        for entry in chosen:
            mask = load_mask(refined / entry.mask_path)
            target = scores / Path(entry.image_path).with_suffix(".csm")
            target.parent.mkdir(parents=True, exist_ok=True)
            save_score_map((mask.grid == 255).astype(np.float32), target)

        reports_dir = tmp_path / "reports"
        assert cli_main(["eval", "--root", str(refined), "--scores", str(scores),
                         "--group-by", "condition", "--out", str(reports_dir),
                         "--jobs", "2"]) == 0
        payload = json.loads((reports_dir / "report.json").read_text())
        (reports,) = payload["groups"].values()
        rows = {tuple(r["key"]): r for r in reports}
        assert len(rows) == 13  # 6 scenes x clear/adverse, then the average row
        assert len({key[0] for key in rows if key != ("average",)}) == 6
        assert {key[1] for key in rows if key != ("average",)} == {"clear", "adverse"}
        assert tuple(reports[-1]["key"]) == ("average",)
        for row in rows.values():
            assert row["pos_total"] > 0 and row["neg_total"] > 0
            assert row["auroc"] == 1.0
            assert row["fpr95"] == 0.0
        table = (reports_dir / "report.txt").read_text()
        assert "average" in table and "adverse" in table


def test_09_throughput(tmp_path):
    with check(9, "accumulate >= 50 Mpx/s; 1,200-image eval < 60 s at 8 jobs; 1,200-way merge < 1 s"):
        r = np.random.default_rng(9)
        scores = r.random((512, 1024))
        mask = np.where(r.random((512, 1024)) < 0.1, 255, 0).astype(np.uint8)
        acc = MetricAccumulator()
        acc.accumulate(scores, mask)  # warm caches before timing
        loops = 100
        started = time.perf_counter()
        for _ in range(loops):
            acc.accumulate(scores, mask)
        rate = loops * scores.size / (time.perf_counter() - started)
        assert rate >= 50e6

        root = tmp_path / "data"
        scores_dir = tmp_path / "scores"
        entries = []
        for i in range(1200):
            attrs = toy_attrs(i)
            stem = f"test/{attrs.scene.value}/{attrs.weather.value}/{i:06d}"
            grid = np.zeros((512, 1024), dtype=np.uint8)
            y, x = (i * 37) % 440, (i * 97) % 920
            grid[y:y + 64, x:x + 96] = 255
            mask_path = root / f"{stem}_mask.png"
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            save_mask(AnomalyMask(grid=grid), mask_path)
            score_path = scores_dir / f"{stem}.csm"
            score_path.parent.mkdir(parents=True, exist_ok=True)
            save_score_map((grid == 255).astype(np.float32), score_path)
            entries.append(ManifestEntry(
                image_path=f"{stem}.png",
                mask_path=f"{stem}_mask.png",
                scene=attrs.scene,
                weather=attrs.weather,
                time_of_day=attrs.time_of_day,
                categories=("block",),
                pixel_fraction=(64 * 96) / (512 * 1024),
                split="test",
            ))
        write_manifest(entries, root / "manifest.jsonl")
        started = time.perf_counter()
        assert cli_main(["eval", "--root", str(root), "--scores", str(scores_dir),
                         "--group-by", "all", "--jobs", "8"]) == 0
        assert time.perf_counter() - started < 60.0

        parts = [
            MetricAccumulator(
                pos=r.integers(0, 1000, 4096).astype(np.int64),
                neg=r.integers(0, 1000, 4096).astype(np.int64),
            )
            for _ in range(1200)
        ]
        started = time.perf_counter()
        combined = reduce(merge, parts)
        assert time.perf_counter() - started < 1.0
        assert combined.pos_total == sum(p.pos_total for p in parts)


def test_10_wire_protocol_conformance(tmp_path):
    with check(10, "mock faults raise the matching errors; a dropped request retries without duplicates"):
        road = make_toy_semantic_map(0, width=256, height=128)
        attrs = toy_attrs(0)

        with MockService(fault="wrong_dims") as svc:
            client = GenerationClient(endpoint=svc.endpoint, policy=FAST_RETRY)
            with pytest.raises(DimensionMismatchError):
                client.request_scene(SceneGenRequest(
                    semantic_map=road, prompt=build_prompt(attrs), seed=1,
                ))

        r = np.random.default_rng(10)
        scene = SceneImage(rgb=r.integers(0, 256, (128, 256, 3), dtype=np.uint8))
        inpaint = InpaintRequest(
            image=scene,
            box=PseudoBox(cx=128.0, cy=80.0, w=32.0, h=32.0),
            concept="traffic cone",
            scene_context=scene_context_string(attrs),
            seed=1,
        )
        with MockService(fault="edit_leakage") as svc:
            client = GenerationClient(endpoint=svc.endpoint, policy=FAST_RETRY)
            with pytest.raises(EditLeakageError):
                client.request_inpaint(inpaint)

        with MockService(fault="http_error") as svc:
            client = GenerationClient(endpoint=svc.endpoint, policy=FAST_RETRY)
            with pytest.raises(BackendError):
                client.request_inpaint(inpaint)

        with MockService(fault="drop_first:1") as svc:
            client = GenerationClient(endpoint=svc.endpoint, policy=FAST_RETRY)
            jobs = toy_jobs(2, seed=0, width=256, height=128)
            cfg = SynthesisConfig(sampler=SamplerConfig(n=16), k_min=1, k_max=2)
            entries = run_generation(jobs, tmp_path / "retry", seed=0,
                                     cfg=cfg, client=client)
            assert [e.split for e in entries] == ["train", "train"]
            recorded = read_manifest(tmp_path / "retry" / "manifest.jsonl")
            assert len(recorded) == 2
            assert len({e.image_path for e in recorded}) == 2
            posts = [
                (e["path"], e["idempotency_key"]) for e in svc.log
                if e["idempotency_key"]
            ]
            # The dropped request is retried with the same idempotency key.
            assert len(posts) == len(set(posts)) + 1
