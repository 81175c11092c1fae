"""Command line front end.

Subcommands: sample, compose, generate, refine, eval, stats, curate,
validate. Exit codes: 0 success, 2 configuration error, 3 data error,
4 validation findings, 5 backend or transport failure.

Option values resolve as flags > config file > built-in defaults. The config
file is flat ``key=value`` text whose keys are the long flag names without
dashes (``seed=7``, ``h_min=16``); keys that a subcommand does not define are
ignored. The ``CLIMAKIT_ENDPOINT`` environment variable supplies the default
generation service address.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import datasetkit
from .compositor import RefineConfig, load_mask, pixel_fraction, refine_mask, save_mask
from .datasetkit import CurationFilters, ManifestEntry, read_manifest, write_manifest
from .errors import (
    BackendError,
    ConfigError,
    DataError,
    DimensionMismatchError,
    EditLeakageError,
    InfeasibleConfigError,
    ToolkitError,
    TransportError,
)
from .genclient import GenerationClient, STUB_ENDPOINT
from .metrics import (
    DEFAULT_BINS,
    MetricAccumulator,
    condition_reports,
    grouped_report,
    load_score_map,
    per_image_report,
    render_report_table,
    reports_to_json,
)
from .pipeline import ImageJob, SynthesisConfig, derive_seed, run_generation
from .placer import SamplerConfig, sample_pseudo_boxes, save_boxset
from .scene import (
    DEFAULT_SCHEMA,
    SceneAttributes,
    extract_drivable_region,
    load_schema_config,
    load_semantic_map,
)
from .toydata import toy_jobs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VALIDATION = 4
EXIT_SERVICE = 5

ENDPOINT_ENV = "CLIMAKIT_ENDPOINT"

SCORE_SUFFIXES = (".csm", ".png")


def _say(text: str) -> None:
    print(text, file=sys.stderr)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parse_range(text: str) -> tuple[float, float]:
    """Parse 'lo:hi' into a float pair; validation happens downstream."""
    parts = text.split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numeric lo:hi, got {text!r}")


def _parse_span(text: str) -> tuple[int, int]:
    """Parse an integer count ('2') or inclusive span ('1:3')."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            value = int(parts[0])
            return value, value
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected k or lo:hi, got {text!r}")


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value text; # starts a comment, blank lines are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _scan_config_path(argv: list[str]) -> str | None:
    for i, token in enumerate(argv):
        if token == "--config":
            if i + 1 >= len(argv):
                raise ConfigError("--config needs a path")
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


class _Defaults:
    """Resolves a built-in default against the loaded config file."""

    def __init__(self, cfg: dict[str, str]):
        self.cfg = cfg

    def __call__(self, key: str, hard, type_=None):
        if key not in self.cfg:
            return hard
        raw = self.cfg[key]
        caster = type_ or (type(hard) if hard is not None else str)
        if caster is bool:
            caster = _parse_bool
        try:
            return caster(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"config key {key}={raw!r}: {exc}")


def _add_sampler_flags(p: argparse.ArgumentParser, d: _Defaults) -> None:
    p.add_argument("--n", type=int, default=d("n", 64), help="candidate boxes per image")
    p.add_argument(
        "--scale", type=float, default=d("scale", 24.0), help="depth prior height scale"
    )
    p.add_argument(
        "--aspect",
        type=_parse_range,
        default=d("aspect", (0.5, 1.5), _parse_range),
        help="width/height ratio range lo:hi",
    )
    p.add_argument("--h-min", type=float, default=d("h_min", 12.0), help="minimum box height")
    p.add_argument(
        "--h-max",
        type=float,
        default=d("h_max", None, float),
        help="maximum box height (default: half the image height)",
    )
    p.add_argument(
        "--no-ground-contact",
        action="store_true",
        default=d("no_ground_contact", False, bool),
        help="do not require box feet to stand on the region",
    )


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(
        n=args.n,
        s_h=args.scale,
        aspect_min=args.aspect[0],
        aspect_max=args.aspect[1],
        h_min=args.h_min,
        h_max=args.h_max,
        require_ground_contact=not args.no_ground_contact,
    )


def _add_refine_flags(p: argparse.ArgumentParser, d: _Defaults) -> None:
    p.add_argument(
        "--median-radius",
        type=int,
        default=d("median_radius", 2),
        help="median filter radius (0 disables)",
    )
    p.add_argument(
        "--kernel",
        type=int,
        default=d("kernel", 3),
        help="odd open/close structuring element size",
    )
    p.add_argument(
        "--keep-largest",
        action="store_true",
        default=d("keep_largest", False, bool),
        help="keep only the largest connected anomaly component",
    )


def _refine_config(args) -> RefineConfig:
    return RefineConfig(
        median_radius=args.median_radius,
        open_close_kernel=args.kernel,
        keep_largest_component=args.keep_largest,
    )


def _load_schema(args):
    return load_schema_config(args.schema) if args.schema else DEFAULT_SCHEMA


def _map_files(maps_dir: str) -> list[Path]:
    root = Path(maps_dir)
    if not root.is_dir():
        raise DataError(f"--maps {maps_dir} is not a directory")
    files = sorted(p for p in root.glob("*.png") if not p.stem.endswith("_mask"))
    if not files:
        raise DataError(f"no .png semantic maps under {maps_dir}")
    return files


# ---------------------------------------------------------------- sample


def cmd_sample(args) -> int:
    schema = _load_schema(args)
    cfg = _sampler_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for map_file in _map_files(args.maps):
        map_ = load_semantic_map(map_file, schema)
        region = extract_drivable_region(map_)
        box_set = sample_pseudo_boxes(region, cfg, derive_seed(args.seed, map_file.stem))
        target = out / f"{map_file.stem}.boxes.txt"
        save_boxset(box_set, target)
        _say(f"{map_file.name}: {len(box_set)} boxes -> {target}")
    return EXIT_OK


# ---------------------------------------------------- compose / generate


def _attrs_for_map(map_file: Path) -> SceneAttributes:
    """Sidecar <stem>.json supplies attrs; otherwise a clear daytime street."""
    sidecar = map_file.with_suffix(".json")
    if sidecar.exists():
        try:
            obj = json.loads(sidecar.read_text(encoding="utf-8"))
            return SceneAttributes(
                scene=obj["scene"],
                weather=obj["weather"],
                time_of_day=obj["time_of_day"],
                caption=obj.get("caption", ""),
            )
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"bad attributes sidecar {sidecar}: {exc}")
    return SceneAttributes(scene="city_street", weather="clear", time_of_day="daytime")


def _synthesis_jobs(args) -> list[ImageJob]:
    if (args.toy is None) == (args.maps is None):
        raise ConfigError("exactly one of --toy and --maps is required")
    if args.toy is not None:
        return toy_jobs(args.toy, args.seed, split=args.split)
    schema = _load_schema(args)
    return [
        ImageJob(
            image_id=map_file.stem,
            map_=load_semantic_map(map_file, schema),
            attrs=_attrs_for_map(map_file),
            split=args.split,
        )
        for map_file in _map_files(args.maps)
    ]


def _run_synthesis(args, client: GenerationClient | None) -> int:
    jobs = _synthesis_jobs(args)
    cfg = SynthesisConfig(
        sampler=_sampler_config(args),
        k_min=args.anomalies[0],
        k_max=args.anomalies[1],
        refine=not args.no_refine,
        refine_cfg=_refine_config(args),
    )
    entries = run_generation(
        jobs,
        args.out,
        args.seed,
        cfg=cfg,
        client=client,
        jobs_in_flight=args.jobs,
        on_progress=_say if args.verbose else None,
    )
    fractions = [e.pixel_fraction for e in entries]
    _say(
        f"{len(entries)} image(s) under {args.out}, "
        f"mean anomaly fraction {sum(fractions) / len(fractions):.4f}"
    )
    return EXIT_OK


def cmd_compose(args) -> int:
    return _run_synthesis(args, client=None)


def cmd_generate(args) -> int:
    endpoint = STUB_ENDPOINT if args.stub else args.endpoint
    client = GenerationClient(
        endpoint=endpoint, timeout_s=args.timeout, max_in_flight=max(args.jobs, 1)
    )
    try:
        return _run_synthesis(args, client=client)
    except DimensionMismatchError as exc:
        # In this path dimension checks only guard service replies, so a
        # mismatch is the backend misbehaving, not bad local data.
        _say(f"service error: {exc}")
        return EXIT_SERVICE


# ---------------------------------------------------------------- refine


def cmd_refine(args) -> int:
    root = Path(args.root)
    out = Path(args.out)
    if out.resolve() == root.resolve():
        raise ConfigError("--out must differ from --root; inputs are never modified")
    entries = read_manifest(root / args.manifest)
    cfg = _refine_config(args)
    out.mkdir(parents=True, exist_ok=True)
    refined_entries = []
    changed = 0
    for entry in entries:
        image_src = root / entry.image_path
        image_dst = out / entry.image_path
        image_dst.parent.mkdir(parents=True, exist_ok=True)
        if not image_src.exists():
            raise DataError(f"manifest references missing image {entry.image_path}")
        shutil.copyfile(image_src, image_dst)
        mask = load_mask(root / entry.mask_path)
        refined = refine_mask(mask, cfg)
        if not np.array_equal(refined.grid, mask.grid):
            changed += 1
        save_mask(refined, out / entry.mask_path)
        refined_entries.append(replace(entry, pixel_fraction=pixel_fraction(refined)))
    write_manifest(refined_entries, out / args.manifest)
    _say(f"refined {len(entries)} mask(s), {changed} changed, into {out}")
    return EXIT_OK


# ------------------------------------------------------------------ eval


def _score_path(scores_root: Path, image_path: str) -> Path | None:
    stem = Path(image_path).with_suffix("")
    for suffix in SCORE_SUFFIXES:
        candidate = scores_root / stem.with_suffix(suffix)
        if candidate.exists():
            return candidate
    return None


def _accumulate_entry(
    root: Path, scores_root: Path, entry: ManifestEntry, bins: int, rng: tuple[float, float]
) -> MetricAccumulator:
    score_file = _score_path(scores_root, entry.image_path)
    score = load_score_map(score_file, declared_range=rng)
    mask = load_mask(root / entry.mask_path)
    acc = MetricAccumulator(bins=bins, value_range=rng)
    acc.accumulate(score.values, mask.grid)
    return acc


GROUP_CHOICES = ("all", "scene", "weather", "scene_weather", "condition")


def cmd_eval(args) -> int:
    root = Path(args.root)
    scores_root = Path(args.scores)
    entries = read_manifest(root / args.manifest)
    if args.split != "all":
        entries = [e for e in entries if e.split == args.split]
    if not entries:
        raise DataError(f"manifest has no entries in split {args.split!r}")

    missing = [e.image_path for e in entries if _score_path(scores_root, e.image_path) is None]
    if missing:
        for path in missing:
            _say(f"missing score map for {path}")
        if not args.allow_missing:
            raise DataError(
                f"{len(missing)} entr(ies) lack score maps; rerun with --allow-missing "
                "to evaluate the remainder"
            )
        missing_set = set(missing)
        entries = [e for e in entries if e.image_path not in missing_set]
        if not entries:
            raise DataError("no entries left to evaluate")

    rng = args.range
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            accs = list(
                pool.map(
                    lambda e: _accumulate_entry(root, scores_root, e, args.bins, rng),
                    entries,
                )
            )
    else:
        accs = [_accumulate_entry(root, scores_root, e, args.bins, rng) for e in entries]

    wanted = [g.strip() for g in args.group_by.split(",") if g.strip()]
    unknown = [g for g in wanted if g not in GROUP_CHOICES]
    if unknown:
        raise ConfigError(f"unknown group(s) {unknown}; choose from {GROUP_CHOICES}")

    blocks: list[tuple[str, list]] = []
    for group in wanted:
        if group == "condition":
            reports = condition_reports(entries, accs)
            title = "by scene under clear vs adverse weather"
        else:
            builder = per_image_report if args.aggregate == "per-image" else grouped_report
            reports = builder(entries, accs, group_by=group)
            title = f"by {group}" if group != "all" else "pooled"
        blocks.append((title, reports))

    text = "\n\n".join(render_report_table(reports, title=title) for title, reports in blocks)
    payload = {
        "split": args.split,
        "aggregate": args.aggregate,
        "image_count": len(entries),
        "groups": {title: reports_to_json(reports) for title, reports in blocks},
    }
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
        (out / "report.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        _say(f"reports written to {out}")
    return EXIT_OK


# ----------------------------------------------------------------- stats


def cmd_stats(args) -> int:
    root = Path(args.root)
    entries = read_manifest(root / args.manifest)
    stats = datasetkit.compute_stats(entries, root)
    document = json.dumps(stats.to_json(), indent=2, sort_keys=True)
    print(document)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(document + "\n", encoding="utf-8")
        if args.heatmap_png:
            heat = stats.heatmap
            peak = heat.max()
            gray = np.zeros(heat.shape, dtype=np.uint8)
            if peak > 0:
                gray = np.round(heat / peak * 255).astype(np.uint8)
            scaled = np.kron(gray, np.ones((8, 8), dtype=np.uint8))
            Image.fromarray(scaled, mode="L").save(out / "heatmap.png")
        _say(f"stats written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- curate


def cmd_curate(args) -> int:
    manifest_path = Path(args.manifest)
    entries = read_manifest(manifest_path)
    filters = CurationFilters(
        min_fraction=args.min_fraction, max_fraction=args.max_fraction
    )
    curated = datasetkit.curate(
        entries, target_total=args.total, filters=filters, seed=args.seed
    )
    target = Path(args.out) if args.out else manifest_path
    write_manifest(curated, target)
    test_count = sum(1 for e in curated if e.split == "test")
    _say(f"{test_count} test / {len(curated) - test_count} train -> {target}")
    return EXIT_OK


# -------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    root = Path(args.root)
    entries = read_manifest(root / args.manifest)
    violations = datasetkit.validate(entries, root, recompute=not args.no_recompute)
    if not violations:
        _say(f"{len(entries)} entr(ies) valid")
        return EXIT_OK
    for v in violations:
        print(f"{v.kind}: {v.path}: {v.detail}")
    _say(f"{len(violations)} violation(s) across {len(entries)} entr(ies)")
    return EXIT_VALIDATION


# ----------------------------------------------------------------- parser


def build_parser(cfg: dict[str, str]) -> argparse.ArgumentParser:
    d = _Defaults(cfg)
    parser = argparse.ArgumentParser(
        prog="climakit",
        description="Anomaly placement, dataset synthesis, and benchmark tooling.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def new(name: str, handler, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value config file")
        p.set_defaults(handler=handler)
        return p

    p = new("sample", cmd_sample, "sample pseudo-box sets for semantic maps")
    p.add_argument("--maps", required=True, help="directory of semantic map .png files")
    p.add_argument("--out", required=True, help="output directory for boxset files")
    p.add_argument("--seed", type=int, default=d("seed", 0))
    p.add_argument("--schema", default=d("schema", None, str), help="class schema file")
    _add_sampler_flags(p, d)

    for name, handler, help_ in (
        ("compose", cmd_compose, "composite cutout anomalies onto scenes locally"),
        ("generate", cmd_generate, "synthesize anomalies through a generation service"),
    ):
        p = new(name, handler, help_)
        p.add_argument("--toy", type=int, default=d("toy", None, int), help="make N toy scenes")
        p.add_argument("--maps", default=d("maps", None, str), help="directory of semantic maps")
        p.add_argument("--out", required=True, help="dataset root to write")
        p.add_argument("--seed", type=int, default=d("seed", 0))
        p.add_argument("--split", default=d("split", "train"), choices=("train", "test"))
        p.add_argument(
            "--anomalies",
            "--anomalies-per-image",
            type=_parse_span,
            default=d("anomalies", (1, 3), _parse_span),
            help="anomalies per image: a count ('2') or an inclusive span ('1:3')",
        )
        p.add_argument("--schema", default=d("schema", None, str), help="class schema file")
        p.add_argument("--jobs", type=int, default=d("jobs", os.cpu_count() or 1))
        p.add_argument("--no-refine", action="store_true", default=d("no_refine", False, bool))
        p.add_argument("--verbose", action="store_true", default=d("verbose", False, bool))
        _add_sampler_flags(p, d)
        _add_refine_flags(p, d)
        if name == "generate":
            p.add_argument(
                "--endpoint",
                default=d("endpoint", os.environ.get(ENDPOINT_ENV, STUB_ENDPOINT)),
                help="service address, or 'stub' for the in-process backend",
            )
            p.add_argument("--stub", action="store_true", help="force the in-process backend")
            p.add_argument("--timeout", type=float, default=d("timeout", 30.0))

    p = new("refine", cmd_refine, "denoise dataset masks into a new tree")
    p.add_argument("--root", required=True, help="dataset root to read")
    p.add_argument("--out", required=True, help="dataset root to write")
    p.add_argument("--manifest", default=d("manifest", "manifest.jsonl"))
    _add_refine_flags(p, d)

    p = new("eval", cmd_eval, "score a detector's anomaly maps against mask truth")
    p.add_argument("--root", required=True, help="dataset root")
    p.add_argument("--scores", required=True, help="score-map tree mirroring the images")
    p.add_argument("--manifest", default=d("manifest", "manifest.jsonl"))
    p.add_argument("--split", default=d("split", "test"), choices=("train", "test", "all"))
    p.add_argument("--bins", type=int, default=d("bins", DEFAULT_BINS))
    p.add_argument(
        "--range",
        type=_parse_range,
        default=d("range", (0.0, 1.0), _parse_range),
        help="declared score range lo:hi",
    )
    p.add_argument(
        "--group-by",
        default=d("group_by", "all,scene,weather,scene_weather,condition"),
        help=f"comma list from {GROUP_CHOICES}",
    )
    p.add_argument(
        "--aggregate",
        default=d("aggregate", "pooled"),
        choices=("pooled", "per-image"),
        help="pool pixels per group, or average per-image metrics",
    )
    p.add_argument("--allow-missing", action="store_true",
                   default=d("allow_missing", False, bool))
    p.add_argument("--jobs", type=int, default=d("jobs", os.cpu_count() or 1))
    p.add_argument("--out", default=d("out", None, str), help="directory for report files")

    p = new("stats", cmd_stats, "summarize a dataset manifest")
    p.add_argument("--root", required=True, help="dataset root")
    p.add_argument("--manifest", default=d("manifest", "manifest.jsonl"))
    p.add_argument("--out", default=d("out", None, str), help="directory for stats files")
    p.add_argument("--heatmap-png", action="store_true",
                   default=d("heatmap_png", False, bool))

    p = new("curate", cmd_curate, "assign a balanced test split in the manifest")
    p.add_argument("--manifest", required=True, help="manifest file to curate")
    p.add_argument("--total", type=int, required=True, help="target test-set size")
    p.add_argument("--seed", type=int, default=d("seed", 0))
    p.add_argument("--min-fraction", type=float, default=d("min_fraction", 0.0))
    p.add_argument("--max-fraction", type=float, default=d("max_fraction", 1.0))
    p.add_argument(
        "--out",
        default=d("out", None, str),
        help="write the curated manifest here instead of back in place",
    )

    p = new("validate", cmd_validate, "check manifest entries against their files")
    p.add_argument("--root", required=True, help="dataset root")
    p.add_argument("--manifest", default=d("manifest", "manifest.jsonl"))
    p.add_argument("--no-recompute", action="store_true",
                   default=d("no_recompute", False, bool))

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config_path = _scan_config_path(argv)
        cfg = load_config_file(config_path) if config_path else {}
        parser = build_parser(cfg)
        args = parser.parse_args(argv)
        if not getattr(args, "handler", None):
            parser.print_help(file=sys.stderr)
            return EXIT_CONFIG
        return args.handler(args)
    except ConfigError as exc:
        _say(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (TransportError, BackendError, EditLeakageError) as exc:
        _say(f"service error: {exc}")
        return EXIT_SERVICE
    except (DataError, InfeasibleConfigError) as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA
    except ToolkitError as exc:
        _say(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
