"""Anomaly placement, dataset synthesis, and benchmark tooling for
driving-scene out-of-distribution segmentation."""

from .compositor import (
    ALPHA_THRESHOLD,
    AnomalyMask,
    ObjectCutout,
    PasteResult,
    RefineConfig,
    SceneImage,
    harmonize,
    load_cutout,
    load_image,
    load_mask,
    merge_masks,
    paste_object,
    pixel_fraction,
    refine_mask,
    save_image,
    save_mask,
)
from .cutouts import DEFAULT_CONCEPTS, get_cutout
from .datasetkit import (
    CurationFilters,
    DatasetStats,
    ManifestEntry,
    ScanResult,
    Violation,
    compute_stats,
    curate,
    read_manifest,
    scan_dataset,
    selection_hash,
    uniform_quotas,
    validate,
    write_manifest,
)
from .errors import (
    BackendError,
    ConfigError,
    DataError,
    DegenerateClassError,
    DimensionMismatchError,
    EditLeakageError,
    EmptyRegionError,
    InfeasibleConfigError,
    InfeasibleQuotaError,
    ServiceTimeout,
    ToolkitError,
    TransportError,
    UnknownClassIdError,
    ZeroVarianceError,
)
from .genclient import (
    GenerationClient,
    GenResult,
    InpaintRequest,
    RetryPolicy,
    SceneGenRequest,
    StubBackend,
    build_prompt,
    parse_prompt,
    request_inpaint,
    request_scene,
)
from .metrics import (
    EvalReport,
    MetricAccumulator,
    ScoreMap,
    auroc,
    average_precision,
    condition_reports,
    exact_metrics,
    fpr_at_95tpr,
    grouped_report,
    load_score_map,
    merge,
    pearson,
    per_image_report,
    render_report_table,
    save_score_map,
)
from .pipeline import (
    ImageJob,
    SynthesisConfig,
    SynthesizedImage,
    derive_seed,
    run_generation,
    synthesize_one,
)
from .placer import (
    Assignment,
    BoxLoss,
    BoxSet,
    PlacementReport,
    PseudoBox,
    SamplerConfig,
    box_loss,
    hungarian_match,
    iou,
    keyed_rng,
    load_boxset,
    match_cost,
    perspective_height,
    placement_report,
    sample_pseudo_boxes,
    sample_uniform_boxes,
    save_boxset,
)
from .scene import (
    ClassSchema,
    DEFAULT_SCHEMA,
    RegionMask,
    SceneAttributes,
    SceneKind,
    SemanticMap,
    TimeOfDay,
    Weather,
    colorize_semantic_map,
    extract_drivable_region,
    load_semantic_map,
    save_semantic_map,
)
from .toydata import make_toy_semantic_map, toy_attrs, toy_jobs

__version__ = "0.1.0"
