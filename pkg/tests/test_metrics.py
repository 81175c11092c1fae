from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from climakit.errors import (
    ConfigError,
    DataError,
    DegenerateClassError,
    DimensionMismatchError,
    ZeroVarianceError,
)
from climakit.metrics import (
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
from conftest import make_scored_instance
from oracles import naive_pearson, naive_threshold_metrics, reference_histograms


def acc_from(scores, labels, bins=4096, value_range=(0.0, 1.0)):
    acc = MetricAccumulator(bins=bins, value_range=value_range)
    scores = np.asarray(scores, dtype=np.float32).reshape(1, -1)
    mask = np.where(np.asarray(labels).reshape(1, -1) == 1, 255, 0).astype(np.uint8)
    acc.accumulate(scores, mask)
    return acc


# ------------------------------------------------------------- pearson


def test_pearson_identity_and_negation():
    assert pearson([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)
    assert pearson([1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]) == pytest.approx(-1.0)


def test_pearson_hand_value():
    assert pearson([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]) == pytest.approx(0.9819, abs=1e-4)


def test_pearson_matches_reference(rng):
    xs = rng.normal(size=50)
    ys = 0.3 * xs + rng.normal(size=50)
    assert pearson(xs, ys) == pytest.approx(naive_pearson(xs, ys), abs=1e-12)


def test_pearson_zero_variance():
    with pytest.raises(ZeroVarianceError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ZeroVarianceError):
        pearson([1.0, 2.0], [5.0, 5.0])


def test_pearson_length_mismatch():
    with pytest.raises((ConfigError, DataError)):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])


# ------------------------------------------------------- score map files


def test_raw_score_roundtrip(tmp_path, rng):
    values = rng.random((37, 53)).astype(np.float32)
    path = tmp_path / "m.csm"
    save_score_map(values, path)
    loaded = load_score_map(path)
    assert loaded.values.dtype == np.float32
    np.testing.assert_array_equal(loaded.values, values)


def test_png_score_roundtrip_quantizes(tmp_path, rng):
    values = rng.random((16, 24)).astype(np.float32)
    path = tmp_path / "m.png"
    save_score_map(values, path)
    loaded = load_score_map(path)
    assert np.abs(loaded.values - values).max() <= 0.5 / 65535 + 1e-7


def test_load_clamps_to_declared_range(tmp_path):
    values = np.array([[-1.0, 0.25, 2.0]], dtype=np.float32)
    path = tmp_path / "m.csm"
    save_score_map(values, path)
    loaded = load_score_map(path, declared_range=(0.0, 1.0))
    np.testing.assert_array_equal(loaded.values, [[0.0, 0.25, 1.0]])


def test_raw_header_validation(tmp_path):
    path = tmp_path / "bad.csm"
    path.write_bytes(b"CSM1" + (8).to_bytes(4, "little") + (8).to_bytes(4, "little")
                     + (0).to_bytes(4, "little") + b"\x00" * 10)
    with pytest.raises(DataError):
        load_score_map(path)


def test_raw_rejects_nan(tmp_path):
    values = np.array([[np.nan, 0.5]], dtype=np.float32)
    path = tmp_path / "nan.csm"
    import struct

    payload = struct.pack("<4sIII", b"CSM1", 2, 1, 0) + values.tobytes()
    path.write_bytes(payload)
    with pytest.raises(DataError):
        load_score_map(path)


def test_png_rejects_rgb(tmp_path):
    from PIL import Image

    path = tmp_path / "rgb.png"
    Image.new("RGB", (4, 4)).save(path)
    with pytest.raises(DataError):
        load_score_map(path)


def test_scoremap_validates_shape():
    with pytest.raises(DataError):
        ScoreMap(values=np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(DataError):
        ScoreMap(values=np.zeros(4, dtype=np.float32))


# ----------------------------------------------------------- accumulate


def test_accumulate_two_bin_example():
    acc = MetricAccumulator(bins=2, value_range=(0.0, 1.0))
    scores = np.array([[0.1, 0.4, 0.6, 0.9]], dtype=np.float32)
    mask = np.array([[0, 0, 255, 255]], dtype=np.uint8)
    acc.accumulate(scores, mask)
    assert acc.neg.tolist() == [2, 0]
    assert acc.pos.tolist() == [0, 2]


def test_accumulate_all_ignore_is_noop():
    acc = MetricAccumulator(bins=8)
    acc.accumulate(np.full((3, 3), 0.5, dtype=np.float32), np.full((3, 3), 128, np.uint8))
    assert acc.pos_total == 0 and acc.neg_total == 0


def test_accumulate_matches_reference(rng):
    for _ in range(10):
        scores = (rng.random((13, 17)) * 1.6 - 0.3).astype(np.float32)
        mask = rng.choice(np.array([0, 255, 128], dtype=np.uint8), size=(13, 17))
        acc = MetricAccumulator(bins=64, value_range=(0.0, 1.0))
        acc.accumulate(scores, mask)
        pos_ref, neg_ref = reference_histograms(scores, mask, 64, (0.0, 1.0))
        np.testing.assert_array_equal(acc.pos, pos_ref)
        np.testing.assert_array_equal(acc.neg, neg_ref)


def test_accumulate_top_edge_goes_to_last_bin():
    acc = MetricAccumulator(bins=4, value_range=(0.0, 1.0))
    acc.accumulate(np.array([[1.0]], dtype=np.float32), np.array([[255]], dtype=np.uint8))
    assert acc.pos.tolist() == [0, 0, 0, 1]


def test_accumulate_validation():
    acc = MetricAccumulator(bins=4)
    with pytest.raises(DimensionMismatchError):
        acc.accumulate(np.zeros((2, 2), np.float32), np.zeros((2, 3), np.uint8))
    with pytest.raises(DataError):
        acc.accumulate(np.zeros((2, 2), np.float32), np.zeros((2, 2), np.int32))
    with pytest.raises(DataError):
        acc.accumulate(np.zeros((2, 2), np.float32), np.full((2, 2), 7, np.uint8))
    with pytest.raises(DataError):
        acc.accumulate(np.full((2, 2), np.nan, np.float32), np.zeros((2, 2), np.uint8))


def test_accumulate_incremental_equals_batch(rng):
    a = MetricAccumulator(bins=32)
    b = MetricAccumulator(bins=32)
    s1 = rng.random((5, 9)).astype(np.float32)
    s2 = rng.random((5, 9)).astype(np.float32)
    m1 = rng.choice(np.array([0, 255], np.uint8), size=(5, 9))
    m2 = rng.choice(np.array([0, 255], np.uint8), size=(5, 9))
    a.accumulate(s1, m1)
    a.accumulate(s2, m2)
    b.accumulate(np.vstack([s1, s2]), np.vstack([m1, m2]))
    np.testing.assert_array_equal(a.pos, b.pos)
    np.testing.assert_array_equal(a.neg, b.neg)


def test_merge_requires_matching_layout():
    with pytest.raises(ConfigError):
        merge(MetricAccumulator(bins=8), MetricAccumulator(bins=16))
    with pytest.raises(ConfigError):
        merge(
            MetricAccumulator(bins=8, value_range=(0.0, 1.0)),
            MetricAccumulator(bins=8, value_range=(0.0, 2.0)),
        )


@given(st.lists(st.integers(0, 50), min_size=8, max_size=8),
       st.lists(st.integers(0, 50), min_size=8, max_size=8),
       st.lists(st.integers(0, 50), min_size=8, max_size=8))
@settings(max_examples=50, deadline=None)
def test_merge_commutative_associative(h1, h2, h3):
    def acc_of(hist):
        return MetricAccumulator(
            bins=4,
            pos=np.array(hist[:4], dtype=np.int64),
            neg=np.array(hist[4:], dtype=np.int64),
        )

    a, b, c = acc_of(h1), acc_of(h2), acc_of(h3)
    ab = merge(a, b)
    ba = merge(b, a)
    np.testing.assert_array_equal(ab.pos, ba.pos)
    np.testing.assert_array_equal(ab.neg, ba.neg)
    left = merge(merge(a, b), c)
    right = merge(a, merge(b, c))
    np.testing.assert_array_equal(left.pos, right.pos)
    np.testing.assert_array_equal(left.neg, right.neg)


# ------------------------------------------------------ histogram metrics


def test_perfect_separation_identities():
    acc = acc_from([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert auroc(acc) == 1.0
    assert average_precision(acc) == 1.0
    assert fpr_at_95tpr(acc) == 0.0


def test_constant_scores_all_tie():
    acc = acc_from([0.5] * 10, [1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    assert auroc(acc) == 0.5
    assert fpr_at_95tpr(acc) == 1.0
    assert average_precision(acc) == pytest.approx(3 / 10)


def test_ap_three_point_example():
    acc = acc_from([0.9, 0.8, 0.1], [1, 1, 0])
    assert average_precision(acc) == 1.0


def test_ap_with_no_negatives_is_one():
    acc = acc_from([0.3, 0.6, 0.9], [1, 1, 1])
    assert average_precision(acc) == 1.0


def test_fpr95_hand_case():
    scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.55, 0.4]
    labels = [1, 1, 1, 1, 1, 0, 0]
    acc = acc_from(scores, labels)
    assert fpr_at_95tpr(acc) == 0.5
    exact = exact_metrics(np.array(scores), np.array(labels))
    assert exact.fpr95 == 0.5


def test_fpr95_negated_perfect_detector():
    acc = acc_from([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1])
    assert fpr_at_95tpr(acc) == 1.0


def test_degenerate_class_raises():
    acc = acc_from([0.5, 0.6], [1, 1])
    with pytest.raises(DegenerateClassError):
        auroc(acc)
    with pytest.raises(DegenerateClassError):
        fpr_at_95tpr(acc)
    empty = MetricAccumulator(bins=4)
    with pytest.raises(DegenerateClassError):
        average_precision(empty)


# --------------------------------------------------------- exact metrics


def test_exact_single_pair():
    m = exact_metrics(np.array([0.9, 0.1]), np.array([1, 0]))
    assert (m.auroc, m.ap, m.fpr95) == (1.0, 1.0, 0.0)


def test_exact_tie_hand_case():
    m = exact_metrics(np.array([0.9, 0.8, 0.8, 0.1]), np.array([1, 1, 0, 0]))
    assert m.auroc == pytest.approx(0.875, abs=1e-15)
    assert m.ap == pytest.approx(0.5 + 1 / 3, abs=1e-15)
    assert m.fpr95 == 0.5


def test_exact_label_swap_flips_auroc(rng):
    scores, labels = make_scored_instance(7)
    a = exact_metrics(scores, labels).auroc
    b = exact_metrics(scores, 1 - labels).auroc
    assert a + b == pytest.approx(1.0, abs=1e-12)


def test_exact_matches_naive_oracle():
    for seed in range(12):
        scores, labels = make_scored_instance(seed, min_n=300, max_n=1200)
        m = exact_metrics(scores, labels)
        auroc_n, ap_n, fpr_n = naive_threshold_metrics(scores, labels)
        assert abs(m.auroc - auroc_n) <= 1e-12
        assert abs(m.ap - ap_n) <= 1e-12
        assert abs(m.fpr95 - fpr_n) <= 1e-12


def test_exact_validation():
    with pytest.raises(DataError):
        exact_metrics(np.array([0.5]), np.array([2]))
    with pytest.raises(DataError):
        exact_metrics(np.array([np.inf, 0.0]), np.array([1, 0]))
    with pytest.raises(DimensionMismatchError):
        exact_metrics(np.array([0.5, 0.6]), np.array([1]))
    with pytest.raises(DegenerateClassError):
        exact_metrics(np.array([0.5, 0.6]), np.array([1, 1]))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_exact_rank_metrics_invariant_under_monotone_transform(seed):
    scores, labels = make_scored_instance(seed, min_n=200, max_n=600)
    base = exact_metrics(scores, labels)
    squashed = exact_metrics(np.expm1(scores.astype(np.float64)), labels)
    assert squashed.auroc == pytest.approx(base.auroc, abs=1e-12)
    assert squashed.fpr95 == base.fpr95


def test_histogram_tracks_exact_within_tolerance():
    for seed in range(20):
        scores, labels = make_scored_instance(seed)
        acc = acc_from(scores, labels)
        m = exact_metrics(scores, labels)
        assert abs(auroc(acc) - m.auroc) <= 0.003
        assert abs(average_precision(acc) - m.ap) <= 0.003
        assert abs(fpr_at_95tpr(acc) - m.fpr95) <= 0.003


# ------------------------------------------------------------- reporting


class _Entry:
    def __init__(self, scene, weather):
        self.scene = scene
        self.weather = weather


def _image_accs(rng, n):
    entries, accs = [], []
    scenes = ["highway", "tunnel"]
    weathers = ["clear", "rain", "fog"]
    for i in range(n):
        entries.append(_Entry(scenes[i % 2], weathers[i % 3]))
        scores = rng.random((8, 8)).astype(np.float32)
        mask = rng.choice(np.array([0, 255], np.uint8), size=(8, 8))
        acc = MetricAccumulator(bins=256)
        acc.accumulate(scores, mask)
        accs.append(acc)
    return entries, accs


def test_grouped_all_row_equals_pooled(rng):
    entries, accs = _image_accs(rng, 12)
    by_scene = grouped_report(entries, accs, group_by="scene")
    pooled = grouped_report(entries, accs, group_by="all")
    all_row = [r for r in by_scene if r.key == ("all",)][0]
    assert all_row.auroc == pooled[0].auroc
    assert all_row.ap == pooled[0].ap
    assert all_row.fpr95 == pooled[0].fpr95


def test_grouped_merge_vs_manual_pool(rng):
    entries, accs = _image_accs(rng, 9)
    pooled = grouped_report(entries, accs, group_by="all")[0]
    manual = accs[0]
    for acc in accs[1:]:
        manual = merge(manual, acc)
    assert pooled.auroc == auroc(manual)
    assert pooled.pos_total == manual.pos_total


def test_grouped_report_keys_sorted(rng):
    entries, accs = _image_accs(rng, 12)
    reports = grouped_report(entries, accs, group_by="scene_weather")
    keys = [r.key for r in reports if r.key != ("all",)]
    assert keys == sorted(keys)
    assert reports[-1].key == ("all",)


def test_condition_reports_layout(rng):
    entries, accs = _image_accs(rng, 12)
    reports = condition_reports(entries, accs)
    keys = {r.key for r in reports}
    assert ("highway", "clear") in keys
    assert ("highway", "adverse") in keys
    assert ("average",) in keys
    assert reports[-1].key == ("average",)


def test_per_image_report_averages(rng):
    entries, accs = _image_accs(rng, 6)
    reports = per_image_report(entries, accs, group_by="all")
    vals = [auroc(a) for a in accs]
    assert reports[0].auroc == pytest.approx(sum(vals) / len(vals))


def test_report_metrics_in_unit_interval(rng):
    entries, accs = _image_accs(rng, 10)
    for r in grouped_report(entries, accs, group_by="scene_weather"):
        for value in (r.auroc, r.ap, r.fpr95):
            assert math.isnan(value) or 0.0 <= value <= 1.0


def test_report_json_maps_nan_to_none(rng):
    entries, accs = _image_accs(rng, 2)
    report = grouped_report(entries, accs, group_by="all")[0]
    blob = report.to_json()
    assert blob["pos_total"] == report.pos_total
    from dataclasses import replace

    nan_report = replace(report, auroc=float("nan"))
    assert nan_report.to_json()["auroc"] is None


def test_render_report_table_alignment(rng):
    entries, accs = _image_accs(rng, 4)
    reports = grouped_report(entries, accs, group_by="scene")
    text = render_report_table(reports, title="by scene")
    lines = text.splitlines()
    assert lines[0] == "by scene"
    assert "auroc" in lines[1] and "fpr95" in lines[1]
    assert len(lines) == 2 + 1 + len(reports)
