"""Synthetic experiment harness: seeded banks, reports, determinism."""

import json
from dataclasses import replace

import numpy as np
import pytest

from hammingkit.bitcode import hamming_distance
from hammingkit.errors import ContractViolation
from hammingkit.harness import (
    FULLSCALE_CODE_WIDTH_ACCURACY,
    REPORT_SCHEMA_VERSION,
    SyntheticBankSpec,
    _mean_pairwise_distance,
    bench_search,
    generate_bank,
    load_report,
    run_two_stage,
    save_report,
    sweep_code_length,
)
from hammingkit.codebook import random_codebook
from hammingkit.heads import TrainConfig

SMALL_SPEC = SyntheticBankSpec(
    n_classes=8, dim=16, samples_per_class=20, noise=0.05, seed=3
)
SMALL_TRAIN = TrainConfig(learning_rate=0.01, epochs=5, batch_size=32, seed=0)


# ---------------------------------------------------------------------------
# Bank generation


def test_bank_generation_is_deterministic():
    a = generate_bank(SMALL_SPEC)
    b = generate_bank(SMALL_SPEC)
    assert a.labels == tuple(f"c{i}" for i in range(8))
    for ga, gb in zip(a.groups, b.groups):
        assert np.array_equal(ga, gb)
    c = generate_bank(replace(SMALL_SPEC, seed=4))
    assert not np.array_equal(a.groups[0], c.groups[0])


def test_centers_are_stable_across_sample_seeds():
    # zero noise collapses samples onto the centers, exposing them directly
    spec = replace(SMALL_SPEC, noise=0.0, samples_per_class=2)
    base = generate_bank(spec)
    redrawn = generate_bank(spec, samples_seed=99)
    more = generate_bank(replace(spec, samples_per_class=5), samples_seed=1)
    for g_base, g_redrawn, g_more in zip(base.groups, redrawn.groups, more.groups):
        assert np.array_equal(g_base, g_redrawn)
        # every sample equals the class center whatever the sample count
        assert np.array_equal(np.unique(g_more, axis=0), g_base[:1])
    # but noisy redraws do differ
    noisy = replace(SMALL_SPEC, samples_per_class=2)
    assert not np.array_equal(
        generate_bank(noisy).groups[0], generate_bank(noisy, samples_seed=99).groups[0]
    )


def test_confusable_pair_sits_at_the_requested_angle():
    spec = SyntheticBankSpec(
        n_classes=6,
        dim=32,
        samples_per_class=1,
        noise=0.0,
        center_scale=2.0,
        confusable_pairs=((0, 1), (3, 5)),
        confusable_angle_deg=30.0,
        seed=11,
    )
    bank = generate_bank(spec)
    centers = np.concatenate([g for g in bank.groups], axis=0)
    for a, b in spec.confusable_pairs:
        assert np.linalg.norm(centers[a]) == pytest.approx(2.0, abs=1e-12)
        assert np.linalg.norm(centers[b]) == pytest.approx(2.0, abs=1e-12)
        cos = centers[a] @ centers[b] / 4.0
        assert cos == pytest.approx(np.cos(np.radians(30.0)), abs=1e-12)


def test_bank_spec_validation():
    with pytest.raises(ContractViolation):
        SyntheticBankSpec(n_classes=1, dim=4, samples_per_class=1)
    with pytest.raises(ContractViolation):
        SyntheticBankSpec(n_classes=4, dim=1, samples_per_class=1)
    with pytest.raises(ContractViolation):
        SyntheticBankSpec(n_classes=4, dim=4, samples_per_class=1, noise=-0.1)
    with pytest.raises(ContractViolation):  # pair out of range
        SyntheticBankSpec(n_classes=4, dim=4, samples_per_class=1,
                          confusable_pairs=((0, 4),))
    with pytest.raises(ContractViolation):  # class repeated across pairs
        SyntheticBankSpec(n_classes=4, dim=4, samples_per_class=1,
                          confusable_pairs=((0, 1), (1, 2)))
    with pytest.raises(ContractViolation):  # degenerate pair
        SyntheticBankSpec(n_classes=4, dim=4, samples_per_class=1,
                          confusable_pairs=((2, 2),))
    with pytest.raises(ContractViolation):  # angle bounds are open
        SyntheticBankSpec(n_classes=4, dim=4, samples_per_class=1,
                          confusable_angle_deg=90.0)


# ---------------------------------------------------------------------------
# Pairwise distance helper


def test_mean_pairwise_distance_matches_brute_force():
    book = random_codebook(10, 16, seed=5)
    total, pairs = 0, 0
    for i in range(10):
        for j in range(i + 1, 10):
            total += hamming_distance(book.code(i), book.code(j))
            pairs += 1
    assert _mean_pairwise_distance(book, 10) == pytest.approx(total / pairs)
    # restricting to a prefix of the book changes the answer accordingly
    sub_total = sum(
        hamming_distance(book.code(i), book.code(j)) for i in range(4) for j in range(i + 1, 4)
    )
    assert _mean_pairwise_distance(book, 4) == pytest.approx(sub_total / 6)


# ---------------------------------------------------------------------------
# Two-stage protocol


def test_two_stage_report_shape_and_accuracy():
    report = run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=32)
    assert set(report) == {
        "kind", "schema_version", "config", "codebook_conflicts",
        "stage1", "stage2", "code_distance", "neighbors", "size",
    }
    assert report["kind"] == "two_stage"
    assert report["schema_version"] == REPORT_SCHEMA_VERSION
    assert report["codebook_conflicts"] == 0
    # well-separated blobs at this noise level are easy for both stages
    assert report["stage1"]["eval_accuracy"] >= 0.95
    assert report["stage2"]["eval_accuracy"] >= 0.95
    assert report["code_distance"]["mean_intra"] < report["code_distance"]["mean_inter"]
    assert report["size"]["softmax_head_bytes"] == 8 * 16 * 4
    assert report["size"]["hamming_head_bytes"] == 16 * 32 * 4 + 8 * 4
    assert report["config"]["eval"]["seed"] == SMALL_SPEC.seed + 1
    # reports stay JSON-pure: round-tripping through json changes nothing
    assert json.loads(json.dumps(report)) == report


def test_two_stage_reports_are_byte_identical_across_runs_and_workers():
    first = run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=32)
    second = run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=32)
    parallel = run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=32, workers=3)
    as_bytes = lambda r: json.dumps(r, indent=2, sort_keys=True).encode()
    assert as_bytes(first) == as_bytes(second)
    assert as_bytes(first) == as_bytes(parallel)


def test_two_stage_neighbor_watchlist():
    spec = replace(SMALL_SPEC, confusable_pairs=((5, 6),))
    report = run_two_stage(
        spec, SMALL_TRAIN, code_width=32, neighbor_classes=3, neighbor_k=2
    )
    watched = [row["class_index"] for row in report["neighbors"]]
    assert watched == [0, 1, 2, 5, 6]
    for row in report["neighbors"]:
        assert len(row["neighbors"]) == 2
        assert all(hit["class_index"] != row["class_index"] for hit in row["neighbors"])
        distances = [hit["distance"] for hit in row["neighbors"]]
        assert distances == sorted(distances)


def test_two_stage_random_codebook_control():
    report = run_two_stage(
        SMALL_SPEC, SMALL_TRAIN, code_width=32, codebook_kind="random"
    )
    assert report["config"]["codebook"]["kind"] == "random"
    with pytest.raises(ContractViolation):
        run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=32, codebook_kind="magic")


def test_two_stage_writes_artifacts(tmp_path):
    report = run_two_stage(
        SMALL_SPEC, SMALL_TRAIN, code_width=32, out_dir=tmp_path / "exp"
    )
    out = tmp_path / "exp"
    assert (out / "stage1_loss.csv").exists()
    assert (out / "stage2_loss.csv").exists()
    loaded = load_report(out / "report.json")
    assert loaded == report
    # saved report is byte-stable
    save_report(report, out / "again.json")
    assert (out / "again.json").read_bytes() == (out / "report.json").read_bytes()


def test_eval_seed_override_changes_only_evaluation():
    base = run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=32)
    other = run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=32, eval_seed=123)
    assert other["config"]["eval"]["seed"] == 123
    assert base["stage1"]["train_accuracy"] == other["stage1"]["train_accuracy"]
    assert base["stage2"]["final_loss"] == other["stage2"]["final_loss"]


# ---------------------------------------------------------------------------
# Report files


def test_load_report_validates_structure(tmp_path):
    report = run_two_stage(SMALL_SPEC, SMALL_TRAIN, code_width=16)

    path = tmp_path / "ok.json"
    save_report(report, path)
    assert load_report(path) == report

    extra = dict(report, surprise=1)
    save_report(extra, tmp_path / "extra.json")
    with pytest.raises(ContractViolation):
        load_report(tmp_path / "extra.json")

    missing = {k: v for k, v in report.items() if k != "stage1"}
    save_report(missing, tmp_path / "missing.json")
    with pytest.raises(ContractViolation):
        load_report(tmp_path / "missing.json")

    wrong_version = dict(report, schema_version=99)
    save_report(wrong_version, tmp_path / "version.json")
    with pytest.raises(ContractViolation):
        load_report(tmp_path / "version.json")

    wrong_kind = dict(report, kind="mystery")
    save_report(wrong_kind, tmp_path / "kind.json")
    with pytest.raises(ContractViolation):
        load_report(tmp_path / "kind.json")

    (tmp_path / "list.json").write_text("[1, 2]\n")
    with pytest.raises(ContractViolation):
        load_report(tmp_path / "list.json")


# ---------------------------------------------------------------------------
# Code-length sweep


def test_sweep_dedupes_and_sorts_widths():
    report = sweep_code_length(SMALL_SPEC, SMALL_TRAIN, [32, 16, 32])
    assert report["kind"] == "code_length_sweep"
    assert report["config"]["code_widths"] == [16, 32]
    assert [row["code_width"] for row in report["rows"]] == [16, 32]
    for row in report["rows"]:
        assert set(row) == {
            "code_width", "stage1_eval_accuracy", "eval_accuracy",
            "codebook_conflicts", "hamming_head_bytes",
        }
    context = report["fullscale_reference_accuracy"]
    assert context["word_accuracy_by_width"] == {
        str(w): acc for w, acc in FULLSCALE_CODE_WIDTH_ACCURACY.items()
    }
    assert "not comparable" in context["note"]


def test_sweep_rows_match_individual_runs():
    sweep = sweep_code_length(SMALL_SPEC, SMALL_TRAIN, [16, 32])
    single = run_two_stage(SMALL_SPEC, SMALL_TRAIN, 16, neighbor_classes=0)
    row = sweep["rows"][0]
    assert row["eval_accuracy"] == single["stage2"]["eval_accuracy"]
    assert row["stage1_eval_accuracy"] == single["stage1"]["eval_accuracy"]
    assert row["hamming_head_bytes"] == single["size"]["hamming_head_bytes"]


def test_sweep_is_deterministic_across_workers():
    a = sweep_code_length(SMALL_SPEC, SMALL_TRAIN, [16, 32])
    b = sweep_code_length(SMALL_SPEC, SMALL_TRAIN, [16, 32], workers=2)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_sweep_rejects_empty_or_bad_widths():
    with pytest.raises(ContractViolation):
        sweep_code_length(SMALL_SPEC, SMALL_TRAIN, [])
    with pytest.raises(ContractViolation):
        sweep_code_length(SMALL_SPEC, SMALL_TRAIN, [0, 16])


# ---------------------------------------------------------------------------
# Search benchmark


def test_bench_checksum_is_worker_independent():
    single = bench_search(n_classes=200, code_width=64, n_queries=50, seed=7)
    multi = bench_search(n_classes=200, code_width=64, n_queries=50, seed=7, workers=4)
    assert single["result_checksum"] == multi["result_checksum"]
    assert single["workers"] == 1 and multi["workers"] == 4
    assert single["elapsed_seconds"] > 0
    assert single["queries_per_second"] > 0
    other_seed = bench_search(n_classes=200, code_width=64, n_queries=50, seed=8)
    assert other_seed["result_checksum"] != single["result_checksum"]
