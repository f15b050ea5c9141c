"""Feature banks, sign-projection codes, majority vote, and conflict handling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hammingkit.bitcode import BitCode, hamming_distance, pack_bits
from hammingkit.codebook import (
    END_LABEL,
    PAD_LABEL,
    RESERVED_LABELS,
    START_LABEL,
    FeatureBank,
    ProjectionMatrix,
    add_special_tokens,
    build_codebook,
    detect_conflicts,
    lsh_project,
    lsh_project_many,
    majority_vote,
    projection_from_provenance,
    random_codebook,
    read_feature_bank,
    special_token_indices,
    write_feature_bank,
)
from hammingkit.errors import ContractViolation

# ---------------------------------------------------------------------------
# Oracle: scalar re-derivation of the sign-projection + strict-majority rule.


def ref_class_code(group, entries):
    width = entries.shape[1]
    bits = []
    for k in range(width):
        votes = sum(1 for row in group if float(np.dot(row, entries[:, k])) > 0.0)
        bits.append(1 if 2 * votes > len(group) else 0)
    return bits


def make_bank(centers, labels=None):
    centers = np.asarray(centers, dtype=np.float64)
    labels = labels or tuple(f"c{i}" for i in range(len(centers)))
    return FeatureBank(
        dim=centers.shape[1],
        groups=tuple(row[None, :] for row in centers),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# Sign projection


def test_projection_sign_is_strict():
    # a zero vector has dot product exactly 0 with every hyperplane: all bits 0
    p = ProjectionMatrix.draw(4, 16, seed=3)
    code = lsh_project(np.zeros(4), p)
    assert code.popcount() == 0


def test_projection_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    p = ProjectionMatrix.draw(6, 21, seed=7)
    for _ in range(20):
        h = rng.normal(size=6)
        expected = ref_class_code(h[None, :], p.entries)
        assert lsh_project(h, p).bits().tolist() == expected


def test_project_many_matches_single():
    rng = np.random.default_rng(5)
    p = ProjectionMatrix.draw(8, 13, seed=1)
    X = rng.normal(size=(9, 8))
    packed = lsh_project_many(X, p)
    for i in range(9):
        assert packed[i].tolist() == lsh_project(X[i], p).packed.tolist()


def test_projection_draw_is_reproducible():
    a = ProjectionMatrix.draw(5, 9, seed=42)
    b = ProjectionMatrix.draw(5, 9, seed=42)
    c = ProjectionMatrix.draw(5, 9, seed=43)
    assert np.array_equal(a.entries, b.entries)
    assert not np.array_equal(a.entries, c.entries)
    assert a.entries.shape == (5, 9)


def test_projection_validation():
    with pytest.raises(ContractViolation):
        ProjectionMatrix(dim=2, code_width=3, entries=np.zeros((3, 2)))
    with pytest.raises(ContractViolation):
        ProjectionMatrix(dim=2, code_width=2, entries=np.full((2, 2), np.nan))
    p = ProjectionMatrix.draw(3, 4, seed=0)
    with pytest.raises(ContractViolation):
        lsh_project(np.zeros(5), p)


# ---------------------------------------------------------------------------
# Majority vote


def test_majority_trivial_cases():
    def code(*bits):
        return BitCode(width=len(bits), packed=pack_bits(np.array(bits)))

    # 2 of 3 set -> 1
    assert majority_vote([code(1), code(1), code(0)]).bits().tolist() == [1]
    # even split is not a strict majority -> 0
    assert majority_vote([code(1), code(1), code(0), code(0)]).bits().tolist() == [0]
    # single code is its own majority
    assert majority_vote([code(1, 0, 1)]).bits().tolist() == [1, 0, 1]


@given(st.lists(st.lists(st.integers(0, 1), min_size=5, max_size=5), min_size=1, max_size=9))
def test_majority_is_strict_per_bit(rows):
    codes = [BitCode(width=5, packed=pack_bits(np.array(r))) for r in rows]
    got = majority_vote(codes).bits().tolist()
    for k in range(5):
        ones = sum(r[k] for r in rows)
        assert got[k] == (1 if 2 * ones > len(rows) else 0)


def test_majority_rejects_width_mismatch():
    a = BitCode(width=3, packed=pack_bits(np.array([1, 0, 1])))
    b = BitCode(width=4, packed=pack_bits(np.array([1, 0, 1, 1])))
    with pytest.raises(ContractViolation):
        majority_vote([a, b])
    with pytest.raises(ContractViolation):
        majority_vote([])


# ---------------------------------------------------------------------------
# Codebook construction


def test_build_codebook_hand_traced():
    # two hyperplanes in the plane: x-axis normal and y-axis normal
    entries = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = ProjectionMatrix(dim=2, code_width=2, entries=entries)
    bank = FeatureBank(
        dim=2,
        groups=(
            np.array([[2.0, -1.0], [3.0, 1.0], [1.0, -2.0]]),  # x>0 always, y>0 once
            np.array([[-1.0, 4.0]]),  # x<0, y>0
            np.array([[-2.0, -2.0], [-3.0, -1.0]]),  # both negative
        ),
        labels=("right", "upper-left", "lower-left"),
    )
    book = build_codebook(bank, p)
    assert book.code(0).bits().tolist() == [1, 0]
    assert book.code(1).bits().tolist() == [0, 1]
    assert book.code(2).bits().tolist() == [0, 0]
    assert book.labels == ("right", "upper-left", "lower-left")
    assert book.provenance["kind"] == "lsh"
    assert book.provenance["seed"] is None
    assert book.provenance["conflict_retries"] == 0


def test_build_codebook_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    groups = tuple(rng.normal(size=(n, 7)) for n in (1, 4, 2, 5))
    bank = FeatureBank(dim=7, groups=groups, labels=("a", "b", "c", "d"))
    p = ProjectionMatrix.draw(7, 19, seed=6)
    book = build_codebook(bank, p)
    for i, group in enumerate(groups):
        assert book.code(i).bits().tolist() == ref_class_code(group, p.entries)


def test_build_codebook_rejects_dim_mismatch():
    bank = make_bank([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ContractViolation):
        build_codebook(bank, ProjectionMatrix.draw(3, 4, seed=0))


def test_nearby_classes_get_nearby_codes():
    # sign codes preserve angular locality: a small rotation of a center
    # flips far fewer bits than an orthogonal one
    rng = np.random.default_rng(9)
    base = rng.normal(size=64)
    base /= np.linalg.norm(base)
    ortho = rng.normal(size=64)
    ortho -= ortho @ base * base
    ortho /= np.linalg.norm(ortho)
    near = np.cos(np.radians(10)) * base + np.sin(np.radians(10)) * ortho
    bank = make_bank([base, near, ortho], labels=("base", "near", "ortho"))
    p = ProjectionMatrix.draw(64, 256, seed=1)
    book = build_codebook(bank, p)
    d_near = hamming_distance(book.code(0), book.code(1))
    d_far = hamming_distance(book.code(0), book.code(2))
    assert d_near < d_far


# ---------------------------------------------------------------------------
# Conflicts and retry


def test_detect_conflicts_reports_sorted_pairs():
    rows = np.array(
        [[1, 0, 1], [0, 1, 1], [1, 0, 1], [0, 1, 1], [1, 0, 1]], dtype=np.uint8
    )
    from hammingkit.bitcode import Codebook

    book = Codebook(width=3, packed=pack_bits(rows), labels=tuple("abcde"))
    assert detect_conflicts(book) == [(0, 2), (0, 4), (1, 3), (2, 4)]


def test_detect_conflicts_empty_when_distinct():
    book = random_codebook(20, 64, seed=0)
    assert detect_conflicts(book) == []


def test_retry_resolves_conflict_and_records_seed():
    # with this bank and seed the first draw collides and one redraw fixes it
    centers = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
    bank = make_bank(centers, labels=("a", "b", "c"))
    p = ProjectionMatrix.draw(2, 4, seed=0)
    assert detect_conflicts(build_codebook(bank, p)) != []

    book = build_codebook(bank, p, retry_on_conflict=True, max_retries=5)
    assert detect_conflicts(book) == []
    assert book.provenance["conflict_retries"] == 1
    assert book.provenance["seed"] == 1

    # the recorded seed rebuilds the exact same book
    rederived = projection_from_provenance(book)
    assert rederived is not None and rederived.seed == 1
    assert np.array_equal(build_codebook(bank, rederived).packed, book.packed)


def test_retry_exhaustion_returns_conflicted_book():
    # identical sample groups can never be separated, however often we redraw
    dup = FeatureBank(
        dim=2,
        groups=(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])),
        labels=("x", "y"),
    )
    book = build_codebook(
        dup, ProjectionMatrix.draw(2, 4, seed=0), retry_on_conflict=True, max_retries=3
    )
    assert detect_conflicts(book) == [(0, 1)]
    assert book.provenance["conflict_retries"] == 3


def test_retry_requires_seeded_projection():
    bank = make_bank([[1.0, 0.0], [0.0, 1.0]])
    p = ProjectionMatrix(dim=2, code_width=4, entries=np.ones((2, 4)))
    with pytest.raises(ContractViolation):
        build_codebook(bank, p, retry_on_conflict=True)


# ---------------------------------------------------------------------------
# Random control codebook


def test_random_codebook_is_reproducible():
    a = random_codebook(10, 33, seed=4)
    b = random_codebook(10, 33, seed=4)
    assert np.array_equal(a.packed, b.packed)
    assert a.provenance == {"kind": "random", "seed": 4}
    assert not np.array_equal(a.packed, random_codebook(10, 33, seed=5).packed)


def test_random_codebook_bits_are_balanced():
    book = random_codebook(200, 512, seed=0)
    ones = sum(book.code(i).popcount() for i in range(len(book)))
    rate = ones / (200 * 512)
    assert 0.48 < rate < 0.52


def test_random_codebook_has_no_projection():
    assert projection_from_provenance(random_codebook(4, 8, seed=0)) is None


# ---------------------------------------------------------------------------
# Special tokens


def test_add_special_tokens_appends_reserved_labels():
    book = random_codebook(5, 16, seed=2)
    assert special_token_indices(book) is None
    extended = add_special_tokens(book, seed=9)
    assert len(extended) == 8
    assert extended.labels[:5] == book.labels
    assert extended.labels[5:] == (START_LABEL, END_LABEL, PAD_LABEL)
    assert np.array_equal(extended.packed[:5], book.packed)
    assert special_token_indices(extended) == {"start": 5, "end": 6, "pad": 7}
    assert extended.provenance["special_token_seed"] == 9
    # same seed, same token codes
    again = add_special_tokens(book, seed=9)
    assert np.array_equal(again.packed, extended.packed)


def test_add_special_tokens_twice_fails():
    book = add_special_tokens(random_codebook(5, 16, seed=2), seed=9)
    with pytest.raises(ContractViolation):
        add_special_tokens(book, seed=10)


def test_reserved_labels_rejected_in_banks_via_tokens():
    book = random_codebook(3, 8, seed=0, labels=("a", END_LABEL, "c"))
    with pytest.raises(ContractViolation):
        add_special_tokens(book, seed=0)


# ---------------------------------------------------------------------------
# FeatureBank


def test_feature_bank_validation():
    with pytest.raises(ContractViolation):  # one class is not a bank
        FeatureBank(dim=2, groups=(np.zeros((3, 2)),), labels=("only",))
    with pytest.raises(ContractViolation):  # wrong dim
        FeatureBank(dim=3, groups=(np.zeros((1, 2)), np.zeros((1, 2))), labels=("a", "b"))
    with pytest.raises(ContractViolation):  # empty group
        FeatureBank(dim=2, groups=(np.zeros((0, 2)), np.zeros((1, 2))), labels=("a", "b"))
    with pytest.raises(ContractViolation):  # label count mismatch
        FeatureBank(dim=2, groups=(np.zeros((1, 2)), np.zeros((1, 2))), labels=("a",))
    with pytest.raises(ContractViolation):  # non-finite feature
        FeatureBank(
            dim=2, groups=(np.array([[np.inf, 0.0]]), np.zeros((1, 2))), labels=("a", "b")
        )


def test_feature_bank_array_round_trip():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 3))
    y = np.array([0, 2, 1, 0, 2, 2, 1, 0, 1, 2])
    bank = FeatureBank.from_arrays(X, y, labels=("p", "q", "r"))
    assert bank.counts == (3, 3, 4)
    assert bank.total_samples == 10
    X2, y2 = bank.to_arrays()
    # groups are stored in class order, so round-tripping sorts by class
    order = np.argsort(y, kind="stable")
    assert np.array_equal(X2, X[order])
    assert np.array_equal(y2, y[order])


def test_feature_bank_groups_are_immutable():
    bank = make_bank([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ValueError):
        bank.groups[0][0, 0] = 99.0


# ---------------------------------------------------------------------------
# Bank file format


def test_feature_bank_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    bank = FeatureBank(
        dim=5,
        groups=tuple(rng.normal(size=(n, 5)) for n in (2, 1, 4)),
        labels=("alpha", "beta", "gamma"),
    )
    path = tmp_path / "bank.hofb"
    write_feature_bank(bank, path)
    loaded = read_feature_bank(path)
    assert loaded.labels == bank.labels
    assert loaded.counts == bank.counts
    # payload is float32 on disk; the round trip is exact at that precision
    for got, orig in zip(loaded.groups, bank.groups):
        assert np.array_equal(got, orig.astype("<f4").astype(np.float64))


def test_feature_bank_file_without_manifest(tmp_path):
    bank = make_bank([[1.0, 0.0], [0.0, 1.0]])
    path = tmp_path / "bank.hofb"
    write_feature_bank(bank, path)
    (tmp_path / "bank.hofb.labels").unlink()
    assert read_feature_bank(path).labels == ("0", "1")


def test_feature_bank_file_rejects_corruption(tmp_path):
    bank = make_bank([[1.0, 0.0], [0.0, 1.0]])
    path = tmp_path / "bank.hofb"
    write_feature_bank(bank, path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "bad.hofb"
    bad_magic.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ContractViolation):
        read_feature_bank(bad_magic)

    truncated = tmp_path / "short.hofb"
    truncated.write_bytes(blob[:-3])
    with pytest.raises(ContractViolation):
        read_feature_bank(truncated)

    trailing = tmp_path / "long.hofb"
    trailing.write_bytes(blob + b"\0")
    with pytest.raises(ContractViolation):
        read_feature_bank(trailing)
