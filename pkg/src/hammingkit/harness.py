"""Seeded synthetic experiments: bank generation, the two-stage protocol, sweeps.

Feature banks are Gaussian blobs on unit-norm class centers, optionally with
designated *confusable* pairs whose centers sit a few degrees apart — a
desk-scale stand-in for visually similar classes. Every experiment is a pure
function of its spec and seeds: reports embed those seeds, contain only plain
Python values, and serialize with sorted keys, so re-running a configuration
reproduces the report byte for byte (worker counts never enter reports).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .bitcode import Codebook, batch_nearest, packed_distances, top_k_neighbors
from .codebook import (
    FeatureBank,
    ProjectionMatrix,
    add_special_tokens,
    build_codebook,
    detect_conflicts,
    random_codebook,
)
from .heads import (
    HammingClassifier,
    SoftmaxRegression,
    TrainConfig,
    write_loss_history,
)
from .sizing import codebook_bytes, hamming_head_bytes, softmax_head_bytes
from .validation import require

REPORT_SCHEMA_VERSION = 1

#: Word accuracy of the full-scale recognizer at several code widths,
#: reported for context in sweep reports. Desk-scale synthetic sweeps are not
#: comparable to these numbers and never reproduce them.
FULLSCALE_CODE_WIDTH_ACCURACY: Mapping[int, float] = {
    256: 81.86,
    512: 82.39,
    1024: 82.26,
    2048: 82.31,
}

_REPORT_FIELDS: Mapping[str, frozenset[str]] = {
    "two_stage": frozenset(
        {
            "kind",
            "schema_version",
            "config",
            "codebook_conflicts",
            "stage1",
            "stage2",
            "code_distance",
            "neighbors",
            "size",
        }
    ),
    "code_length_sweep": frozenset(
        {"kind", "schema_version", "config", "rows", "fullscale_reference_accuracy"}
    ),
}


@dataclass(frozen=True)
class SyntheticBankSpec:
    """Recipe for a Gaussian synthetic feature bank.

    Class centers are unit vectors scaled by ``center_scale``; samples add
    isotropic noise with standard deviation ``noise``. Each pair in
    ``confusable_pairs`` rewrites the second class's center to sit
    ``confusable_angle_deg`` away from the first's. Centers depend only on
    ``seed``, so independently drawn sample sets share the same geometry.
    """

    n_classes: int
    dim: int
    samples_per_class: int
    noise: float = 0.05
    center_scale: float = 1.0
    confusable_pairs: tuple[tuple[int, int], ...] = ()
    confusable_angle_deg: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        require(self.n_classes >= 2, f"n_classes must be >= 2, got {self.n_classes}")
        require(self.dim >= 2, f"dim must be >= 2, got {self.dim}")
        require(
            self.samples_per_class >= 1,
            f"samples_per_class must be >= 1, got {self.samples_per_class}",
        )
        require(self.noise >= 0.0, f"noise must be >= 0, got {self.noise}")
        require(self.center_scale > 0.0, f"center_scale must be > 0, got {self.center_scale}")
        require(
            0.0 < self.confusable_angle_deg < 90.0,
            f"confusable_angle_deg must be in (0, 90), got {self.confusable_angle_deg}",
        )
        pairs = tuple((int(a), int(b)) for a, b in self.confusable_pairs)
        seen: set[int] = set()
        for a, b in pairs:
            require(0 <= a < self.n_classes and 0 <= b < self.n_classes,
                    f"confusable pair ({a}, {b}) out of range")
            require(a != b, f"confusable pair ({a}, {b}) repeats a class")
            require(
                a not in seen and b not in seen,
                f"class in pair ({a}, {b}) appears in more than one pair",
            )
            seen.update((a, b))
        object.__setattr__(self, "confusable_pairs", pairs)

    def as_dict(self) -> dict[str, Any]:
        return {
            "n_classes": self.n_classes,
            "dim": self.dim,
            "samples_per_class": self.samples_per_class,
            "noise": self.noise,
            "center_scale": self.center_scale,
            "confusable_pairs": [list(p) for p in self.confusable_pairs],
            "confusable_angle_deg": self.confusable_angle_deg,
            "seed": self.seed,
        }


def generate_bank(spec: SyntheticBankSpec, samples_seed: int | None = None) -> FeatureBank:
    """Draw the bank described by ``spec``.

    ``samples_seed`` redraws the noise around the *same* centers — the way to
    get a held-out evaluation set for the geometry the models trained on.
    """
    center_seq, sample_seq = np.random.SeedSequence(spec.seed).spawn(2)
    center_rng = np.random.default_rng(center_seq)
    centers = center_rng.standard_normal((spec.n_classes, spec.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    for a, b in spec.confusable_pairs:
        direction = center_rng.standard_normal(spec.dim)
        direction -= (direction @ centers[a]) * centers[a]
        norm = np.linalg.norm(direction)
        require(norm > 0.0, "degenerate confusable direction; change the spec seed")
        direction /= norm
        angle = np.deg2rad(spec.confusable_angle_deg)
        centers[b] = np.cos(angle) * centers[a] + np.sin(angle) * direction
    centers *= spec.center_scale

    sample_rng = np.random.default_rng(
        sample_seq if samples_seed is None else samples_seed
    )
    noise = sample_rng.standard_normal((spec.n_classes, spec.samples_per_class, spec.dim))
    groups = centers[:, None, :] + spec.noise * noise
    return FeatureBank(
        dim=spec.dim,
        groups=tuple(groups),
        labels=tuple(f"c{i}" for i in range(spec.n_classes)),
    )


def _accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(predicted == truth))


def _mean_pairwise_distance(codebook: Codebook, n_real: int, seed: int = 0) -> float:
    """Mean Hamming distance over distinct pairs of the first ``n_real`` codes.

    Exact for books up to 2048 classes; larger books use a seeded sample of
    pairs (still deterministic).
    """
    packed = codebook.packed[:n_real]
    if n_real <= 2048:
        dists = packed_distances(packed, packed)
        total = float(dists.sum()) / 2.0
        return total / (n_real * (n_real - 1) / 2.0)
    rng = np.random.default_rng(seed)
    left = rng.integers(0, n_real, size=100_000)
    right = rng.integers(0, n_real, size=100_000)
    keep = left != right
    xor = np.bitwise_xor(packed[left[keep]], packed[right[keep]])
    return float(np.bitwise_count(xor).sum(dtype=np.int64) / keep.sum())


def run_two_stage(
    bank_spec: SyntheticBankSpec,
    train: TrainConfig,
    code_width: int,
    *,
    margin: float = 1.0,
    codebook_kind: str = "lsh",
    codebook_seed: int = 0,
    retry_on_conflict: bool = False,
    eval_samples_per_class: int = 10,
    eval_seed: int | None = None,
    neighbor_classes: int = 8,
    neighbor_k: int = 5,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """The two-stage protocol on one synthetic bank; returns the report dict.

    Stage one trains a dense softmax head with cross-entropy. Stage two
    builds (or randomizes) the codebook, appends special tokens, and trains
    the Hamming head against the code targets. Held-out accuracy uses fresh
    samples around the training centers. With ``out_dir`` the report and both
    loss curves are written there.
    """
    require(codebook_kind in ("lsh", "random"), f"unknown codebook kind {codebook_kind!r}")
    require(code_width >= 1, f"code_width must be >= 1, got {code_width}")
    require(eval_samples_per_class >= 1, "eval_samples_per_class must be >= 1")
    resolved_eval_seed = bank_spec.seed + 1 if eval_seed is None else eval_seed

    bank = generate_bank(bank_spec)
    X, y = bank.to_arrays()
    eval_bank = generate_bank(
        replace(bank_spec, samples_per_class=eval_samples_per_class),
        samples_seed=resolved_eval_seed,
    )
    X_eval, y_eval = eval_bank.to_arrays()

    stage1 = SoftmaxRegression(n_classes=bank.n_classes, **train.estimator_params())
    stage1.fit(X, y)

    if codebook_kind == "lsh":
        projection = ProjectionMatrix.draw(bank.dim, code_width, codebook_seed)
        book = build_codebook(bank, projection, retry_on_conflict=retry_on_conflict)
    else:
        book = random_codebook(bank.n_classes, code_width, codebook_seed, labels=bank.labels)
    conflicts = detect_conflicts(book)
    book = add_special_tokens(book, codebook_seed + 1)

    stage2 = HammingClassifier(
        codebook=book, margin=margin, init="auto", **train.estimator_params()
    )
    stage2.fit(X, y)

    predicted_train, _ = stage2.decode(X, workers=workers)
    predicted_eval, _ = stage2.decode(X_eval, workers=workers)

    # Post-training agreement between predicted codes and assigned codes
    # (intra) versus separation between distinct class codes (inter).
    predicted_codes = stage2.classify_bits(X)
    intra = float(
        np.bitwise_count(np.bitwise_xor(predicted_codes, book.packed[y]))
        .sum(dtype=np.int64) / X.shape[0]
    )
    inter = _mean_pairwise_distance(book, bank.n_classes)

    watch = sorted(
        set(range(min(neighbor_classes, bank.n_classes)))
        | {c for pair in bank_spec.confusable_pairs for c in pair}
    )
    neighbor_rows = []
    k = min(neighbor_k, len(book) - 1)
    for class_index in watch:
        hits = top_k_neighbors(class_index, book, k)
        neighbor_rows.append(
            {
                "class_index": class_index,
                "label": book.labels[class_index],
                "neighbors": [
                    {
                        "class_index": hit.class_index,
                        "label": book.labels[hit.class_index],
                        "distance": hit.distance,
                    }
                    for hit in hits
                ],
            }
        )

    softmax_bytes = softmax_head_bytes(bank.n_classes, bank.dim)
    hamming_bytes = hamming_head_bytes(bank.n_classes, bank.dim, code_width)
    report: dict[str, Any] = {
        "kind": "two_stage",
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": {
            "bank": bank_spec.as_dict(),
            "train": train.estimator_params(),
            "margin": margin,
            "code_width": code_width,
            "codebook": {
                "kind": codebook_kind,
                "seed": codebook_seed,
                "retry_on_conflict": retry_on_conflict,
                "special_token_seed": codebook_seed + 1,
            },
            "eval": {
                "samples_per_class": eval_samples_per_class,
                "seed": resolved_eval_seed,
            },
        },
        "codebook_conflicts": len(conflicts),
        "stage1": {
            "train_accuracy": _accuracy(stage1.predict(X), y),
            "eval_accuracy": _accuracy(stage1.predict(X_eval), y_eval),
            "final_loss": stage1.loss_history_[-1][1],
            "epochs": len(stage1.loss_history_),
        },
        "stage2": {
            "train_accuracy": _accuracy(predicted_train, y),
            "eval_accuracy": _accuracy(predicted_eval, y_eval),
            "final_loss": stage2.loss_history_[-1][1],
            "epochs": len(stage2.loss_history_),
        },
        "code_distance": {"mean_intra": intra, "mean_inter": inter},
        "neighbors": neighbor_rows,
        "size": {
            "softmax_head_bytes": softmax_bytes,
            "hamming_head_bytes": hamming_bytes,
            "codebook_bytes": codebook_bytes(bank.n_classes, code_width),
            "head_compression_ratio": softmax_bytes / hamming_bytes,
        },
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_history(stage1.loss_history_, out_dir / "stage1_loss.csv")
        write_loss_history(stage2.loss_history_, out_dir / "stage2_loss.csv")
        save_report(report, out_dir / "report.json")
    return report


def sweep_code_length(
    bank_spec: SyntheticBankSpec,
    train: TrainConfig,
    code_widths: Sequence[int],
    *,
    margin: float = 1.0,
    codebook_kind: str = "lsh",
    codebook_seed: int = 0,
    eval_samples_per_class: int = 10,
    workers: int = 1,
) -> dict[str, Any]:
    """Run the two-stage protocol once per code width; widths are deduplicated
    and reported in ascending order."""
    widths = sorted(set(int(w) for w in code_widths))
    require(len(widths) >= 1, "at least one code width is required")
    require(widths[0] >= 1, f"code widths must be >= 1, got {widths[0]}")

    rows = []
    for width in widths:
        result = run_two_stage(
            bank_spec,
            train,
            width,
            margin=margin,
            codebook_kind=codebook_kind,
            codebook_seed=codebook_seed,
            eval_samples_per_class=eval_samples_per_class,
            neighbor_classes=0,
            workers=workers,
        )
        rows.append(
            {
                "code_width": width,
                "stage1_eval_accuracy": result["stage1"]["eval_accuracy"],
                "eval_accuracy": result["stage2"]["eval_accuracy"],
                "codebook_conflicts": result["codebook_conflicts"],
                "hamming_head_bytes": result["size"]["hamming_head_bytes"],
            }
        )

    return {
        "kind": "code_length_sweep",
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": {
            "bank": bank_spec.as_dict(),
            "train": train.estimator_params(),
            "margin": margin,
            "codebook": {"kind": codebook_kind, "seed": codebook_seed},
            "eval": {
                "samples_per_class": eval_samples_per_class,
                "seed": bank_spec.seed + 1,
            },
            "code_widths": widths,
        },
        "rows": rows,
        "fullscale_reference_accuracy": {
            "note": (
                "word accuracy of the full-scale recognizer at these code widths; "
                "desk-scale synthetic sweeps are not comparable"
            ),
            "word_accuracy_by_width": {
                str(w): acc for w, acc in FULLSCALE_CODE_WIDTH_ACCURACY.items()
            },
        },
    }


def bench_search(
    n_classes: int,
    code_width: int,
    n_queries: int,
    seed: int = 0,
    workers: int = 1,
) -> dict[str, Any]:
    """Time an exhaustive nearest-code scan over random codes.

    The result checksum is a pure function of the seed and sizes — equal
    across worker counts — while the timing numbers are measured and vary
    run to run.
    """
    require(n_queries >= 1, f"n_queries must be >= 1, got {n_queries}")
    book = random_codebook(n_classes, code_width, seed)
    query_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    bits = query_rng.integers(0, 2, size=(n_queries, code_width), dtype=np.uint8)
    queries = np.packbits(bits, axis=-1, bitorder="little")

    start = time.perf_counter()
    indices, distances = batch_nearest(queries, book, workers=workers)
    elapsed = time.perf_counter() - start

    digest = hashlib.sha256()
    digest.update(indices.astype("<i8").tobytes())
    digest.update(distances.astype("<i8").tobytes())
    return {
        "n_classes": n_classes,
        "code_width": code_width,
        "n_queries": n_queries,
        "seed": seed,
        "workers": workers,
        "result_checksum": digest.hexdigest(),
        "elapsed_seconds": elapsed,
        "queries_per_second": n_queries / elapsed if elapsed > 0 else float("inf"),
    }


def save_report(report: Mapping[str, Any], path: str | Path) -> None:
    """Serialize a report with sorted keys (byte-stable for equal content)."""
    Path(path).write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_report(path: str | Path) -> dict[str, Any]:
    """Read a report, checking schema version, kind, and field allowlist."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    require(isinstance(raw, dict), f"{path} does not hold a report object")
    kind = raw.get("kind")
    require(kind in _REPORT_FIELDS, f"{path} has unknown report kind {kind!r}")
    version = raw.get("schema_version")
    require(
        version == REPORT_SCHEMA_VERSION,
        f"{path} has schema_version {version!r}, expected {REPORT_SCHEMA_VERSION}",
    )
    allowed = _REPORT_FIELDS[kind]
    unknown = set(raw) - allowed
    require(not unknown, f"{path} has unknown fields: {sorted(unknown)}")
    missing = allowed - set(raw)
    require(not missing, f"{path} is missing fields: {sorted(missing)}")
    return raw
