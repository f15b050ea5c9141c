"""Codebook construction: feature banks, random-hyperplane codes, majority vote.

A class's code is obtained by projecting each of its feature vectors through a
shared random-hyperplane bank (bit ``k`` is 1 exactly when the dot product
with hyperplane ``k`` is strictly positive) and then taking a strict per-bit
majority over the class's samples. Nearby feature vectors agree on most
hyperplane signs, so classes whose features are close receive codes that are
close in Hamming distance.

A coin-flip codebook built with :func:`random_codebook` serves as the control:
it has the same marginal bit statistics but no relationship to feature
geometry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bitcode import BitCode, Codebook, pack_bits, packed_width
from .errors import ContractViolation
from .validation import as_feature_vector, require

_BANK_MAGIC = b"HOFB"
_BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sHII")  # magic, version, n_classes, dim

#: Reserved class labels appended by :func:`add_special_tokens`. Their codes
#: mark sequence start, sequence end, and padding during autoregressive
#: decoding; ordinary classes must never use these labels.
START_LABEL = "<start>"
END_LABEL = "<end>"
PAD_LABEL = "<pad>"
RESERVED_LABELS = (START_LABEL, END_LABEL, PAD_LABEL)


@dataclass(frozen=True)
class FeatureBank:
    """Per-class groups of feature vectors sharing one dimensionality.

    ``groups[i]`` is an ``(n_i, dim)`` array of samples for class ``i`` and
    ``labels[i]`` its display label. Group sizes may differ; every group must
    be non-empty.
    """

    dim: int
    groups: tuple[np.ndarray, ...]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        require(self.dim >= 1, f"feature dim must be >= 1, got {self.dim}")
        require(len(self.groups) >= 2, "a feature bank needs at least two classes")
        require(
            len(self.labels) == len(self.groups),
            f"{len(self.labels)} labels for {len(self.groups)} classes",
        )
        groups = []
        for i, g in enumerate(self.groups):
            arr = np.ascontiguousarray(g, dtype=np.float64)
            require(
                arr.ndim == 2 and arr.shape[1] == self.dim,
                f"class {i} group must be (n_i, {self.dim}), got shape {arr.shape}",
            )
            require(arr.shape[0] >= 1, f"class {i} has no samples")
            require(np.isfinite(arr).all(), f"class {i} contains non-finite features")
            arr.flags.writeable = False
            groups.append(arr)
        object.__setattr__(self, "groups", tuple(groups))
        object.__setattr__(self, "labels", tuple(str(lbl) for lbl in self.labels))

    @property
    def n_classes(self) -> int:
        return len(self.groups)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(g.shape[0]) for g in self.groups)

    @property
    def total_samples(self) -> int:
        return sum(self.counts)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Flatten to ``(X, y)`` with samples in class order."""
        X = np.concatenate(self.groups, axis=0)
        y = np.repeat(np.arange(self.n_classes, dtype=np.int64), self.counts)
        return X, y

    @classmethod
    def from_arrays(
        cls, X: np.ndarray, y: np.ndarray, labels: Sequence[str] | None = None
    ) -> "FeatureBank":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        require(X.ndim == 2, "X must be 2-D")
        require(y.ndim == 1 and y.shape[0] == X.shape[0], "y must align with X rows")
        n_classes = int(y.max()) + 1 if y.size else 0
        require(n_classes >= 2, "a feature bank needs at least two classes")
        groups = tuple(X[y == i] for i in range(n_classes))
        if labels is None:
            labels = tuple(str(i) for i in range(n_classes))
        return cls(dim=int(X.shape[1]), groups=groups, labels=tuple(labels))


@dataclass(frozen=True)
class ProjectionMatrix:
    """A bank of ``code_width`` random hyperplanes in ``dim`` dimensions.

    Column ``k`` of ``entries`` is hyperplane ``k``'s normal vector. When
    built via :meth:`draw`, the matrix is fully reproducible from
    ``(seed, dim, code_width)``.
    """

    dim: int
    code_width: int
    entries: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        require(self.dim >= 1, f"dim must be >= 1, got {self.dim}")
        require(self.code_width >= 1, f"code_width must be >= 1, got {self.code_width}")
        arr = np.ascontiguousarray(self.entries, dtype=np.float64)
        require(
            arr.shape == (self.dim, self.code_width),
            f"entries must be ({self.dim}, {self.code_width}), got {arr.shape}",
        )
        require(np.isfinite(arr).all(), "entries must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)

    @classmethod
    def draw(cls, dim: int, code_width: int, seed: int) -> "ProjectionMatrix":
        """Draw i.i.d. standard-normal hyperplanes from ``seed``."""
        rng = np.random.default_rng(seed)
        entries = rng.standard_normal((dim, code_width))
        return cls(dim=dim, code_width=code_width, entries=entries, seed=int(seed))


def lsh_project(h: np.ndarray, projection: ProjectionMatrix) -> BitCode:
    """Sign code of one feature vector: bit ``k`` = 1 iff ``h . psi_k > 0``."""
    vec = as_feature_vector(h, dim=projection.dim)
    bits = (vec @ projection.entries > 0.0).astype(np.uint8)
    return BitCode(width=projection.code_width, packed=pack_bits(bits))


def lsh_project_many(features: np.ndarray, projection: ProjectionMatrix) -> np.ndarray:
    """Packed sign codes for a batch of feature rows, shape ``(n, bytes)``."""
    arr = np.asarray(features, dtype=np.float64)
    require(
        arr.ndim == 2 and arr.shape[1] == projection.dim,
        f"features must be (n, {projection.dim}), got shape {arr.shape}",
    )
    bits = (arr @ projection.entries > 0.0).astype(np.uint8)
    return pack_bits(bits)


def _majority_bits(bits: np.ndarray) -> np.ndarray:
    """Strict per-column majority of a 0/1 matrix: 1 iff set in > half the rows."""
    n = bits.shape[0]
    return (bits.sum(axis=0, dtype=np.int64) * 2 > n).astype(np.uint8)


def majority_vote(codes: Sequence[BitCode]) -> BitCode:
    """Per-bit strict majority over equal-width codes.

    A bit of the result is 1 exactly when strictly more than half of the
    input codes set it, so even splits resolve to 0.
    """
    require(len(codes) >= 1, "majority_vote needs at least one code")
    width = codes[0].width
    for c in codes[1:]:
        require(c.width == width, f"width mismatch: {c.width} vs {width}")
    stacked = np.stack([c.bits() for c in codes], axis=0)
    return BitCode(width=width, packed=pack_bits(_majority_bits(stacked)))


def build_codebook(
    bank: FeatureBank,
    projection: ProjectionMatrix,
    *,
    retry_on_conflict: bool = False,
    max_retries: int = 5,
) -> Codebook:
    """Build one majority-vote code per bank class.

    With ``retry_on_conflict`` the whole book is rebuilt from a redrawn
    hyperplane bank (seed incremented by one) whenever two classes collide,
    up to ``max_retries`` redraws; the projection seed actually used is
    recorded in the returned provenance. Conflicts surviving the final
    attempt are returned as-is — callers decide whether that is fatal.
    """
    require(
        bank.dim == projection.dim,
        f"bank dim {bank.dim} does not match projection dim {projection.dim}",
    )
    require(max_retries >= 0, f"max_retries must be >= 0, got {max_retries}")
    if retry_on_conflict and projection.seed is None:
        raise ContractViolation(
            "retry_on_conflict needs a seeded projection so redraws are reproducible"
        )

    base_seed = projection.seed
    attempt = 0
    while True:
        rows = np.empty((bank.n_classes, packed_width(projection.code_width)), dtype=np.uint8)
        for i, group in enumerate(bank.groups):
            sign_bits = (group @ projection.entries > 0.0).astype(np.uint8)
            rows[i] = pack_bits(_majority_bits(sign_bits))
        book = Codebook(
            width=projection.code_width,
            packed=rows,
            labels=bank.labels,
            provenance={
                "kind": "lsh",
                # the seed actually used for this book's hyperplanes
                "seed": projection.seed,
                "dim": projection.dim,
                "code_width": projection.code_width,
                "conflict_retries": attempt,
            },
        )
        if not retry_on_conflict or attempt >= max_retries or not detect_conflicts(book):
            return book
        attempt += 1
        projection = ProjectionMatrix.draw(
            projection.dim, projection.code_width, base_seed + attempt
        )


def projection_from_provenance(codebook: Codebook) -> ProjectionMatrix | None:
    """Re-derive the hyperplane bank a codebook records having been built from.

    Returns ``None`` when the provenance does not describe a seeded
    sign-projection build (random books, hand-built books, loaded files).
    """
    prov: Mapping[str, object] = codebook.provenance
    if prov.get("kind") != "lsh" or prov.get("seed") is None:
        return None
    seed = int(prov["seed"])  # type: ignore[arg-type]
    dim = int(prov["dim"])  # type: ignore[arg-type]
    return ProjectionMatrix.draw(dim, codebook.width, seed)


def detect_conflicts(codebook: Codebook) -> list[tuple[int, int]]:
    """All pairs of classes sharing an identical code, sorted lexicographically."""
    _, inverse = np.unique(codebook.packed, axis=0, return_inverse=True)
    pairs: list[tuple[int, int]] = []
    for group_id in range(int(inverse.max()) + 1 if inverse.size else 0):
        members = np.flatnonzero(inverse == group_id)
        if members.size > 1:
            pairs.extend((int(a), int(b)) for a, b in combinations(members, 2))
    return sorted(pairs)


def random_codebook(
    n_classes: int,
    width: int,
    seed: int,
    labels: Sequence[str] | None = None,
) -> Codebook:
    """Control codebook: every bit an independent fair coin flip."""
    require(n_classes >= 2, f"n_classes must be >= 2, got {n_classes}")
    require(width >= 1, f"width must be >= 1, got {width}")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n_classes, width), dtype=np.uint8)
    if labels is None:
        labels = tuple(str(i) for i in range(n_classes))
    require(len(labels) == n_classes, f"{len(labels)} labels for {n_classes} codes")
    return Codebook(
        width=width,
        packed=pack_bits(bits),
        labels=tuple(labels),
        provenance={"kind": "random", "seed": int(seed)},
    )


def add_special_tokens(codebook: Codebook, seed: int) -> Codebook:
    """Append start / end / padding codes with reserved labels.

    The three codes are independent coin flips drawn from ``seed``; they act
    as extra classes at the end of the book so autoregressive decoding can
    mark sequence boundaries. Fails if a reserved label is already present.
    """
    for reserved in RESERVED_LABELS:
        require(
            reserved not in codebook.labels,
            f"label {reserved!r} is reserved for special tokens",
        )
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(len(RESERVED_LABELS), codebook.width), dtype=np.uint8)
    packed = np.concatenate([codebook.packed, pack_bits(bits)], axis=0)
    return Codebook(
        width=codebook.width,
        packed=packed,
        labels=codebook.labels + RESERVED_LABELS,
        provenance={**codebook.provenance, "special_token_seed": int(seed)},
    )


def special_token_indices(codebook: Codebook) -> dict[str, int] | None:
    """Indices of the reserved start/end/pad codes, or ``None`` if absent."""
    try:
        return {
            "start": codebook.labels.index(START_LABEL),
            "end": codebook.labels.index(END_LABEL),
            "pad": codebook.labels.index(PAD_LABEL),
        }
    except ValueError:
        return None


def write_feature_bank(bank: FeatureBank, path: str | Path) -> None:
    """Write a feature bank in the binary container format.

    Layout: magic ``HOFB``, version ``u16``, class count ``u32``, feature dim
    ``u32``, then per class a ``u32`` sample count followed by its rows as
    row-major float32 (all little-endian). Labels go to ``<path>.labels``.
    """
    path = Path(path)
    parts = [_BANK_HEADER.pack(_BANK_MAGIC, _BANK_VERSION, bank.n_classes, bank.dim)]
    for group in bank.groups:
        parts.append(struct.pack("<I", group.shape[0]))
        parts.append(group.astype("<f4").tobytes())
    path.write_bytes(b"".join(parts))
    Path(str(path) + ".labels").write_text(
        "".join(f"{label}\n" for label in bank.labels), encoding="utf-8"
    )


def read_feature_bank(path: str | Path) -> FeatureBank:
    """Read a feature bank written by :func:`write_feature_bank`."""
    path = Path(path)
    blob = path.read_bytes()
    require(len(blob) >= _BANK_HEADER.size, f"{path} is too short to be a feature bank")
    magic, version, n_classes, dim = _BANK_HEADER.unpack_from(blob)
    require(magic == _BANK_MAGIC, f"{path} has magic {magic!r}, expected {_BANK_MAGIC!r}")
    require(version == _BANK_VERSION, f"{path} has unsupported version {version}")
    offset = _BANK_HEADER.size
    groups = []
    for i in range(n_classes):
        require(offset + 4 <= len(blob), f"{path} truncated in class {i} header")
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        nbytes = count * dim * 4
        require(offset + nbytes <= len(blob), f"{path} truncated in class {i} payload")
        rows = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset)
        groups.append(rows.reshape(count, dim).astype(np.float64))
        offset += nbytes
    require(offset == len(blob), f"{path} has {len(blob) - offset} trailing bytes")

    manifest = Path(str(path) + ".labels")
    if manifest.exists():
        labels = tuple(manifest.read_text(encoding="utf-8").splitlines())
        require(
            len(labels) == n_classes,
            f"{manifest} lists {len(labels)} labels for {n_classes} classes",
        )
    else:
        labels = tuple(str(i) for i in range(n_classes))
    return FeatureBank(dim=dim, groups=tuple(groups), labels=labels)
