"""Bit-packed binary codes and exhaustive Hamming-distance search.

Packing layout (normative for the on-disk format as well): logical bit ``k``
of a code is stored in bit ``k % 8`` of byte ``k // 8``, i.e. little-endian
within each byte and bytes in ascending order. Widths that are not a multiple
of eight are zero-padded at the top of the final byte, and the padding never
contributes to distances. ``numpy.packbits(..., bitorder="little")``
implements exactly this layout.

Search is an exhaustive scan: XOR the query against every stored code and
popcount. Ties on distance always resolve to the lowest class index, so
results are reproducible regardless of how the scan is partitioned across
workers.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation
from .validation import require

_MAGIC = b"HOCB"
_VERSION = 1
_HEADER = struct.Struct("<4sHII")  # magic, version, n_codes, width

# Queries processed per block during batch scans, sized to keep the XOR
# scratch buffer modest even for wide codebooks.
_SCAN_BLOCK_BYTES = 1 << 24


def packed_width(width: int) -> int:
    """Number of bytes needed to store ``width`` bits."""
    require(width >= 1, f"code width must be >= 1, got {width}")
    return (width + 7) // 8


def _padding_mask(width: int) -> int:
    """Bit mask of the valid (non-padding) bits in the final byte."""
    rem = width % 8
    return 0xFF if rem == 0 else (1 << rem) - 1


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack an array of 0/1 values along its last axis.

    Accepts a single code ``(width,)`` or a batch ``(n, width)`` and returns
    ``uint8`` bytes in the layout documented above.
    """
    arr = np.asarray(bits)
    require(arr.ndim in (1, 2), f"bits must be 1-D or 2-D, got ndim={arr.ndim}")
    require(arr.shape[-1] >= 1, "bits must have width >= 1")
    values = np.unique(arr)
    require(
        np.isin(values, (0, 1)).all(),
        "bits must contain only 0 and 1",
    )
    return np.packbits(arr.astype(np.uint8, copy=False), axis=-1, bitorder="little")


def unpack_bits(packed: np.ndarray, width: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns ``uint8`` values in {0, 1}."""
    arr = np.asarray(packed, dtype=np.uint8)
    require(arr.ndim in (1, 2), f"packed must be 1-D or 2-D, got ndim={arr.ndim}")
    require(
        arr.shape[-1] == packed_width(width),
        f"packed has {arr.shape[-1]} bytes per code, expected {packed_width(width)}",
    )
    return np.unpackbits(arr, axis=-1, count=width, bitorder="little")


def _check_padding(packed: np.ndarray, width: int, name: str) -> None:
    mask = _padding_mask(width)
    if mask != 0xFF and packed.size:
        require(
            int(np.bitwise_or.reduce(packed[..., -1] & ~np.uint8(mask), axis=None)) == 0,
            f"{name} has non-zero padding bits beyond width {width}",
        )


@dataclass(frozen=True)
class BitCode:
    """An immutable binary code of ``width`` bits in packed form."""

    width: int
    packed: np.ndarray

    def __post_init__(self) -> None:
        require(self.width >= 1, f"code width must be >= 1, got {self.width}")
        arr = np.ascontiguousarray(self.packed, dtype=np.uint8)
        require(arr.ndim == 1, "packed payload must be 1-D")
        require(
            arr.shape[0] == packed_width(self.width),
            f"packed payload has {arr.shape[0]} bytes, expected {packed_width(self.width)}",
        )
        _check_padding(arr, self.width, "BitCode")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "packed", arr)

    @classmethod
    def from_bits(cls, bits: Iterable[int] | np.ndarray) -> "BitCode":
        arr = np.asarray(list(bits) if not isinstance(bits, np.ndarray) else bits)
        require(arr.ndim == 1, "from_bits expects a flat bit sequence")
        return cls(width=int(arr.shape[0]), packed=pack_bits(arr))

    def bits(self) -> np.ndarray:
        """Unpacked 0/1 values, length ``width``."""
        return unpack_bits(self.packed, self.width)

    def popcount(self) -> int:
        """Number of set bits."""
        return int(np.bitwise_count(self.packed).sum())

    def complement(self) -> "BitCode":
        """Code with every bit flipped (padding stays zero)."""
        flipped = np.bitwise_xor(self.packed, np.uint8(0xFF))
        flipped[-1] &= np.uint8(_padding_mask(self.width))
        return BitCode(width=self.width, packed=flipped)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitCode):
            return NotImplemented
        return self.width == other.width and bool(np.array_equal(self.packed, other.packed))

    def __hash__(self) -> int:
        return hash((self.width, self.packed.tobytes()))


class CodeSearchResult(NamedTuple):
    """A single search hit: the class index and its Hamming distance."""

    class_index: int
    distance: int


@dataclass(frozen=True)
class Codebook:
    """An ordered table of equal-width codes, one per class.

    ``labels[i]`` names the class whose code is row ``i`` of ``packed``.
    ``provenance`` records how the book was built (construction kind, seeds)
    so downstream reports can reproduce it.
    """

    width: int
    packed: np.ndarray
    labels: tuple[str, ...]
    provenance: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        require(self.width >= 1, f"code width must be >= 1, got {self.width}")
        arr = np.ascontiguousarray(self.packed, dtype=np.uint8)
        require(arr.ndim == 2, "codebook payload must be 2-D (codes x bytes)")
        require(arr.shape[0] >= 1, "codebook must contain at least one code")
        require(
            arr.shape[1] == packed_width(self.width),
            f"codebook rows have {arr.shape[1]} bytes, expected {packed_width(self.width)}",
        )
        _check_padding(arr, self.width, "Codebook")
        labels = tuple(str(lbl) for lbl in self.labels)
        require(
            len(labels) == arr.shape[0],
            f"{len(labels)} labels for {arr.shape[0]} codes",
        )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "packed", arr)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __len__(self) -> int:
        return int(self.packed.shape[0])

    def code(self, class_index: int) -> BitCode:
        require(
            0 <= class_index < len(self),
            f"class index {class_index} out of range for {len(self)} classes",
        )
        return BitCode(width=self.width, packed=self.packed[class_index])

    def codes(self) -> Iterator[BitCode]:
        for i in range(len(self)):
            yield self.code(i)

    @property
    def n_bytes_per_code(self) -> int:
        return int(self.packed.shape[1])


def _as_packed_query(query: BitCode, codebook: Codebook) -> np.ndarray:
    require(
        query.width == codebook.width,
        f"query width {query.width} does not match codebook width {codebook.width}",
    )
    return query.packed


def hamming_distance(a: BitCode, b: BitCode) -> int:
    """Number of positions at which two equal-width codes differ."""
    require(a.width == b.width, f"width mismatch: {a.width} vs {b.width}")
    return int(np.bitwise_count(np.bitwise_xor(a.packed, b.packed)).sum())


def packed_distances(queries: np.ndarray, packed_codes: np.ndarray) -> np.ndarray:
    """Distance matrix between packed query rows and packed code rows.

    Returns an ``int64`` array of shape ``(n_queries, n_codes)``. This is the
    scan primitive; both inputs must already share a byte width.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.uint8))
    c = np.atleast_2d(np.asarray(packed_codes, dtype=np.uint8))
    require(q.shape[1] == c.shape[1], "query and code byte widths differ")
    xor = np.bitwise_xor(q[:, None, :], c[None, :, :])
    return np.bitwise_count(xor).sum(axis=2, dtype=np.int64)


def codebook_distances(query: BitCode, codebook: Codebook) -> np.ndarray:
    """Distances from one query to every code, as an ``int64`` vector."""
    packed = _as_packed_query(query, codebook)
    return packed_distances(packed[None, :], codebook.packed)[0]


def _apply_exclusions(
    distances: np.ndarray, exclude: Sequence[int], n_codes: int, width: int
) -> np.ndarray:
    if not len(exclude):
        return distances
    idx = np.asarray(exclude, dtype=np.int64)
    require(
        idx.size == 0 or (int(idx.min()) >= 0 and int(idx.max()) < n_codes),
        "excluded index out of range",
    )
    require(idx.size < n_codes, "cannot exclude every code in the codebook")
    distances = distances.copy()
    distances[..., idx] = width + 1  # beyond any attainable distance
    return distances


def nearest_code(
    query: BitCode, codebook: Codebook, *, exclude: Sequence[int] = ()
) -> CodeSearchResult:
    """Exhaustive nearest-code search; ties go to the lowest class index."""
    dists = _apply_exclusions(
        codebook_distances(query, codebook), exclude, len(codebook), codebook.width
    )
    best = int(np.argmin(dists))
    return CodeSearchResult(class_index=best, distance=int(dists[best]))


def top_k_neighbors(class_index: int, codebook: Codebook, k: int) -> list[CodeSearchResult]:
    """The ``k`` codes nearest to ``codebook.code(class_index)``, excluding itself.

    Sorted by distance, then by class index.
    """
    require(k >= 1, f"k must be >= 1, got {k}")
    require(
        k <= len(codebook) - 1,
        f"k={k} but only {len(codebook) - 1} other codes exist",
    )
    dists = codebook_distances(codebook.code(class_index), codebook)
    order = np.lexsort((np.arange(len(codebook)), dists))
    order = order[order != class_index][:k]
    return [CodeSearchResult(int(i), int(dists[i])) for i in order]


def _scan_chunk(
    queries: np.ndarray, chunk: np.ndarray, offset: int
) -> tuple[np.ndarray, np.ndarray]:
    """Best (index, distance) per query against one contiguous codebook chunk."""
    n_q = queries.shape[0]
    best_idx = np.empty(n_q, dtype=np.int64)
    best_dist = np.empty(n_q, dtype=np.int64)
    block = max(1, _SCAN_BLOCK_BYTES // max(1, chunk.shape[0] * chunk.shape[1]))
    for start in range(0, n_q, block):
        stop = min(start + block, n_q)
        dists = packed_distances(queries[start:stop], chunk)
        arg = np.argmin(dists, axis=1)
        best_idx[start:stop] = arg + offset
        best_dist[start:stop] = dists[np.arange(stop - start), arg]
    return best_idx, best_dist


def batch_nearest(
    queries: np.ndarray,
    codebook: Codebook,
    *,
    workers: int = 1,
    exclude: Sequence[int] = (),
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest code for each packed query row.

    Returns ``(class_indices, distances)`` as ``int64`` arrays. With
    ``workers > 1`` the codebook is partitioned into contiguous chunks scanned
    in parallel; per-chunk winners are merged by ``(distance, class index)``,
    so the result is identical to a single-threaded scan.
    """
    require(workers >= 1, f"workers must be >= 1, got {workers}")
    q = np.atleast_2d(np.asarray(queries, dtype=np.uint8))
    require(
        q.shape[1] == codebook.n_bytes_per_code,
        f"queries have {q.shape[1]} bytes per row, expected {codebook.n_bytes_per_code}",
    )
    _check_padding(q, codebook.width, "queries")

    packed = codebook.packed
    if len(exclude):
        # Exclusions (a handful of special tokens) take the plain blocked
        # scan: compute full distance rows, overwrite excluded columns with a
        # sentinel, then argmin.
        n_q = q.shape[0]
        best_idx = np.empty(n_q, dtype=np.int64)
        best_dist = np.empty(n_q, dtype=np.int64)
        block = max(1, _SCAN_BLOCK_BYTES // max(1, packed.shape[0] * packed.shape[1]))
        for start in range(0, n_q, block):
            stop = min(start + block, n_q)
            dists = _apply_exclusions(
                packed_distances(q[start:stop], packed), exclude, len(codebook), codebook.width
            )
            arg = np.argmin(dists, axis=1)
            best_idx[start:stop] = arg
            best_dist[start:stop] = dists[np.arange(stop - start), arg]
        return best_idx, best_dist

    workers = min(workers, len(codebook))
    bounds = np.linspace(0, len(codebook), workers + 1, dtype=np.int64)
    jobs = [
        (packed[bounds[w] : bounds[w + 1]], int(bounds[w]))
        for w in range(workers)
        if bounds[w + 1] > bounds[w]
    ]
    if len(jobs) == 1:
        return _scan_chunk(q, jobs[0][0], jobs[0][1])

    with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
        parts = list(pool.map(lambda job: _scan_chunk(q, job[0], job[1]), jobs))

    best_idx, best_dist = parts[0]
    for idx, dist in parts[1:]:
        # Chunks are visited in ascending index order, so a strict '<' keeps
        # the lowest-index winner on ties.
        better = dist < best_dist
        best_idx = np.where(better, idx, best_idx)
        best_dist = np.where(better, dist, best_dist)
    return best_idx, best_dist


def codebook_to_bytes(codebook: Codebook) -> bytes:
    """Serialize a codebook to the binary container format (labels excluded).

    Layout: magic ``HOCB``, version ``u16``, code count ``u32``, bit width
    ``u32`` (all little-endian), then the packed rows in class order.
    """
    header = _HEADER.pack(_MAGIC, _VERSION, len(codebook), codebook.width)
    return header + codebook.packed.tobytes()


def codebook_from_bytes(
    blob: bytes, *, labels: Sequence[str] | None = None, source: str = "<bytes>"
) -> Codebook:
    """Parse the binary container format produced by :func:`codebook_to_bytes`."""
    require(len(blob) >= _HEADER.size, f"{source} is too short to be a codebook container")
    magic, version, n_codes, width = _HEADER.unpack_from(blob)
    require(magic == _MAGIC, f"{source} has magic {magic!r}, expected {_MAGIC!r}")
    require(version == _VERSION, f"{source} has unsupported version {version}")
    require(n_codes >= 1 and width >= 1, f"{source} header is degenerate")
    n_bytes = packed_width(width)
    payload = blob[_HEADER.size :]
    require(
        len(payload) == n_codes * n_bytes,
        f"{source} payload is {len(payload)} bytes, expected {n_codes * n_bytes}",
    )
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(n_codes, n_bytes)
    _check_padding(packed, width, source)
    if labels is None:
        labels = tuple(str(i) for i in range(n_codes))
    return Codebook(
        width=width,
        packed=packed,
        labels=tuple(labels),
        provenance={"kind": "loaded", "path": source},
    )


def write_codebook(codebook: Codebook, path: str | Path) -> None:
    """Write a codebook file plus its adjacent UTF-8 label manifest.

    The file holds the binary container (see :func:`codebook_to_bytes`);
    labels go to ``<path>.labels``, one per line, in class order.
    """
    path = Path(path)
    path.write_bytes(codebook_to_bytes(codebook))
    manifest = "".join(f"{label}\n" for label in codebook.labels)
    Path(str(path) + ".labels").write_text(manifest, encoding="utf-8")


def read_codebook(path: str | Path) -> Codebook:
    """Read a codebook written by :func:`write_codebook`.

    If the label manifest is missing, classes are labelled by their indices.
    """
    path = Path(path)
    blob = path.read_bytes()
    manifest = Path(str(path) + ".labels")
    labels: tuple[str, ...] | None = None
    if manifest.exists():
        labels = tuple(manifest.read_text(encoding="utf-8").splitlines())
    book = codebook_from_bytes(blob, labels=None, source=str(path))
    if labels is not None:
        require(
            len(labels) == len(book),
            f"{manifest} lists {len(labels)} labels for {len(book)} codes",
        )
        book = Codebook(
            width=book.width, packed=book.packed, labels=labels, provenance=book.provenance
        )
    return book
