"""Storage accounting: head/codebook byte math and model-size ladders.

All sizes are storage bytes (1 MiB = 2**20 bytes). Float tensors cost
``count * 4`` bytes at fp32 and ``count * 2`` at fp16; bit-packed codebooks
cost ``ceil(width / 8)`` bytes per code at any precision. Backbone encoders
are treated as opaque constants: their fp32 byte size is an input, and fp16
halves it like any other float payload.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

from .decoder import DecoderConfig, count_parameters
from .heads import factorized_param_count
from .validation import require

MIB = 1 << 20

PRECISION_BYTES: Mapping[str, int] = {"fp32": 4, "fp16": 2}

#: fp32 storage of the large reference recognizer's convolutional encoder
#: (ResNet31 with global-context blocks). Opaque input constant.
RESNET31_GCNET_BACKBONE_BYTES = 176 * MIB

#: fp32 storage of the mobile recognizer's encoder (MobileNetV2 trunk),
#: about 2.3 MiB. Opaque input constant, kept divisible by four so the
#: implied parameter count is whole.
MOBILENETV2_BACKBONE_BYTES = 2411724

#: Class count of the large reference vocabulary (a big character set plus
#: word pieces), used by the reference ladders.
REFERENCE_VOCABULARY = 20948


def _itemsize(precision: str) -> int:
    require(precision in PRECISION_BYTES, f"unknown precision {precision!r}")
    return PRECISION_BYTES[precision]


def bytes_to_mib(n_bytes: float) -> float:
    return n_bytes / MIB


def softmax_head_bytes(n_classes: int, dim: int, precision: str = "fp32") -> int:
    """Dense ``dim x n_classes`` output layer."""
    require(n_classes >= 1 and dim >= 1, "n_classes and dim must be >= 1")
    return n_classes * dim * _itemsize(precision)


def embedding_table_bytes(n_classes: int, dim: int, precision: str = "fp32") -> int:
    """Learned ``n_classes x dim`` embedding table."""
    return softmax_head_bytes(n_classes, dim, precision)


def codebook_bytes(n_classes: int, code_width: int) -> int:
    """Bit-packed codebook: ``ceil(code_width / 8)`` bytes per class."""
    require(n_classes >= 1 and code_width >= 1, "n_classes and code_width must be >= 1")
    return n_classes * ((code_width + 7) // 8)


def hamming_head_bytes(
    n_classes: int, dim: int, code_width: int, precision: str = "fp32"
) -> int:
    """Bit-classifier matrix plus its bit-packed codebook."""
    require(dim >= 1 and code_width >= 1, "dim and code_width must be >= 1")
    return dim * code_width * _itemsize(precision) + codebook_bytes(n_classes, code_width)


def factorized_head_bytes(
    n_classes: int, dim: int, bottleneck: int, precision: str = "fp32"
) -> int:
    """Rank-limited softmax head (two factors, no codebook)."""
    return factorized_param_count(dim, bottleneck, n_classes) * _itemsize(precision)


def head_size_crossover(dim: int, code_width: int, precision: str = "fp32") -> int | None:
    """Smallest class count at which the Hamming head stores fewer bytes.

    The Hamming head pays a fixed ``dim x code_width`` matrix but only
    ``ceil(code_width/8)`` bytes per class versus the softmax head's
    ``dim * itemsize``; returns ``None`` when the per-class cost never wins.
    """
    isize = _itemsize(precision)
    per_class_softmax = dim * isize
    per_class_hamming = (code_width + 7) // 8
    if per_class_hamming >= per_class_softmax:
        return None
    fixed = dim * code_width * isize
    return fixed // (per_class_softmax - per_class_hamming) + 1


# ---------------------------------------------------------------------------
# Whole-model accounting


@dataclass(frozen=True)
class ModelConfig:
    """Storage-relevant description of one recognizer variant."""

    backbone_bytes: int
    n_classes: int
    dim: int
    code_width: int
    classifier: str = "softmax"  # "softmax" | "hamming"
    embedding: str = "table"  # "table" | "hamming"
    layers: int = 3
    heads: int = 8
    use_ffn: bool = True
    ffn_inner: int = 2048
    share_layers: bool = False
    precision: str = "fp32"

    def __post_init__(self) -> None:
        require(self.backbone_bytes >= 0, "backbone_bytes must be >= 0")
        require(self.n_classes >= 1, "n_classes must be >= 1")
        require(self.dim >= 1 and self.code_width >= 1, "dim and code_width must be >= 1")
        require(self.classifier in ("softmax", "hamming"), f"bad classifier {self.classifier!r}")
        require(self.embedding in ("table", "hamming"), f"bad embedding {self.embedding!r}")
        _itemsize(self.precision)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            d=self.dim,
            heads=self.heads,
            layers=self.layers,
            use_ffn=self.use_ffn,
            ffn_inner=self.ffn_inner,
            share_layers=self.share_layers,
        )


@dataclass(frozen=True)
class SizeItem:
    """One storage line item. ``count`` is parameters, or bits when packed."""

    name: str
    count: int
    n_bytes: int


@dataclass(frozen=True)
class SizeReport:
    """Itemized storage for one model configuration."""

    label: str
    precision: str
    items: tuple[SizeItem, ...]
    assumptions: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "assumptions", dict(self.assumptions))

    @property
    def total_bytes(self) -> int:
        return sum(item.n_bytes for item in self.items)

    @property
    def total_mib(self) -> float:
        return bytes_to_mib(self.total_bytes)

    def item(self, name: str) -> SizeItem:
        for entry in self.items:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "precision": self.precision,
            "items": [
                {"name": i.name, "count": i.count, "bytes": i.n_bytes} for i in self.items
            ],
            "total_bytes": self.total_bytes,
            "total_mib": self.total_mib,
            "assumptions": dict(self.assumptions),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        rows = [(i.name, f"{i.count:,}", f"{i.n_bytes:,}", f"{bytes_to_mib(i.n_bytes):.2f}")
                for i in self.items]
        rows.append(("total", "", f"{self.total_bytes:,}", f"{self.total_mib:.2f}"))
        headers = ("component", "count", "bytes", "MiB")
        widths = [max(len(headers[c]), *(len(r[c]) for r in rows)) for c in range(4)]
        lines = [f"{self.label} ({self.precision})"]
        lines.append("  ".join(h.ljust(widths[c]) for c, h in enumerate(headers)))
        for r in rows:
            lines.append(
                r[0].ljust(widths[0])
                + "  "
                + "  ".join(r[c].rjust(widths[c]) for c in range(1, 4))
            )
        return "\n".join(lines) + "\n"


def model_size_report(config: ModelConfig, label: str = "model") -> SizeReport:
    """Itemized storage for ``config``: backbone, heads, embedding, decoder."""
    isize = _itemsize(config.precision)
    items: list[SizeItem] = []

    backbone_params = config.backbone_bytes // 4
    items.append(SizeItem("backbone", backbone_params, backbone_params * isize))

    needs_codebook = config.classifier == "hamming" or config.embedding == "hamming"
    if config.classifier == "softmax":
        count = config.n_classes * config.dim
        items.append(SizeItem("classifier.weights", count, count * isize))
    else:
        count = config.dim * config.code_width
        items.append(SizeItem("classifier.weights", count, count * isize))
    if needs_codebook:
        items.append(
            SizeItem(
                "classifier.codebook",
                config.n_classes * config.code_width,
                codebook_bytes(config.n_classes, config.code_width),
            )
        )

    if config.embedding == "table":
        count = config.n_classes * config.dim
        items.append(SizeItem("embedding.table", count, count * isize))
    elif config.code_width != config.dim:
        # Hamming embeddings reuse the codebook rows; a width-to-dim
        # projection is the only extra payload, and only when widths differ.
        count = config.code_width * config.dim
        items.append(SizeItem("embedding.projection", count, count * isize))

    decoder_items = count_parameters(config.decoder_config()).physical_items()
    for name in ("attention", "layer_norm", "ffn"):
        count = decoder_items[name]
        if count:
            items.append(SizeItem(f"decoder.{name}", count, count * isize))

    assumptions = {
        "backbone_bytes_fp32": config.backbone_bytes,
        "n_classes": config.n_classes,
        "dim": config.dim,
        "code_width": config.code_width,
        "classifier": config.classifier,
        "embedding": config.embedding,
        "layers": config.layers,
        "heads": config.heads,
        "use_ffn": config.use_ffn,
        "ffn_inner": config.ffn_inner,
        "share_layers": config.share_layers,
        "mib": "2**20 bytes",
    }
    return SizeReport(
        label=label, precision=config.precision, items=tuple(items), assumptions=assumptions
    )


LadderStep = tuple[str, dict[str, Any]]


def ladder_report(
    base: ModelConfig, steps: Sequence[LadderStep], base_label: str = "baseline"
) -> list[SizeReport]:
    """Apply config overrides cumulatively, reporting each rung.

    Returns one report per rung including the starting point; each report's
    assumptions record which fields that step changed.
    """
    config = base
    reports = [model_size_report(config, label=base_label)]
    for label, overrides in steps:
        require(bool(overrides), f"ladder step {label!r} changes nothing")
        config = replace(config, **overrides)
        report = model_size_report(config, label=label)
        report.assumptions["step_changes"] = dict(overrides)
        reports.append(report)
    return reports


def ladder_table(reports: Sequence[SizeReport]) -> str:
    """Rung-by-rung totals with deltas, as aligned text."""
    lines = []
    prev: float | None = None
    name_w = max(len(r.label) for r in reports)
    for report in reports:
        total = report.total_mib
        delta = "" if prev is None else f"  (-{prev - total:.2f} MiB)"
        lines.append(f"{report.label.ljust(name_w)}  {total:10.2f} MiB{delta}")
        prev = total
    return "\n".join(lines) + "\n"


def mobile_reference_ladder() -> list[SizeReport]:
    """The compression ladder from the large recognizer down to fp16 mobile.

    Rungs: swap in the mobile backbone (smaller model dim and FFN), replace
    the softmax classifier with the Hamming head, replace the embedding table
    with code embeddings, drop the FFN, share decoder layers, then store at
    fp16.
    """
    master = ModelConfig(
        backbone_bytes=RESNET31_GCNET_BACKBONE_BYTES,
        n_classes=REFERENCE_VOCABULARY,
        dim=512,
        code_width=512,
        classifier="softmax",
        embedding="table",
        layers=3,
        heads=8,
        use_ffn=True,
        ffn_inner=2048,
        share_layers=False,
        precision="fp32",
    )
    steps: list[LadderStep] = [
        ("mobile-backbone", {
            "backbone_bytes": MOBILENETV2_BACKBONE_BYTES, "dim": 256, "ffn_inner": 1024,
        }),
        ("hamming-classifier", {"classifier": "hamming"}),
        ("hamming-embedding", {"embedding": "hamming"}),
        ("drop-ffn", {"use_ffn": False}),
        ("share-layers", {"share_layers": True}),
        ("fp16", {"precision": "fp16"}),
    ]
    return ladder_report(master, steps, base_label="full-size")


def large_reference_chains() -> dict[str, list[SizeReport]]:
    """Two orderings of reductions applied to the large recognizer at fp32.

    ``head-first`` swaps the classifier then the embedding; ``decoder-first``
    slims the decoder (drop FFN, share layers) before swapping both heads.
    """
    master = ModelConfig(
        backbone_bytes=RESNET31_GCNET_BACKBONE_BYTES,
        n_classes=REFERENCE_VOCABULARY,
        dim=512,
        code_width=512,
        classifier="softmax",
        embedding="table",
        layers=3,
        heads=8,
        use_ffn=True,
        ffn_inner=2048,
        share_layers=False,
        precision="fp32",
    )
    head_first = ladder_report(
        master,
        [
            ("hamming-classifier", {"classifier": "hamming"}),
            ("hamming-embedding", {"embedding": "hamming"}),
        ],
        base_label="full-size",
    )
    decoder_first = ladder_report(
        master,
        [
            ("slim-decoder", {"use_ffn": False, "share_layers": True}),
            ("hamming-heads", {"classifier": "hamming", "embedding": "hamming"}),
        ],
        base_label="full-size",
    )
    return {"head-first": head_first, "decoder-first": decoder_first}
