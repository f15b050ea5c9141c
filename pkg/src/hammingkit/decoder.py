"""Forward-only lite decoder: masked self-attention, cross-attention, greedy loop.

This is the inference engine for sequence decoding on top of a Hamming head.
Each layer applies causal multi-head self-attention over the sequence built so
far, cross-attention into the encoder's feature rows, and an optional
position-wise feed-forward block; every sublayer is followed by a residual add
and layer normalization. There is no training path — weights are initialized
or loaded, never updated here.

Two storage-motivated switches shape the design: ``use_ffn=False`` removes the
feed-forward block entirely, and ``share_layers=True`` makes all layers read
the *same* parameter arrays, so the physical parameter count divides by the
layer count while the forward pass still runs the configured depth.

Sequence elements are embedded from their binary codes: bits map to ±1 and are
scaled by ``1/sqrt(width)``, so two embeddings' Euclidean distance is a
monotone function of their codes' Hamming distance (``2*sqrt(k/width)`` for
``k`` differing bits). No embedding table is stored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .bitcode import BitCode, unpack_bits
from .codebook import special_token_indices
from .errors import ContractViolation
from .validation import as_feature_matrix, require

_WEIGHTS_MAGIC = b"HODW"
_WEIGHTS_VERSION = 1
# magic, version, d, heads, layers, ffn_inner, max_len, flags
_WEIGHTS_HEADER = struct.Struct("<4sHIIIIIB")
_FLAG_USE_FFN = 1
_FLAG_SHARE_LAYERS = 2

LAYER_NORM_EPS = 1e-5

_ATTN_KEYS = (
    "self_q",
    "self_k",
    "self_v",
    "self_out",
    "cross_q",
    "cross_k",
    "cross_v",
    "cross_out",
)
_LN_KEYS = ("ln_self_scale", "ln_self_shift", "ln_cross_scale", "ln_cross_shift")
_FFN_KEYS = ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln_ffn_scale", "ln_ffn_shift")

LayerParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class DecoderConfig:
    """Architecture switches for the lite decoder."""

    d: int
    heads: int = 8
    layers: int = 3
    use_ffn: bool = False
    ffn_inner: int = 2048
    share_layers: bool = True
    max_len: int = 64

    def __post_init__(self) -> None:
        require(self.d >= 1, f"d must be >= 1, got {self.d}")
        require(self.heads >= 1, f"heads must be >= 1, got {self.heads}")
        require(
            self.d % self.heads == 0,
            f"d={self.d} must be divisible by heads={self.heads}",
        )
        require(self.layers >= 1, f"layers must be >= 1, got {self.layers}")
        require(self.ffn_inner >= 1, f"ffn_inner must be >= 1, got {self.ffn_inner}")
        require(self.max_len >= 1, f"max_len must be >= 1, got {self.max_len}")

    def layer_keys(self) -> tuple[str, ...]:
        keys = _ATTN_KEYS + _LN_KEYS
        return keys + _FFN_KEYS if self.use_ffn else keys


def _expected_shape(key: str, config: DecoderConfig) -> tuple[int, ...]:
    d, f = config.d, config.ffn_inner
    if key in _ATTN_KEYS:
        return (d, d)
    if key == "ffn_w1":
        return (d, f)
    if key == "ffn_b1":
        return (f,)
    if key == "ffn_w2":
        return (f, d)
    if key in ("ffn_b2", "ln_self_scale", "ln_self_shift", "ln_cross_scale",
               "ln_cross_shift", "ln_ffn_scale", "ln_ffn_shift"):
        return (d,)
    raise ContractViolation(f"unknown layer parameter {key!r}")


@dataclass(frozen=True)
class DecoderWeights:
    """Per-layer parameter dicts plus the config they instantiate.

    With ``config.share_layers`` every element of ``layers`` is the *same*
    dict object — mutating a shared array is visible at every depth, and the
    physical parameter count is one layer's worth.
    """

    config: DecoderConfig
    layers: tuple[LayerParams, ...]

    def __post_init__(self) -> None:
        require(
            len(self.layers) == self.config.layers,
            f"{len(self.layers)} layer dicts for {self.config.layers} layers",
        )
        if self.config.share_layers:
            require(
                all(layer is self.layers[0] for layer in self.layers),
                "share_layers requires every layer to reference the same parameters",
            )
        for layer in self.physical_layers():
            for key in self.config.layer_keys():
                require(key in layer, f"layer is missing parameter {key!r}")
                shape = _expected_shape(key, self.config)
                require(
                    layer[key].shape == shape,
                    f"parameter {key!r} has shape {layer[key].shape}, expected {shape}",
                )

    def physical_layers(self) -> tuple[LayerParams, ...]:
        """Distinct parameter dicts, in first-use order."""
        seen: dict[int, LayerParams] = {}
        for layer in self.layers:
            seen.setdefault(id(layer), layer)
        return tuple(seen.values())

    @classmethod
    def random(cls, config: DecoderConfig, seed: int) -> "DecoderWeights":
        """Draw ``N(0, 1/sqrt(fan_in))`` matrices; LN starts at identity."""
        rng = np.random.default_rng(seed)
        n_physical = 1 if config.share_layers else config.layers

        def one_layer() -> LayerParams:
            d, f = config.d, config.ffn_inner
            layer: LayerParams = {
                key: rng.standard_normal((d, d)) / np.sqrt(d) for key in _ATTN_KEYS
            }
            for key in _LN_KEYS:
                layer[key] = np.ones(d) if key.endswith("scale") else np.zeros(d)
            if config.use_ffn:
                layer["ffn_w1"] = rng.standard_normal((d, f)) / np.sqrt(d)
                layer["ffn_b1"] = np.zeros(f)
                layer["ffn_w2"] = rng.standard_normal((f, d)) / np.sqrt(f)
                layer["ffn_b2"] = np.zeros(d)
                layer["ln_ffn_scale"] = np.ones(d)
                layer["ln_ffn_shift"] = np.zeros(d)
            return layer

        physical = [one_layer() for _ in range(n_physical)]
        layers = tuple(physical[0] for _ in range(config.layers)) if config.share_layers else tuple(
            physical
        )
        return cls(config=config, layers=layers)


@dataclass(frozen=True)
class DecoderParameterCount:
    """Itemized parameter arithmetic for one decoder configuration."""

    attention_per_layer: int
    layer_norm_per_layer: int
    ffn_per_layer: int
    logical_layers: int
    physical_layers: int

    @property
    def per_layer_total(self) -> int:
        return self.attention_per_layer + self.layer_norm_per_layer + self.ffn_per_layer

    @property
    def logical_total(self) -> int:
        return self.per_layer_total * self.logical_layers

    @property
    def physical_total(self) -> int:
        return self.per_layer_total * self.physical_layers

    def physical_items(self) -> dict[str, int]:
        return {
            "attention": self.attention_per_layer * self.physical_layers,
            "layer_norm": self.layer_norm_per_layer * self.physical_layers,
            "ffn": self.ffn_per_layer * self.physical_layers,
        }


def count_parameters(config: DecoderConfig) -> DecoderParameterCount:
    """Parameter counts implied by ``config``.

    Attention contributes eight ``d x d`` matrices per layer (Q/K/V/output for
    self- and cross-attention). Each active sublayer carries one layer norm
    (scale + shift, ``2d``). The optional feed-forward block adds
    ``2*d*ffn_inner`` weights plus ``ffn_inner + d`` biases and its own norm.
    """
    d, f = config.d, config.ffn_inner
    attention = 8 * d * d
    norms = (3 if config.use_ffn else 2) * 2 * d
    ffn = (2 * d * f + f + d) if config.use_ffn else 0
    return DecoderParameterCount(
        attention_per_layer=attention,
        layer_norm_per_layer=norms,
        ffn_per_layer=ffn,
        logical_layers=config.layers,
        physical_layers=1 if config.share_layers else config.layers,
    )


# ---------------------------------------------------------------------------
# Forward math


def layer_norm(
    x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = LAYER_NORM_EPS
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * scale + shift


def scaled_dot_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None
) -> np.ndarray:
    """Single-head attention: softmax(q k^T / sqrt(d_k)) v.

    ``mask`` is boolean ``(n_q, n_k)`` with True marking *visible* keys; a
    masked key receives exactly zero weight. Every query must see at least
    one key.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    require(q.ndim == 2 and k.ndim == 2 and v.ndim == 2, "q, k, v must be 2-D")
    require(q.shape[1] == k.shape[1], "q and k disagree on key dim")
    require(k.shape[0] == v.shape[0], "k and v disagree on row count")
    logits = q @ k.T / np.sqrt(q.shape[1])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        require(mask.shape == logits.shape, f"mask must be {logits.shape}, got {mask.shape}")
        require(bool(mask.any(axis=1).all()), "a query row is fully masked")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def multi_head_attention(
    x_q: np.ndarray,
    x_kv: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    w_out: np.ndarray,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Multi-head attention over pre-projected inputs.

    Queries come from ``x_q``, keys/values from ``x_kv``; the model dim is
    split evenly across heads and head outputs are concatenated before the
    output projection.
    """
    d = x_q.shape[1]
    require(d % n_heads == 0, f"model dim {d} not divisible by {n_heads} heads")
    head_dim = d // n_heads
    q = x_q @ w_q
    k = x_kv @ w_k
    v = x_kv @ w_v
    pieces = []
    for h in range(n_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        pieces.append(scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl], mask))
    return np.concatenate(pieces, axis=1) @ w_out


@dataclass(frozen=True)
class SequenceState:
    """Inputs to one forward pass: target rows, encoder rows, causal mask."""

    y: np.ndarray
    encoder: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=np.float64)
        enc = np.asarray(self.encoder, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        require(y.ndim == 2 and y.shape[0] >= 1, "y must be (T, d) with T >= 1")
        require(enc.ndim == 2 and enc.shape[0] >= 1, "encoder must be (S, d) with S >= 1")
        require(y.shape[1] == enc.shape[1], "y and encoder disagree on model dim")
        t = y.shape[0]
        require(
            mask.shape == (t, t) and bool(np.array_equal(mask, np.tril(np.ones((t, t), bool)))),
            "mask must be lower-triangular: position t sees positions <= t only",
        )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "encoder", enc)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def causal(cls, y: np.ndarray, encoder: np.ndarray) -> "SequenceState":
        t = np.asarray(y).shape[0]
        return cls(y=y, encoder=encoder, mask=np.tril(np.ones((t, t), dtype=bool)))


def _attend_row(
    q_row: np.ndarray, keys: np.ndarray, values: np.ndarray, n_heads: int
) -> np.ndarray:
    """Multi-head attention for one query row over its visible keys."""
    d = q_row.shape[0]
    head_dim = d // n_heads
    pieces = []
    for h in range(n_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        logits = keys[:, sl] @ q_row[sl] / np.sqrt(head_dim)
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        pieces.append(weights @ values[:, sl])
    return np.concatenate(pieces)


def _rows_matvec(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-by-row ``x @ w``; each row's result never depends on the row count."""
    return np.stack([x[i] @ w for i in range(x.shape[0])], axis=0)


def decoder_layer_forward(
    state: SequenceState, layer: LayerParams, config: DecoderConfig
) -> np.ndarray:
    """One layer: masked self-attention, cross-attention, optional FFN.

    Each sublayer output is added to its input and layer-normalized. All
    position-mixing work is evaluated per position over that position's
    visible keys, so position ``t``'s output is a function of positions
    ``<= t`` alone — appending rows later reproduces earlier outputs bit for
    bit, not merely approximately.
    """
    y = state.y
    t = y.shape[0]

    q = _rows_matvec(y, layer["self_q"])
    k = _rows_matvec(y, layer["self_k"])
    v = _rows_matvec(y, layer["self_v"])
    attended = np.stack(
        [
            _attend_row(q[i], k[state.mask[i]], v[state.mask[i]], config.heads)
            @ layer["self_out"]
            for i in range(t)
        ]
    )
    y = layer_norm(y + attended, layer["ln_self_scale"], layer["ln_self_shift"])

    k_enc = state.encoder @ layer["cross_k"]
    v_enc = state.encoder @ layer["cross_v"]
    q = _rows_matvec(y, layer["cross_q"])
    attended = np.stack(
        [
            _attend_row(q[i], k_enc, v_enc, config.heads) @ layer["cross_out"]
            for i in range(t)
        ]
    )
    y = layer_norm(y + attended, layer["ln_cross_scale"], layer["ln_cross_shift"])

    if config.use_ffn:
        hidden = np.stack(
            [
                np.maximum(0.0, y[i] @ layer["ffn_w1"] + layer["ffn_b1"]) @ layer["ffn_w2"]
                + layer["ffn_b2"]
                for i in range(t)
            ]
        )
        y = layer_norm(y + hidden, layer["ln_ffn_scale"], layer["ln_ffn_shift"])
    return y


def decoder_forward(state: SequenceState, weights: DecoderWeights) -> np.ndarray:
    """Run every configured layer; returns the final ``(T, d)`` rows."""
    config = weights.config
    require(state.y.shape[1] == config.d, f"state dim {state.y.shape[1]} != config.d {config.d}")
    require(
        state.y.shape[0] <= config.max_len,
        f"sequence length {state.y.shape[0]} exceeds max_len {config.max_len}",
    )
    y = state.y
    for layer in weights.layers:
        y = decoder_layer_forward(
            SequenceState(y=y, encoder=state.encoder, mask=state.mask), layer, config
        )
    return y


# ---------------------------------------------------------------------------
# Embeddings and positions


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    """Fixed sin/cos position rows, shape ``(length, d)``."""
    require(length >= 1, f"length must be >= 1, got {length}")
    require(d >= 2, f"position encoding needs d >= 2, got {d}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    freq_index = np.arange(0, d, 2, dtype=np.float64)
    inv_freq = np.power(10000.0, -freq_index / d)
    angles = positions * inv_freq[None, :]
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)[:, : d // 2]
    return out


def embed_codes(
    packed: np.ndarray, width: int, projection: np.ndarray | None = None
) -> np.ndarray:
    """Embed packed codes as rows of ±1 scaled by ``1/sqrt(width)``.

    With ``projection`` (a ``(width, d)`` matrix) the ±1 rows are projected
    instead, which is the escape hatch when the code width differs from the
    model dim.
    """
    arr = np.atleast_2d(np.asarray(packed, dtype=np.uint8))
    signs = unpack_bits(arr, width).astype(np.float64) * 2.0 - 1.0
    if projection is None:
        return signs / np.sqrt(width)
    projection = np.asarray(projection, dtype=np.float64)
    require(
        projection.ndim == 2 and projection.shape[0] == width,
        f"projection must be ({width}, d), got {projection.shape}",
    )
    return signs @ projection


def hamming_embed(code: BitCode, d: int) -> np.ndarray:
    """Embedding of one code when the code width equals the model dim."""
    require(
        code.width == d,
        f"code width {code.width} != model dim {d}; use an embedding projection",
    )
    return embed_codes(code.packed[None, :], code.width)[0]


def embedding_projection(width: int, d: int, seed: int) -> np.ndarray:
    """Seeded random ``(width, d)`` map for mismatched code width / model dim.

    Entries are ``N(0, 1/width)`` so projected embeddings keep unit-scale
    coordinates.
    """
    require(width >= 1 and d >= 1, "width and d must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((width, d)) / np.sqrt(width)


# ---------------------------------------------------------------------------
# Greedy decoding


def greedy_decode(
    encoder_features: np.ndarray,
    weights: DecoderWeights,
    head: Any,
    max_steps: int,
    *,
    embed_projection: np.ndarray | None = None,
) -> list[int]:
    """Autoregressive greedy decode; returns emitted class indices.

    The sequence starts from the codebook's start token. At each step the
    final position's output row is classified by ``head`` (a fitted
    :class:`~hammingkit.heads.HammingClassifier`), with the start and padding
    codes excluded from the search; emitting the end code stops decoding.
    Decoding also stops when the sequence reaches ``config.max_len`` rows or
    after ``max_steps`` emissions, whichever comes first.
    """
    require(max_steps >= 0, f"max_steps must be >= 0, got {max_steps}")
    config = weights.config
    enc = as_feature_matrix(encoder_features, dim=config.d, name="encoder_features")
    book = getattr(head, "codebook", None)
    require(book is not None, "head must carry the codebook it decodes into")
    specials = special_token_indices(book)
    require(
        specials is not None,
        "codebook has no start/end/pad tokens; apply add_special_tokens first",
    )
    if embed_projection is None:
        require(
            book.width == config.d,
            f"code width {book.width} != model dim {config.d}; pass embed_projection",
        )
    positions = sinusoidal_positions(config.max_len, config.d)

    sequence = [book.packed[specials["start"]]]
    emitted: list[int] = []
    for _ in range(max_steps):
        if len(sequence) >= config.max_len:
            break
        stacked = np.stack(sequence, axis=0)
        y = embed_codes(stacked, book.width, embed_projection) + positions[: len(sequence)]
        state = SequenceState.causal(y, enc)
        last_row = decoder_forward(state, weights)[-1]
        indices, _ = head.decode(
            last_row[None, :], exclude=(specials["start"], specials["pad"])
        )
        predicted = int(indices[0])
        if predicted == specials["end"]:
            break
        emitted.append(predicted)
        sequence.append(book.packed[predicted])
    return emitted


# ---------------------------------------------------------------------------
# Weight container format


def save_weights(weights: DecoderWeights, path: str | Path) -> None:
    """Write decoder weights in the binary container format.

    Layout: magic ``HODW``, version ``u16``, then the config as little-endian
    integers (``d``, ``heads``, ``layers``, ``ffn_inner``, ``max_len``) and a
    flag byte (bit 0 = use_ffn, bit 1 = share_layers), followed by each
    physical layer's parameters as row-major float32 in a fixed key order.
    """
    config = weights.config
    flags = (_FLAG_USE_FFN if config.use_ffn else 0) | (
        _FLAG_SHARE_LAYERS if config.share_layers else 0
    )
    parts = [
        _WEIGHTS_HEADER.pack(
            _WEIGHTS_MAGIC,
            _WEIGHTS_VERSION,
            config.d,
            config.heads,
            config.layers,
            config.ffn_inner,
            config.max_len,
            flags,
        )
    ]
    for layer in weights.physical_layers():
        for key in config.layer_keys():
            parts.append(layer[key].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path: str | Path) -> DecoderWeights:
    """Read weights written by :func:`save_weights` (float32 precision)."""
    path = Path(path)
    blob = path.read_bytes()
    require(len(blob) >= _WEIGHTS_HEADER.size, f"{path} is too short to be a weights container")
    magic, version, d, heads, layers, ffn_inner, max_len, flags = _WEIGHTS_HEADER.unpack_from(blob)
    require(magic == _WEIGHTS_MAGIC, f"{path} has magic {magic!r}, expected {_WEIGHTS_MAGIC!r}")
    require(version == _WEIGHTS_VERSION, f"{path} has unsupported version {version}")
    config = DecoderConfig(
        d=d,
        heads=heads,
        layers=layers,
        use_ffn=bool(flags & _FLAG_USE_FFN),
        ffn_inner=ffn_inner,
        share_layers=bool(flags & _FLAG_SHARE_LAYERS),
        max_len=max_len,
    )
    offset = _WEIGHTS_HEADER.size
    n_physical = 1 if config.share_layers else config.layers
    physical: list[LayerParams] = []
    for _ in range(n_physical):
        layer: LayerParams = {}
        for key in config.layer_keys():
            shape = _expected_shape(key, config)
            count = int(np.prod(shape))
            require(
                offset + count * 4 <= len(blob),
                f"{path} truncated inside parameter {key!r}",
            )
            flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            layer[key] = flat.reshape(shape).astype(np.float64)
            offset += count * 4
        physical.append(layer)
    require(offset == len(blob), f"{path} has {len(blob) - offset} trailing bytes")
    layer_seq = (
        tuple(physical[0] for _ in range(config.layers))
        if config.share_layers
        else tuple(physical)
    )
    return DecoderWeights(config=config, layers=layer_seq)
