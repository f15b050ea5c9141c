"""Compact classification via binary codes.

The package replaces a wide softmax output layer (and, for sequence models,
the matching embedding table) with a bit-packed codebook: classes live at
binary codes, features are classified bit by bit, and prediction is a
nearest-code search in Hamming space. Modules:

- :mod:`~hammingkit.bitcode` — packed codes, distances, exhaustive search,
  codebook files
- :mod:`~hammingkit.codebook` — feature banks, sign-projection codes,
  majority vote, conflicts
- :mod:`~hammingkit.heads` — trainable heads (Hamming, softmax, factorized
  softmax)
- :mod:`~hammingkit.decoder` — forward-only lite decoder and greedy decoding
- :mod:`~hammingkit.sizing` — storage arithmetic and reference ladders
- :mod:`~hammingkit.harness` — seeded synthetic experiments and reports
"""

from .bitcode import (
    BitCode,
    Codebook,
    CodeSearchResult,
    batch_nearest,
    hamming_distance,
    nearest_code,
    read_codebook,
    top_k_neighbors,
    write_codebook,
)
from .codebook import (
    FeatureBank,
    ProjectionMatrix,
    add_special_tokens,
    build_codebook,
    detect_conflicts,
    lsh_project,
    majority_vote,
    random_codebook,
    read_feature_bank,
    write_feature_bank,
)
from .decoder import (
    DecoderConfig,
    DecoderWeights,
    SequenceState,
    count_parameters,
    decoder_forward,
    greedy_decode,
    hamming_embed,
    load_weights,
    save_weights,
    scaled_dot_attention,
)
from .errors import ContractViolation, DivergenceError
from .harness import (
    SyntheticBankSpec,
    bench_search,
    generate_bank,
    load_report,
    run_two_stage,
    save_report,
    sweep_code_length,
)
from .heads import (
    FactorizedSoftmax,
    HammingClassifier,
    SoftmaxRegression,
    TrainConfig,
    hinge_grad,
    hinge_loss,
    load_classifier,
    save_classifier,
)
from .sizing import (
    ModelConfig,
    SizeReport,
    codebook_bytes,
    hamming_head_bytes,
    head_size_crossover,
    ladder_report,
    large_reference_chains,
    mobile_reference_ladder,
    model_size_report,
    softmax_head_bytes,
)

__version__ = "0.1.0"

__all__ = [
    "BitCode",
    "Codebook",
    "CodeSearchResult",
    "ContractViolation",
    "DecoderConfig",
    "DecoderWeights",
    "DivergenceError",
    "FactorizedSoftmax",
    "FeatureBank",
    "HammingClassifier",
    "ModelConfig",
    "ProjectionMatrix",
    "SequenceState",
    "SizeReport",
    "SoftmaxRegression",
    "SyntheticBankSpec",
    "TrainConfig",
    "add_special_tokens",
    "batch_nearest",
    "bench_search",
    "build_codebook",
    "codebook_bytes",
    "count_parameters",
    "decoder_forward",
    "detect_conflicts",
    "generate_bank",
    "greedy_decode",
    "hamming_distance",
    "hamming_embed",
    "hamming_head_bytes",
    "head_size_crossover",
    "hinge_grad",
    "hinge_loss",
    "ladder_report",
    "large_reference_chains",
    "load_classifier",
    "load_report",
    "load_weights",
    "lsh_project",
    "majority_vote",
    "mobile_reference_ladder",
    "model_size_report",
    "nearest_code",
    "random_codebook",
    "read_codebook",
    "read_feature_bank",
    "run_two_stage",
    "save_classifier",
    "save_report",
    "save_weights",
    "scaled_dot_attention",
    "softmax_head_bytes",
    "sweep_code_length",
    "top_k_neighbors",
    "write_codebook",
    "write_feature_bank",
]
