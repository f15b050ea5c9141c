"""Classification heads: a bit-wise Hamming head and softmax baselines.

The Hamming head replaces a ``dim x n_classes`` softmax layer with a
``dim x code_width`` matrix of independent linear bit classifiers. Bit ``k``
of a feature's predicted code is 1 exactly when column ``k``'s score is
strictly positive — the same sign convention the codebook module uses — and
decoding maps the predicted code to the nearest codebook entry. Training
minimizes a two-sided hinge: a bit whose target is 1 is pushed above ``+margin``,
a bit whose target is 0 below ``-margin``, and scores already past their
margin contribute nothing (and receive zero gradient).

Heads follow the scikit-learn estimator protocol (``fit`` / ``predict`` /
``get_params``); the plain-array loss and gradient functions underneath are
exposed for direct use and for verification against numerical gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .bitcode import (
    BitCode,
    Codebook,
    batch_nearest,
    codebook_from_bytes,
    codebook_to_bytes,
    pack_bits,
    unpack_bits,
)
from .codebook import projection_from_provenance
from .errors import ContractViolation, DivergenceError
from .validation import as_label_vector, require

_HEAD_MAGIC = b"HOCL"
_HEAD_VERSION = 1
_HEAD_HEADER = struct.Struct("<4sHIId")  # magic, version, dim, width, margin

#: Relative improvement in epoch-mean loss below which the learning rate is
#: multiplied by the decay factor.
DECAY_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# Plain-array math


def bit_scores(weights: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Per-bit linear scores, shape ``(n, code_width)``."""
    return np.asarray(X, dtype=np.float64) @ np.asarray(weights, dtype=np.float64)


def bits_from_scores(scores: np.ndarray) -> np.ndarray:
    """Apply the sign convention: bit = 1 iff score strictly positive."""
    return (np.asarray(scores) > 0.0).astype(np.uint8)


def classify_bits(weights: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Packed predicted codes for feature rows, shape ``(n, bytes)``."""
    return pack_bits(bits_from_scores(bit_scores(weights, X)))


def hinge_loss(
    weights: np.ndarray, X: np.ndarray, target_bits: np.ndarray, margin: float
) -> float:
    """Two-sided hinge loss, summed over bits and averaged over samples.

    ``target_bits`` is an ``(n, code_width)`` 0/1 array. Each element
    contributes ``max(0, margin - sign * score)`` where ``sign`` is +1 for a
    1-bit and -1 for a 0-bit.
    """
    require(margin > 0.0, f"margin must be > 0, got {margin}")
    scores = bit_scores(weights, X)
    targets = np.asarray(target_bits, dtype=np.float64)
    require(targets.shape == scores.shape, "target_bits must match (n_samples, code_width)")
    signs = 2.0 * targets - 1.0
    per_element = np.maximum(0.0, margin - signs * scores)
    return float(per_element.sum(axis=1).mean())


def hinge_grad(
    weights: np.ndarray, X: np.ndarray, target_bits: np.ndarray, margin: float
) -> np.ndarray:
    """Exact subgradient of :func:`hinge_loss` with respect to ``weights``.

    Elements sitting exactly on the hinge kink take the zero branch, matching
    the strict inequality in the loss's active set.
    """
    require(margin > 0.0, f"margin must be > 0, got {margin}")
    X = np.asarray(X, dtype=np.float64)
    scores = bit_scores(weights, X)
    targets = np.asarray(target_bits, dtype=np.float64)
    require(targets.shape == scores.shape, "target_bits must match (n_samples, code_width)")
    signs = 2.0 * targets - 1.0
    active = (margin - signs * scores) > 0.0
    dscores = np.where(active, -signs, 0.0)
    return X.T @ dscores / X.shape[0]


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stabilized."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log-likelihood of the true classes."""
    probs = softmax_probs(logits)
    n = probs.shape[0]
    picked = probs[np.arange(n), np.asarray(y, dtype=np.int64)]
    return float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean())


def cross_entropy_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy_loss` with respect to the logits."""
    probs = softmax_probs(logits)
    n = probs.shape[0]
    grad = probs
    grad[np.arange(n), np.asarray(y, dtype=np.int64)] -= 1.0
    return grad / n


def factorized_param_count(dim: int, bottleneck: int, n_classes: int) -> int:
    """Parameters in a rank-limited head: ``dim*bottleneck + bottleneck*n_classes``."""
    require(dim >= 1 and bottleneck >= 1 and n_classes >= 1, "sizes must be >= 1")
    return dim * bottleneck + bottleneck * n_classes


# ---------------------------------------------------------------------------
# Optimizer and epoch loop


class _Adam:
    """Adaptive-moment optimizer over a list of parameter arrays (in place)."""

    def __init__(
        self,
        params: list[np.ndarray],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = [np.zeros_like(p) for p in params]
        self._v = [np.zeros_like(p) for p in params]
        self._t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self._t += 1
        b1t = 1.0 - self.beta1**self._t
        b2t = 1.0 - self.beta2**self._t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for minibatch training, shared by all heads."""

    learning_rate: float = 1e-3
    decay_rate: float = 0.5
    optimizer: str = "adam"
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        # A zero learning rate is allowed: it is the documented way to run
        # the loop as a no-op (weights must come out unchanged).
        require(self.learning_rate >= 0.0, f"learning_rate must be >= 0, got {self.learning_rate}")
        require(0.0 < self.decay_rate <= 1.0, f"decay_rate must be in (0, 1], got {self.decay_rate}")
        require(self.optimizer == "adam", f"unsupported optimizer {self.optimizer!r}")
        require(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        require(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")

    def estimator_params(self) -> dict[str, float | int | str]:
        return {
            "learning_rate": self.learning_rate,
            "decay_rate": self.decay_rate,
            "optimizer": self.optimizer,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
        }


def _run_epochs(
    params: list[np.ndarray],
    batch_fn: Callable[[np.ndarray], tuple[float, list[np.ndarray]]],
    n_samples: int,
    config: TrainConfig,
    stage: str,
) -> list[tuple[int, float, float]]:
    """Shuffled minibatch epochs with plateau-triggered learning-rate decay.

    ``batch_fn`` maps a row-index array to ``(mean batch loss, grads)``.
    Returns one ``(epoch, mean_loss, learning_rate)`` row per epoch, where the
    learning rate is the one in effect during that epoch. The rate is
    multiplied by ``decay_rate`` whenever the epoch-mean loss fails to improve
    on the best seen so far by at least ``DECAY_TOLERANCE`` relatively.
    """
    rng = np.random.default_rng(config.seed)
    adam = _Adam(params, config.learning_rate)
    history: list[tuple[int, float, float]] = []
    best = np.inf
    for epoch in range(1, config.epochs + 1):
        lr_in_effect = adam.learning_rate
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = batch_fn(idx)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"{stage} loss became non-finite at epoch {epoch}", epoch=epoch
                )
            adam.step(grads)
            total += loss * idx.shape[0]
        mean_loss = total / n_samples
        history.append((epoch, float(mean_loss), float(lr_in_effect)))
        improvement = (best - mean_loss) / max(abs(best), np.finfo(np.float64).tiny)
        if np.isfinite(best) and improvement < DECAY_TOLERANCE:
            adam.learning_rate *= config.decay_rate
        best = min(best, mean_loss)
    return history


def write_loss_history(history: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    """Write per-epoch losses as ``epoch,mean_loss,lr`` CSV."""
    lines = ["epoch,mean_loss,lr"]
    lines += [f"{epoch},{loss!r},{lr!r}" for epoch, loss, lr in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_history(path: str | Path) -> list[tuple[int, float, float]]:
    """Read a CSV written by :func:`write_loss_history`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    require(lines and lines[0] == "epoch,mean_loss,lr", f"{path} is not a loss history CSV")
    out = []
    for line in lines[1:]:
        epoch, loss, lr = line.split(",")
        out.append((int(epoch), float(loss), float(lr)))
    return out


# ---------------------------------------------------------------------------
# Estimators


class HammingClassifier(ClassifierMixin, BaseEstimator):
    """Bit-wise linear head decoded by nearest-code search.

    Parameters
    ----------
    codebook:
        The :class:`~hammingkit.bitcode.Codebook` the head classifies into.
        Class indices in ``y`` refer to rows of this book.
    margin:
        Hinge margin; scores are pushed beyond ``+margin`` / ``-margin``.
    init:
        ``"auto"`` starts from the hyperplane bank recorded in the codebook's
        provenance when available (so the head initially reproduces the
        codebook construction), ``"random"`` always draws fresh
        ``N(0, 1/sqrt(dim))`` weights, and an explicit ``(dim, width)`` array
        is used as-is.
    """

    def __init__(
        self,
        codebook: Codebook | None = None,
        margin: float = 1.0,
        learning_rate: float = 1e-3,
        decay_rate: float = 0.5,
        optimizer: str = "adam",
        batch_size: int = 64,
        epochs: int = 30,
        seed: int = 0,
        init: str | np.ndarray = "auto",
    ) -> None:
        self.codebook = codebook
        self.margin = margin
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.init = init

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            decay_rate=self.decay_rate,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )

    def _initial_weights(self, dim: int, width: int) -> np.ndarray:
        if isinstance(self.init, np.ndarray):
            require(
                self.init.shape == (dim, width),
                f"init array must be ({dim}, {width}), got {self.init.shape}",
            )
            return np.array(self.init, dtype=np.float64)
        require(self.init in ("auto", "random"), f"unknown init {self.init!r}")
        if self.init == "auto":
            projection = projection_from_provenance(self.codebook)
            if projection is not None and projection.dim == dim:
                return np.array(projection.entries, dtype=np.float64)
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((dim, width)) / np.sqrt(dim)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "HammingClassifier":
        require(self.codebook is not None, "HammingClassifier needs a codebook to fit")
        require(self.margin > 0.0, f"margin must be > 0, got {self.margin}")
        config = self._train_config()
        X = check_array(X, dtype=np.float64)
        y = as_label_vector(y, n_classes=len(self.codebook))
        require(y.shape[0] == X.shape[0], "X and y disagree on sample count")

        book = self.codebook
        code_bits = unpack_bits(book.packed, book.width).astype(np.float64)
        dim, width = X.shape[1], book.width
        weights = self._initial_weights(dim, width)

        def batch(idx: np.ndarray) -> tuple[float, list[np.ndarray]]:
            Xb, tb = X[idx], code_bits[y[idx]]
            loss = hinge_loss(weights, Xb, tb, self.margin)
            return loss, [hinge_grad(weights, Xb, tb, self.margin)]

        self.loss_history_ = _run_epochs(
            [weights], batch, X.shape[0], config, stage="hamming-head"
        )
        self.weights_ = weights
        self.classes_ = np.arange(len(book))
        self.n_features_in_ = dim
        return self

    def classify_bits(self, X: np.ndarray) -> np.ndarray:
        """Packed predicted codes, one row per sample."""
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        require(X.shape[1] == self.n_features_in_, "feature dim mismatch")
        return classify_bits(self.weights_, X)

    def classify_code(self, h: np.ndarray) -> BitCode:
        """Predicted code of a single feature vector."""
        packed = self.classify_bits(np.asarray(h, dtype=np.float64)[None, :])
        return BitCode(width=self.codebook.width, packed=packed[0])

    def decode(
        self, X: np.ndarray, exclude: Sequence[int] = (), workers: int = 1
    ) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-code class indices and distances for feature rows."""
        packed = self.classify_bits(X)
        return batch_nearest(packed, self.codebook, workers=workers, exclude=exclude)

    def predict(self, X: np.ndarray) -> np.ndarray:
        indices, _ = self.decode(X)
        return indices


class SoftmaxRegression(ClassifierMixin, BaseEstimator):
    """Dense linear softmax head trained with cross-entropy.

    This is both the first-stage model of the two-stage protocol and the
    storage baseline the Hamming head is measured against.
    """

    def __init__(
        self,
        n_classes: int | None = None,
        use_bias: bool = False,
        learning_rate: float = 1e-3,
        decay_rate: float = 0.5,
        optimizer: str = "adam",
        batch_size: int = 64,
        epochs: int = 30,
        seed: int = 0,
    ) -> None:
        self.n_classes = n_classes
        self.use_bias = use_bias
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, X: np.ndarray, y: np.ndarray) -> "SoftmaxRegression":
        config = TrainConfig(
            learning_rate=self.learning_rate,
            decay_rate=self.decay_rate,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )
        X = check_array(X, dtype=np.float64)
        y = as_label_vector(y, n_classes=self.n_classes)
        require(y.shape[0] == X.shape[0], "X and y disagree on sample count")
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        require(n_classes >= 2, "need at least two classes")

        dim = X.shape[1]
        rng = np.random.default_rng(self.seed)
        weights = rng.standard_normal((dim, n_classes)) / np.sqrt(dim)
        bias = np.zeros(n_classes)
        params = [weights, bias] if self.use_bias else [weights]

        def batch(idx: np.ndarray) -> tuple[float, list[np.ndarray]]:
            Xb, yb = X[idx], y[idx]
            logits = Xb @ weights + (bias if self.use_bias else 0.0)
            loss = cross_entropy_loss(logits, yb)
            dlogits = cross_entropy_grad(logits, yb)
            grads = [Xb.T @ dlogits]
            if self.use_bias:
                grads.append(dlogits.sum(axis=0))
            return loss, grads

        self.loss_history_ = _run_epochs(params, batch, X.shape[0], config, stage="softmax-head")
        self.weights_ = weights
        self.bias_ = bias if self.use_bias else None
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = dim
        return self

    def logits(self, X: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        require(X.shape[1] == self.n_features_in_, "feature dim mismatch")
        out = X @ self.weights_
        if self.bias_ is not None:
            out = out + self.bias_
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax_probs(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)


class FactorizedSoftmax(ClassifierMixin, BaseEstimator):
    """Softmax head with a rank ``bottleneck`` factorization of the weight matrix.

    Logits are ``X @ W_in @ W_out`` with ``W_in: (dim, bottleneck)`` and
    ``W_out: (bottleneck, n_classes)``; parameter count drops from
    ``dim * n_classes`` to ``dim*bottleneck + bottleneck*n_classes``.
    """

    def __init__(
        self,
        bottleneck: int = 64,
        n_classes: int | None = None,
        learning_rate: float = 1e-3,
        decay_rate: float = 0.5,
        optimizer: str = "adam",
        batch_size: int = 64,
        epochs: int = 30,
        seed: int = 0,
    ) -> None:
        self.bottleneck = bottleneck
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, X: np.ndarray, y: np.ndarray) -> "FactorizedSoftmax":
        require(self.bottleneck >= 1, f"bottleneck must be >= 1, got {self.bottleneck}")
        config = TrainConfig(
            learning_rate=self.learning_rate,
            decay_rate=self.decay_rate,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )
        X = check_array(X, dtype=np.float64)
        y = as_label_vector(y, n_classes=self.n_classes)
        require(y.shape[0] == X.shape[0], "X and y disagree on sample count")
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        require(n_classes >= 2, "need at least two classes")

        dim = X.shape[1]
        rng = np.random.default_rng(self.seed)
        w_in = rng.standard_normal((dim, self.bottleneck)) / np.sqrt(dim)
        w_out = rng.standard_normal((self.bottleneck, n_classes)) / np.sqrt(self.bottleneck)

        def batch(idx: np.ndarray) -> tuple[float, list[np.ndarray]]:
            Xb, yb = X[idx], y[idx]
            hidden = Xb @ w_in
            logits = hidden @ w_out
            loss = cross_entropy_loss(logits, yb)
            dlogits = cross_entropy_grad(logits, yb)
            return loss, [Xb.T @ (dlogits @ w_out.T), hidden.T @ dlogits]

        self.loss_history_ = _run_epochs(
            [w_in, w_out], batch, X.shape[0], config, stage="factorized-head"
        )
        self.weights_in_ = w_in
        self.weights_out_ = w_out
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = dim
        return self

    def logits(self, X: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "weights_in_")
        X = check_array(X, dtype=np.float64)
        require(X.shape[1] == self.n_features_in_, "feature dim mismatch")
        return X @ self.weights_in_ @ self.weights_out_

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax_probs(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def param_count(self) -> int:
        check_is_fitted(self, "weights_in_")
        return factorized_param_count(
            self.n_features_in_, self.bottleneck, int(self.weights_out_.shape[1])
        )


# ---------------------------------------------------------------------------
# Head container format


def save_classifier(clf: HammingClassifier, path: str | Path) -> None:
    """Write a fitted Hamming head and its codebook in one binary container.

    Layout: magic ``HOCL``, version ``u16``, feature dim ``u32``, code width
    ``u32``, margin ``f64``, the weight matrix as row-major float32, then the
    embedded codebook container (all little-endian).
    """
    check_is_fitted(clf, "weights_")
    require(clf.codebook is not None, "classifier has no codebook to save")
    dim, width = clf.weights_.shape
    require(width == clf.codebook.width, "weights and codebook disagree on code width")
    header = _HEAD_HEADER.pack(_HEAD_MAGIC, _HEAD_VERSION, dim, width, float(clf.margin))
    payload = clf.weights_.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload + codebook_to_bytes(clf.codebook))


def load_classifier(path: str | Path) -> HammingClassifier:
    """Read a head written by :func:`save_classifier`, ready to predict.

    Weights round-trip through float32, so scores may differ from the
    original float64 head at that precision.
    """
    path = Path(path)
    blob = path.read_bytes()
    require(len(blob) >= _HEAD_HEADER.size, f"{path} is too short to be a head container")
    magic, version, dim, width, margin = _HEAD_HEADER.unpack_from(blob)
    require(magic == _HEAD_MAGIC, f"{path} has magic {magic!r}, expected {_HEAD_MAGIC!r}")
    require(version == _HEAD_VERSION, f"{path} has unsupported version {version}")
    w_bytes = dim * width * 4
    require(
        len(blob) >= _HEAD_HEADER.size + w_bytes,
        f"{path} truncated inside the weight matrix",
    )
    weights = np.frombuffer(blob, dtype="<f4", count=dim * width, offset=_HEAD_HEADER.size)
    book = codebook_from_bytes(blob[_HEAD_HEADER.size + w_bytes :], source=str(path))
    require(book.width == width, f"{path}: embedded codebook width differs from header")

    clf = HammingClassifier(codebook=book, margin=float(margin))
    clf.weights_ = weights.reshape(dim, width).astype(np.float64)
    clf.classes_ = np.arange(len(book))
    clf.n_features_in_ = int(dim)
    clf.loss_history_ = []
    return clf
