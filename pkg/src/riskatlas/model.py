"""Conditional-probability estimator: linear softmax trained by SGD.

The estimator maps a length-D covariate vector to a probability vector
over the C catalogued species. Anything exposing ``predict_proba_batch``
and the ``n_features`` / ``n_classes`` attributes can stand in for the
reference implementation downstream.

Logits are accumulated dimension-by-dimension in a fixed order, so a
prediction for one point is bit-identical no matter which batch carries
it. Map inference relies on that to stay reproducible across batch and
worker configurations.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

MODEL_MAGIC = b"RATLASM1"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class ModelFormatError(ValueError):
    """Model file is not in the expected binary container format."""


def softmax(logits):
    """Numerically stable softmax along the last axis.

    Parameters
    ----------
    logits : ndarray
        Finite logits, any leading shape, classes on the last axis.

    Returns
    -------
    ndarray
        Positive values summing to 1 along the last axis.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expz = np.exp(shifted)
    return expz / expz.sum(axis=-1, keepdims=True)


def linear_logits(features, weights, bias):
    """Affine logits with a fixed accumulation order.

    Accumulates ``bias + sum_d features[:, d] * weights[d]`` one input
    dimension at a time. Each output element is produced by the same
    scalar operation sequence regardless of batch size, which keeps the
    bits stable when the same point is evaluated in different batches
    (a BLAS matmul would not guarantee that).
    """
    features = np.asarray(features, dtype=np.float64)
    z = np.broadcast_to(bias, (features.shape[0], bias.shape[0])).copy()
    for d in range(weights.shape[0]):
        z += features[:, d, None] * weights[d]
    return z


def nll_loss(true_index, probabilities):
    """Negative log-likelihood of the true class, floored at 1e-12.

    Returns ``(loss, clamped)`` where ``clamped`` flags that the floor
    was applied (the probability was below 1e-12).
    """
    p = float(probabilities[true_index])
    clamped = p < PROB_FLOOR
    return -np.log(max(p, PROB_FLOOR)), clamped


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for :func:`train`.

    ``loss`` selects plain cross-entropy or the margin-rebalanced
    variant; with the margin variant, per-class margins shrink the true
    class logit by ``margin / n_k**0.25`` and inverse-frequency sample
    weights switch on at ``reweight_start_epoch`` (1-based).
    """

    learning_rate: float = 0.01
    decay_epochs: tuple = (50, 65)
    decay_factor: float = 0.1
    epochs: int = 80
    batch_size: int = 128
    seed: int = 0
    loss: str = "cross-entropy"  # or "margin-rebalanced"
    margin: float = 0.5
    reweight_start_epoch: int = 65

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay factor must be in (0, 1]")
        if self.loss not in ("cross-entropy", "margin-rebalanced"):
            raise ValueError(f"unknown loss variant {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class SoftmaxModel:
    """Linear softmax estimator with frozen standardization statistics.

    ``weights`` is D x C, ``bias`` length C. Features are z-scored with
    ``mean``/``scale`` (fitted on the training split) before the affine
    map. ``species_names`` aligns output columns with catalog ids.
    """

    weights: np.ndarray  # (D, C) float64
    bias: np.ndarray  # (C,) float64
    mean: np.ndarray  # (D,) float64
    scale: np.ndarray  # (D,) float64
    species_names: tuple
    train_config: TrainConfig | None = None

    def __post_init__(self):
        if self.weights.shape != (self.n_features, self.n_classes):
            raise ValueError("weights shape does not match bias/mean")
        for arr in (self.weights, self.bias, self.mean, self.scale):
            if not np.all(np.isfinite(arr)):
                raise ValueError("model parameters must be finite")

    @property
    def n_features(self):
        return self.mean.shape[0]

    @property
    def n_classes(self):
        return self.bias.shape[0]

    def standardize(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        if features.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {features.shape[1]}")
        return (features - self.mean) / self.scale

    def predict_proba_batch(self, features):
        """Probability rows for a (B, D) feature matrix."""
        z = linear_logits(self.standardize(features), self.weights, self.bias)
        return softmax(z)

    def predict_proba(self, features):
        """Probability vector for a single length-D feature vector."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 1:
            raise ValueError("predict_proba takes a single feature vector")
        return self.predict_proba_batch(features[None, :])[0]

    def save(self, path):
        """Write the versioned binary container (byte-stable for equal inputs)."""
        header = {
            "n_features": int(self.n_features),
            "n_classes": int(self.n_classes),
            "dtype": "<f8",
            "species": list(self.species_names),
            "train_config": self.train_config.to_dict() if self.train_config else None,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for arr in (self.mean, self.scale, self.weights, self.bias):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(MODEL_MAGIC))
            if magic != MODEL_MAGIC:
                raise ModelFormatError(f"bad magic {magic!r} in {path}")
            (blob_len,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(blob_len).decode("utf-8"))
            d, c = header["n_features"], header["n_classes"]
            data = np.frombuffer(fh.read(), dtype="<f8")
        expected = 2 * d + d * c + c
        if data.shape[0] != expected:
            raise ModelFormatError(f"payload holds {data.shape[0]} values, expected {expected}")
        mean = data[:d].copy()
        scale = data[d : 2 * d].copy()
        weights = data[2 * d : 2 * d + d * c].reshape(d, c).copy()
        bias = data[2 * d + d * c :].copy()
        cfg = header.get("train_config")
        return cls(
            weights=weights,
            bias=bias,
            mean=mean,
            scale=scale,
            species_names=tuple(header["species"]),
            train_config=TrainConfig.from_dict(cfg) if cfg else None,
        )


def _batch_loss_and_grads(features, labels, weights, bias, margins, sample_weights):
    """Weighted-mean loss and its gradients for one minibatch.

    ``margins`` (per class) are subtracted from the true-class logit
    before the softmax; zeros reproduce plain cross-entropy through the
    identical code path, so the degenerate configuration is bit-for-bit
    equal to it.
    """
    n = features.shape[0]
    z = linear_logits(features, weights, bias)
    rows = np.arange(n)
    z[rows, labels] -= margins[labels]
    z -= z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1)
    log_p_true = z[rows, labels] - np.log(denom)
    # log-space evaluation cannot produce -log(0); the floor only gates
    # how far below it a true-class probability may fall unreported
    n_floored = int((log_p_true < np.log(PROB_FLOOR)).sum())
    w = sample_weights[labels]
    w_total = w.sum()
    loss = float(-(w * log_p_true).sum() / w_total)

    # d(loss)/d(logit) = (softmax - onehot) * w / sum(w)
    grad_z = expz / denom[:, None]
    grad_z[rows, labels] -= 1.0
    grad_z *= (w / w_total)[:, None]
    grad_w = np.empty_like(weights)
    for d in range(weights.shape[0]):
        grad_w[d] = (features[:, d, None] * grad_z).sum(axis=0)
    grad_b = grad_z.sum(axis=0)
    return loss, grad_w, grad_b, n_floored


def fit_standardization(features):
    """Per-dimension mean and stdev; zero-variance dims get scale 1."""
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def train(features, labels, n_classes, config, species_names=None, val=None, eval_top_k=30, callback=None):
    """Fit a :class:`SoftmaxModel` by minibatch SGD.

    Parameters
    ----------
    features : ndarray (n, D)
        Raw (unstandardized) covariates; standardization is fitted here.
    labels : ndarray (n,)
        Dense class ids in ``0..n_classes-1``.
    n_classes : int
        Catalog size C (may exceed ``labels.max()+1``).
    config : TrainConfig
    species_names : sequence of str, optional
        Catalog names stored in the model; defaults to stringified ids.
    val : (features, labels) tuple, optional
        Held-out split scored each epoch with micro/macro top-k accuracy.
    eval_top_k : int
        k for the per-epoch curves, capped at ``n_classes``.
    callback : callable, optional
        Called with each epoch's history record as it is produced.

    Returns
    -------
    (SoftmaxModel, list of dict)
        The fitted model and one history record per epoch with keys
        ``epoch``, ``learning_rate``, ``train_loss``, ``val_micro_topk``,
        ``val_macro_topk`` (NaN when no validation data is given).

    Notes
    -----
    Deterministic for a fixed seed. The margin-rebalanced variant
    subtracts ``margin / n_k**0.25`` from the true-class logit, and from
    ``reweight_start_epoch`` onward weighs samples by inverse class
    frequency ``(n / C_seen) / n_k``.
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D array")
    n, d = features.shape
    if n == 0:
        raise ValueError("empty training set")
    if labels.shape != (n,):
        raise ValueError("labels length does not match features")
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite training features")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels outside 0..n_classes-1")

    mean, scale = fit_standardization(features)
    x = (features - mean) / scale

    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    seen = counts > 0
    margins = np.zeros(n_classes)
    if config.loss == "margin-rebalanced":
        margins[seen] = config.margin / counts[seen] ** 0.25
    flat_weights = np.where(seen, 1.0, 0.0)
    freq_weights = np.zeros(n_classes)
    freq_weights[seen] = (n / seen.sum()) / counts[seen]

    rng = np.random.default_rng(config.seed)
    weights = np.zeros((d, n_classes))
    bias = np.zeros(n_classes)
    lr = config.learning_rate
    clamp_count = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        if epoch in config.decay_epochs:
            lr *= config.decay_factor
        reweight = config.loss == "margin-rebalanced" and epoch >= config.reweight_start_epoch
        sample_weights = freq_weights if reweight else flat_weights
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grad_w, grad_b, n_floored = _batch_loss_and_grads(
                x[idx], labels[idx], weights, bias, margins, sample_weights
            )
            clamp_count += n_floored
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch start {start} (lr={lr})"
                )
            weights -= lr * grad_w
            bias -= lr * grad_b
            epoch_loss += loss * len(idx)
        epoch_loss /= n

        record = {
            "epoch": epoch,
            "learning_rate": lr,
            "train_loss": epoch_loss,
            "val_micro_topk": float("nan"),
            "val_macro_topk": float("nan"),
        }
        model_now = None
        if val is not None:
            model_now = SoftmaxModel(
                weights=weights.copy(),
                bias=bias.copy(),
                mean=mean,
                scale=scale,
                species_names=_names(species_names, n_classes),
                train_config=config,
            )
            k = min(eval_top_k, n_classes)
            probs = model_now.predict_proba_batch(val[0])
            record["val_micro_topk"] = top_k_accuracy_from_probs(probs, val[1], k)
            record["val_macro_topk"] = macro_top_k_accuracy_from_probs(probs, val[1], k)
        history.append(record)
        if callback is not None:
            callback(record)

    if clamp_count:
        logger.warning("probability floor applied %d times during training", clamp_count)
    model = SoftmaxModel(
        weights=weights,
        bias=bias,
        mean=mean,
        scale=scale,
        species_names=_names(species_names, n_classes),
        train_config=config,
    )
    return model, history


def _names(species_names, n_classes):
    if species_names is None:
        return tuple(str(i) for i in range(n_classes))
    names = tuple(species_names)
    if len(names) != n_classes:
        raise ValueError("species_names length does not match n_classes")
    return names


def top_k_accuracy_from_probs(probs, labels, k):
    """Micro top-k accuracy: fraction of rows whose true-class probability
    reaches the k-th largest entry (ties at rank k count as hits)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = probs.shape
    if k < 1 or k > c:
        raise ValueError(f"k must be in 1..{c}, got {k}")
    if n == 0:
        raise ValueError("no samples")
    kth = np.partition(probs, c - k, axis=1)[:, c - k]
    hits = probs[np.arange(n), labels] >= kth
    return float(hits.mean())


def macro_top_k_accuracy_from_probs(probs, labels, k):
    """Species-averaged top-k accuracy; species without samples are excluded."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = probs.shape
    if k < 1 or k > c:
        raise ValueError(f"k must be in 1..{c}, got {k}")
    if n == 0:
        raise ValueError("no samples")
    kth = np.partition(probs, c - k, axis=1)[:, c - k]
    hits = (probs[np.arange(n), labels] >= kth).astype(np.float64)
    per_class_hits = np.bincount(labels, weights=hits, minlength=c)
    per_class_n = np.bincount(labels, minlength=c)
    seen = per_class_n > 0
    return float((per_class_hits[seen] / per_class_n[seen]).mean())


def top_k_accuracy(model, features, labels, k):
    """Micro top-k accuracy of ``model`` on raw features."""
    return top_k_accuracy_from_probs(model.predict_proba_batch(features), labels, k)


def macro_top_k_accuracy(model, features, labels, k):
    """Macro top-k accuracy of ``model`` on raw features."""
    return macro_top_k_accuracy_from_probs(model.predict_proba_batch(features), labels, k)
