"""Representation quality: linear probe, kNN, labeled-fraction finetune, corruptions."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import gaussian_blur
from .data import Dataset, stratified_subset
from .models import EncoderParams, backbone_forward

CORRUPTIONS = ("gaussian_noise", "blur", "brightness")
SEVERITIES = (0, 1, 2, 3, 4, 5)
# per-severity parameters: noise sigma, blur passes, brightness shift
NOISE_SIGMA = (0.0, 0.04, 0.08, 0.12, 0.18, 0.26)
BLUR_PASSES = (0, 1, 2, 3, 5, 8)
BRIGHTNESS_SHIFT = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


class EvaluationError(ValueError):
    pass


def params_digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for name, t in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def extract_features(params: EncoderParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Pooled backbone features of a frozen snapshot (no graph is recorded)."""
    frozen = params.copy(requires_grad=False)
    dtype = next(iter(frozen.tensors.values())).dtype
    out = []
    for s in range(0, len(images), batch_size):
        out.append(backbone_forward(frozen, images[s : s + batch_size].astype(dtype, copy=False)).data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, params.topology.feature_dim))


def _check_labels(images: np.ndarray, labels: np.ndarray, what: str) -> None:
    if len(images) != len(labels):
        raise EvaluationError(f"{what}: {len(images)} images but {len(labels)} labels")


# --------------------------------------------------------------------------
# linear probe


@dataclass
class LinearClassifier:
    weight: np.ndarray  # [d, k]
    bias: np.ndarray  # [k]
    mean: np.ndarray  # feature standardization from the train split
    std: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.std) @ self.weight + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(feats), axis=1)


@dataclass
class ProbeResult:
    top1: float
    per_class: np.ndarray
    class_counts: np.ndarray
    n_eval: int
    config_hash: str = ""
    classifier: LinearClassifier | None = field(default=None, repr=False)

    def reassembled_top1(self) -> float:
        return float(np.sum(self.per_class * self.class_counts) / self.n_eval)


def accuracy_report(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> tuple[float, np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=n_classes)
    correct = np.bincount(labels[pred == labels], minlength=n_classes)
    per_class = np.divide(correct, counts, out=np.zeros(n_classes), where=counts > 0)
    return float(np.mean(pred == labels)), per_class, counts


def train_linear(feats: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int = 50, lr: float = 0.1,
                 batch_size: int = 256, momentum: float = 0.9, weight_decay: float = 0.0,
                 seed: int = 0) -> LinearClassifier:
    """Softmax regression by SGD with momentum and a per-step cosine learning rate."""
    if epochs < 1:
        raise EvaluationError(f"probe epochs must be at least 1, got {epochs}")
    rng = np.random.default_rng(seed)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0) + 1e-6
    x = (feats - mean) / std
    n, d = x.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    steps = epochs * math.ceil(n / batch_size)
    onehot = np.eye(n_classes)[labels]
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            z = x[idx] @ W + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            gW = x[idx].T @ g + weight_decay * W
            gb = g.sum(axis=0)
            rate = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
            vW = momentum * vW + gW
            vb = momentum * vb + gb
            W -= rate * vW
            b -= rate * vb
            step += 1
    return LinearClassifier(W, b, mean, std)


def linear_probe(params: EncoderParams, train: Dataset, test: Dataset, epochs: int = 50, lr: float = 0.1,
                 seed: int = 0, config_hash: str = "", n_classes: int | None = None,
                 features: tuple | None = None) -> ProbeResult:
    """Train a linear classifier on frozen pooled features and report test top-1.

    The backbone is checked to be bit-identical before and after probing.
    ``features`` may pass precomputed ``(train_feats, test_feats)``.
    """
    _check_labels(train.images, train.labels, "linear_probe train")
    _check_labels(test.images, test.labels, "linear_probe test")
    before = params_digest(params)
    if features is None:
        features = (extract_features(params, train.images), extract_features(params, test.images))
    f_train, f_test = features
    k = n_classes or int(max(train.labels.max(), test.labels.max()) + 1)
    clf = train_linear(f_train, train.labels, k, epochs, lr, seed=seed)
    if params_digest(params) != before:
        raise EvaluationError("linear_probe: backbone parameters changed during probing")
    return evaluate_classifier(clf, f_test, test.labels, k, config_hash)


def evaluate_classifier(clf: LinearClassifier, feats: np.ndarray, labels: np.ndarray, n_classes: int,
                        config_hash: str = "") -> ProbeResult:
    top1, per_class, counts = accuracy_report(clf.predict(feats), labels, n_classes)
    return ProbeResult(top1, per_class, counts, len(labels), config_hash, clf)


# --------------------------------------------------------------------------
# kNN


def knn_predict(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray, k: int,
                weighting: str = "cosine", n_classes: int | None = None, chunk: int = 512) -> np.ndarray:
    """Cosine-similarity k-NN vote; ties go to the lowest class index."""
    n_train = len(train_feats)
    if k < 1:
        raise EvaluationError(f"k must be at least 1, got {k}")
    if k > n_train:
        raise EvaluationError(f"k = {k} exceeds the {n_train} training samples")
    if weighting not in ("cosine", "uniform"):
        raise EvaluationError(f"unknown kNN weighting {weighting!r}")
    n_classes = n_classes or int(train_labels.max()) + 1
    tr = train_feats / np.maximum(np.linalg.norm(train_feats, axis=1, keepdims=True), 1e-12)
    te = test_feats / np.maximum(np.linalg.norm(test_feats, axis=1, keepdims=True), 1e-12)
    preds = []
    for s in range(0, len(te), chunk):
        sim = te[s : s + chunk] @ tr.T
        # stable sort so equal similarities resolve by training index
        nn = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        w = np.take_along_axis(sim, nn, axis=1) if weighting == "cosine" else np.ones(nn.shape)
        votes = np.zeros((len(nn), n_classes))
        np.add.at(votes, (np.arange(len(nn))[:, None], train_labels[nn]), w)
        preds.append(np.argmax(votes, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def knn_eval(params: EncoderParams, train: Dataset, test: Dataset, k: int = 20, weighting: str = "cosine",
             features: tuple | None = None) -> float:
    _check_labels(train.images, train.labels, "knn train")
    _check_labels(test.images, test.labels, "knn test")
    if k > len(train):
        raise EvaluationError(f"k = {k} exceeds the {len(train)} training samples")
    if features is None:
        features = (extract_features(params, train.images), extract_features(params, test.images))
    n_classes = int(max(train.labels.max(), test.labels.max()) + 1)
    pred = knn_predict(features[0], train.labels, features[1], k, weighting, n_classes)
    return float(np.mean(pred == test.labels))


# --------------------------------------------------------------------------
# labeled-fraction finetune


def _finetune(params: EncoderParams, data: Dataset, n_classes: int, rng: np.random.Generator, epochs: int,
              lr: float, batch_size: int, momentum: float):
    """SGD over backbone plus a fresh linear head; returns (backbone copy, head weight, head bias)."""
    net = params.copy(requires_grad=True)
    names = [k for k in net.names() if k.startswith(("conv", "fc"))]
    dtype = net[names[0]].dtype
    d = net.topology.feature_dim
    bound = 1.0 / math.sqrt(d)
    head_w = T.Tensor(rng.uniform(-bound, bound, size=(d, n_classes)).astype(dtype), requires_grad=True)
    head_b = T.Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True)
    trainable = [net[k] for k in names] + [head_w, head_b]
    vel = [np.zeros_like(t.data) for t in trainable]
    steps = epochs * max(1, math.ceil(len(data) / batch_size))
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(len(data))
        for s in range(0, len(data), batch_size):
            b = perm[s : s + batch_size]
            for t in trainable:
                t.grad = None
            h = backbone_forward(net, data.images[b].astype(dtype, copy=False))
            logits = T.add(T.matmul(h, head_w), head_b)
            onehot = np.eye(n_classes, dtype=dtype)[data.labels[b]]
            loss = T.scale(T.sum_(T.mul(T.Tensor(onehot), T.log_softmax(logits, axis=1))), -1.0 / len(b))
            T.backward(loss)
            rate = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
            for t, v in zip(trainable, vel):
                v *= momentum
                v += t.grad
                t.data = (t.data - dtype.type(rate) * v).astype(dtype, copy=False)
            step += 1
    return net.copy(requires_grad=False), head_w.data, head_b.data


def supervised_encoder(params: EncoderParams, train: Dataset, epochs: int = 10, lr: float = 0.01,
                       batch_size: int = 64, seed: int = 0, momentum: float = 0.9) -> EncoderParams:
    """Backbone after end-to-end supervised training on all of ``train`` (head discarded)."""
    _check_labels(train.images, train.labels, "supervised train")
    net, _, _ = _finetune(params, train, int(train.labels.max()) + 1, np.random.default_rng(seed), epochs, lr,
                          batch_size, momentum)
    return net


def fraction_finetune(params: EncoderParams, train: Dataset, test: Dataset, fraction: float, epochs: int = 10,
                      lr: float = 0.01, batch_size: int = 64, seed: int = 0, momentum: float = 0.9) -> float:
    """End-to-end supervised finetune of the backbone plus a linear head on a stratified subset.

    The passed parameters are copied; the original snapshot is left untouched.
    """
    _check_labels(train.images, train.labels, "finetune train")
    rng = np.random.default_rng(seed)
    sub = train.subset(stratified_subset(train.labels, fraction, rng))
    n_classes = int(max(train.labels.max(), test.labels.max()) + 1)
    frozen, w, b = _finetune(params, sub, n_classes, rng, epochs, lr, batch_size, momentum)
    correct = 0
    for s in range(0, len(test), 256):
        h = backbone_forward(frozen, test.images[s : s + 256].astype(w.dtype, copy=False)).data
        pred = np.argmax(h @ w + b, axis=1)
        correct += int(np.sum(pred == test.labels[s : s + 256]))
    return correct / len(test)


# --------------------------------------------------------------------------
# corruptions


def corrupt(images: np.ndarray, corruption: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply one corruption at severity 0..5; output clipped to [0, 1]. Severity 0 is the identity."""
    if corruption not in CORRUPTIONS:
        raise EvaluationError(f"unknown corruption {corruption!r}; expected one of {CORRUPTIONS}")
    if severity not in SEVERITIES:
        raise EvaluationError(f"severity must be an integer in 0..5, got {severity}")
    if severity == 0:
        return images
    if corruption == "gaussian_noise":
        rng = np.random.default_rng(seed)
        out = images + rng.normal(0, NOISE_SIGMA[severity], size=images.shape).astype(images.dtype)
    elif corruption == "blur":
        out = images
        for _ in range(BLUR_PASSES[severity]):
            out = gaussian_blur(out)
    else:
        out = images + images.dtype.type(BRIGHTNESS_SHIFT[severity])
    return np.clip(out, 0, 1).astype(images.dtype, copy=False)


def corruption_eval(params: EncoderParams, probe: ProbeResult | LinearClassifier, test: Dataset,
                    corruption: str = "gaussian_noise", severities=SEVERITIES, seed: int = 0) -> dict[int, float]:
    """Accuracy of a frozen encoder plus trained probe per corruption severity."""
    if corruption not in CORRUPTIONS:
        raise EvaluationError(f"unknown corruption {corruption!r}; expected one of {CORRUPTIONS}")
    clf = probe.classifier if isinstance(probe, ProbeResult) else probe
    if clf is None:
        raise EvaluationError("corruption_eval needs a probe with a trained classifier")
    out = {}
    for sev in severities:
        imgs = corrupt(test.images, corruption, int(sev), seed)
        pred = clf.predict(extract_features(params, imgs))
        out[int(sev)] = float(np.mean(pred == test.labels))
    return out
