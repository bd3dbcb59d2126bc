"""Frozen-feature evaluation: linear probe, nearest-neighbour retrieval, purity."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import ConfigError, DimensionError, EmptyInputError, RangeError, SupervisionError
from .io_utils import atomic_write_text
from .model import embed, extract_features

C_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class ProbeConfig:
    grid: tuple = C_GRID
    folds: int = 5
    max_iter: int = 1000
    tol: float = 1e-6
    standardize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(c) for c in self.grid))
        if not self.grid or min(self.grid) <= 0:
            raise ConfigError("probe.grid must be non-empty and strictly positive")
        if self.folds < 2:
            raise ConfigError(f"probe.folds must be >= 2, got {self.folds}")
        if self.max_iter < 1:
            raise ConfigError("probe.max_iter must be >= 1")


@dataclass
class EvalReport:
    accuracy: float
    per_class: list
    C: float
    percent: object = None
    seed: int = None
    n_labeled: int = 0
    n_labeled_per_class: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        d["per_class"] = [None if np.isnan(a) else a for a in self.per_class]
        return json.dumps(d, indent=2, sort_keys=True)

    def write(self, path):
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["per_class"] = [np.nan if a is None else a for a in d["per_class"]]
        return cls(**d)


def _objective(theta, X, Y, C, d, k):
    W = theta[:d * k].reshape(d, k)
    b = theta[d * k:]
    logits = X @ W + b
    lse = logsumexp(logits, axis=1)
    loss = float(np.sum(lse) - np.sum(logits * Y) + 0.5 * np.sum(W * W) / C)
    P = np.exp(logits - lse[:, None])
    G = P - Y
    gW = X.T @ G + W / C
    gb = G.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def fit_logistic(X, y, n_classes, C, max_iter=1000, tol=1e-6):
    """Multinomial logistic regression minimizing summed cross-entropy + ||W||^2 / (2C).

    The bias is not penalized.  L-BFGS from a zero start; stops when the
    largest gradient component falls below ``tol`` or after ``max_iter``.
    """
    n, d = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    theta0 = np.zeros(d * n_classes + n_classes)
    res = minimize(_objective, theta0, args=(X, Y, C, d, n_classes), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxcor": 20})
    W = res.x[:d * n_classes].reshape(d, n_classes)
    b = res.x[d * n_classes:]
    return W, b


def stratified_folds(labels, k, rng):
    """Fold id per sample: each class is shuffled then dealt round-robin from a random start."""
    folds = np.empty(len(labels), dtype=np.intp)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        folds[members] = (np.arange(len(members)) + rng.integers(k)) % k
    return folds


class LinearProbe:
    """A fitted probe; test labels only ever enter :meth:`score`."""

    def __init__(self, W, b, C, mean, scale, n_classes, cv_accuracy, n_labeled_per_class):
        self.W, self.b, self.C = W, b, C
        self.mean, self.scale = mean, scale
        self.n_classes = n_classes
        self.cv_accuracy = cv_accuracy
        self.n_labeled_per_class = n_labeled_per_class

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.W.shape[0]:
            raise DimensionError(f"features have shape {X.shape}, probe expects width {self.W.shape[0]}")
        X = (X - self.mean) / self.scale
        return np.argmax(X @ self.W + self.b, axis=1)

    def score(self, X, y, percent=None, seed=None):
        y = np.asarray(y)
        pred = self.predict(X)
        correct = pred == y
        per_class = []
        for c in range(self.n_classes):
            m = y == c
            per_class.append(float(correct[m].mean()) if m.any() else float("nan"))
        return EvalReport(
            accuracy=float(correct.mean()),
            per_class=per_class,
            C=self.C,
            percent=percent,
            seed=seed,
            n_labeled=int(sum(self.n_labeled_per_class)),
            n_labeled_per_class=list(self.n_labeled_per_class),
            extra={"cv_accuracy": self.cv_accuracy},
        )


def fit_probe(features, labels, labeled_idx, cfg=None, seed=0, n_classes=None):
    """Pick C by k-fold CV on the labelled subset, then refit on all of it."""
    cfg = cfg or ProbeConfig()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    labeled_idx = np.asarray(labeled_idx, dtype=np.intp)
    if len(labeled_idx) == 0:
        raise EmptyInputError("no labelled samples")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    X = features[labeled_idx]
    y = labels[labeled_idx]
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise SupervisionError(f"labelled subset has no examples of classes {missing}")
    if cfg.standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Xs = (X - mean) / scale

    folds = stratified_folds(y, cfg.folds, np.random.default_rng(seed))
    best_C, best_acc = None, -1.0
    cv = {}
    for C in sorted(cfg.grid):
        correct = 0
        for f in range(cfg.folds):
            tr, va = folds != f, folds == f
            if not va.any() or not tr.any():
                continue
            W, b = fit_logistic(Xs[tr], y[tr], n_classes, C, cfg.max_iter, cfg.tol)
            correct += int(np.sum(np.argmax(Xs[va] @ W + b, axis=1) == y[va]))
        acc = correct / len(y)
        cv[repr(C)] = acc
        if acc > best_acc:
            best_C, best_acc = C, acc
    W, b = fit_logistic(Xs, y, n_classes, best_C, cfg.max_iter, cfg.tol)
    return LinearProbe(W, b, best_C, mean, scale, n_classes, cv, counts.tolist())


def linear_probe(features, labels, labeled_idx, test_features, test_labels, cfg=None, seed=0,
                 percent=None, n_classes=None):
    probe = fit_probe(features, labels, labeled_idx, cfg, seed, n_classes)
    return probe.score(test_features, test_labels, percent, seed)


def knn_retrieval(query, gallery, k):
    """Indices of the ``k`` nearest gallery rows; ties go to the lower index."""
    gallery = np.asarray(gallery, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if len(gallery) == 0:
        raise EmptyInputError("empty gallery")
    if not 0 < k <= len(gallery):
        raise RangeError(f"k={k} outside [1, {len(gallery)}]")
    if query.shape[-1] != gallery.shape[1]:
        raise DimensionError(f"query width {query.shape[-1]} vs gallery width {gallery.shape[1]}")
    diff = gallery - query
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return np.argsort(d, kind="stable")[:k]


def purity_from_embeddings(z, labels, k=5, block=512):
    """Mean fraction of each point's ``k`` nearest other points sharing its label."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(z)
    if n < 2:
        raise EmptyInputError("purity needs at least two points")
    k = min(k, n - 1)
    sq = np.einsum("ij,ij->i", z, z)
    hits = 0
    for s in range(0, n, block):
        q = np.arange(s, min(s + block, n))
        d = sq[q][:, None] + sq[None, :] - 2.0 * (z[q] @ z.T)
        d[np.arange(len(q)), q] = np.inf
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        hits += int(np.sum(labels[nn] == labels[q][:, None]))
    return hits / (n * k)


def retrieval_purity(params, dataset, k=5):
    """Top-``k`` same-class purity in projector-output space, self excluded."""
    dataset.require_labels("retrieval purity")
    return purity_from_embeddings(embed(params, dataset.features), dataset.labels, k)


def output_std(params, x, normalize=True):
    """Mean per-dimension standard deviation of projector outputs.

    With ``normalize`` the outputs are first scaled to unit length; the
    siamese loss is scale-free, so collapse shows up in direction only.
    A healthy ``d``-dimensional embedding sits near ``1/sqrt(d)``.
    """
    z = embed(params, x)
    if normalize:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z = z / np.where(norms > 0, norms, 1.0)
    return float(z.std(axis=0).mean())


def evaluate(params, train, test, labeled_idx, cfg=None, seed=0, percent=None):
    """Features from the frozen encoder, probe on ``labeled_idx``, score on ``test``."""
    train.require_labels("linear evaluation")
    test.require_labels("linear evaluation")
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    f_train = extract_features(params, train.features)
    f_test = extract_features(params, test.features)
    return linear_probe(f_train, train.labels, labeled_idx, f_test, test.labels, cfg, seed,
                        percent, n_classes)


def per_class_table(standard, context):
    """CSV comparing per-class accuracy of two reports on the same labelled subset."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "n_labeled", "accuracy_standard", "accuracy_context"])
    for c, (a, b) in enumerate(zip(standard.per_class, context.per_class)):
        n = standard.n_labeled_per_class[c] if c < len(standard.n_labeled_per_class) else ""
        w.writerow([c, n, "" if np.isnan(a) else repr(a), "" if np.isnan(b) else repr(b)])
    return buf.getvalue()
