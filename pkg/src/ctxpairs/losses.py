"""Triplet, NT-Xent and stop-gradient siamese objectives on embedding batches."""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import BatchSizeError, ConfigError, DimensionError, NumericDomainError

LOSSES = ("triplet", "simclr", "simsiam")
DISTANCES = ("euclidean", "neg_cosine")
COSINE_EPS = 1e-12

_DEFAULT_DISTANCE = {"triplet": "euclidean", "simclr": "neg_cosine", "simsiam": "neg_cosine"}


@dataclass(frozen=True)
class LossConfig:
    """Objective choice and its hyper-parameters.

    ``distance=None`` picks Euclidean for the triplet loss and negative
    cosine otherwise.  ``symmetric`` makes both views act as anchors in
    the NT-Xent loss; ``stop_gradient=False`` ablates the stop-gradient of
    the siamese loss.
    """

    loss: str = "simclr"
    margin: float = 0.3
    temperature: float = 0.5
    distance: str = None
    symmetric: bool = True
    stop_gradient: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.distance is None:
            object.__setattr__(self, "distance", _DEFAULT_DISTANCE[self.loss])
        if self.distance not in DISTANCES:
            raise ConfigError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def _row_norms(z):
    norms = ag.l2norm(z, axis=1)
    if np.any(norms.value == 0):
        raise NumericDomainError("negative cosine distance is undefined for a zero vector")
    return ag.clamp_min(norms, COSINE_EPS)


def normalize_rows(z):
    return ag.div(z, _row_norms(z))


def distance(a, b, kind="euclidean"):
    """Row-wise distance between matching rows of ``a`` and ``b`` as a column."""
    a, b = ag._as_tensor(a), ag._as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    if kind == "euclidean":
        return ag.l2norm(ag.sub(a, b), axis=1)
    if kind == "neg_cosine":
        dots = ag.sum(ag.mul(a, b), axis=1)
        return ag.neg(ag.div(dots, ag.clamp_min(ag.mul(_row_norms(a), _row_norms(b)), COSINE_EPS)))
    raise ConfigError(f"unknown distance {kind!r}")


def pairwise_distance(z, kind="euclidean"):
    if kind == "euclidean":
        return ag.pairwise_euclidean(z, z)
    if kind == "neg_cosine":
        return ag.neg(_gram(normalize_rows(z)))
    raise ConfigError(f"unknown distance {kind!r}")


def _gram(x):
    """``x @ x.T`` recorded as one node so both operand roles share a gradient."""
    x = ag._as_tensor(x)
    xv = x.value

    def back(g):
        return ((g + g.T) @ xv,)

    return ag._make(xv @ xv.T, (x,), back)


def triplet_loss(z_i, z_p, z_n, margin=0.3, kind="euclidean"):
    """Mean over rows of ``max(D(z_i, z_p) - D(z_i, z_n) + margin, 0)``."""
    gap = ag.sub(distance(z_i, z_p, kind), distance(z_i, z_n, kind))
    return ag.mean(ag.relu(ag.add(gap, margin)))


def simclr_loss(z, positives, temperature=0.5, kind="neg_cosine", anchors=None):
    """NT-Xent over the rows of ``z``.

    For anchor row ``a`` with positive row ``positives[k]``, every other
    row (the positive included) enters the denominator; only ``a`` itself
    is excluded.  ``anchors`` defaults to every row.
    """
    z = ag._as_tensor(z)
    m = z.shape[0]
    if m < 2:
        raise BatchSizeError(f"NT-Xent needs at least 2 embeddings, got {m}")
    anchors = np.arange(m) if anchors is None else np.asarray(anchors, dtype=np.intp)
    positives = np.asarray(positives, dtype=np.intp)
    if positives.shape != anchors.shape:
        raise DimensionError(f"{len(anchors)} anchors but {len(positives)} positives")
    if np.any(positives == anchors):
        raise BatchSizeError("an anchor cannot be its own positive row")
    logits = ag.scale(pairwise_distance(z, kind), -1.0 / temperature)
    rows = ag.take_rows(logits, anchors)
    k = np.arange(len(anchors))
    pick = np.zeros(rows.shape)
    pick[k, positives] = 1.0
    mask = np.ones(rows.shape, dtype=bool)
    mask[k, anchors] = False
    pos = ag.sum(ag.mul(rows, pick), axis=1)
    per_anchor = ag.sub(ag.logsumexp(rows, axis=1, mask=mask), pos)
    return ag.mean(per_anchor)


def simclr_two_view_loss(z1, z2, temperature=0.5, kind="neg_cosine", symmetric=True):
    """NT-Xent for a batch of paired views; row ``k`` of ``z1`` pairs with row ``k`` of ``z2``."""
    b = z1.shape[0]
    z = ag.concat_rows([z1, z2])
    if symmetric:
        anchors = np.arange(2 * b)
        positives = (anchors + b) % (2 * b)
    else:
        anchors = np.arange(b)
        positives = anchors + b
    return simclr_loss(z, positives, temperature, kind, anchors)


def simsiam_loss(z_i, z_p, predictor, kind="neg_cosine", stop_gradient=True):
    """``0.5 D(h(z_i), sg(z_p)) + 0.5 D(h(z_p), sg(z_i))`` averaged over rows."""
    z_i, z_p = ag._as_tensor(z_i), ag._as_tensor(z_p)
    if z_i.shape != z_p.shape:
        raise DimensionError(f"embedding shapes differ: {z_i.shape} vs {z_p.shape}")
    p_i, p_p = predictor(z_i), predictor(z_p)
    if p_i.shape != z_p.shape:
        raise DimensionError(f"predictor output {p_i.shape} does not match projector output {z_p.shape}")
    t_p = ag.stop_gradient(z_p) if stop_gradient else z_p
    t_i = ag.stop_gradient(z_i) if stop_gradient else z_i
    both = ag.add(distance(p_i, t_p, kind), distance(p_p, t_i, kind))
    return ag.scale(ag.mean(both), 0.5)
