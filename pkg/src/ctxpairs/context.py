"""Context vectors built from deployment id and capture time.

A context vector is the concatenation of a one-hot deployment block and
two wrapped ``(sin, cos)`` pairs for hour-of-day and day-of-year, each
block scaled by its own weight.  Timestamps are seconds of local time
since an arbitrary epoch; the calendar has 365-day years.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, EmptyInputError, RangeError

SECONDS_PER_DAY = 86400.0
DAYS_PER_YEAR = 365.0


@dataclass(frozen=True)
class ContextConfig:
    n_locations: int
    location_weight: float = 1.0
    hour_weight: float = 1.0
    day_weight: float = 1.0
    tau_c: float = 0.05

    def __post_init__(self):
        if self.n_locations < 1:
            raise ConfigError(f"n_locations must be >= 1, got {self.n_locations}")
        if self.tau_c <= 0:
            raise ConfigError(f"tau_c must be > 0, got {self.tau_c}")
        for name in ("location_weight", "hour_weight", "day_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def dim(self):
        return self.n_locations + 4


def hour_of_day(timestamp):
    return np.mod(np.asarray(timestamp, dtype=np.float64), SECONDS_PER_DAY) / 3600.0


def day_of_year(timestamp):
    days = np.asarray(timestamp, dtype=np.float64) / SECONDS_PER_DAY
    return np.mod(days, DAYS_PER_YEAR)


def encode_context(location_id, timestamp, cfg):
    """Context vector for a single observation."""
    return encode_contexts(np.array([location_id]), np.array([timestamp]), cfg)[0]


def encode_contexts(locations, timestamps, cfg):
    """Row-wise :func:`encode_context` for arrays of locations and timestamps."""
    locations = np.asarray(locations)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if locations.shape != timestamps.shape:
        raise DimensionError(f"{locations.shape[0]} locations vs {timestamps.shape[0]} timestamps")
    if locations.size and (locations.min() < 0 or locations.max() >= cfg.n_locations):
        bad = locations[(locations < 0) | (locations >= cfg.n_locations)][0]
        raise RangeError(f"location id {bad} outside [0, {cfg.n_locations})")
    n = locations.shape[0]
    out = np.zeros((n, cfg.dim))
    out[np.arange(n), locations.astype(np.intp)] = cfg.location_weight
    hour_angle = 2.0 * np.pi * hour_of_day(timestamps) / 24.0
    day_angle = 2.0 * np.pi * day_of_year(timestamps) / DAYS_PER_YEAR
    L = cfg.n_locations
    out[:, L] = cfg.hour_weight * np.sin(hour_angle)
    out[:, L + 1] = cfg.hour_weight * np.cos(hour_angle)
    out[:, L + 2] = cfg.day_weight * np.sin(day_angle)
    out[:, L + 3] = cfg.day_weight * np.cos(day_angle)
    return out


def context_distance(c_i, c_j):
    c_i = np.asarray(c_i, dtype=np.float64)
    c_j = np.asarray(c_j, dtype=np.float64)
    if c_i.shape != c_j.shape:
        raise DimensionError(f"context shapes differ: {c_i.shape} vs {c_j.shape}")
    diff = c_i - c_j
    return float(np.sqrt(np.dot(diff, diff)))


def distances_to_all(c_i, contexts):
    """Euclidean distances from one context to every row of ``contexts``."""
    contexts = np.asarray(contexts, dtype=np.float64)
    c_i = np.asarray(c_i, dtype=np.float64)
    if contexts.ndim != 2 or contexts.shape[1] != c_i.shape[-1]:
        raise DimensionError(f"context width {c_i.shape[-1]} vs matrix {contexts.shape}")
    diff = contexts - c_i
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def softmax_neg_distance(distances, tau_c):
    """Categorical probabilities proportional to ``exp(-d / tau_c)``."""
    if tau_c <= 0:
        raise ConfigError(f"tau_c must be > 0, got {tau_c}")
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise EmptyInputError("no candidates")
    logits = -d / tau_c
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def positive_distribution(i, contexts, tau_c):
    """Probability that each item is drawn as the positive for anchor ``i``.

    The anchor itself is a candidate (distance zero).
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.shape[0] == 0:
        raise EmptyInputError("no contexts")
    if not 0 <= i < contexts.shape[0]:
        raise RangeError(f"anchor {i} outside [0, {contexts.shape[0]})")
    return softmax_neg_distance(distances_to_all(contexts[i], contexts), tau_c)


class ContextSampler:
    """Draw context positives for many anchors at once.

    With ``groups`` (typically location ids) sampling runs in two exact
    stages: the anchor's own group is chosen with probability
    ``own_mass / (own_mass + other_mass)``, where ``other_mass`` is computed
    once per anchor and cached; the pick inside the chosen part is then an
    inverse-CDF draw.  Without groups every draw scans all ``N`` items.
    Only ``N``-vectors and the ``N x K`` context matrix are kept in memory.
    """

    def __init__(self, contexts, tau_c, groups=None, block=256):
        if tau_c <= 0:
            raise ConfigError(f"tau_c must be > 0, got {tau_c}")
        self.contexts = np.ascontiguousarray(contexts, dtype=np.float64)
        n = self.contexts.shape[0]
        if n == 0:
            raise EmptyInputError("no contexts")
        self.tau_c = float(tau_c)
        self.block = int(block)
        self._sqnorm = np.einsum("ij,ij->i", self.contexts, self.contexts)
        self.groups = None
        if groups is not None:
            groups = np.asarray(groups)
            if groups.shape != (n,):
                raise DimensionError(f"groups has shape {groups.shape}, expected ({n},)")
            self.groups = groups
            self._order = np.argsort(groups, kind="stable")
            uniq, start, count = np.unique(groups[self._order], return_index=True, return_counts=True)
            slot = np.searchsorted(uniq, groups)
            self._start, self._count = start[slot], count[slot]
            self._other_mass = self._compute_other_mass()

    def _distances(self, anchors, candidates=None):
        c = self.contexts[anchors]
        if candidates is None:
            other, other_sq = self.contexts, self._sqnorm
        else:
            other, other_sq = self.contexts[candidates], self._sqnorm[candidates]
        sq = self._sqnorm[anchors][:, None] + other_sq[None, :] - 2.0 * (c @ other.T)
        np.maximum(sq, 0.0, out=sq)
        if candidates is None:
            # exact zero on the diagonal despite cancellation
            sq[np.arange(len(anchors)), anchors] = 0.0
        else:
            sq[anchors[:, None] == candidates[None, :]] = 0.0
        return np.sqrt(sq, out=sq)

    def _weights(self, anchors, candidates=None):
        # unnormalized exp(-d / tau_c); the anchor itself scores exactly 1
        d = self._distances(anchors, candidates)
        d *= -1.0 / self.tau_c
        return np.exp(d, out=d)

    def _compute_other_mass(self):
        n = len(self.contexts)
        out = np.empty(n)
        for s in range(0, n, self.block):
            a = np.arange(s, min(s + self.block, n))
            w = self._weights(a)
            w[self.groups[a][:, None] == self.groups[None, :]] = 0.0
            out[a] = w.sum(axis=1)
        return out

    def probabilities(self, anchors):
        anchors = np.asarray(anchors, dtype=np.intp)
        return softmax_neg_distance(self._distances(anchors), self.tau_c)

    @staticmethod
    def _pick(weights, target):
        cdf = np.cumsum(weights, axis=1)
        idx = (cdf <= target[:, None]).sum(axis=1)
        return np.minimum(idx, cdf.shape[1] - 1)

    def sample(self, anchors, rng):
        """One positive per anchor, using one uniform draw per anchor."""
        anchors = np.asarray(anchors, dtype=np.intp)
        u = rng.random(len(anchors))
        if self.groups is None:
            return self._sample_full(anchors, u)
        out = np.empty(len(anchors), dtype=np.intp)
        key = self.groups[anchors]
        by_group = np.argsort(key, kind="stable")
        bounds = np.flatnonzero(np.diff(key[by_group])) + 1
        for rows in np.split(by_group, bounds):
            if len(rows) == 0:
                continue
            a = anchors[rows]
            s0, cnt = self._start[a[0]], self._count[a[0]]
            members = self._order[s0:s0 + cnt]
            w = self._weights(a, members)
            own = w.sum(axis=1)
            target = u[rows] * (own + self._other_mass[a])
            inside = target < own
            out[rows[inside]] = members[self._pick(w[inside], target[inside])]
            for r in np.flatnonzero(~inside):
                i = a[r]
                wi = self._weights(np.array([i]))[0]
                wi[self.groups == self.groups[i]] = 0.0
                out[rows[r]] = self._pick(wi[None, :], np.array([target[r] - own[r]]))[0]
        return out

    def _sample_full(self, anchors, u):
        out = np.empty(len(anchors), dtype=np.intp)
        for start in range(0, len(anchors), self.block):
            sl = slice(start, start + self.block)
            w = self._weights(anchors[sl])
            out[sl] = self._pick(w, u[sl] * w.sum(axis=1))
        return out
