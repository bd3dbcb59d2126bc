"""Positive and negative selection for every pairing strategy.

All samplers are vectorized over anchors; ``select_positive`` is the
single-anchor view of ``select_positives`` and consumes the generator in
exactly the same way.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .context import ContextSampler
from .errors import BatchSizeError, ConfigError, EmptyInputError, RangeError

log = logging.getLogger(__name__)

STRATEGIES = ("augment", "oracle", "oracle_noisy", "oracle_same_loc", "sequence", "context")
ORACLE_KINDS = ("oracle", "oracle_noisy", "oracle_same_loc")


@dataclass(frozen=True)
class Strategy:
    """Which positive-selection rule to use and its parameters.

    ``lam`` only matters for ``oracle_noisy``, ``window_seconds`` for
    ``sequence`` and ``tau_c`` for ``context``.  With ``resample=False``
    positives are drawn once and reused every epoch.
    """

    kind: str = "augment"
    lam: float = 0.0
    window_seconds: float = 5.0
    tau_c: float = 0.05
    resample: bool = True

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.window_seconds <= 0:
            raise ConfigError(f"window_seconds must be > 0, got {self.window_seconds}")
        if self.tau_c <= 0:
            raise ConfigError(f"tau_c must be > 0, got {self.tau_c}")

    @property
    def needs_labels(self):
        return self.kind in ORACLE_KINDS

    @property
    def label(self):
        if self.kind == "oracle_noisy":
            return f"oracle_noisy({self.lam:g})"
        return self.kind


@dataclass(frozen=True)
class PairPlan:
    anchors: np.ndarray
    positives: np.ndarray
    seed: object = None
    strategy: str = ""

    def __len__(self):
        return len(self.anchors)


def _groups(keys):
    """Stable sort of ``keys`` plus the start offset and size of each key's run."""
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, start, count = np.unique(sorted_keys, return_index=True, return_counts=True)
    slot = np.searchsorted(uniq, keys)
    return order, start[slot], count[slot]


def _class_groups(ds):
    return ds.cached("class_groups", lambda: _groups(ds.labels))


def _class_location_groups(ds):
    n_loc = int(ds.locations.max()) + 1

    def build():
        return _groups(ds.labels * n_loc + ds.locations)

    return ds.cached("class_location_groups", build)


def sequence_windows(ds, window):
    """For each sample, the ``[lo, hi)`` range into ``order`` of its candidates.

    ``order`` sorts samples by (location, timestamp); candidates share the
    location and lie within ``window`` seconds.
    """

    def build():
        order = np.lexsort((ds.timestamps, ds.locations))
        locs = ds.locations[order]
        ts = ds.timestamps[order]
        lo = np.empty(len(ds), dtype=np.intp)
        hi = np.empty(len(ds), dtype=np.intp)
        bounds = np.flatnonzero(np.diff(locs)) + 1
        for a, b in zip(np.r_[0, bounds], np.r_[bounds, len(ds)]):
            t = ts[a:b]
            lo[order[a:b]] = a + np.searchsorted(t, t - window, side="left")
            hi[order[a:b]] = a + np.searchsorted(t, t + window, side="right")
        return order, lo, hi

    return ds.cached(("sequence", float(window)), build)


def _uniform_index(u, count):
    return np.minimum((u * count).astype(np.intp), count - 1)


_warned_noise_fallback = set()


def select_positives(strategy, anchors, dataset, rng):
    """Positive index for every anchor in ``anchors``."""
    anchors = np.asarray(anchors, dtype=np.intp)
    n = len(dataset)
    if n == 0:
        raise EmptyInputError("dataset is empty")
    if anchors.size and (anchors.min() < 0 or anchors.max() >= n):
        raise RangeError(f"anchor index outside [0, {n})")
    kind = strategy.kind
    if kind == "augment":
        return anchors.copy()
    if kind in ORACLE_KINDS:
        dataset.require_labels(f"strategy {kind!r}")
    if kind == "context":
        sampler = dataset.cached(("context_sampler", strategy.tau_c),
                                 lambda: ContextSampler(dataset.contexts, strategy.tau_c,
                                                        groups=dataset.locations))
        return sampler.sample(anchors, rng)
    if kind == "sequence":
        order, lo, hi = sequence_windows(dataset, strategy.window_seconds)
        u = rng.random(len(anchors))
        return order[lo[anchors] + _uniform_index(u, hi[anchors] - lo[anchors])]
    if kind == "oracle_same_loc":
        order, start, count = _class_location_groups(dataset)
        u = rng.random(len(anchors))
        return order[start[anchors] + _uniform_index(u, count[anchors])]

    order, start, count = _class_groups(dataset)
    u_pick = rng.random(len(anchors))
    same = order[start[anchors] + _uniform_index(u_pick, count[anchors])]
    if kind == "oracle":
        return same
    u_flip = rng.random(len(anchors))
    flip = u_flip < strategy.lam
    others = n - count[anchors]
    stuck = flip & (others == 0)
    if stuck.any():
        key = id(dataset)
        if key not in _warned_noise_fallback:
            _warned_noise_fallback.add(key)
            log.warning("oracle_noisy: no other-class items available, using same-class positives")
        flip &= ~stuck
    # index into the class-sorted order with the anchor's own run cut out
    k = _uniform_index(u_pick[flip], others[flip])
    s = start[anchors][flip]
    k = np.where(k < s, k, k + count[anchors][flip])
    out = same.copy()
    out[flip] = order[k]
    return out


def select_positive(strategy, i, dataset, rng):
    return int(select_positives(strategy, [i], dataset, rng)[0])


def select_negatives(i, batch, count, rng):
    """``count`` distinct members of ``batch`` other than ``i``, uniformly."""
    batch = np.asarray(batch)
    candidates = batch[batch != i]
    if len(candidates) < count:
        raise BatchSizeError(f"need {count} negatives, batch has {len(candidates)} candidates")
    return rng.choice(candidates, size=count, replace=False)


def negative_positions(batch_size, rng):
    """For each batch position ``a``, a uniformly drawn position ``!= a``."""
    if batch_size < 2:
        raise BatchSizeError("a negative needs at least two items in the batch")
    k = _uniform_index(rng.random(batch_size), batch_size - 1)
    return k + (k >= np.arange(batch_size))


def build_epoch_plan(strategy, dataset, batch_size, rng, seed=None, fixed_positives=None):
    """Shuffle anchors into batches and attach a positive to each anchor.

    ``rng`` may be a generator or an integer seed.  ``fixed_positives`` is
    an ``N``-vector mapping each index to a positive drawn earlier.
    """
    if batch_size < 2:
        raise BatchSizeError(f"batch_size must be >= 2, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise EmptyInputError("dataset is empty")
    if not isinstance(rng, np.random.Generator):
        seed = rng
        rng = np.random.default_rng(rng)
    perm = rng.permutation(n)
    if fixed_positives is None:
        positives = select_positives(strategy, perm, dataset, rng)
    else:
        positives = np.asarray(fixed_positives)[perm]
    return [
        PairPlan(perm[s:s + batch_size], positives[s:s + batch_size], seed, strategy.label)
        for s in range(0, n, batch_size)
    ]


def find_violations(plans, dataset, strategy):
    """Brute-force check of every (anchor, positive) pair against the strategy's rule.

    Returns a list of ``(anchor, positive, reason)`` tuples.
    """
    bad = []
    w = strategy.window_seconds
    for plan in plans:
        for i, p in zip(plan.anchors.tolist(), plan.positives.tolist()):
            if strategy.kind == "augment" and p != i:
                bad.append((i, p, "augment positive differs from anchor"))
            elif strategy.kind == "sequence" and p != i:
                if dataset.locations[p] != dataset.locations[i]:
                    bad.append((i, p, "different location"))
                elif abs(dataset.timestamps[p] - dataset.timestamps[i]) > w:
                    bad.append((i, p, "outside time window"))
            elif strategy.kind in ("oracle", "oracle_same_loc"):
                if dataset.labels[p] != dataset.labels[i]:
                    bad.append((i, p, "label mismatch"))
                elif strategy.kind == "oracle_same_loc" and dataset.locations[p] != dataset.locations[i]:
                    bad.append((i, p, "different location"))
    return bad
