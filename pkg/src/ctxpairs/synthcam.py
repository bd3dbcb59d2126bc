"""Synthetic camera-trap world.

Each deployment (location) hosts a small pool of species.  Species visit
in short bursts of frames a second or two apart, at hours drawn from a
per-species daily activity profile, during a limited deployment period.
A frame's feature vector is

    prototype[class] + variant[class, day|night, pose] + viewpoint[pose]
    + background[location] + individual[burst] + noise

so frames within a burst share class, pose, location, background and the
individual's appearance, while other bursts at the same place and time of
day usually share only the class.  The viewpoint term is common to all
species and is off by default.  Background and individual terms live in
low-rank random subspaces and are the nuisance a good encoder should
discard.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .context import SECONDS_PER_DAY, ContextConfig, hour_of_day
from .data import Dataset
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldConfig:
    n_locations: int = 40
    n_classes: int = 12
    pool_size: int = 4
    feature_dim: int = 32
    n_modes: int = 2
    n_poses: int = 8
    pose_scale: float = 1.5
    viewpoint_scale: float = 0.0
    prototype_scale: float = 1.0
    background_scale: float = 1.0
    background_rank: int = 6
    individual_scale: float = 3.0
    individual_rank: int = 8
    sigma_obs: float = 0.2
    imbalance: float = 0.5
    mean_burst_length: float = 3.0
    max_burst_length: int = 6
    max_frame_gap: float = 2.0
    deployment_days: float = 30.0
    activity_spread_hours: float = 1.0
    contamination: float = 0.0
    n_train: int = 8000
    n_test: int = 4000
    held_out_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_locations < 1 or self.n_classes < 1:
            raise ConfigError("world: n_locations and n_classes must be >= 1")
        if not 1 <= self.pool_size <= self.n_classes:
            raise ConfigError(f"world.pool_size must lie in [1, n_classes], got {self.pool_size}")
        if self.n_locations * self.pool_size < self.n_classes:
            raise ConfigError("world: location pools cannot cover every class")
        if self.n_samples < self.n_classes:
            raise ConfigError(f"world: need at least one sample per class, got {self.n_samples} samples")
        if self.sigma_obs < 0:
            raise ConfigError("world.sigma_obs must be >= 0")
        if self.viewpoint_scale < 0 or self.pose_scale < 0:
            raise ConfigError("world: pose_scale and viewpoint_scale must be >= 0")
        if self.n_poses < 1:
            raise ConfigError("world.n_poses must be >= 1")
        if self.n_modes not in (1, 2):
            raise ConfigError("world.n_modes must be 1 (no day/night variants) or 2")
        if self.mean_burst_length < 1 or self.max_burst_length < 1:
            raise ConfigError("world: burst lengths must be >= 1")
        if not 0 < self.max_frame_gap:
            raise ConfigError("world.max_frame_gap must be > 0")
        if not 0.0 <= self.contamination <= 1.0:
            raise ConfigError("world.contamination must lie in [0, 1]")
        if not 0.0 <= self.held_out_fraction < 1.0:
            raise ConfigError("world.held_out_fraction must lie in [0, 1)")
        if self.feature_dim < 1 or self.deployment_days <= 0:
            raise ConfigError("world: feature_dim and deployment_days must be positive")
        if min(self.background_rank, self.individual_rank) < 0:
            raise ConfigError("world: nuisance ranks must be >= 0")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("world: n_train and n_test must be >= 0")

    @property
    def n_samples(self):
        return self.n_train + self.n_test


def draw_prototypes(n, dim, rng, max_cos=0.5, max_draws=100_000):
    """Unit vectors with pairwise cosine below ``max_cos``, by rejection."""
    protos = []
    draws = 0
    while len(protos) < n:
        if draws >= max_draws:
            raise ConfigError(f"could not place {n} prototypes in {dim} dimensions "
                              f"with pairwise cosine < {max_cos}; increase feature_dim")
        draws += 1
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(float(v @ p) < max_cos for p in protos):
            protos.append(v)
    return np.array(protos)


def power_law_counts(total, n_classes, exponent):
    """Per-class counts proportional to ``1 / rank**exponent``, each at least 1."""
    w = 1.0 / np.arange(1, n_classes + 1) ** exponent
    w /= w.sum()
    spare = total - n_classes
    raw = w * spare
    counts = np.floor(raw).astype(int)
    remainder = spare - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:remainder]] += 1
    return counts + 1


def _location_pools(cfg, rng):
    """Consecutive windows over a shuffled class list, so every class is hosted somewhere."""
    perm = rng.permutation(cfg.n_classes)
    pools = [[int(perm[(l * cfg.pool_size + j) % cfg.n_classes]) for j in range(cfg.pool_size)]
             for l in range(cfg.n_locations)]
    return [pools[l] for l in rng.permutation(cfg.n_locations)]


def _subspace(dim, rank, rng):
    if rank == 0:
        return np.zeros((0, dim))
    q, _ = np.linalg.qr(rng.normal(size=(dim, rank)))
    return q.T[:rank]


def generate_world(cfg):
    """Draw a labelled world of ``cfg.n_samples`` frames; deterministic in ``cfg.seed``.

    The returned dataset's ``meta`` holds the burst id of every frame,
    the location pools, prototypes and per-class activity peaks.
    """
    rng = np.random.default_rng(cfg.seed)
    D = cfg.feature_dim
    protos = draw_prototypes(cfg.n_classes, D, rng) * cfg.prototype_scale
    # one independent appearance centre per (class, day/night mode, pose)
    variants = np.zeros((cfg.n_classes, 2, cfg.n_poses, D))
    if cfg.n_modes == 2 or cfg.n_poses > 1:
        m = rng.normal(size=(cfg.n_classes, cfg.n_modes, cfg.n_poses, D))
        m = cfg.pose_scale * m / np.linalg.norm(m, axis=3, keepdims=True)
        variants[:] = m if cfg.n_modes == 2 else m[:, [0, 0]]
    # camera viewpoint looks the same whatever the species
    viewpoints = rng.normal(size=(cfg.n_poses, D))
    viewpoints *= cfg.viewpoint_scale / np.linalg.norm(viewpoints, axis=1, keepdims=True)
    bg_basis = _subspace(D, min(cfg.background_rank, D), rng)
    ind_basis = _subspace(D, min(cfg.individual_rank, D), rng)
    backgrounds = cfg.background_scale * rng.normal(size=(cfg.n_locations, len(bg_basis))) @ bg_basis \
        / max(math.sqrt(len(bg_basis)), 1.0)
    pools = _location_pools(cfg, rng)
    hosts = [[l for l in range(cfg.n_locations) if c in pools[l]] for c in range(cfg.n_classes)]
    # activity peaks spread evenly over the day, so species sharing a site are
    # mostly separated in time
    peaks = np.mod(rng.permutation(cfg.n_classes) * 24.0 / cfg.n_classes
                   + rng.uniform(-0.5, 0.5, cfg.n_classes), 24.0)
    start_day = rng.uniform(0.0, 365.0, cfg.n_locations)
    counts = power_law_counts(cfg.n_samples, cfg.n_classes, cfg.imbalance)

    busy = [[] for _ in range(cfg.n_locations)]
    labels, locs, times, bursts = [], [], [], []
    burst_id = 0
    for c in range(cfg.n_classes):
        left = int(counts[c])
        while left > 0:
            length = min(left, cfg.max_burst_length,
                         1 + int(rng.poisson(cfg.mean_burst_length - 1.0)))
            loc = hosts[c][int(rng.integers(len(hosts[c])))]
            gaps = rng.uniform(0.5, cfg.max_frame_gap, length - 1)
            offsets = np.r_[0.0, np.cumsum(gaps)]
            for _ in range(1000):
                day = math.floor(start_day[loc] + rng.uniform(0.0, cfg.deployment_days))
                hour = np.mod(rng.normal(peaks[c], cfg.activity_spread_hours), 24.0)
                t0 = day * SECONDS_PER_DAY + hour * 3600.0
                span = (t0 - 10.0, t0 + offsets[-1] + 10.0)
                # keep bursts at one location apart so a short time window never mixes them
                if all(span[1] < a or span[0] > b for a, b in busy[loc]):
                    break
            else:
                raise ConfigError("world: could not schedule a non-overlapping burst")
            busy[loc].append(span)
            frame_labels = np.full(length, c)
            if cfg.contamination > 0 and len(pools[loc]) > 1:
                swap = rng.random(length) < cfg.contamination
                swap[0] = False
                others = [k for k in pools[loc] if k != c]
                frame_labels[swap] = rng.choice(others, size=int(swap.sum()))
            labels.append(frame_labels)
            locs.append(np.full(length, loc))
            times.append(t0 + offsets)
            bursts.append(np.full(length, burst_id))
            burst_id += 1
            left -= length

    labels = np.concatenate(labels)
    locs = np.concatenate(locs)
    times = np.concatenate(times)
    bursts = np.concatenate(bursts)
    n = len(labels)
    burst_pose = rng.integers(cfg.n_poses, size=burst_id)
    individuals = cfg.individual_scale * rng.normal(size=(burst_id, len(ind_basis))) @ ind_basis \
        / max(math.sqrt(len(ind_basis)), 1.0)
    night = ((hour_of_day(times) < 6.0) | (hour_of_day(times) >= 18.0)).astype(int)
    feats = (protos[labels] + variants[labels, night, burst_pose[bursts]]
             + viewpoints[burst_pose[bursts]] + backgrounds[locs] + individuals[bursts]
             + cfg.sigma_obs * rng.normal(size=(n, D)))
    order = rng.permutation(n)
    ds = Dataset(
        ids=np.arange(n),
        features=feats[order],
        locations=locs[order],
        timestamps=times[order],
        labels=labels[order],
        context_cfg=ContextConfig(n_locations=cfg.n_locations),
    )
    ds.meta = {"bursts": bursts[order], "pools": pools, "prototypes": protos,
               "activity_peaks": peaks, "n_classes": cfg.n_classes}
    return ds


def split_train_test(dataset, held_out_location_fraction=0.1, seed=0, train_fraction=0.7,
                     train_size=None, max_attempts=100):
    """Partition by location, then by sample.

    ``round(fraction * n_locations)`` locations go to test only; samples at
    the remaining locations are split so that ``train_size`` (or
    ``train_fraction`` of them) land in train.  Partitions that leave a
    class without training samples are redrawn with the next seed.
    """
    if not 0.0 <= held_out_location_fraction < 1.0:
        raise ConfigError("held_out_location_fraction must lie in [0, 1)")
    present = np.unique(dataset.locations)
    n_held = int(round(held_out_location_fraction * len(present)))
    classes = np.unique(dataset.labels) if dataset.has_labels else None
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        held = rng.choice(present, size=n_held, replace=False)
        held_mask = np.isin(dataset.locations, held)
        shared = np.flatnonzero(~held_mask)
        k = int(round(train_fraction * len(shared))) if train_size is None else int(train_size)
        if k > len(shared):
            raise ConfigError(f"train_size {k} exceeds the {len(shared)} samples at shared locations")
        train_idx = np.sort(rng.choice(shared, size=k, replace=False))
        test_mask = np.ones(len(dataset), dtype=bool)
        test_mask[train_idx] = False
        test_idx = np.flatnonzero(test_mask)
        if classes is None or np.array_equal(np.unique(dataset.labels[train_idx]), classes):
            if attempt:
                log.info("split: accepted partition after %d redraws", attempt)
            train, test = dataset.subset(train_idx), dataset.subset(test_idx)
            for part in (train, test):
                part.meta["held_out_locations"] = np.sort(held)
            return train, test
    raise ConfigError(f"split: every class could not be kept in train after {max_attempts} attempts")


def label_subset(train, percent, seed=0):
    """Stratified labelled subset: ``ceil(percent% of each class)``, at least one per class."""
    if percent not in (1, 10, 100):
        raise ConfigError(f"label percent must be 1, 10 or 100, got {percent}")
    train.require_labels("label_subset")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in np.unique(train.labels):
        members = np.flatnonzero(train.labels == c)
        k = max(1, math.ceil(len(members) * percent / 100.0))
        chosen.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(chosen))


def make_benchmark(cfg=None):
    """Default world, split into the train/test sizes the config asks for."""
    cfg = cfg or WorldConfig()
    world = generate_world(cfg)
    train, test = split_train_test(world, cfg.held_out_fraction, cfg.seed, train_size=cfg.n_train)
    return world, train, test
