"""Experiment configuration, its TOML form, and the loss x strategy results matrix."""

import csv
import dataclasses
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import tomli
import tomli_w

from .data import read_csv
from .errors import ConfigError, CtxPairsError
from .evaluation import ProbeConfig, evaluate, retrieval_purity
from .losses import _DEFAULT_DISTANCE, LOSSES, LossConfig
from .model import NetworkSpec, TrainConfig, train
from .pairing import STRATEGIES, Strategy
from .synthcam import WorldConfig, label_subset, make_benchmark

log = logging.getLogger(__name__)

# Training length of the desk-scale benchmark.  The optimizer settings are
# the published ones; only the number of epochs is reduced.
BENCHMARK_EPOCHS = 20
PERCENTS = (1, 10, 100)


@dataclass(frozen=True)
class NetworkConfig:
    """Hidden widths; the encoder input width comes from the data.

    ``batch_norm="auto"`` enables batch normalization for the siamese loss only.
    """

    encoder: tuple = (256, 128)
    projector: tuple = (512, 128)
    predictor: tuple = (64,)
    batch_norm: str = "auto"

    def __post_init__(self):
        for name in ("encoder", "projector", "predictor"):
            object.__setattr__(self, name, tuple(int(d) for d in getattr(self, name)))
        if not self.encoder:
            raise ConfigError("network.encoder needs at least one layer")
        if self.batch_norm not in ("auto", "on", "off"):
            raise ConfigError(f"network.batch_norm must be auto, on or off, got {self.batch_norm!r}")

    def build(self, input_dim, loss):
        bn = loss == "simsiam" if self.batch_norm == "auto" else self.batch_norm == "on"
        return NetworkSpec((input_dim,) + self.encoder, self.projector, self.predictor, bn)


@dataclass(frozen=True)
class MatrixConfig:
    """Rows of the results matrix and the oracle-noise sweep.

    The sweep trains ``noise_loss`` with noisy-oracle positives at every
    rate in ``noise_lambdas``; an empty list skips it.
    """

    losses: tuple = LOSSES
    strategies: tuple = ("augment", "sequence", "context", "oracle")
    noise_lambdas: tuple = (0.0, 0.3, 0.9)
    noise_loss: str = "simclr"
    purity_k: int = 5
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "losses", tuple(self.losses))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "noise_lambdas", tuple(float(v) for v in self.noise_lambdas))
        for name in self.losses + (self.noise_loss,):
            if name not in LOSSES:
                raise ConfigError(f"matrix: unknown loss {name!r}")
        for name in self.strategies:
            if name not in STRATEGIES:
                raise ConfigError(f"matrix: unknown strategy {name!r}")
        if any(not 0.0 <= v <= 1.0 for v in self.noise_lambdas):
            raise ConfigError("matrix.noise_lambdas must lie in [0, 1]")
        if self.purity_k < 1 or self.workers < 1:
            raise ConfigError("matrix: purity_k and workers must be >= 1")


SECTIONS = {
    "world": WorldConfig,
    "strategy": Strategy,
    "loss": LossConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "network": NetworkConfig,
    "matrix": MatrixConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run or one matrix needs.

    ``dataset`` is a CSV path with a ``split`` column; when empty the
    synthetic world described by ``world`` is generated instead.  The
    defaults reproduce the acceptance benchmark.
    """

    dataset: str = ""
    world: WorldConfig = field(default_factory=WorldConfig)
    strategy: Strategy = field(default_factory=Strategy)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=BENCHMARK_EPOCHS))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    matrix: MatrixConfig = field(default_factory=MatrixConfig)
    percents: tuple = PERCENTS
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "percents", tuple(int(p) for p in self.percents))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        bad = [p for p in self.percents if p not in PERCENTS]
        if bad or not self.percents:
            raise ConfigError(f"percents must be a non-empty subset of {PERCENTS}, got {self.percents}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")

    def loss_for(self, name):
        """This config's loss settings applied to objective ``name``.

        A distance left at its per-loss default follows the new objective.
        """
        distance = self.loss.distance
        if distance == _DEFAULT_DISTANCE[self.loss.loss]:
            distance = None
        return dataclasses.replace(self.loss, loss=name, distance=distance)

    def to_dict(self):
        out = {"dataset": self.dataset, "percents": list(self.percents), "seeds": list(self.seeds)}
        for name in SECTIONS:
            sub = {}
            for f in dataclasses.fields(getattr(self, name)):
                value = getattr(getattr(self, name), f.name)
                if isinstance(value, tuple):
                    value = list(value)
                sub[f.name] = value
            out[name] = sub
        # leave the distance implicit when it is the loss's own default
        if self.loss.distance == _DEFAULT_DISTANCE[self.loss.loss]:
            del out["loss"]["distance"]
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kwargs = {}
        for name, sub_cls in SECTIONS.items():
            section = d.pop(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: expected a table")
            kwargs[name] = _build(sub_cls, section, name)
        top = {f.name: _field_default(f) for f in dataclasses.fields(cls)}
        for key in ("dataset", "percents", "seeds"):
            if key in d:
                kwargs[key] = _coerce(d.pop(key), top[key], key)
        if d:
            raise ConfigError(f"unknown config key {sorted(d)[0]!r}")
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid top-level value: {exc}") from None

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text):
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from None

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_toml(text)

    def with_overrides(self, overrides):
        """Apply ``{"section.key" or "key": value}`` pairs; values may be strings."""
        d = self.to_dict()
        for path, value in overrides.items():
            section, _, key = path.rpartition(".")
            if section:
                if section not in SECTIONS:
                    raise ConfigError(f"unknown config section {section!r} in {path!r}")
                d[section][key] = value
            else:
                d[key] = value
        return ExperimentConfig.from_dict(d)


def _coerce(value, default, path):
    """Convert a TOML or command-line value to the type of the field default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], path) for v in value)
        return tuple(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(default, str):
        return str(value).strip() if isinstance(value, str) else value
    return value


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _build(sub_cls, section, name):
    known = {f.name: f for f in dataclasses.fields(sub_cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        default = _field_default(known[key])
        kwargs[key] = value if default is None else _coerce(value, default, f"{name}.{key}")
    try:
        return sub_cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[{name}] {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def load_splits(cfg):
    """``(train, test)`` datasets from the CSV path or the synthetic world."""
    if cfg.dataset:
        ds = read_csv(cfg.dataset)
        if ds.split is None:
            raise ConfigError(f"{cfg.dataset}: experiments need a split column (train/test)")
        return ds.by_split("train"), ds.by_split("test")
    _, train_ds, test_ds = make_benchmark(cfg.world)
    return train_ds, test_ds


def run_one(train_ds, test_ds, cfg, loss_name, strategy, seed):
    """Train one model and probe it at every configured percent.

    Returns a dict with the per-percent accuracy, the chosen C values,
    retrieval purity on the test split and wall time.
    """
    t0 = time.perf_counter()
    loss_cfg = cfg.loss_for(loss_name)
    spec = cfg.network.build(train_ds.n_features, loss_name)
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    result = train(train_ds, strategy, loss_cfg, train_cfg, spec)
    accuracy, chosen = {}, {}
    for p in cfg.percents:
        labeled = label_subset(train_ds, p, seed)
        report = evaluate(result.params, train_ds, test_ds, labeled, cfg.probe, seed, p)
        accuracy[p], chosen[p] = report.accuracy, report.C
    purity = retrieval_purity(result.params, test_ds, cfg.matrix.purity_k)
    return {
        "accuracy": accuracy,
        "C": chosen,
        "purity": purity,
        "final_loss": result.trace[-1][1],
        "trace": [loss for _, loss, _ in result.trace],
        "seconds": time.perf_counter() - t0,
    }


@dataclass
class ResultsMatrix:
    """Per-seed outcomes of every (loss, strategy) row.

    ``runs`` maps ``(loss, strategy_label)`` to a list of per-seed dicts;
    ``failures`` maps the same keys to ``(seed, message)`` pairs.
    """

    percents: tuple
    seeds: tuple
    rows: list = field(default_factory=list)
    runs: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    @property
    def complete(self):
        return not any(self.failures.values())

    def accuracies(self, loss, strategy, percent):
        return np.array([r["accuracy"][percent] for r in self.runs.get((loss, strategy), [])])

    def mean(self, loss, strategy, percent):
        acc = self.accuracies(loss, strategy, percent)
        return float(acc.mean()) if acc.size else float("nan")

    def std(self, loss, strategy, percent):
        """Sample standard deviation over seeds (0 for a single seed)."""
        acc = self.accuracies(loss, strategy, percent)
        return float(acc.std(ddof=1)) if acc.size > 1 else 0.0 if acc.size else float("nan")

    def purity(self, loss, strategy):
        runs = self.runs.get((loss, strategy), [])
        return float(np.mean([r["purity"] for r in runs])) if runs else float("nan")

    def cells(self):
        return [(loss, s, p) for loss, s in self.rows for p in self.percents]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss", "strategy", "percent", "mean", "std", "n_seeds", "accuracies",
                    "purity_mean", "status"])
        for loss, s, p in self.cells():
            acc = self.accuracies(loss, s, p)
            fails = self.failures.get((loss, s), [])
            status = "ok" if not fails else "; ".join(f"seed {sd} failed: {m}" for sd, m in fails)
            w.writerow([loss, s, p, _fmt(self.mean(loss, s, p)), _fmt(self.std(loss, s, p)),
                        acc.size, " ".join(repr(float(a)) for a in acc),
                        _fmt(self.purity(loss, s)), status])
        return buf.getvalue()

    def to_table(self):
        """Fixed-width text table of top-1 accuracy (%) as mean +- std."""
        head = ["loss", "strategy"] + [f"{p}%" for p in self.percents] + ["purity@k"]
        body = []
        for loss, s in self.rows:
            row = [loss, s]
            for p in self.percents:
                n = self.accuracies(loss, s, p).size
                row.append("-" if n == 0 else
                           f"{100 * self.mean(loss, s, p):.1f} +- {100 * self.std(loss, s, p):.1f}")
            row.append("-" if not self.runs.get((loss, s)) else f"{self.purity(loss, s):.3f}")
            if self.failures.get((loss, s)):
                row[-1] += f"  [{len(self.failures[(loss, s)])} failed]"
            body.append(row)
        widths = [max(len(r[k]) for r in [head] + body) for k in range(len(head))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in [head] + body]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        for (loss, s), fails in self.failures.items():
            for sd, msg in fails:
                lines.append(f"! {loss}/{s} seed {sd}: {msg}")
        return "\n".join(lines) + "\n"


def _fmt(x):
    return "" if np.isnan(x) else repr(float(x))


def matrix_jobs(cfg):
    """``(loss, strategy)`` rows in output order: the grid, then the noise sweep."""
    rows = [(loss, Strategy(s, window_seconds=cfg.strategy.window_seconds, tau_c=cfg.strategy.tau_c,
                            resample=cfg.strategy.resample))
            for loss in cfg.matrix.losses for s in cfg.matrix.strategies]
    rows += [(cfg.matrix.noise_loss, Strategy("oracle_noisy", lam=lam, resample=cfg.strategy.resample))
             for lam in cfg.matrix.noise_lambdas]
    return rows


def _run_job(args):
    cfg, loss, strategy, seed, splits = args
    if splits is None:
        splits = load_splits(cfg)
    try:
        return run_one(*splits, cfg, loss, strategy, seed), None
    except CtxPairsError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_matrix(cfg, progress=None, splits=None):
    """Train and probe every (loss, strategy, seed); failures are recorded, not raised."""
    jobs = matrix_jobs(cfg)
    matrix = ResultsMatrix(cfg.percents, cfg.seeds)
    for loss, strategy in jobs:
        key = (loss, strategy.label)
        if key not in matrix.runs:
            matrix.rows.append(key)
            matrix.runs[key], matrix.failures[key] = [], []
    work = [(loss, strategy, seed) for loss, strategy in jobs for seed in cfg.seeds]
    if cfg.matrix.workers > 1:
        # each worker rebuilds the data from the config so nothing large is pickled
        payload = [(cfg, loss, st, seed, None) for loss, st, seed in work]
        with ProcessPoolExecutor(cfg.matrix.workers) as pool:
            outcomes = list(pool.map(_run_job, payload))
    else:
        splits = splits or load_splits(cfg)
        outcomes = []
        for loss, st, seed in work:
            outcomes.append(_run_job((cfg, loss, st, seed, splits)))
            if progress is not None:
                progress(loss, st.label, seed, outcomes[-1])
    for (loss, st, seed), (res, err) in zip(work, outcomes):
        key = (loss, st.label)
        if err is None:
            matrix.runs[key].append(res)
        else:
            log.error("%s/%s seed %d failed: %s", loss, st.label, seed, err)
            matrix.failures[key].append((seed, err))
    return matrix
