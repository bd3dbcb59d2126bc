"""Dense encoder / projector / predictor networks and the SSL training loop."""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .errors import (BatchSizeError, ConfigError, DimensionError, EmptyInputError, RangeError,
                     VersionError)
from .io_utils import atomic_write_bytes, atomic_write_text
from .losses import LossConfig, simclr_two_view_loss, simsiam_loss, triplet_loss
from .pairing import Strategy, build_epoch_plan, negative_positions, select_positives

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTXPAIRS-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths of the three networks.

    ``encoder`` lists the input width followed by every layer output; a
    ReLU follows each encoder layer.  ``projector`` and ``predictor`` list
    hidden widths then the output width, with ReLU on hidden layers only.
    The predictor's output width is forced to the projector's.  With
    ``batch_norm`` the first projector and predictor layers are followed by
    batch normalization before their ReLU.
    """

    encoder: tuple = (32, 256, 128)
    projector: tuple = (512, 128)
    predictor: tuple = (64,)
    batch_norm: bool = False

    def __post_init__(self):
        for name in ("encoder", "projector", "predictor"):
            dims = tuple(int(d) for d in getattr(self, name))
            if any(d < 1 for d in dims):
                raise ConfigError(f"network.{name}: widths must be positive, got {dims}")
            object.__setattr__(self, name, dims)
        object.__setattr__(self, "batch_norm", bool(self.batch_norm))
        if not self.encoder:
            raise ConfigError("network.encoder needs at least the input width")
        if not self.projector:
            raise ConfigError("network.projector needs an output width")

    @property
    def input_dim(self):
        return self.encoder[0]

    @property
    def feature_dim(self):
        return self.encoder[-1]

    @property
    def embedding_dim(self):
        return self.projector[-1]

    def layer_shapes(self, with_predictor):
        shapes = []
        enc = self.encoder
        shapes += [("enc", k, enc[k], enc[k + 1]) for k in range(len(enc) - 1)]
        proj = (self.feature_dim,) + self.projector
        shapes += [("proj", k, proj[k], proj[k + 1]) for k in range(len(proj) - 1)]
        if with_predictor:
            pred = (self.embedding_dim,) + self.predictor + (self.embedding_dim,)
            shapes += [("pred", k, pred[k], pred[k + 1]) for k in range(len(pred) - 1)]
        return shapes

    def norm_layers(self, with_predictor):
        """``(net, width)`` of every batch-normalized layer."""
        if not self.batch_norm:
            return []
        out = []
        if len(self.projector) > 1:
            out.append(("proj", self.projector[0]))
        if with_predictor and len(self.predictor) > 0:
            out.append(("pred", self.predictor[0]))
        return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0005
    schedule: str = "cosine"
    noise_sigma: float = 0.1
    drop_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError(f"train.drop_prob must lie in [0, 1), got {self.drop_prob}")
        if self.noise_sigma < 0:
            raise ConfigError(f"train.noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"train.schedule must be cosine or constant, got {self.schedule!r}")


@dataclass
class ModelParams:
    spec: NetworkSpec
    tensors: dict
    momentum: dict
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @property
    def has_predictor(self):
        return any(name.startswith("pred.") for name in self.tensors)

    def values(self):
        return {k: t.value for k, t in self.tensors.items()}

    def copy(self):
        return ModelParams(
            self.spec,
            {k: ag.Tensor(t.value, requires_grad=True, name=k) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.momentum.items()},
            self.epoch,
            json.loads(json.dumps(self.rng_state)),
            {k: v.copy() for k, v in self.buffers.items()},
        )


def init_params(spec, rng, with_predictor=False):
    """Glorot-uniform weights, zero biases, zero momentum buffers."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    tensors = {}
    for net, k, fan_in, fan_out in spec.layer_shapes(with_predictor):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"{net}.{k}.W"] = ag.Tensor(w, requires_grad=True, name=f"{net}.{k}.W")
        tensors[f"{net}.{k}.b"] = ag.Tensor(np.zeros((1, fan_out)), requires_grad=True,
                                            name=f"{net}.{k}.b")
    buffers = {}
    for net, width in spec.norm_layers(with_predictor):
        for name, fill in (("gamma", 1.0), ("beta", 0.0)):
            key = f"{net}.bn.{name}"
            tensors[key] = ag.Tensor(np.full((1, width), fill), requires_grad=True, name=key)
        buffers[f"{net}.bn.mean"] = np.zeros((1, width))
        buffers[f"{net}.bn.var"] = np.ones((1, width))
    momentum = {k: np.zeros_like(t.value) for k, t in tensors.items()}
    return ModelParams(spec, tensors, momentum, buffers=buffers)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(params, net, x, training):
    """Normalize each column with batch statistics (training) or running ones."""
    gamma = params.tensors[f"{net}.bn.gamma"]
    beta = params.tensors[f"{net}.bn.beta"]
    if training:
        if x.shape[0] < 2:
            raise BatchSizeError("batch normalization needs at least two rows")
        mu = ag.mean(x, axis=0)
        centred = ag.sub(x, mu)
        var = ag.mean(ag.mul(centred, centred), axis=0)
        xhat = ag.div(centred, ag.sqrt(ag.add(var, BN_EPS)))
        n = x.shape[0]
        run_mean, run_var = params.buffers[f"{net}.bn.mean"], params.buffers[f"{net}.bn.var"]
        params.buffers[f"{net}.bn.mean"] = (1 - BN_MOMENTUM) * run_mean + BN_MOMENTUM * mu.value
        params.buffers[f"{net}.bn.var"] = ((1 - BN_MOMENTUM) * run_var
                                           + BN_MOMENTUM * var.value * n / (n - 1))
    else:
        mu = params.buffers[f"{net}.bn.mean"]
        sd = np.sqrt(params.buffers[f"{net}.bn.var"] + BN_EPS)
        xhat = ag.div(ag.sub(x, mu), sd)
    return ag.add(ag.mul(xhat, gamma), beta)


def _mlp(params, net, x, relu_last, training=False):
    k = 0
    while f"{net}.{k}.W" in params.tensors:
        x = ag.add(ag.matmul(x, params.tensors[f"{net}.{k}.W"]), params.tensors[f"{net}.{k}.b"])
        if k == 0 and f"{net}.bn.gamma" in params.tensors:
            x = batch_norm(params, net, x, training)
        last = f"{net}.{k + 1}.W" not in params.tensors
        if relu_last or not last:
            x = ag.relu(x)
        k += 1
    return x


def encode(params, x):
    x = ag._as_tensor(x)
    if x.shape[1] != params.spec.input_dim:
        raise DimensionError(f"input width {x.shape[1]} != encoder input {params.spec.input_dim}")
    return _mlp(params, "enc", x, relu_last=True)


def project(params, f, training=False):
    return _mlp(params, "proj", f, relu_last=False, training=training)


def predict(params, z, training=False):
    return _mlp(params, "pred", z, relu_last=False, training=training)


def forward(params, x, with_prediction=False, training=False):
    """``(f(x), g(f(x)), h(g(f(x))) or None)``.

    ``training`` only matters for batch-normalized layers: batch statistics
    are used and the running averages updated.
    """
    f = encode(params, x)
    z = project(params, f, training)
    p = predict(params, z, training) if with_prediction else None
    return f, z, p


def augment(x, noise_sigma, drop_prob, rng):
    """``mask * (x + noise)`` with Gaussian noise and Bernoulli coordinate dropout."""
    x = np.asarray(x, dtype=np.float64)
    noise = rng.normal(0.0, 1.0, size=x.shape) * noise_sigma
    keep = rng.random(x.shape) >= drop_prob
    return (x + noise) * keep


def cosine_lr(t, total, base_lr):
    if not 0 <= t < total:
        raise RangeError(f"epoch {t} outside [0, {total})")
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t / total))


def sgd_step(params, grads, lr, momentum, weight_decay):
    """Momentum SGD with weight decay folded into the gradient.

    ``v <- momentum * v + (grad + weight_decay * theta)``;
    ``theta <- theta - lr * v``.  Parameter arrays are replaced, not
    mutated, so tapes that captured the old values stay valid.
    """
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != t.value.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {t.value.shape}")
        v = momentum * params.momentum[name] + (g + weight_decay * t.value)
        params.momentum[name] = v
        t.value = t.value - lr * v
    return params


MIN_BATCH = {"simclr": 4, "triplet": 2, "simsiam": 1}


def batch_loss(params, loss_cfg, v1, v2, rng):
    """Loss on one batch of paired views; records onto the active tape."""
    _, z1, _ = forward(params, v1, training=True)
    _, z2, _ = forward(params, v2, training=True)
    if loss_cfg.loss == "simclr":
        return simclr_two_view_loss(z1, z2, loss_cfg.temperature, loss_cfg.distance,
                                    loss_cfg.symmetric)
    if loss_cfg.loss == "triplet":
        neg = negative_positions(z1.shape[0], rng)
        return triplet_loss(z1, z2, ag.take_rows(z1, neg), loss_cfg.margin, loss_cfg.distance)
    return simsiam_loss(z1, z2, lambda z: predict(params, z, training=True), loss_cfg.distance,
                        loss_cfg.stop_gradient)


@dataclass
class TrainResult:
    params: ModelParams
    trace: list

    def write_trace(self, path):
        write_trace(self.trace, path)


def _streams(seed):
    init_ss, pair_ss, batch_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(pair_ss),
            np.random.default_rng(batch_ss))


def train(dataset, strategy=None, loss_cfg=None, train_cfg=None, spec=None, progress=None):
    """Self-supervised training; deterministic for a fixed ``train_cfg.seed``.

    Returns the trained parameters and a trace of ``(epoch, mean_loss, lr)``.
    """
    strategy = strategy or Strategy()
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    if len(dataset) == 0:
        raise EmptyInputError("cannot train on an empty dataset")
    if strategy.needs_labels:
        dataset.require_labels(f"strategy {strategy.kind!r}")
    if spec is None:
        spec = NetworkSpec(encoder=(dataset.n_features, 256, 128),
                           batch_norm=loss_cfg.loss == "simsiam")
    if spec.input_dim != dataset.n_features:
        raise DimensionError(f"dataset has {dataset.n_features} features, network expects {spec.input_dim}")

    init_rng, pair_rng, batch_rng = _streams(train_cfg.seed)
    params = init_params(spec, init_rng, with_predictor=loss_cfg.loss == "simsiam")
    X = dataset.features
    fixed = None
    if not strategy.resample:
        fixed = select_positives(strategy, np.arange(len(dataset)), dataset, pair_rng)
    min_batch = MIN_BATCH[loss_cfg.loss]
    trace = []
    for epoch in range(train_cfg.epochs):
        if train_cfg.schedule == "cosine":
            lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr)
        else:
            lr = train_cfg.lr
        plans = build_epoch_plan(strategy, dataset, train_cfg.batch_size, pair_rng,
                                 seed=train_cfg.seed, fixed_positives=fixed)
        losses = []
        for plan in plans:
            if len(plan) < max(min_batch, 2 if spec.batch_norm else 1):
                continue
            v1 = augment(X[plan.anchors], train_cfg.noise_sigma, train_cfg.drop_prob, batch_rng)
            v2 = augment(X[plan.positives], train_cfg.noise_sigma, train_cfg.drop_prob, batch_rng)
            with ag.Tape() as tape:
                loss = batch_loss(params, loss_cfg, v1, v2, batch_rng)
            for t in params.tensors.values():
                t.zero_grad()
            tape.backward(loss)
            grads = {k: t.grad for k, t in params.tensors.items()}
            sgd_step(params, grads, lr, train_cfg.momentum, train_cfg.weight_decay)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        trace.append((epoch, mean_loss, float(lr)))
        if progress is not None:
            progress(epoch, mean_loss, lr)
        log.debug("epoch %d loss %.6f lr %.6g", epoch, mean_loss, lr)
    params.epoch = train_cfg.epochs
    params.rng_state = {"pairing": pair_rng.bit_generator.state,
                        "batch": batch_rng.bit_generator.state}
    return TrainResult(params, trace)


def extract_features(params, x, batch=4096):
    """Encoder output for every row of ``x``; no augmentation, no tape."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match encoder input {params.spec.input_dim}")
    return np.vstack([encode(params, x[s:s + batch]).value for s in range(0, max(len(x), 1), batch)])


def embed(params, x, batch=4096):
    """Projector output ``g(f(x))`` for every row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return np.vstack([forward(params, x[s:s + batch])[1].value
                      for s in range(0, max(len(x), 1), batch)])


def write_trace(trace, path):
    lines = ["epoch,mean_loss,lr"]
    lines += [f"{e},{loss!r},{lr!r}" for e, loss, lr in trace]
    atomic_write_text(path, "\n".join(lines) + "\n")


def checkpoint_bytes(params, extra=None):
    """Serialize parameters and optimizer state.

    Layout: magic line, 8-byte little-endian header length, JSON header,
    then every tensor as little-endian row-major float64.
    """
    entries = []
    blobs = []
    offset = 0
    for kind, store in (("param", params.values()), ("momentum", params.momentum),
                        ("buffer", params.buffers)):
        for name in sorted(store):
            arr = np.ascontiguousarray(store[name], dtype="<f8")
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "network": asdict(params.spec),
        "epoch": params.epoch,
        "rng_state": params.rng_state,
        "tensors": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(params, path, extra=None):
    atomic_write_bytes(path, checkpoint_bytes(params, extra))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise VersionError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    header = json.loads(data[pos + 8:pos + 8 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint format {header.get('format_version')} "
                           f"unsupported (expected {CHECKPOINT_VERSION})")
    body = data[pos + 8 + hlen:]
    spec = NetworkSpec(**{k: tuple(v) if isinstance(v, list) else v
                          for k, v in header["network"].items()})
    tensors, momentum, buffers = {}, {}, {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
        if e["kind"] == "param":
            tensors[e["name"]] = ag.Tensor(arr, requires_grad=True, name=e["name"])
        elif e["kind"] == "momentum":
            momentum[e["name"]] = arr
        else:
            buffers[e["name"]] = arr
    with_pred = any(k.startswith("pred.") for k in tensors)
    expected = {}
    for net, k, fi, fo in spec.layer_shapes(with_pred):
        expected[f"{net}.{k}.W"] = (fi, fo)
        expected[f"{net}.{k}.b"] = (1, fo)
    expected_buffers = {}
    for net, width in spec.norm_layers(with_pred):
        expected[f"{net}.bn.gamma"] = expected[f"{net}.bn.beta"] = (1, width)
        expected_buffers[f"{net}.bn.mean"] = expected_buffers[f"{net}.bn.var"] = (1, width)
    got = {k: t.shape for k, t in tensors.items()}
    got_buffers = {k: v.shape for k, v in buffers.items()}
    if got != expected or set(momentum) != set(tensors) or got_buffers != expected_buffers:
        raise VersionError(f"{path}: tensors do not match the declared network {spec}")
    ordered = {k: tensors[k] for k in expected}
    params = ModelParams(spec, ordered, {k: momentum[k] for k in expected},
                         header["epoch"], header["rng_state"], buffers)
    return params, header["extra"]
