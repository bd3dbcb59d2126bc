"""Dataset container and CSV ingestion/export."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .context import ContextConfig, encode_contexts
from .errors import EmptyInputError, IngestionError, SupervisionError
from .io_utils import atomic_write_text


@dataclass
class Dataset:
    """Indexed observations with location/time metadata.

    ``labels`` is ``None`` for unlabeled collections.  ``split`` is an
    optional per-row marker (``"train"`` / ``"test"``) carried through CSV
    round trips.
    """

    ids: np.ndarray
    features: np.ndarray
    locations: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray = None
    context_cfg: ContextConfig = None
    split: np.ndarray = None
    contexts: np.ndarray = field(default=None, repr=False)
    meta: dict = field(default_factory=dict, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.locations = np.asarray(self.locations, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        for name in ("features", "locations", "timestamps", "labels", "split"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise IngestionError(f"{name} has {len(arr)} rows, expected {n}")
        if self.context_cfg is None:
            n_loc = int(self.locations.max()) + 1 if n else 1
            self.context_cfg = ContextConfig(n_locations=n_loc)
        if self.contexts is None:
            self.contexts = encode_contexts(self.locations, self.timestamps, self.context_cfg)

    def __len__(self):
        return len(self.ids)

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def has_labels(self):
        return self.labels is not None

    @property
    def n_classes(self):
        self.require_labels()
        return int(self.labels.max()) + 1

    def require_labels(self, what="this operation"):
        if self.labels is None:
            raise SupervisionError(f"{what} requires class labels, dataset has none")

    def subset(self, index):
        index = np.asarray(index, dtype=np.intp)
        meta = {k: (v[index] if k in ROW_META else v) for k, v in self.meta.items()}
        return Dataset(
            ids=self.ids[index],
            features=self.features[index],
            locations=self.locations[index],
            timestamps=self.timestamps[index],
            labels=None if self.labels is None else self.labels[index],
            context_cfg=self.context_cfg,
            split=None if self.split is None else self.split[index],
            contexts=self.contexts[index],
            meta=meta,
        )

    def with_context_config(self, cfg):
        return Dataset(self.ids, self.features, self.locations, self.timestamps,
                       self.labels, cfg, self.split)

    def cached(self, key, build):
        """Memoize a derived index structure (class groups, sequence windows...)."""
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def by_split(self, name):
        if self.split is None:
            raise IngestionError("dataset has no split column")
        return self.subset(np.flatnonzero(self.split == name))


CSV_FIXED = ("id", "location", "timestamp")
ROW_META = ("bursts",)


def to_csv_text(ds):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["id", "location", "timestamp", "label"]
    if ds.split is not None:
        header.append("split")
    header += [f"f{k}" for k in range(ds.n_features)]
    w.writerow(header)
    for r in range(len(ds)):
        row = [int(ds.ids[r]), int(ds.locations[r]), repr(float(ds.timestamps[r])),
               "" if ds.labels is None else int(ds.labels[r])]
        if ds.split is not None:
            row.append(ds.split[r])
        row += [repr(float(v)) for v in ds.features[r]]
        w.writerow(row)
    return buf.getvalue()


def write_csv(ds, path):
    atomic_write_text(path, to_csv_text(ds))


def read_csv(path, context_cfg=None):
    """Load ``id,location,timestamp[,label][,split],f0..f{D-1}``.

    An empty label cell on every row means the dataset is unlabeled; a mix
    of empty and filled cells is an ingestion error.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyInputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:3]) != CSV_FIXED:
        raise IngestionError(f"{path}: header must start with id,location,timestamp, got {header[:3]}")
    col = {name: k for k, name in enumerate(header)}
    fcols = [name for name in header if name.startswith("f") and name[1:].isdigit()]
    if not fcols:
        raise IngestionError(f"{path}: no feature columns f0..")
    expected = [f"f{k}" for k in range(len(fcols))]
    if fcols != expected:
        raise IngestionError(f"{path}: feature columns must be f0..f{len(fcols) - 1} in order")
    unknown = set(header) - set(CSV_FIXED) - {"label", "split"} - set(fcols)
    if unknown:
        raise IngestionError(f"{path}: unknown columns {sorted(unknown)}")
    body = rows[1:]
    if not body:
        raise EmptyInputError(f"{path}: no data rows")
    n = len(body)
    ids = np.empty(n, dtype=np.int64)
    locs = np.empty(n, dtype=np.int64)
    ts = np.empty(n)
    feats = np.empty((n, len(fcols)))
    label_cells = []
    splits = [] if "split" in col else None
    fstart = col["f0"]
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        k = r - 2
        try:
            ids[k] = int(row[col["id"]])
        except ValueError:
            raise IngestionError(f"{path}: row {r}, column id: {row[col['id']]!r} is not an integer") from None
        try:
            locs[k] = int(row[col["location"]])
        except ValueError:
            raise IngestionError(f"{path}: row {r}, column location: not an integer") from None
        try:
            ts[k] = float(row[col["timestamp"]])
        except ValueError:
            raise IngestionError(f"{path}: row {r}, column timestamp: not a number") from None
        if "label" in col:
            label_cells.append(row[col["label"]].strip())
        if splits is not None:
            splits.append(row[col["split"]].strip())
        try:
            feats[k] = [float(v) for v in row[fstart:fstart + len(fcols)]]
        except ValueError:
            raise IngestionError(f"{path}: row {r}: non-numeric feature value") from None
    if locs.min() < 0:
        raise IngestionError(f"{path}: negative location id")
    if len(set(ids.tolist())) != n:
        raise IngestionError(f"{path}: duplicate ids")
    labels = None
    if label_cells and any(label_cells):
        if not all(label_cells):
            first = label_cells.index("") + 2
            raise IngestionError(f"{path}: row {first}, column label: missing value")
        try:
            labels = np.array([int(v) for v in label_cells])
        except ValueError:
            raise IngestionError(f"{path}: column label: non-integer value") from None
        if labels.min() < 0:
            raise IngestionError(f"{path}: column label: negative class id")
    split = np.array(splits, dtype=object) if splits is not None else None
    if context_cfg is None:
        context_cfg = ContextConfig(n_locations=int(locs.max()) + 1)
    return Dataset(ids, feats, locs, ts, labels, context_cfg, split)
