"""Feature/label/config I/O, run configuration and synthetic two-domain data.

Feature matrices are held in memory as ``d x n`` float64 arrays (one sample
per column).  CSV files store one sample per row and are transposed on load.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"PWF1"
FORMAT_VERSION = 1
_FEATURE_HEADER = struct.Struct("<IQQ")


class DataFormatError(ValueError):
    """Raised when a file does not parse under its declared format."""


class ConfigError(ValueError):
    """Raised for an invalid configuration key or value."""


# ---------------------------------------------------------------------------
# feature matrices
# ---------------------------------------------------------------------------


def check_features(X, name="features"):
    """Return ``X`` as a finite float64 ``d x n`` array or raise."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataFormatError(f"{name}: expected a 2-D matrix, got shape {X.shape}")
    d, n = X.shape
    if d == 0 or n == 0:
        raise DataFormatError(f"{name}: empty dataset (d={d}, n={n})")
    bad = np.argwhere(~np.isfinite(X))
    if bad.size:
        row, col = bad[0]
        raise DataFormatError(
            f"{name}: non-finite value at row {row}, column {col}")
    return X


def save_feature_matrix(path, X, format="binary"):
    X = check_features(X)
    path = Path(path)
    if format == "binary":
        d, n = X.shape
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(_FEATURE_HEADER.pack(FORMAT_VERSION, d, n))
            fh.write(X.astype("<f8").tobytes(order="F"))
    elif format == "csv":
        # rows = samples
        np.savetxt(path, X.T, delimiter=",", fmt="%.17g")
    else:
        raise ValueError(f"unknown feature format {format!r}")


def load_feature_matrix(path, format=None):
    """Load a ``d x n`` feature matrix.

    ``format`` is ``"binary"`` (PWF1) or ``"csv"``; when omitted it is
    inferred from the file suffix (``.csv`` means CSV, anything else binary).
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "binary":
        return _load_binary_features(path)
    if format == "csv":
        return _load_csv_features(path)
    raise ValueError(f"unknown feature format {format!r}")


def _load_binary_features(path):
    raw = Path(path).read_bytes()
    head = len(FEATURE_MAGIC) + _FEATURE_HEADER.size
    if len(raw) < head or raw[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: malformed header (bad magic or truncated)")
    version, d, n = _FEATURE_HEADER.unpack_from(raw, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if d == 0 or n == 0:
        raise DataFormatError(f"{path}: empty dataset (d={d}, n={n})")
    expected = d * n * 8
    if len(raw) - head != expected:
        raise DataFormatError(
            f"{path}: dimension mismatch, header says {d}x{n} "
            f"({expected} bytes) but payload has {len(raw) - head} bytes")
    X = np.frombuffer(raw, dtype="<f8", offset=head).reshape((d, n), order="F")
    return check_features(X.astype(np.float64), name=str(path))


def _load_csv_features(path):
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec or all(not f.strip() for f in rec):
                continue
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise DataFormatError(
                    f"{path}: dimension mismatch at row {i}: "
                    f"{len(rec)} fields, expected {width}")
            vals = []
            for j, f in enumerate(rec):
                try:
                    v = float(f)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: unparsable value {f!r} at row {i}, column {j}"
                    ) from None
                if not math.isfinite(v):
                    raise DataFormatError(
                        f"{path}: non-finite value at row {i}, column {j}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: empty dataset")
    return np.array(rows, dtype=np.float64).T.copy()


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def check_labels(labels, num_classes, name="labels"):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataFormatError(f"{name}: expected a 1-D label vector")
    if num_classes < 1:
        raise DataFormatError(f"{name}: need at least one class")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= num_classes))[0])
        raise DataFormatError(
            f"{name}: label {labels[bad]} at position {bad} outside [0, {num_classes})")
    return labels.astype(np.int64)


def save_labels(path, labels):
    labels = np.asarray(labels, dtype=np.int64)
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")


def load_labels(path):
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise DataFormatError(f"{path}: bad label {line!r} on line {i + 1}") from None
    return np.array(out, dtype=np.int64)


def one_hot(labels, num_classes):
    """``c x n`` one-hot matrix whose column maxima mark the class."""
    labels = np.asarray(labels, dtype=np.int64)
    Y = np.zeros((num_classes, labels.size))
    Y[labels, np.arange(labels.size)] = 1.0
    return Y


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine map ``(x - mean) / scale`` fitted on pooled data."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X = check_features(X)
        mean = X.mean(axis=1)
        scale = X.std(axis=1)
        # constant features are centred but left unscaled
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.mean.size:
            raise ValueError(
                f"dimension mismatch: data has d={X.shape[0]}, "
                f"standardizer expects d={self.mean.size}")
        return (X - self.mean[:, None]) / self.scale[:, None]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetPair:
    """Labelled source domain plus unlabelled target domain.

    ``target_truth`` exists for evaluation only; training functions never
    read it.
    """

    source: np.ndarray
    source_labels: np.ndarray
    target: np.ndarray
    num_classes: int
    target_truth: np.ndarray | None = None

    def __post_init__(self):
        self.source = check_features(self.source, "source")
        self.target = check_features(self.target, "target")
        if self.source.shape[0] != self.target.shape[0]:
            raise DataFormatError(
                f"source dim {self.source.shape[0]} != target dim {self.target.shape[0]}")
        if self.num_classes < 2:
            raise DataFormatError("need at least two classes")
        self.source_labels = check_labels(self.source_labels, self.num_classes, "source labels")
        if self.source_labels.size != self.source.shape[1]:
            raise DataFormatError(
                f"{self.source_labels.size} source labels for {self.source.shape[1]} samples")
        if self.target_truth is not None:
            self.target_truth = check_labels(self.target_truth, self.num_classes, "target truth")
            if self.target_truth.size != self.target.shape[1]:
                raise DataFormatError(
                    f"{self.target_truth.size} target labels for {self.target.shape[1]} samples")

    @property
    def dim(self):
        return self.source.shape[0]

    @property
    def n_source(self):
        return self.source.shape[1]

    @property
    def n_target(self):
        return self.target.shape[1]


@dataclass(frozen=True)
class ShiftSpec:
    """Source-to-target shift: rotation in the first two coordinates,
    translation of norm ``translation`` along a seeded random direction,
    and additive Gaussian noise of standard deviation ``noise``."""

    rotation_deg: float = 0.0
    translation: float = 0.0
    noise: float = 0.0

    @classmethod
    def identity(cls):
        return cls()


def _balanced_labels(n, c, rng):
    labels = np.arange(n) % c
    rng.shuffle(labels)
    return labels


def generate_synthetic_pair(c, d, n_s, n_t, shift=ShiftSpec(), seed=0,
                            class_sep=3.0, cluster_std=1.0, nuisance_dim=0,
                            nuisance_std=0.0):
    """Gaussian class clusters in the source and a shifted copy in the target.

    Class means are drawn ``N(0, class_sep^2)`` per coordinate; samples add
    isotropic ``N(0, cluster_std^2)`` scatter.  Target samples are drawn from
    the same clusters, then rotated, translated and perturbed by ``shift``.
    The output is a pure function of the arguments.
    """
    if c < 2:
        raise ValueError("need c >= 2 classes")
    if d < c:
        raise ValueError(f"need d >= c (d={d}, c={c})")
    if n_s < c or n_t < c:
        raise ValueError(f"n_s={n_s}, n_t={n_t} cannot cover all {c} classes")
    if d < 2 and shift.rotation_deg:
        raise ValueError("rotation needs d >= 2")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_sep, size=(d, c))
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)

    ys = _balanced_labels(n_s, c, rng)
    yt = _balanced_labels(n_t, c, rng)
    Xs = means[:, ys] + cluster_std * rng.normal(size=(d, n_s))
    Xt = means[:, yt] + cluster_std * rng.normal(size=(d, n_t))
    if nuisance_dim:
        basis = np.linalg.qr(rng.normal(size=(d, nuisance_dim)))[0]
        Xs += nuisance_std * basis @ rng.normal(size=(nuisance_dim, n_s))
        Xt += nuisance_std * basis @ rng.normal(size=(nuisance_dim, n_t))

    theta = math.radians(shift.rotation_deg)
    if theta:
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        Xt[:2] = rot @ Xt[:2]
    Xt += shift.translation * direction[:, None]
    # always consume the noise draw so seeds map to the same streams
    eps = rng.normal(size=(d, n_t))
    Xt += shift.noise * eps
    return DatasetPair(Xs, ys, Xt, c, target_truth=yt)


# ---------------------------------------------------------------------------
# key/value documents and run configuration
# ---------------------------------------------------------------------------


def read_kv(path):
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def format_kv(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


ABLATION_FLAGS = (
    "disable_triplet",
    "standard_triplet",
    "disable_manifold",
    "disable_classifier",
    "disable_hfon",
    "disable_quantization",
)

# ablation variant name -> flag
VARIANTS = {
    "PWCF-T": "disable_triplet",
    "PWCF-F": "standard_triplet",
    "PWCF-M": "disable_manifold",
    "PWCF-C": "disable_classifier",
    "PWCF-H": "disable_hfon",
    "PWCF-Q": "disable_quantization",
}


@dataclass(frozen=True)
class RunConfig:
    r: int = 32
    k: int = 10
    m: float = 1.0
    gamma: float = 1.0
    theta: float = 1e2
    lambda1: float = 1.0
    lambda2: float = 1e3
    lambda3: float = 1e4
    tau: float = 0.1
    max_iters: int = 50
    inner_w_iters: int = 5
    tol: float = 1e-4
    seed: int = 0
    disable_triplet: bool = False
    standard_triplet: bool = False
    disable_manifold: bool = False
    disable_classifier: bool = False
    disable_hfon: bool = False
    disable_quantization: bool = False

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"r: code length must be >= 1, got {self.r}")
        if self.k < 1:
            raise ConfigError(f"k: neighbour count must be >= 1, got {self.k}")
        if not self.tau > 0:
            raise ConfigError(f"tau: must be > 0, got {self.tau}")
        for name in ("theta", "lambda1", "lambda2", "lambda3", "gamma", "m"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters: must be >= 0, got {self.max_iters}")
        if self.inner_w_iters < 0:
            raise ConfigError(f"inner_w_iters: must be >= 0, got {self.inner_w_iters}")
        if not self.tol >= 0:
            raise ConfigError(f"tol: must be >= 0 (0 disables early stopping), got {self.tol}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_ablations(self, flags):
        return self.replace(**{f: True for f in flags})

    @classmethod
    def from_mapping(cls, mapping):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    kwargs[key] = _parse_bool(raw)
                elif kind == "int":
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse value {raw!r}") from None
        return cls(**kwargs)

    def to_mapping(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = str(v).lower() if isinstance(v, bool) else repr(v)
        return out


def _parse_bool(raw):
    if isinstance(raw, bool):
        return raw
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def parse_config(path):
    """Read a run configuration; missing keys take the defaults."""
    return RunConfig.from_mapping(read_kv(path))


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

MANIFEST_KEYS = ("source_features", "source_labels", "target_features", "num_classes")


def class_counts(labels, num_classes):
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)


def _counts_text(labels, num_classes):
    return ",".join(str(int(v)) for v in class_counts(labels, num_classes))


def write_manifest(directory, pair, format="binary", name="manifest.kv"):
    """Write ``pair`` as feature and label files plus a key/value manifest.

    File paths in the manifest are relative to ``directory``.  Target labels
    are written (as evaluation ground truth) only when the pair carries them.
    Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".pwf" if format == "binary" else ".csv"
    entries = {
        "source_features": "source" + ext,
        "source_labels": "source_labels.txt",
        "target_features": "target" + ext,
    }
    save_feature_matrix(directory / entries["source_features"], pair.source, format)
    save_feature_matrix(directory / entries["target_features"], pair.target, format)
    save_labels(directory / entries["source_labels"], pair.source_labels)
    if pair.target_truth is not None:
        entries["target_labels"] = "target_labels.txt"
        save_labels(directory / entries["target_labels"], pair.target_truth)
    entries["num_classes"] = str(pair.num_classes)
    entries["source_class_counts"] = _counts_text(pair.source_labels, pair.num_classes)
    if pair.target_truth is not None:
        entries["target_class_counts"] = _counts_text(pair.target_truth, pair.num_classes)
    path = directory / name
    path.write_text(format_kv(entries), encoding="utf-8")
    return path


def load_manifest(path):
    """Load the dataset a manifest points to, checking recorded class counts."""
    path = Path(path)
    entries = read_kv(path)
    missing = [k for k in MANIFEST_KEYS if k not in entries]
    if missing:
        raise DataFormatError(f"{path}: manifest lacks {', '.join(missing)}")
    base = path.parent
    try:
        c = int(entries["num_classes"])
    except ValueError:
        raise DataFormatError(
            f"{path}: num_classes is not an integer: {entries['num_classes']!r}") from None
    source = load_feature_matrix(base / entries["source_features"])
    target = load_feature_matrix(base / entries["target_features"])
    y_s = load_labels(base / entries["source_labels"])
    y_t = None
    if "target_labels" in entries:
        y_t = load_labels(base / entries["target_labels"])
    pair = DatasetPair(source, y_s, target, c, y_t)
    for key, labels in (("source_class_counts", pair.source_labels),
                        ("target_class_counts", pair.target_truth)):
        if key in entries and labels is not None:
            if entries[key] != _counts_text(labels, c):
                raise DataFormatError(
                    f"{path}: {key} {entries[key]} does not match the label file")
    return pair
