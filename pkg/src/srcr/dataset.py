"""Feature sets, the OCMF binary format, synthetic data and open-set splits.

OCMF v1 layout (all integers little-endian u32)::

    "OCMF" | version=1 | N | M | d0 | label_flag
    M blocks of N x d0 float32, row-major, block r = modality r
    N labels (only when label_flag == 1)
    name_bytes_len | UTF-8 modality names joined by "\\n"
"""

import io
import struct
from dataclasses import dataclass, field, replace
from itertools import permutations

import numpy as np

from .errors import ConfigError, ContractError, ParseError

MAGIC = b"OCMF"
VERSION = 1
_HEADER = struct.Struct("<4s5I")
_U32 = struct.Struct("<I")

DEFAULT_MODALITY_NAMES = ("image", "point", "voxel")


def default_modality_names(n_modalities):
    if n_modalities <= len(DEFAULT_MODALITY_NAMES):
        return tuple(DEFAULT_MODALITY_NAMES[:n_modalities])
    return tuple(f"m{r}" for r in range(n_modalities))


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """``features[r, i]`` is the d0-dim feature of object ``i`` in modality ``r``.

    Features are kept as float32, the precision of the file format, so that a
    write/read round trip is exact.  Labels are for evaluation only.
    """

    features: np.ndarray
    labels: np.ndarray = None
    modality_names: tuple = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 3:
            raise ContractError(f"features must be M x N x d0, got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (feats.shape[1],):
                raise ContractError(f"expected {feats.shape[1]} labels, got shape {labels.shape}")
            if labels.size and labels.min() < 0:
                raise ContractError("labels must be non-negative")
            object.__setattr__(self, "labels", labels.astype(np.int64))
        names = self.modality_names
        if names is None:
            names = default_modality_names(feats.shape[0])
        names = tuple(str(n) for n in names)
        if len(names) != feats.shape[0]:
            raise ContractError(f"{feats.shape[0]} modalities but {len(names)} names")
        if any("\n" in n for n in names):
            raise ContractError("modality names cannot contain newlines")
        object.__setattr__(self, "modality_names", names)

    @property
    def n_modalities(self):
        return self.features.shape[0]

    @property
    def n_objects(self):
        return self.features.shape[1]

    @property
    def feature_dim(self):
        return self.features.shape[2]

    @property
    def has_labels(self):
        return self.labels is not None

    def without_labels(self):
        return replace(self, labels=None)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return FeatureSet(self.features[:, indices], labels, self.modality_names)

    def modality(self, r):
        """Float64 copy of modality ``r`` as an N x d0 matrix."""
        return self.features[r].astype(np.float64)

    def equals(self, other):
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None
            and other.labels is not None
            and np.array_equal(self.labels, other.labels)
        )
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and same_labels
            and self.modality_names == other.modality_names
        )


# ---------------------------------------------------------------------------
# OCMF reading / writing


def encode_ocmf(fs):
    m, n, d = fs.features.shape
    flag = int(fs.labels is not None)
    parts = [_HEADER.pack(MAGIC, VERSION, n, m, d, flag)]
    parts.append(fs.features.astype("<f4").tobytes())
    if flag:
        if fs.labels.size and fs.labels.max() >= 2**32:
            raise ContractError("labels do not fit in u32")
        parts.append(fs.labels.astype("<u4").tobytes())
    names = "\n".join(fs.modality_names).encode("utf-8")
    parts.append(_U32.pack(len(names)))
    parts.append(names)
    return b"".join(parts)


def write_ocmf(fs, path):
    data = encode_ocmf(fs)
    with open(path, "wb") as fh:
        fh.write(data)


def _read_exact(fh, count, what):
    offset = fh.tell()
    data = fh.read(count)
    if len(data) != count:
        raise ParseError(f"truncated {what}: wanted {count} bytes, got {len(data)}", offset)
    return data


def read_ocmf_stream(fh, labels=True):
    """Parse an OCMF stream.

    With ``labels=False`` the label section is skipped by seeking, so no label
    byte is ever read, and the returned set carries no labels.
    """
    start = fh.tell()
    head = fh.read(_HEADER.size)
    if len(head) < 4 or head[:4] != MAGIC:
        raise ParseError(f"bad magic {head[:4]!r}, expected {MAGIC!r}", start)
    if len(head) != _HEADER.size:
        raise ParseError("truncated header", start + len(head))
    _, version, n, m, d, flag = _HEADER.unpack(head)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", start + 4)
    if flag not in (0, 1):
        raise ParseError(f"label flag must be 0 or 1, got {flag}", start + 20)

    n_values = m * n * d
    raw = _read_exact(fh, 4 * n_values, "feature payload")
    features = np.frombuffer(raw, dtype="<f4").reshape(m, n, d).astype(np.float32)

    label_values = None
    if flag:
        if labels:
            raw = _read_exact(fh, 4 * n, "label section")
            label_values = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        else:
            fh.seek(4 * n, io.SEEK_CUR)

    pos = fh.tell()
    raw_len = fh.read(4)
    if len(raw_len) != 4:
        if flag and not labels:
            raise ParseError("label flag set but file ends inside the label section", pos)
        raise ParseError("truncated name length", pos)
    (name_len,) = _U32.unpack(raw_len)
    names_raw = _read_exact(fh, name_len, "modality names")
    try:
        names = names_raw.decode("utf-8").split("\n") if name_len else []
    except UnicodeDecodeError as exc:
        raise ParseError(f"modality names are not UTF-8 ({exc.reason})", pos + 4 + exc.start) from None
    if len(names) != m:
        raise ParseError(f"expected {m} modality names, found {len(names)}", pos + 4)
    trailing = fh.read(1)
    if trailing:
        raise ParseError("trailing bytes after modality names (label flag/count mismatch?)", fh.tell() - 1)
    return FeatureSet(features, label_values, tuple(names))


def read_ocmf(path, labels=True):
    with open(path, "rb") as fh:
        return read_ocmf_stream(fh, labels=labels)


def decode_ocmf(data, labels=True):
    return read_ocmf_stream(io.BytesIO(data), labels=labels)


def write_manifest(path, entries, header=None):
    """Plain ``key=value`` sidecar, one entry per line."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path):
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                entries[key.strip()] = value.strip()
    return entries


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticTruth:
    latent: np.ndarray
    maps: list = field(default_factory=list)
    offsets: list = field(default_factory=list)


def generate_synthetic(
    n_categories,
    per_category,
    n_modalities,
    feature_dim,
    modality_shift=4.0,
    noise=0.1,
    seed=2022,
    jitter=0.5,
    return_truth=False,
):
    """Aligned multi-modal features that share a per-object latent center.

    Each category gets a Gaussian centroid, each object a jittered copy of it,
    and each modality views the object's latent vector through its own affine
    map ``x -> A_r x + b_r`` with ``A_r = I + shift * G_r / sqrt(d0)`` followed
    by additive Gaussian noise.
    """
    if min(n_categories, per_category, n_modalities, feature_dim) < 1:
        raise ConfigError("category, object, modality and dimension counts must be positive")
    if modality_shift < 0 or noise < 0 or jitter < 0:
        raise ConfigError("shift, noise and jitter must be non-negative")
    rng = np.random.default_rng(seed)
    d = feature_dim
    labels = np.repeat(np.arange(n_categories), per_category)
    centroids = rng.normal(size=(n_categories, d))
    latent = centroids[labels] + jitter * rng.normal(size=(labels.size, d))

    truth = SyntheticTruth(latent)
    blocks = []
    for _ in range(n_modalities):
        a = np.eye(d) + modality_shift * rng.normal(size=(d, d)) / np.sqrt(d)
        b = modality_shift * rng.normal(size=d)
        eps = rng.normal(size=(labels.size, d))
        blocks.append(latent @ a.T + b + noise * eps)
        truth.maps.append(a)
        truth.offsets.append(b)
    fs = FeatureSet(np.stack(blocks), labels, default_modality_names(n_modalities))
    return (fs, truth) if return_truth else fs


# ---------------------------------------------------------------------------
# Open-set protocol


@dataclass(frozen=True)
class OpenSetSplit:
    seen_categories: tuple
    unseen_categories: tuple
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class RetrievalTask:
    query_modality: int
    target_modality: int
    query_indices: np.ndarray
    target_indices: np.ndarray


def open_set_split(fs, unseen_fraction, seed=2022):
    """Hold out a shuffled subset of categories; all their objects form the test set."""
    if fs.labels is None:
        raise ContractError("open_set_split needs labels")
    categories = np.unique(fs.labels)
    if categories.size < 2:
        raise ConfigError("need at least two categories to split")
    n_unseen = int(np.floor(unseen_fraction * categories.size + 0.5))
    if not 0 < n_unseen < categories.size:
        raise ConfigError(
            f"unseen_fraction={unseen_fraction} gives {n_unseen} of {categories.size} "
            "categories unseen; need at least one seen and one unseen"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(categories)
    unseen = np.sort(order[:n_unseen])
    seen = np.sort(order[n_unseen:])
    is_test = np.isin(fs.labels, unseen)
    return OpenSetSplit(
        tuple(int(c) for c in seen),
        tuple(int(c) for c in unseen),
        np.flatnonzero(~is_test),
        np.flatnonzero(is_test),
    )


def modality_pairs(n_modalities):
    """All ordered (query, target) modality pairs with query != target."""
    return list(permutations(range(n_modalities), 2))


def make_task(split, query_modality, target_modality, n_modalities=None):
    if query_modality == target_modality:
        raise ContractError("query and target modality must differ")
    if n_modalities is not None and not (
        0 <= query_modality < n_modalities and 0 <= target_modality < n_modalities
    ):
        raise ContractError(f"modalities must be in [0, {n_modalities})")
    idx = np.asarray(split.test_indices)
    return RetrievalTask(query_modality, target_modality, idx.copy(), idx.copy())


def write_split(split, path, header=None):
    """``key=value`` text file; ``header`` becomes a leading ``#`` comment."""

    def fmt(values):
        return " ".join(str(int(v)) for v in values)

    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(f"seen={fmt(split.seen_categories)}\n")
        fh.write(f"unseen={fmt(split.unseen_categories)}\n")
        fh.write(f"train={fmt(split.train_indices)}\n")
        fh.write(f"test={fmt(split.test_indices)}\n")


def read_split(path):
    entries = read_manifest(path)
    missing = [k for k in ("seen", "unseen", "train", "test") if k not in entries]
    if missing:
        raise ConfigError(f"split file {path} lacks entries {missing}")
    values = {k: [int(v) for v in entries[k].split()] for k in ("seen", "unseen", "train", "test")}
    return OpenSetSplit(
        tuple(values["seen"]),
        tuple(values["unseen"]),
        np.array(values["train"], dtype=np.int64),
        np.array(values["test"], dtype=np.int64),
    )
