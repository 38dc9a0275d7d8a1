"""Dataset loading (IDX files, synthetic blobs) and client partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, IdxParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_COMPRESSED_SUFFIXES = (".gz", ".gzip")


@dataclass
class Dataset:
    """Feature rows in [0,1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ContractError("inputs must be (n, features) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split one dataset across N clients.

    mode "iid" shuffles into equal shares; mode "bias" groups clients by label
    and routes a sample of label l to group l with probability q (and to each
    other group with probability (1-q)/(L-1)). q = 1/L reduces to IID in
    distribution.
    """

    mode: str
    num_clients: int
    bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "bias"):
            raise ContractError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 1:
            raise ContractError("need at least one client")


def _open_maybe_gzip(path):
    name = str(path)
    if any(name.endswith(s) for s in _COMPRESSED_SUFFIXES):
        return gzip.open(name, "rb")
    return open(name, "rb")


def _read_be32(buf: bytes, offset: int, path, what: str) -> int:
    if offset + 4 > len(buf):
        raise IdxParseError(f"{path}: truncated reading {what} at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def _load_idx_file(path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gzip(path) as f:
        buf = f.read()
    magic = _read_be32(buf, 0, path, "magic")
    if magic != expected_magic:
        raise IdxParseError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    dims = []
    offset = 4
    for i in range(ndim):
        dims.append(_read_be32(buf, offset, path, f"dimension {i}"))
        offset += 4
    count = int(np.prod(dims, dtype=np.int64)) if dims else 0
    payload = buf[offset:]
    if len(payload) != count:
        raise IdxParseError(
            f"{path}: payload has {len(payload)} bytes at offset {offset}, header promises {count}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled into [0,1]."""
    images = _load_idx_file(images_path, IDX_IMAGES_MAGIC)
    labels = _load_idx_file(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(
            f"count mismatch: {images_path} has {images.shape[0]} images, "
            f"{labels_path} has {labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(flat, labels.astype(np.int64), num_classes)


def save_idx(ds: Dataset, images_path, labels_path, image_shape=None) -> None:
    """Serialize a dataset back to the IDX pair format (inverse of load_idx).

    image_shape is the per-sample (rows, cols); flat feature rows default to
    (1, n_features) so the images file always carries the 3-dim 0x803 magic.
    """
    n = len(ds)
    pixels = np.clip(np.rint(ds.inputs * 255.0), 0, 255).astype(np.uint8)
    if image_shape is None:
        image_shape = (1, pixels.shape[1])
    if len(image_shape) != 2 or int(np.prod(image_shape)) != pixels.shape[1]:
        raise ContractError(f"image_shape {image_shape} does not match feature count")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">I", n))
        for s in image_shape:
            f.write(struct.pack(">I", s))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def class_centers(num_classes: int, dim: int) -> np.ndarray:
    """Deterministic well-separated class means inside [0,1]^dim.

    With dim >= num_classes the centers sit on scaled unit-simplex vertices
    (one-hot corners); otherwise they fall back to fixed random unit
    directions around the cube center.
    """
    if dim >= num_classes:
        centers = np.full((num_classes, dim), 0.15)
        centers[np.arange(num_classes), np.arange(num_classes)] = 0.85
        return centers
    rng = np.random.default_rng(90210)  # fixed so centers depend only on (L, dim)
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return 0.5 + 0.35 * dirs


def synth_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Gaussian blobs around deterministic class centers, split 80/20 per class."""
    if num_classes < 2:
        raise ContractError("need at least two classes")
    if per_class < 1 or dim < 1 or spread < 0:
        raise ContractError("per_class, dim must be >= 1 and spread >= 0")
    rng = np.random.default_rng(seed)
    centers = class_centers(num_classes, dim)
    n_train = int(round(0.8 * per_class))
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(num_classes):
        pts = centers[c] + spread * rng.standard_normal((per_class, dim))
        np.clip(pts, 0.0, 1.0, out=pts)
        order = rng.permutation(per_class)
        train_x.append(pts[order[:n_train]])
        test_x.append(pts[order[n_train:]])
        train_y.append(np.full(n_train, c))
        test_y.append(np.full(per_class - n_train, c))
    train = Dataset(np.vstack(train_x), np.concatenate(train_y), num_classes)
    test = Dataset(np.vstack(test_x), np.concatenate(test_y), num_classes)
    return train, test


def _assign_bias(ds: Dataset, spec: PartitionSpec, seed: int) -> np.ndarray:
    """Client index per sample under the label-bias grouping scheme."""
    n_clients = spec.num_clients
    n_groups = ds.num_classes
    rng = np.random.default_rng([seed, 1])
    group_members = [
        np.array([c for c in range(n_clients) if c % n_groups == g], dtype=np.int64)
        for g in range(n_groups)
    ]
    nonempty = np.array([g for g in range(n_groups) if len(group_members[g])])
    q = spec.bias
    other = (1.0 - q) / (n_groups - 1) if n_groups > 1 else 0.0

    group_of = np.empty(len(ds), dtype=np.int64)
    for label in range(n_groups):
        mask = ds.labels == label
        k = int(mask.sum())
        if k == 0:
            continue
        probs = np.full(n_groups, other)
        probs[label] = q
        probs = probs[nonempty]  # only groups that actually contain clients
        probs /= probs.sum()
        group_of[mask] = nonempty[rng.choice(len(nonempty), size=k, p=probs)]

    owner = np.empty(len(ds), dtype=np.int64)
    for g in nonempty:
        mask = group_of == g
        members = group_members[g]
        owner[mask] = members[rng.integers(len(members), size=int(mask.sum()))]
    return owner


def _assign_iid(ds: Dataset, spec: PartitionSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    order = rng.permutation(len(ds))
    owner = np.empty(len(ds), dtype=np.int64)
    shares = np.array_split(order, spec.num_clients)
    for client, idx in enumerate(shares):
        owner[idx] = client
    return owner


def partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split a dataset across clients; a true partition (no loss, no duplication).

    Every client is guaranteed at least one sample; if a draw leaves someone
    empty the assignment is retried with a deterministically bumped seed.
    """
    if spec.num_clients > len(ds):
        raise ContractError(
            f"cannot split {len(ds)} samples across {spec.num_clients} clients"
        )
    if spec.mode == "bias":
        lo = 1.0 / ds.num_classes
        if not (lo - 1e-12 <= spec.bias <= 1.0 + 1e-12):
            raise ContractError(f"bias degree must lie in [1/{ds.num_classes}, 1]")
    for bump in range(100):
        seed = spec.seed + bump
        if spec.mode == "iid":
            owner = _assign_iid(ds, spec, seed)
        else:
            owner = _assign_bias(ds, spec, seed)
        sizes = np.bincount(owner, minlength=spec.num_clients)
        if sizes.min() >= 1:
            return [ds.subset(owner == c) for c in range(spec.num_clients)]
    raise ContractError("could not find an assignment giving every client a sample")
