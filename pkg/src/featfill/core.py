"""Domain types, synthetic paired-embedding worlds, and the FFS1 feature store.

A feature set is a columnar batch of labeled vectors with stable integer
ids. Worlds are generated from a latent Gaussian mixture: the "new" embedder
sees an isometric image of the latents, the "old" embedder sees a different
linear image with the class-specific directions of un-modeled classes
collapsed, plus heavier noise. The same latent draw backs both sides of a
pair, so item-level alignment targets are honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

ROLES = ("gallery", "query", "train")

FFS_MAGIC = b"FFS1"
FLAG_LABELS = 1
FLAG_SUBGROUPS = 2
FLAG_IDS = 4
_KNOWN_FLAGS = FLAG_LABELS | FLAG_SUBGROUPS | FLAG_IDS


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class FormatError(ValueError):
    """Malformed store payload; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class FeatureRecord:
    """One item: id, class label, optional subgroup tag, feature vector."""

    id: int
    label: int
    subgroup: int | None
    vector: np.ndarray


class FeatureSet:
    """Immutable columnar set of feature vectors.

    Vectors are stored float32 (the storage dtype of the FFS1 format);
    computations upcast to float64 at their own boundaries. Arrays are
    marked read-only, so a set can be shared across threads.
    """

    __slots__ = ("dim", "role", "vectors", "ids", "labels", "subgroups")

    def __init__(self, dim, role, vectors, ids, labels, subgroups=None):
        if not isinstance(dim, int) or dim < 1:
            raise ValueError(f"dim must be a positive integer, got {dim!r}")
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise ValueError(
                f"vectors must have shape (n, {dim}), got {vectors.shape}"
            )
        n = vectors.shape[0]
        if not np.all(np.isfinite(vectors)):
            raise ValueError("vectors must be finite")
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if ids.shape != (n,):
            raise ValueError(f"ids must have shape ({n},), got {ids.shape}")
        if labels.shape != (n,):
            raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
        if np.any(ids < 0):
            raise ValueError("ids must be nonnegative")
        if np.any(labels < 0):
            raise ValueError("labels must be nonnegative")
        if len(np.unique(ids)) != n:
            raise ValueError("ids must be unique within a set")
        if subgroups is not None:
            subgroups = np.ascontiguousarray(subgroups, dtype=np.int64)
            if subgroups.shape != (n,):
                raise ValueError(
                    f"subgroups must have shape ({n},), got {subgroups.shape}"
                )
            if np.any(subgroups < 0):
                raise ValueError("subgroups must be nonnegative")
            subgroups.setflags(write=False)
        vectors.setflags(write=False)
        ids.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "role", role)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "subgroups", subgroups)

    def __setattr__(self, name, value):
        raise AttributeError("FeatureSet is immutable")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        if self.dim != other.dim or self.role != other.role:
            return False
        if (self.subgroups is None) != (other.subgroups is None):
            return False
        same = (
            np.array_equal(self.vectors, other.vectors)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
        )
        if same and self.subgroups is not None:
            same = np.array_equal(self.subgroups, other.subgroups)
        return same

    def record(self, i: int) -> FeatureRecord:
        return FeatureRecord(
            id=int(self.ids[i]),
            label=int(self.labels[i]),
            subgroup=None if self.subgroups is None else int(self.subgroups[i]),
            vector=self.vectors[i],
        )

    @property
    def records(self) -> Iterator[FeatureRecord]:
        return (self.record(i) for i in range(len(self)))

    def with_vectors(self, vectors, role=None) -> "FeatureSet":
        """New set sharing ids/labels/subgroups but carrying other vectors."""
        return FeatureSet(
            dim=int(np.asarray(vectors).shape[1]),
            role=self.role if role is None else role,
            vectors=vectors,
            ids=self.ids,
            labels=self.labels,
            subgroups=self.subgroups,
        )

    def id_to_row(self) -> dict[int, int]:
        return {int(v): i for i, v in enumerate(self.ids)}


@dataclass(frozen=True)
class PairedFeatureSet:
    """Old/new feature sets over the same items, aligned row by row."""

    old: FeatureSet
    new: FeatureSet

    def __post_init__(self):
        if len(self.old) != len(self.new):
            raise ValueError("paired sets must have equal length")
        if not np.array_equal(self.old.ids, self.new.ids):
            raise ValueError("paired sets must share the same id sequence")
        if not np.array_equal(self.old.labels, self.new.labels):
            raise ValueError("paired sets must share labels per id")
        if self.old.dim != self.new.dim:
            raise ValueError(
                "paired sets must share dim unless an input projection is "
                f"configured (old {self.old.dim} vs new {self.new.dim})"
            )

    def __len__(self) -> int:
        return len(self.old)


@dataclass(frozen=True)
class SubgroupSpec:
    """Class-to-subgroup tagging with per-subgroup old-noise multipliers."""

    class_to_subgroup: dict[int, int]
    noise_multipliers: dict[int, float] = field(default_factory=dict)

    def multiplier_for_class(self, cls: int) -> float:
        tag = self.class_to_subgroup[cls]
        return float(self.noise_multipliers.get(tag, 1.0))


@dataclass
class SyntheticWorldConfig:
    """Knobs of the synthetic paired-embedding generator.

    The old embedder is weakened two ways: heavier additive noise
    (optionally scaled per subgroup) and collapsed class directions for
    the classes it does not "know" (``old_class_fraction`` < 1).
    """

    num_classes: int
    dim: int
    latent_dim: int
    train_per_class: int
    gallery_per_class: int
    query_per_class: int
    old_noise_sigma: float
    new_noise_sigma: float
    old_class_fraction: float = 1.0
    collapse_strength: float = 1.0
    subgroup_spec: SubgroupSpec | None = None
    seed: int = 0
    centroid_scale: float = 3.0
    within_sigma: float = 1.0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.latent_dim < 1 or self.latent_dim > self.dim:
            raise ConfigError("latent_dim must satisfy 1 <= latent_dim <= dim")
        for name in ("train_per_class", "gallery_per_class", "query_per_class"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.old_noise_sigma < 0:
            raise ConfigError("old_noise_sigma must be >= 0")
        if self.new_noise_sigma < 0:
            raise ConfigError("new_noise_sigma must be >= 0")
        if self.new_noise_sigma > self.old_noise_sigma:
            raise ConfigError(
                "new_noise_sigma must not exceed old_noise_sigma "
                "(the new embedder is the stronger one)"
            )
        if not 0.0 < self.old_class_fraction <= 1.0:
            raise ConfigError("old_class_fraction must be in (0, 1]")
        if not 0.0 <= self.collapse_strength <= 1.0:
            raise ConfigError("collapse_strength must be in [0, 1]")
        if self.centroid_scale <= 0:
            raise ConfigError("centroid_scale must be > 0")
        if self.within_sigma < 0:
            raise ConfigError("within_sigma must be >= 0")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if self.subgroup_spec is not None:
            mapping = self.subgroup_spec.class_to_subgroup
            if sorted(mapping) != list(range(self.num_classes)):
                raise ConfigError(
                    "subgroup_spec.class_to_subgroup must cover classes "
                    f"0..{self.num_classes - 1}"
                )
            if any(tag < 0 for tag in mapping.values()):
                raise ConfigError("subgroup_spec tags must be nonnegative")
            if any(m <= 0 for m in self.subgroup_spec.noise_multipliers.values()):
                raise ConfigError("subgroup_spec.noise_multipliers must be > 0")


@dataclass(frozen=True)
class SyntheticWorld:
    train: PairedFeatureSet
    gallery: PairedFeatureSet
    query: PairedFeatureSet


def generate_world(cfg: SyntheticWorldConfig) -> SyntheticWorld:
    """Generate paired train/gallery/query sets from one seeded stream.

    All standard-normal draws happen in a fixed order that does not depend
    on the noise scales, so two configs differing only in a sigma share the
    same underlying draws (scaled differently). Identical configs produce
    bit-identical sets.
    """
    cfg.validate()
    k, d, latent = cfg.num_classes, cfg.dim, cfg.latent_dim
    rng = np.random.default_rng(cfg.seed)

    centroids = rng.standard_normal((k, latent)) * cfg.centroid_scale
    # New map: orthonormal columns, so the latent geometry carries over
    # isometrically. Old map: a generic dense basis change.
    new_map, _ = np.linalg.qr(rng.standard_normal((d, latent)))
    new_map = new_map.T  # (latent, d)
    old_map = rng.standard_normal((latent, d)) / math.sqrt(latent)

    n_known = max(1, math.ceil(cfg.old_class_fraction * k))
    norms = np.linalg.norm(centroids, axis=1)
    unit_dirs = centroids / np.where(norms > 0, norms, 1.0)[:, None]

    counts = {
        "train": cfg.train_per_class,
        "gallery": cfg.gallery_per_class,
        "query": cfg.query_per_class,
    }
    next_id = 0
    pairs: dict[str, PairedFeatureSet] = {}
    for split in ("train", "gallery", "query"):
        m = counts[split]
        old_rows, new_rows, labels = [], [], []
        for cls in range(k):
            z = centroids[cls] + cfg.within_sigma * rng.standard_normal((m, latent))
            e_new = rng.standard_normal((m, d))
            e_old = rng.standard_normal((m, d))
            new_rows.append(z @ new_map + cfg.new_noise_sigma * e_new)
            z_old = z
            if cls >= n_known:
                # The old embedder never learned this class: attenuate the
                # latent component along its centroid direction (removed
                # entirely at collapse_strength=1).
                u = unit_dirs[cls]
                z_old = z - cfg.collapse_strength * np.outer(z @ u, u)
            mult = 1.0
            if cfg.subgroup_spec is not None:
                mult = cfg.subgroup_spec.multiplier_for_class(cls)
            old_rows.append(z_old @ old_map + cfg.old_noise_sigma * mult * e_old)
            labels.append(np.full(m, cls, dtype=np.int64))

        n = m * k
        ids = np.arange(next_id, next_id + n, dtype=np.int64)
        next_id += n
        label_col = (
            np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
        )
        subgroups = None
        if cfg.subgroup_spec is not None:
            tags = cfg.subgroup_spec.class_to_subgroup
            subgroups = np.array([tags[int(c)] for c in label_col], dtype=np.int64)
        role = split if split != "train" else "train"

        def build(rows):
            vecs = (
                np.concatenate(rows, axis=0)
                if rows
                else np.zeros((0, d), dtype=np.float64)
            )
            return FeatureSet(
                dim=d,
                role=role,
                vectors=vecs.astype(np.float32),
                ids=ids,
                labels=label_col,
                subgroups=subgroups,
            )

        pairs[split] = PairedFeatureSet(old=build(old_rows), new=build(new_rows))

    return SyntheticWorld(
        train=pairs["train"], gallery=pairs["gallery"], query=pairs["query"]
    )


def feature_set_to_bytes(fs: FeatureSet) -> bytes:
    """Serialize to FFS1: magic, u32 {version, n, d, flags}, f32 vectors
    row-major, then u32 labels, optional u32 subgroups, u64 ids. All
    little-endian."""
    n = len(fs)
    flags = FLAG_LABELS | FLAG_IDS
    if fs.subgroups is not None:
        flags |= FLAG_SUBGROUPS
    head = FFS_MAGIC + np.array([1, n, fs.dim, flags], dtype="<u4").tobytes()
    parts = [head, fs.vectors.astype("<f4").tobytes()]
    parts.append(fs.labels.astype("<u4").tobytes())
    if fs.subgroups is not None:
        parts.append(fs.subgroups.astype("<u4").tobytes())
    parts.append(fs.ids.astype("<u8").tobytes())
    return b"".join(parts)


def feature_set_from_bytes(data: bytes, role: str = "gallery") -> FeatureSet:
    """Parse an FFS1 payload; raises :class:`FormatError` with the byte
    offset for any malformed input (bad magic, truncation, zero dim,
    unknown flags, trailing bytes, non-finite content)."""
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(data):
            raise FormatError(f"truncated {what}", offset)
        chunk = data[offset : offset + count]
        offset += count
        return chunk

    magic = take(4, "magic")
    if magic != FFS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    version, n, dim, flags = np.frombuffer(take(16, "header"), dtype="<u4")
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    if dim == 0:
        raise FormatError("dimension is zero", 12)
    if flags & ~_KNOWN_FLAGS:
        raise FormatError(f"unknown flag bits 0x{int(flags):x}", 16)
    n, dim = int(n), int(dim)

    vectors = np.frombuffer(take(4 * n * dim, "vector payload"), dtype="<f4")
    vectors = vectors.reshape(n, dim).astype(np.float32)
    if flags & FLAG_LABELS:
        labels = np.frombuffer(take(4 * n, "labels"), dtype="<u4").astype(np.int64)
    else:
        labels = np.zeros(n, dtype=np.int64)
    subgroups = None
    if flags & FLAG_SUBGROUPS:
        subgroups = np.frombuffer(take(4 * n, "subgroups"), dtype="<u4")
        subgroups = subgroups.astype(np.int64)
    if flags & FLAG_IDS:
        ids_start = offset
        ids = np.frombuffer(take(8 * n, "ids"), dtype="<u8")
        if np.any(ids > np.iinfo(np.int64).max):
            raise FormatError("id exceeds signed 64-bit range", ids_start)
        ids = ids.astype(np.int64)
    else:
        ids = np.arange(n, dtype=np.int64)
    if offset != len(data):
        raise FormatError("trailing data after payload", offset)

    try:
        return FeatureSet(
            dim=dim, role=role, vectors=vectors, ids=ids, labels=labels,
            subgroups=subgroups,
        )
    except ValueError as exc:
        raise FormatError(f"invalid content: {exc}", 20) from exc


def write_feature_set(fs: FeatureSet, path) -> None:
    Path(path).write_bytes(feature_set_to_bytes(fs))


def read_feature_set(path, role: str = "gallery") -> FeatureSet:
    return feature_set_from_bytes(Path(path).read_bytes(), role=role)
