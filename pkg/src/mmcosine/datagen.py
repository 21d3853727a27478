"""Synthetic bimodal fine-grained classification data.

Class centers for each modality are unit vectors pulled toward a shared
anchor so that any two centers subtend roughly ``inter_class_angle``.  Audio
samples get isotropic Gaussian noise of scale ``intra_class_spread``; visual
samples get ``dominance`` times that, which makes audio the easy modality.

All randomness comes from numpy's PCG64 generator seeded with ``seed``;
the trial sampler uses its own PCG64 stream.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"MMCDAT1\x00"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 20
    dim_a: int = 32
    dim_v: int = 32
    inter_class_angle: float = 0.5
    intra_class_spread: float = 0.03
    dominance: float = 4.0
    n_train: int = 1200
    n_test: int = 1000
    seed: int = 0
    signal_scale: float = 1.0

    def validate(self) -> None:
        bad = []
        if self.n_classes < 2:
            bad.append("n_classes")
        if self.dim_a < 2:
            bad.append("dim_a")
        if self.dim_v < 2:
            bad.append("dim_v")
        if not 0 < self.inter_class_angle < math.pi / 2:
            bad.append("inter_class_angle")
        if not self.intra_class_spread > 0:
            bad.append("intra_class_spread")
        if not self.dominance >= 1:
            bad.append("dominance")
        if self.n_train < 1:
            bad.append("n_train")
        if self.n_test < 0:
            bad.append("n_test")
        if not 0 <= self.seed < 2**64:
            bad.append("seed")
        if not self.signal_scale > 0:
            bad.append("signal_scale")
        if bad:
            raise ConfigError(f"invalid GeneratorConfig field(s): {', '.join(bad)}")


@dataclass
class Split:
    """Column-stacked samples of one split."""

    x_a: np.ndarray
    x_v: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def samples(self) -> list[BimodalSample]:
        return [BimodalSample(a, v, int(y)) for a, v, y in zip(self.x_a, self.x_v, self.labels)]

    def subset(self, idx) -> Split:
        return Split(self.x_a[idx], self.x_v[idx], self.labels[idx])


@dataclass(frozen=True)
class BimodalSample:
    x_a: np.ndarray
    x_v: np.ndarray
    label: int


@dataclass(frozen=True)
class TrialPair:
    index_1: int
    index_2: int
    is_target: bool


@dataclass
class Dataset:
    train: Split
    test: Split
    n_classes: int
    seed: int = 0

    @property
    def dim_a(self) -> int:
        return self.train.x_a.shape[1]

    @property
    def dim_v(self) -> int:
        return self.train.x_v.shape[1]


def class_centers(rng: np.random.Generator, n_classes: int, dim: int, angle: float) -> np.ndarray:
    """Unit-norm centers, one row per class, with pairwise angle close to ``angle``.

    Each center is ``cos(t) * anchor + sin(t) * u_c`` with ``u_c`` unit and
    orthogonal to the anchor, and ``cos(t)**2 == cos(angle)``.  When the
    directions ``u_c`` can be made mutually orthogonal every pair subtends
    exactly ``angle``; otherwise they are random and the angle holds on average.
    """
    anchor = rng.standard_normal(dim)
    anchor /= np.linalg.norm(anchor)
    raw = rng.standard_normal((n_classes, dim))
    raw -= np.outer(raw @ anchor, anchor)
    if n_classes <= dim - 1:
        basis = np.column_stack([anchor, raw.T])
        q, r = np.linalg.qr(basis)
        q = q * np.sign(np.diag(r))
        dirs = q[:, 1 : n_classes + 1].T
    else:
        dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    t = math.acos(math.sqrt(math.cos(angle)))
    return math.cos(t) * anchor + math.sin(t) * dirs


def _draw_split(rng, centers_a, centers_v, n, cfg: GeneratorConfig) -> Split:
    labels = np.arange(n, dtype=np.int64) % cfg.n_classes
    labels = labels[rng.permutation(n)]
    noise_a = rng.standard_normal((n, cfg.dim_a)) * cfg.intra_class_spread
    noise_v = rng.standard_normal((n, cfg.dim_v)) * (cfg.dominance * cfg.intra_class_spread)
    x_a = cfg.signal_scale * centers_a[labels] + noise_a
    x_v = cfg.signal_scale * centers_v[labels] + noise_v
    return Split(x_a, x_v, labels)


def generate_classification(config: GeneratorConfig) -> Dataset:
    """Draw train and test splits; labels are balanced round-robin then shuffled."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    centers_a = class_centers(rng, config.n_classes, config.dim_a, config.inter_class_angle)
    centers_v = class_centers(rng, config.n_classes, config.dim_v, config.inter_class_angle)
    train = _draw_split(rng, centers_a, centers_v, config.n_train, config)
    test = _draw_split(rng, centers_a, centers_v, config.n_test, config)
    return Dataset(train, test, config.n_classes, config.seed)


def planted_centers(config: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Re-derive the centers used by :func:`generate_classification`."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    a = class_centers(rng, config.n_classes, config.dim_a, config.inter_class_angle)
    v = class_centers(rng, config.n_classes, config.dim_v, config.inter_class_angle)
    return a, v


def generate_trials(split: Split, n_pairs: int, target_fraction: float, seed: int) -> list[TrialPair]:
    """Sample verification pairs; ``round(n_pairs * target_fraction)`` are same-class."""
    if len(split) == 0:
        raise ValueError("cannot draw trials from an empty split")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if not 0.0 <= target_fraction <= 1.0:
        raise ValueError("target_fraction must lie in [0, 1]")
    n_target = int(round(n_pairs * target_fraction))
    n_non = n_pairs - n_target
    labels = np.asarray(split.labels)
    by_class = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    multi = [c for c, idx in by_class.items() if len(idx) >= 2]
    if n_target and not multi:
        raise ValueError("target pairs requested but every class has a single sample")
    if n_non and len(by_class) < 2:
        raise ValueError("non-target pairs requested but the split holds one class")

    max_target = sum(len(by_class[c]) * (len(by_class[c]) - 1) // 2 for c in multi)
    n = len(labels)
    max_non = (n * (n - 1) // 2) - sum(len(i) * (len(i) - 1) // 2 for i in by_class.values())
    if n_target > max_target or n_non > max_non:
        raise ValueError("not enough distinct pairs for the requested trial counts")

    rng = np.random.Generator(np.random.PCG64(seed))
    seen: set[tuple[int, int]] = set()
    trials: list[TrialPair] = []

    def take(i: int, j: int, target: bool) -> bool:
        key = (min(i, j), max(i, j))
        if i == j or key in seen:
            return False
        seen.add(key)
        trials.append(TrialPair(int(i), int(j), target))
        return True

    while len(trials) < n_target:
        c = multi[rng.integers(len(multi))]
        i, j = rng.choice(by_class[c], size=2, replace=False)
        take(i, j, True)
    while len(trials) < n_pairs:
        i, j = rng.integers(n, size=2)
        if labels[i] != labels[j]:
            take(i, j, False)
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


# flat binary export -------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    """Write the ``.mmcdat`` layout documented in the README."""
    header = MAGIC + struct.pack(
        "<5iQ", ds.n_classes, ds.dim_a, ds.dim_v, len(ds.train), len(ds.test), ds.seed
    )
    parts = [header]
    for split in (ds.train, ds.test):
        parts.append(np.ascontiguousarray(split.x_a, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(split.x_v, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(split.labels, dtype="<i4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an MMCDAT1 file")
    off = len(MAGIC)
    n_classes, dim_a, dim_v, n_train, n_test, seed = struct.unpack_from("<5iQ", buf, off)
    off += struct.calcsize("<5iQ")

    def read(count, dtype, shape):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.reshape(shape).astype(np.float64 if dtype == "<f8" else np.int64)

    splits = []
    for n in (n_train, n_test):
        x_a = read(n * dim_a, "<f8", (n, dim_a))
        x_v = read(n * dim_v, "<f8", (n, dim_v))
        y = read(n, "<i4", (n,))
        splits.append(Split(x_a, x_v, y))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return Dataset(splits[0], splits[1], n_classes, seed)


def config_field_names() -> list[str]:
    return [f.name for f in fields(GeneratorConfig)]
