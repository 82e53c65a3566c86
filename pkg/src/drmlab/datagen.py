"""Synthetic multi-domain datasets with controllable spurious correlation.

Each sample is x = concat(z_inv, z_sup). The invariant block is a Gaussian
cluster around a per-class mean shared by every domain; the spurious block
is a Gaussian cluster around a per-class direction whose class agrees with
the label with probability (1 + spurious_correlation) / 2. Domains differ
only in their spurious parameters, so the invariant conditionals match
across domains by construction.

Datasets persist to a versioned little-endian binary format with a JSON
manifest mirroring the header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MAGIC = b"DRMLABDS"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the byte offset."""


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    spurious_correlation: float
    spurious_scale: float
    sample_count: int

    def __post_init__(self):
        if abs(self.spurious_correlation) > 1.0:
            raise ValueError(f"spurious_correlation must be in [-1, 1], got {self.spurious_correlation}")
        if not self.spurious_scale > 0.0:
            raise ValueError(f"spurious_scale must be positive, got {self.spurious_scale}")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


@dataclass(frozen=True)
class FeatureLayout:
    """Index ranges [lo, hi) of the invariant and spurious blocks in x."""

    invariant: tuple[int, int]
    spurious: tuple[int, int]

    @property
    def dim(self) -> int:
        return self.spurious[1]


@dataclass(frozen=True)
class GeneratorParams:
    """Everything needed to resample a domain, kept for mixture targets."""

    spec: DomainSpec
    class_means: tuple
    sigma_inv: float
    spurious_dim: int
    spurious_center_scale: float


@dataclass
class DomainDataset:
    x: np.ndarray
    y: np.ndarray
    domain_ids: np.ndarray
    feature_layout: FeatureLayout
    n_classes: int
    generator: GeneratorParams | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        n = self.x.shape[0]
        if self.y.shape != (n,) or self.domain_ids.shape != (n,):
            raise ValueError(f"misaligned arrays: x {self.x.shape}, y {self.y.shape}, domains {self.domain_ids.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite sample values")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def invariant_block(self) -> np.ndarray:
        lo, hi = self.feature_layout.invariant
        return self.x[:, lo:hi]

    def spurious_block(self) -> np.ndarray:
        lo, hi = self.feature_layout.spurious
        return self.x[:, lo:hi]

    def domain_slice(self, domain_id: int) -> "DomainDataset":
        idx = np.flatnonzero(self.domain_ids == domain_id)
        return DomainDataset(
            self.x[idx], self.y[idx], self.domain_ids[idx], self.feature_layout, self.n_classes
        )

    def present_domains(self) -> list[int]:
        return [int(d) for d in np.unique(self.domain_ids)]


@dataclass
class MixtureTarget:
    weights: np.ndarray
    dataset: DomainDataset


def class_directions(n_classes: int, spurious_dim: int) -> np.ndarray:
    """Unit direction per class, spread over a circle in the first two dims."""
    if spurious_dim < 1:
        raise ValueError("need at least one spurious dimension for directions")
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    dirs = np.zeros((n_classes, spurious_dim))
    dirs[:, 0] = np.cos(angles)
    if spurious_dim > 1:
        dirs[:, 1] = np.sin(angles)
    return dirs


def generate_domain(
    spec: DomainSpec,
    class_means,
    seed,
    sigma_inv: float = 0.5,
    spurious_dim: int = 2,
    spurious_center_scale: float = 3.0,
) -> DomainDataset:
    """Draw one domain; deterministic for a fixed (spec, seed)."""
    class_means = np.atleast_2d(np.asarray(class_means, dtype=np.float64))
    c = class_means.shape[0]
    if c < 2:
        raise ValueError(f"need class means for at least 2 classes, got {c}")
    if len({tuple(m) for m in class_means}) != c:
        raise ValueError("class means must be distinct")
    rng = np.random.default_rng(seed)
    n = spec.sample_count
    d_inv = class_means.shape[1]

    y = rng.integers(0, c, size=n)
    z_inv = class_means[y] + sigma_inv * rng.standard_normal((n, d_inv))

    if spurious_dim > 0:
        agree = rng.random(n) < (1.0 + spec.spurious_correlation) / 2.0
        offset = rng.integers(1, c, size=n)
        cluster = np.where(agree, y, (y + offset) % c)
        dirs = class_directions(c, spurious_dim)
        z_sup = spurious_center_scale * dirs[cluster] + spec.spurious_scale * rng.standard_normal(
            (n, spurious_dim)
        )
        x = np.concatenate([z_inv, z_sup], axis=1)
    else:
        x = z_inv

    layout = FeatureLayout(invariant=(0, d_inv), spurious=(d_inv, d_inv + max(spurious_dim, 0)))
    params = GeneratorParams(
        spec=spec,
        class_means=tuple(tuple(float(v) for v in m) for m in class_means),
        sigma_inv=float(sigma_inv),
        spurious_dim=int(spurious_dim),
        spurious_center_scale=float(spurious_center_scale),
    )
    return DomainDataset(
        x, y, np.full(n, spec.domain_id, dtype=np.int64), layout, c, generator=params
    )


def merge_datasets(datasets: list[DomainDataset]) -> DomainDataset:
    """Pool domains into one dataset; generator parameters do not survive."""
    if not datasets:
        raise ValueError("nothing to merge")
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.feature_layout != first.feature_layout or ds.n_classes != first.n_classes:
            raise ValueError("datasets disagree on feature layout or class count")
    return DomainDataset(
        np.concatenate([ds.x for ds in datasets]),
        np.concatenate([ds.y for ds in datasets]),
        np.concatenate([ds.domain_ids for ds in datasets]),
        first.feature_layout,
        first.n_classes,
    )


def generate_mixture_target(
    sources: list[DomainDataset], weights, n: int, seed
) -> MixtureTarget:
    """Resample n points, each from a source chosen with probability pi_i."""
    if not sources:
        raise ValueError("no source datasets")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(sources),):
        raise ValueError(f"need {len(sources)} weights, got shape {weights.shape}")
    if weights.min() < 0.0 or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    weights = weights / weights.sum()
    first = sources[0]
    for ds in sources:
        if ds.generator is None:
            raise ValueError("mixture sources need generator parameters (not a merged/loaded-without-manifest set)")
        if ds.feature_layout != first.feature_layout or ds.n_classes != first.n_classes:
            raise ValueError("mixture sources disagree on feature layout or class count")

    rng = np.random.default_rng(seed)
    choice = rng.choice(len(sources), size=n, p=weights)
    parts = []
    for i, ds in enumerate(sources):
        count = int(np.sum(choice == i))
        if count == 0:
            continue
        g = ds.generator
        parts.append(
            generate_domain(
                replace(g.spec, sample_count=count),
                np.asarray(g.class_means),
                np.random.SeedSequence((_seed_entropy(seed), i)),
                sigma_inv=g.sigma_inv,
                spurious_dim=g.spurious_dim,
                spurious_center_scale=g.spurious_center_scale,
            )
        )
    merged = merge_datasets(parts)
    order = rng.permutation(len(merged))
    mixed = DomainDataset(
        merged.x[order], merged.y[order], merged.domain_ids[order], merged.feature_layout, merged.n_classes
    )
    return MixtureTarget(weights, mixed)


def _seed_entropy(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.entropy if not isinstance(seed.entropy, (list, tuple)) else seed.entropy[0])
    return int(seed)


# ---------------------------------------------------------------------------
# Default benchmark
# ---------------------------------------------------------------------------

BENCHMARK_SOURCE_CORRELATIONS = (0.9, 0.8, 0.7)
BENCHMARK_TARGET_CORRELATION = -0.9
BENCHMARK_SIGMA_INV = 0.5
BENCHMARK_SPURIOUS_SCALE = 1.5
BENCHMARK_CLASS_MEANS = ((0.5, 0.0), (-0.5, 0.0))
BENCHMARK_SAMPLES = 2000


def default_benchmark(seed: int, samples_per_domain: int = BENCHMARK_SAMPLES):
    """Three sources with decreasing spurious correlation + an anti-correlated target."""
    means = np.asarray(BENCHMARK_CLASS_MEANS)
    sources = []
    for i, corr in enumerate(BENCHMARK_SOURCE_CORRELATIONS):
        spec = DomainSpec(i, corr, BENCHMARK_SPURIOUS_SCALE, samples_per_domain)
        sources.append(
            generate_domain(
                spec, means, np.random.SeedSequence((seed, i)), sigma_inv=BENCHMARK_SIGMA_INV
            )
        )
    target_spec = DomainSpec(
        len(sources), BENCHMARK_TARGET_CORRELATION, BENCHMARK_SPURIOUS_SCALE, samples_per_domain
    )
    target = generate_domain(
        target_spec, means, np.random.SeedSequence((seed, len(sources))), sigma_inv=BENCHMARK_SIGMA_INV
    )
    return sources, target


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def save_dataset(dataset: DomainDataset, path) -> None:
    """Versioned binary file plus a JSON manifest mirroring the header."""
    path = Path(path)
    n, d = dataset.x.shape
    lo_i, hi_i = dataset.feature_layout.invariant
    lo_s, hi_s = dataset.feature_layout.spurious
    header = MAGIC + struct.pack(
        "<IQIIIIII", FORMAT_VERSION, n, dataset.n_classes, d, lo_i, hi_i, lo_s, hi_s
    )
    row_dtype = np.dtype([("x", "<f8", (d,)), ("y", "<i8"), ("domain", "<i8")])
    rows = np.empty(n, dtype=row_dtype)
    rows["x"] = dataset.x
    rows["y"] = dataset.y
    rows["domain"] = dataset.domain_ids
    path.write_bytes(header + rows.tobytes())

    manifest = {
        "magic": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "samples": n,
        "n_classes": dataset.n_classes,
        "dim": d,
        "layout": {"invariant": [lo_i, hi_i], "spurious": [lo_s, hi_s]},
        "generator": _generator_to_dict(dataset.generator),
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(path) -> DomainDataset:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 36:
        raise DatasetFormatError(f"truncated header at offset {len(blob)} in {path}")
    if blob[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"bad magic at offset 0 in {path}")
    version, n, c, d, lo_i, hi_i, lo_s, hi_s = struct.unpack(
        "<IQIIIIII", blob[len(MAGIC) : len(MAGIC) + 36]
    )
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unknown format version {version} in {path}")
    body = blob[len(MAGIC) + 36 :]
    row_dtype = np.dtype([("x", "<f8", (d,)), ("y", "<i8"), ("domain", "<i8")])
    expected = n * row_dtype.itemsize
    if len(body) != expected:
        raise DatasetFormatError(
            f"payload is {len(body)} bytes, expected {expected}, at offset {len(MAGIC) + 36} in {path}"
        )
    rows = np.frombuffer(body, dtype=row_dtype)
    generator = None
    manifest_file = _manifest_path(path)
    if manifest_file.exists():
        generator = _generator_from_dict(json.loads(manifest_file.read_text()).get("generator"))
    return DomainDataset(
        rows["x"].copy(),
        rows["y"].copy(),
        rows["domain"].copy(),
        FeatureLayout((lo_i, hi_i), (lo_s, hi_s)),
        c,
        generator=generator,
    )


def _generator_to_dict(g: GeneratorParams | None):
    if g is None:
        return None
    return {
        "domain_id": g.spec.domain_id,
        "spurious_correlation": g.spec.spurious_correlation,
        "spurious_scale": g.spec.spurious_scale,
        "sample_count": g.spec.sample_count,
        "class_means": [list(m) for m in g.class_means],
        "sigma_inv": g.sigma_inv,
        "spurious_dim": g.spurious_dim,
        "spurious_center_scale": g.spurious_center_scale,
    }


def _generator_from_dict(d) -> GeneratorParams | None:
    if d is None:
        return None
    spec = DomainSpec(
        d["domain_id"], d["spurious_correlation"], d["spurious_scale"], d["sample_count"]
    )
    return GeneratorParams(
        spec=spec,
        class_means=tuple(tuple(m) for m in d["class_means"]),
        sigma_inv=d["sigma_inv"],
        spurious_dim=d["spurious_dim"],
        spurious_center_scale=d["spurious_center_scale"],
    )
