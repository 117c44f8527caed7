"""Slide bags: data model, binary on-disk format, and synthetic generation.

A slide is a bag of patch tokens: an (n, d) embedding matrix plus an (n, 2)
integer grid-coordinate matrix and an optional class label.  Bags are written
to a little-endian binary format with a JSON sidecar so that datasets are
language-neutral and mmap-friendly; a dataset is a directory of bag files plus
a manifest.

The synthetic generator plants regional heterogeneity: tokens are drawn from
class-specific mixtures of shared Gaussian phenotype centers, and phenotype
assignment is spatially contiguous so that coordinate crops carry
region-specific signal.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RandomSource

__all__ = [
    "SlideBag",
    "Dataset",
    "SyntheticSpec",
    "BagError",
    "BagInvariantError",
    "BagFormatError",
    "save_bag",
    "load_bag",
    "save_dataset",
    "load_dataset",
    "generate_synthetic",
    "phenotype_centers",
    "default_class_mixture",
]

MAGIC = b"SPTBAG01"
_HEADER_LEN = 16 + 4 + 4  # padded magic + u32 n + u32 d


class BagError(ValueError):
    """Base class for bag validation and format errors."""


class BagInvariantError(BagError):
    """A bag violates a structural invariant."""


class BagFormatError(BagError):
    """An on-disk bag file is malformed or truncated."""


@dataclass
class SlideBag:
    """One slide as an embedding matrix, patch grid coordinates, and a label.

    ``embeddings`` is float64 in memory but must carry float32-representable
    values (the on-disk payload is float32; this keeps save/load bit-exact).
    ``coords`` rows are (grid row, grid column) and must be pairwise distinct.
    """

    slide_id: str
    embeddings: np.ndarray
    coords: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        if self.embeddings.ndim != 2 or self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise BagInvariantError(f"{self.slide_id}: embeddings must be (n, d) and coords (n, 2)")
        if self.n < 1:
            raise BagInvariantError(f"{self.slide_id}: bag must contain at least one token")
        if self.coords.shape[0] != self.n:
            raise BagInvariantError(f"{self.slide_id}: embeddings and coords row counts differ")
        if not np.isfinite(self.embeddings).all():
            raise BagInvariantError(f"{self.slide_id}: embeddings contain non-finite values")
        if len(np.unique(self.coords, axis=0)) != self.n:
            raise BagInvariantError(f"{self.slide_id}: duplicate patch coordinates")
        if np.any(self.coords > np.iinfo(np.int32).max) or np.any(self.coords < np.iinfo(np.int32).min):
            raise BagInvariantError(f"{self.slide_id}: coordinates exceed 32-bit range")
        if not np.array_equal(self.embeddings, self.embeddings.astype(np.float32).astype(np.float64)):
            raise BagInvariantError(
                f"{self.slide_id}: embeddings must be float32-representable (on-disk payload is float32)"
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SlideBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.label == other.label
            and np.array_equal(self.embeddings, other.embeddings)
            and np.array_equal(self.coords, other.coords)
        )


@dataclass
class Dataset:
    """An ordered collection of bags sharing one embedding width.

    ``phenotypes`` is generator metadata (slide_id -> per-token phenotype id);
    it is carried for diagnostics and heatmap checks, never used by training.
    """

    bags: list[SlideBag]
    class_names: list[str] | None = None
    split_tag: str = "train"
    phenotypes: dict[str, np.ndarray] | None = None

    def validate(self) -> None:
        ids = [b.slide_id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise BagInvariantError("duplicate slide_ids in dataset")
        dims = {b.d for b in self.bags}
        if len(dims) > 1:
            raise BagInvariantError(f"bags disagree on embedding width: {sorted(dims)}")
        for bag in self.bags:
            bag.validate()

    @property
    def d(self) -> int:
        return self.bags[0].d

    def labels(self) -> np.ndarray:
        return np.array([-1 if b.label is None else b.label for b in self.bags], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.bags)


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_bag(bag: SlideBag, path) -> None:
    """Write a bag to the binary format plus its JSON sidecar.

    Layout: 16-byte padded magic, u32 n, u32 d (little-endian), n*d float32
    row-major embeddings, n*2 int32 coords.  Byte-identical for identical
    inputs.  The sidecar lands next to the payload as ``<stem>.json`` and
    holds slide_id and label; the canonical file name is ``<slide_id>.bag``.
    """
    path = Path(path)
    bag.validate()
    header = MAGIC + b"\x00" * (16 - len(MAGIC)) + struct.pack("<II", bag.n, bag.d)
    payload = (
        bag.embeddings.astype("<f4").tobytes(order="C")
        + bag.coords.astype("<i4").tobytes(order="C")
    )
    sidecar = {"slide_id": bag.slide_id, "n": bag.n, "d": bag.d, "label": bag.label}
    path.write_bytes(header + payload)
    _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_bag(path) -> SlideBag:
    """Read a bag written by :func:`save_bag`, validating all invariants."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER_LEN:
        raise BagFormatError(f"{path}: file shorter than header")
    if raw[:8] != MAGIC:
        raise BagFormatError(f"{path}: bad magic {raw[:8]!r}")
    n, d = struct.unpack("<II", raw[16:_HEADER_LEN])
    expected = _HEADER_LEN + 4 * n * d + 8 * n
    if len(raw) < expected:
        raise BagFormatError(f"{path}: truncated payload ({len(raw)} bytes, expected {expected})")
    if len(raw) > expected:
        raise BagFormatError(f"{path}: trailing bytes ({len(raw)} bytes, expected {expected})")
    emb = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER_LEN).reshape(n, d)
    coords = np.frombuffer(raw, dtype="<i4", count=2 * n, offset=_HEADER_LEN + 4 * n * d).reshape(n, 2)

    sidecar_file = _sidecar_path(path)
    if not sidecar_file.exists():
        raise BagFormatError(f"{path}: missing sidecar {sidecar_file.name}")
    meta = json.loads(sidecar_file.read_text())
    if meta.get("n") != int(n) or meta.get("d") != int(d):
        raise BagFormatError(f"{path}: sidecar disagrees with header (n, d)")
    if np.isnan(emb).any():
        raise BagFormatError(f"{path}: NaN in embedding payload")

    bag = SlideBag(
        slide_id=meta["slide_id"],
        embeddings=emb.astype(np.float64),
        coords=coords.astype(np.int64),
        label=meta.get("label"),
    )
    try:
        bag.validate()
    except BagInvariantError as exc:
        raise BagFormatError(str(exc)) from exc
    return bag


def save_dataset(ds: Dataset, directory) -> None:
    """Write a dataset as a directory of bag files plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ds.validate()
    for bag in ds.bags:
        save_bag(bag, directory / f"{bag.slide_id}.bag")
    manifest = {
        "slide_ids": [b.slide_id for b in ds.bags],
        "class_names": ds.class_names,
        "split": ds.split_tag,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    if ds.phenotypes is not None:
        blob = {sid: np.asarray(ph).tolist() for sid, ph in ds.phenotypes.items()}
        (directory / "phenotypes.json").write_text(json.dumps(blob, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest_file = directory / "manifest.json"
    if not manifest_file.exists():
        raise BagFormatError(f"{directory}: no manifest.json (not a dataset directory)")
    manifest = json.loads(manifest_file.read_text())
    bags = [load_bag(directory / f"{sid}.bag") for sid in manifest["slide_ids"]]
    phenotypes = None
    pheno_file = directory / "phenotypes.json"
    if pheno_file.exists():
        phenotypes = {
            sid: np.asarray(v, dtype=np.int64) for sid, v in json.loads(pheno_file.read_text()).items()
        }
    ds = Dataset(
        bags=bags,
        class_names=manifest.get("class_names"),
        split_tag=manifest.get("split", "train"),
        phenotypes=phenotypes,
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# synthetic data with planted regional structure
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of the planted-structure generator.

    Each class draws tokens from a mixture over ``num_phenotypes`` Gaussian
    centers shared by all classes; only the mixture weights differ by class.
    Phenotypes occupy contiguous grid bands inside each bag, so crops see
    region-specific content.  ``phenotype_separation`` scales the centers;
    zero separation removes all class signal.
    """

    num_classes: int = 3
    bags_per_class: int = 100
    grid_side: int = 20
    tokens_per_bag: int = 256
    dim: int = 16
    num_phenotypes: int = 4
    phenotype_separation: float = 1.0
    class_mixture: np.ndarray | None = None
    noise_sigma: float = 1.0
    seed: int = 0
    val_bags_per_class: int | None = None  # default: bags_per_class // 2

    def resolved_mixture(self) -> np.ndarray:
        if self.class_mixture is None:
            return default_class_mixture(self.num_classes, self.num_phenotypes)
        return np.asarray(self.class_mixture, dtype=np.float64)

    def resolved_val_bags(self) -> int:
        if self.val_bags_per_class is None:
            return max(1, self.bags_per_class // 2)
        return self.val_bags_per_class

    def validate(self) -> None:
        if self.num_classes < 1 or self.bags_per_class < 1 or self.resolved_val_bags() < 1:
            raise BagInvariantError("num_classes and bag counts must be positive")
        if self.tokens_per_bag > self.grid_side**2:
            raise BagInvariantError(
                f"tokens_per_bag={self.tokens_per_bag} exceeds grid capacity {self.grid_side ** 2}"
            )
        if self.tokens_per_bag < 1 or self.dim < 1:
            raise BagInvariantError("tokens_per_bag and dim must be positive")
        if self.phenotype_separation < 0:
            raise BagInvariantError("phenotype_separation must be nonnegative")
        if self.noise_sigma < 0:
            raise BagInvariantError("noise_sigma must be nonnegative")
        if (self.num_phenotypes + 1) // 2 > self.dim:
            raise BagInvariantError("num_phenotypes needs at least ceil(P/2) embedding dimensions")
        mix = self.resolved_mixture()
        if mix.shape != (self.num_classes, self.num_phenotypes):
            raise BagInvariantError(
                f"class_mixture must be ({self.num_classes}, {self.num_phenotypes}), got {mix.shape}"
            )
        if np.any(mix < 0) or not np.allclose(mix.sum(axis=1), 1.0, atol=1e-9):
            raise BagInvariantError("class_mixture rows must be nonnegative and sum to 1")


def default_class_mixture(num_classes: int, num_phenotypes: int) -> np.ndarray:
    """Peaked default: class c puts 0.55 on phenotype c % P, rest uniform."""
    mix = np.full((num_classes, num_phenotypes), 0.45 / max(1, num_phenotypes - 1))
    if num_phenotypes == 1:
        return np.ones((num_classes, 1))
    for c in range(num_classes):
        mix[c, c % num_phenotypes] = 0.55
    return mix


def phenotype_centers(spec: SyntheticSpec) -> np.ndarray:
    """Shared phenotype centers: antipodal pairs along the leading axes.

    Phenotypes 2k and 2k+1 sit at +/- separation on axis k.  Mixtures that
    load antipodal pairs symmetrically are invisible to a mean-pool readout
    while remaining separable from per-region token content.
    """
    centers = np.zeros((spec.num_phenotypes, spec.dim))
    for k in range(spec.num_phenotypes):
        axis = k // 2
        sign = 1.0 if k % 2 == 0 else -1.0
        centers[k, axis] = sign * spec.phenotype_separation
    return centers


def _phenotype_bands(spec: SyntheticSpec, weights: np.ndarray, coords: np.ndarray,
                     rng: RandomSource) -> np.ndarray:
    """Assign each token the phenotype of its contiguous grid band.

    The grid is sliced into bands (random orientation, random phenotype
    order) with widths proportional to the mixture weights.
    """
    order = rng.permutation(spec.num_phenotypes)
    axis = int(rng.integers(2))  # 0: bands across rows, 1: across columns
    edges = np.cumsum(weights[order]) * spec.grid_side
    pos = coords[:, axis].astype(np.float64)
    band = np.searchsorted(edges, pos, side="right")
    band = np.clip(band, 0, spec.num_phenotypes - 1)
    return order[band]


def _make_bag(spec: SyntheticSpec, centers: np.ndarray, mixture: np.ndarray,
              slide_id: str, label: int, rng: RandomSource) -> tuple[SlideBag, np.ndarray]:
    cells = rng.subset(spec.grid_side**2, spec.tokens_per_bag)
    coords = np.stack([cells // spec.grid_side, cells % spec.grid_side], axis=1)
    phenos = _phenotype_bands(spec, mixture[label], coords, rng.child("bands"))
    emb = centers[phenos] + spec.noise_sigma * rng.child("noise").normal((spec.tokens_per_bag, spec.dim))
    emb = emb.astype(np.float32).astype(np.float64)  # keep values f32-representable
    return SlideBag(slide_id, emb, coords, label=label), phenos


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Generate (train, val) datasets with planted, spatially clustered signal.

    Deterministic given ``spec.seed``; train and val are disjoint by
    slide_id.  Per-token phenotype ids are attached as ``Dataset.phenotypes``
    (and persisted as ``phenotypes.json`` by :func:`save_dataset`).
    """
    spec.validate()
    centers = phenotype_centers(spec)
    mixture = spec.resolved_mixture()
    root = RandomSource(spec.seed)
    class_names = [f"class_{c}" for c in range(spec.num_classes)]

    datasets = []
    counts = {"train": spec.bags_per_class, "val": spec.resolved_val_bags()}
    for split, per_class in counts.items():
        bags, phenos = [], {}
        for c in range(spec.num_classes):
            for b in range(per_class):
                sid = f"{split}_c{c:02d}_b{b:04d}"
                bag, ph = _make_bag(spec, centers, mixture, sid, c, root.child(split, c, b))
                bags.append(bag)
                phenos[sid] = ph
        ds = Dataset(bags=bags, class_names=class_names, split_tag=split, phenotypes=phenos)
        ds.validate()
        datasets.append(ds)
    return datasets[0], datasets[1]


def signal_phenotypes(spec: SyntheticSpec) -> np.ndarray:
    """Phenotype ids whose mixture weight varies across classes."""
    mix = spec.resolved_mixture()
    varying = np.ptp(mix, axis=0) > 1e-12
    return np.flatnonzero(varying)
