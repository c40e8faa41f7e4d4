"""Embedding datasets: in-memory model, binary on-disk format, synthetic generator.

A dataset directory holds ``manifest.json`` plus three headerless little-endian
blobs: ``images.f32`` (num_items x dim float32 rows), ``labels.u32`` (num_items
uint32 class indices) and ``text.f32`` (one float32 row per class description,
rows grouped by class in manifest order). Every embedding row is stored
unit-norm; loading validates rather than repairs unless explicitly asked.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BlobSizeMismatch,
    ConfigError,
    DimMismatch,
    IoFailure,
    ManifestInvalid,
    NormViolation,
    ZeroVector,
)

FORMAT_TAG = "pcbemb/1"
NORM_TOL = 1e-3
PRNG_ALGORITHM = "numpy-pcg64"  # recorded in run metadata; seeds feed np.random.default_rng


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return v scaled to unit L2 norm (float64)."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ZeroVector("cannot normalize a (near-)zero vector")
    return v / n


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two unit vectors, clamped to [-1, 1].

    Inputs must already be unit-norm within 1e-3; this is a dot product,
    not a normalizing similarity.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimMismatch(f"cosine operands differ in shape: {u.shape} vs {v.shape}")
    for name, w in (("u", u), ("v", v)):
        if abs(float(np.linalg.norm(w)) - 1.0) > NORM_TOL:
            raise NormViolation(f"cosine input {name} is not unit-norm")
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ZeroVector("matrix contains a (near-)zero row")
    return m / norms


def _check_rows_unit(m: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.asarray(m, dtype=np.float64), axis=1)
    worst = float(np.abs(norms - 1.0).max()) if len(norms) else 0.0
    if worst > NORM_TOL:
        raise NormViolation(f"{what}: row norm off by {worst:.3g} (tolerance {NORM_TOL})")


@dataclass
class EmbeddingDataset:
    """Unit-norm image embeddings with oracle-only ground-truth labels.

    Treated as read-only after construction; safe to share across threads.
    """

    dim: int
    items: np.ndarray  # (N, dim) float32, unit-norm rows
    labels: np.ndarray  # (N,) uint32, values in [0, K)
    class_names: list[str]

    def __post_init__(self) -> None:
        self.items = np.ascontiguousarray(self.items, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.items.ndim != 2 or self.items.shape[1] != self.dim:
            raise DimMismatch(f"items must be (N, {self.dim}), got {self.items.shape}")
        n = self.items.shape[0]
        if n < 1:
            raise ManifestInvalid("dataset must hold at least one item")
        k = len(self.class_names)
        if k < 2:
            raise ManifestInvalid("dataset must define at least two classes")
        if len(set(self.class_names)) != k or any(not c for c in self.class_names):
            raise ManifestInvalid("class names must be non-empty and unique")
        if self.labels.shape != (n,):
            raise DimMismatch("labels length must match item count")
        if n and int(self.labels.max()) >= k:
            raise ManifestInvalid("label index exceeds number of classes")
        _check_rows_unit(self.items, "image embeddings")

    @property
    def num_items(self) -> int:
        return int(self.items.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class ClassTextBank:
    """Per-class description embeddings (one group of unit rows per class)."""

    dim: int
    per_class: list[np.ndarray]  # K matrices of shape (delta_k, dim)
    description_texts: list[list[str]] | None = None  # source strings; not persisted

    def __post_init__(self) -> None:
        self.per_class = [np.ascontiguousarray(g, dtype=np.float32) for g in self.per_class]
        if not self.per_class:
            raise ManifestInvalid("text bank must cover at least one class")
        for k, g in enumerate(self.per_class):
            if g.ndim != 2 or g.shape[1] != self.dim:
                raise DimMismatch(f"class {k} text group must be (delta, {self.dim})")
            if g.shape[0] < 1:
                raise ManifestInvalid(f"class {k} needs at least one description vector")
            _check_rows_unit(g, f"class {k} text embeddings")

    @property
    def num_classes(self) -> int:
        return len(self.per_class)

    @property
    def counts(self) -> np.ndarray:
        """Number of description vectors per class (delta_k)."""
        return np.array([g.shape[0] for g in self.per_class], dtype=np.int64)

    def stacked(self) -> np.ndarray:
        """All description rows stacked class by class, shape (sum delta_k, dim)."""
        return np.vstack(self.per_class)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a seeded synthetic train/test/bank triple."""

    num_classes: int
    dim: int
    items_per_class: tuple[int, ...]
    noise_sigma_image: float
    noise_sigma_text: float
    descriptions_per_class: int
    seed: int
    test_per_class: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "items_per_class", tuple(int(c) for c in self.items_per_class))
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if len(self.items_per_class) != self.num_classes:
            raise ConfigError("items_per_class must list one count per class")
        if any(c < 1 for c in self.items_per_class):
            raise ConfigError("per-class counts must be >= 1")
        if self.descriptions_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.noise_sigma_image < 0 or self.noise_sigma_text < 0:
            raise ConfigError("noise sigmas must be non-negative")


def powerlaw_counts(base: int, alpha: float, num_classes: int) -> tuple[int, ...]:
    """Per-class counts ceil(base * k^-alpha) for k = 1..K."""
    if base < 1:
        raise ConfigError("powerlaw base must be >= 1")
    return tuple(int(math.ceil(base * (k + 1) ** (-alpha))) for k in range(num_classes))


def generate_synthetic(spec: SynthSpec) -> tuple[EmbeddingDataset, EmbeddingDataset, ClassTextBank]:
    """Draw a seeded synthetic (train, test, bank) triple.

    One unit prototype per class is drawn uniformly on the sphere (normalized
    Gaussian); image and text rows are the prototype plus isotropic Gaussian
    noise, re-normalized. Identical specs produce identical output.
    """
    rng = np.random.default_rng(spec.seed)
    k, d = spec.num_classes, spec.dim
    protos = _normalize_rows(rng.standard_normal((k, d)))

    def noisy_rows(count: int, proto: np.ndarray, sigma: float) -> np.ndarray:
        rows = proto[None, :] + sigma * rng.standard_normal((count, d))
        return _normalize_rows(rows)

    train_blocks = [noisy_rows(spec.items_per_class[i], protos[i], spec.noise_sigma_image) for i in range(k)]
    test_blocks = [noisy_rows(spec.test_per_class, protos[i], spec.noise_sigma_image) for i in range(k)]
    text_blocks = [noisy_rows(spec.descriptions_per_class, protos[i], spec.noise_sigma_text) for i in range(k)]

    names = [f"class_{i:02d}" for i in range(k)]

    def build(blocks: list[np.ndarray]) -> EmbeddingDataset:
        labels = np.concatenate([np.full(len(b), i, dtype=np.uint32) for i, b in enumerate(blocks)])
        return EmbeddingDataset(dim=d, items=np.vstack(blocks), labels=labels, class_names=names)

    bank = ClassTextBank(dim=d, per_class=text_blocks)
    return build(train_blocks), build(test_blocks), bank


def save_dataset(ds: EmbeddingDataset, bank: ClassTextBank, path: str | Path) -> None:
    """Write a dataset directory in the pcbemb/1 layout (bit-exact, little-endian)."""
    if ds.dim != bank.dim:
        raise DimMismatch("dataset and text bank dims differ")
    if ds.num_classes != bank.num_classes:
        raise DimMismatch("dataset and text bank class counts differ")
    out = Path(path)
    manifest = {
        "format": FORMAT_TAG,
        "dim": ds.dim,
        "num_items": ds.num_items,
        "num_classes": ds.num_classes,
        "class_names": list(ds.class_names),
        "descriptions_per_class": [int(c) for c in bank.counts],
        "files": {"images": "images.f32", "labels": "labels.u32", "text": "text.f32"},
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "images.f32").write_bytes(ds.items.astype("<f4").tobytes(order="C"))
        (out / "labels.u32").write_bytes(ds.labels.astype("<u4").tobytes(order="C"))
        (out / "text.f32").write_bytes(bank.stacked().astype("<f4").tobytes(order="C"))
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"failed writing dataset to {out}: {exc}") from exc


def _read_blob(path: Path, expected_bytes: int, what: str) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {what} blob {path}: {exc}") from exc
    if len(raw) != expected_bytes:
        raise BlobSizeMismatch(f"{what}: expected {expected_bytes} bytes, found {len(raw)}")
    return raw


def load_dataset(path: str | Path, renormalize: bool = False) -> tuple[EmbeddingDataset, ClassTextBank]:
    """Load and validate a pcbemb/1 dataset directory.

    Row norms are checked, not silently repaired; pass ``renormalize=True`` to
    opt into re-normalizing rows that drift beyond tolerance.
    """
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ManifestInvalid(f"no manifest.json under {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestInvalid(f"unreadable manifest: {exc}") from exc

    required = {"format", "dim", "num_items", "num_classes", "class_names", "descriptions_per_class", "files"}
    missing = required - set(manifest)
    if missing:
        raise ManifestInvalid(f"manifest missing keys: {sorted(missing)}")
    if manifest["format"] != FORMAT_TAG:
        raise ManifestInvalid(f"unsupported format tag {manifest['format']!r}")

    dim = int(manifest["dim"])
    n = int(manifest["num_items"])
    k = int(manifest["num_classes"])
    names = list(manifest["class_names"])
    deltas = [int(x) for x in manifest["descriptions_per_class"]]
    if dim < 1 or n < 1 or k < 2:
        raise ManifestInvalid("dim/num_items/num_classes out of range")
    if len(names) != k:
        raise ManifestInvalid("class_names length disagrees with num_classes")
    if len(deltas) != k or any(d < 1 for d in deltas):
        raise ManifestInvalid("descriptions_per_class must list one positive count per class")

    files = manifest["files"]
    img_raw = _read_blob(root / files["images"], n * dim * 4, "images")
    lbl_raw = _read_blob(root / files["labels"], n * 4, "labels")
    txt_raw = _read_blob(root / files["text"], sum(deltas) * dim * 4, "text")

    items = np.frombuffer(img_raw, dtype="<f4").reshape(n, dim).copy()
    labels = np.frombuffer(lbl_raw, dtype="<u4").copy()
    text = np.frombuffer(txt_raw, dtype="<f4").reshape(sum(deltas), dim).copy()
    if int(labels.max()) >= k:
        raise ManifestInvalid("labels blob contains an index >= num_classes")

    if renormalize:
        items = _normalize_rows(items.astype(np.float64)).astype(np.float32)
        text = _normalize_rows(text.astype(np.float64)).astype(np.float32)

    groups: list[np.ndarray] = []
    offset = 0
    for d_k in deltas:
        groups.append(text[offset : offset + d_k])
        offset += d_k

    ds = EmbeddingDataset(dim=dim, items=items, labels=labels, class_names=names)
    bank = ClassTextBank(dim=dim, per_class=groups)
    return ds, bank
