"""Dataset manifests, subject-level splits, normalization, synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import core
from .atlas import Atlas, write_region_names
from .errors import ManifestError, VolexplainError
from .volumes import read_volume, write_volume

SPLITS = ("train", "val", "test")


class ConstantVolumeError(VolexplainError, ValueError):
    pass


def normalize(volume, mask=None) -> np.ndarray:
    """Z-score the foreground and zero the background.

    The foreground is ``volume > 0`` unless an explicit boolean ``mask`` is
    given. Standard deviation is the population one (ddof 0).
    """
    v = core.as_tensor(volume, "volume")
    if np.unique(v).size < 2:
        raise ConstantVolumeError("cannot normalize a constant volume")
    fg = v > 0 if mask is None else np.asarray(mask, dtype=bool)
    if fg.shape != v.shape:
        raise core.ShapeError(f"mask shape {fg.shape} does not match volume shape {v.shape}")
    vals = v[fg]
    if vals.size == 0:
        raise ConstantVolumeError("foreground is empty")
    mean = vals.mean()
    std = vals.std()
    if std == 0.0:
        raise ConstantVolumeError("foreground is constant")
    out = np.zeros_like(v)
    out[fg] = (vals - mean) / std
    return out


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Record:
    subject_id: str
    path: str
    label: str
    split: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        owner = {}
        for r in self.records:
            if r.split is not None and r.split not in SPLITS:
                raise ManifestError(f"record {r.subject_id}: unknown split {r.split!r}")
            prev = owner.setdefault(r.subject_id, r.split)
            if prev != r.split:
                raise ManifestError(f"subject {r.subject_id} appears in splits {prev!r} and {r.split!r}")

    def check_labels(self, class_names: Sequence[str]) -> None:
        bad = sorted({r.label for r in self.records} - set(class_names))
        if bad:
            raise ManifestError(f"labels {bad} are not among the class names {list(class_names)}")

    def select(self, split: Optional[str] = None, label: Optional[str] = None) -> list[Record]:
        return [
            r for r in self.records
            if (split is None or r.split == split) and (label is None or r.label == label)
        ]

    def subjects(self, split: Optional[str] = None) -> set[str]:
        return {r.subject_id for r in self.select(split)}


def read_manifest(path) -> DatasetManifest:
    """Parse ``subject_id,path,label[,split]`` lines (UTF-8)."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (len(row) == 1 and not row[0].strip()) or row[0].startswith("#"):
                continue
            if len(row) not in (3, 4):
                raise ManifestError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(row)}")
            fields = [f.strip() for f in row]
            records.append(Record(*fields[:3], fields[3] if len(fields) == 4 and fields[3] else None))
    return DatasetManifest(records)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in manifest.records:
            w.writerow([r.subject_id, r.path, r.label] + ([r.split] if r.split else []))


def resolve_path(manifest_path, record: Record) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def load_split(manifest_path, manifest: DatasetManifest, split, class_names, normalize_volumes=False):
    """Stack the volumes of one split into ``(x, y)`` arrays.

    ``split=None`` takes every record.
    """
    manifest.check_labels(class_names)
    recs = manifest.select(split)
    if not recs:
        raise ManifestError(f"manifest has no records for split {split!r}")
    vols = []
    for r in recs:
        v = read_volume(resolve_path(manifest_path, r))
        vols.append(normalize(v) if normalize_volumes else v)
    x = np.stack(vols)[:, None]
    y = np.array([list(class_names).index(r.label) for r in recs], dtype=np.int64)
    return x, y


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``total`` proportional to ``fractions``.

    Leftover units go to the largest fractional remainders, earlier
    entries first on ties.
    """
    s = sum(fractions)
    quotas = [total * f / s for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_manifest(records: Iterable[Record], train_fraction: float = 0.8, val_fraction: float = 0.1, rng_seed: int = 0) -> DatasetManifest:
    """Assign train/val/test at the subject level.

    ``train_fraction`` of subjects go to the training side (the rest to
    test), then ``val_fraction`` of the training-side subjects become
    validation. Counts use largest-remainder rounding; which subjects land
    where is a seeded shuffle of the sorted subject ids.
    """
    records = list(records)
    if not 0 < train_fraction < 1 or not 0 <= val_fraction < 1:
        raise ValueError(f"fractions out of range: train {train_fraction}, val {val_fraction}")
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 3:
        raise ManifestError(f"need at least 3 distinct subjects to split, got {len(subjects)}")
    rng = np.random.default_rng(rng_seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_train_side, _ = largest_remainder(len(subjects), [train_fraction, 1 - train_fraction])
    n_train, _ = largest_remainder(n_train_side, [1 - val_fraction, val_fraction])
    assign = {}
    for i, s in enumerate(order):
        assign[s] = "train" if i < n_train else "val" if i < n_train_side else "test"
    return DatasetManifest(tuple(replace(r, split=assign[r.subject_id]) for r in records))


# ---------------------------------------------------------------------------
# synthetic planted-signal data


@dataclass(frozen=True)
class SynthesisConfig:
    """Planted-signal dataset parameters.

    Volumes are ``background_amplitude`` times a unit-variance smoothed
    noise field, plus white noise of ``noise_sigma``; the positive class
    adds ``class_effect_magnitude`` inside the planted region.
    """

    extent: int = 16
    region_count: int = 8
    planted_region_label: int = 1
    class_effect_magnitude: float = 3.0
    noise_sigma: float = 1.0
    samples_per_class: int = 40
    rng_seed: int = 0
    class_names: tuple = ("CN", "AD")
    background_amplitude: float = 1.0
    smoothing_sigma: float = 2.0
    train_fraction: float = 0.8
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.extent < 1 or self.region_count < 1 or self.samples_per_class < 1:
            raise ValueError("extent, region_count and samples_per_class must be positive")
        if not 1 <= self.planted_region_label <= self.region_count:
            raise ValueError(f"planted_region_label must be in [1, {self.region_count}]")
        if self.class_effect_magnitude < 0 or self.noise_sigma < 0:
            raise ValueError("magnitude and noise_sigma must be non-negative")
        if len(self.class_names) != 2:
            raise ValueError("synthetic data has exactly two classes (negative, positive)")


def _box_grid(count: int, extent: int) -> tuple[int, int, int]:
    best = None
    for a in range(1, count + 1):
        if count % a:
            continue
        for b in range(1, count // a + 1):
            if (count // a) % b:
                continue
            c = count // a // b
            dims = tuple(sorted((a, b, c), reverse=True))
            key = (max(dims) - min(dims), dims)
            if best is None or key < best[0]:
                best = (key, dims)
    dims = best[1]
    if max(dims) > extent:
        raise ValueError(f"cannot fit {count} box regions into extent {extent}")
    return dims


def box_atlas(extent: int, region_count: int) -> Atlas:
    """Partition an ``extent``-cube into ``region_count`` axis-aligned boxes."""
    grid = _box_grid(region_count, extent)
    labels = np.zeros((extent,) * 3, dtype=np.int64)
    edges = [[round(i * extent / g) for i in range(g + 1)] for g in grid]
    label = 0
    for i in range(grid[0]):
        for j in range(grid[1]):
            for k in range(grid[2]):
                label += 1
                labels[edges[0][i] : edges[0][i + 1], edges[1][j] : edges[1][j + 1], edges[2][k] : edges[2][k + 1]] = label
    width = len(str(region_count))
    return Atlas(labels, {r: f"Region_{r:0{width}d}" for r in range(1, region_count + 1)})


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = rng.normal(size=shape)
    if sigma > 0:
        f = gaussian_filter(f, sigma, mode="wrap")
    std = f.std()
    return (f - f.mean()) / std if std > 0 else f


def synthesize(cfg: SynthesisConfig):
    """In-memory dataset: ``(volumes, labels, atlas)``.

    Samples alternate negative/positive; ``labels`` are class indices into
    ``cfg.class_names``.
    """
    atlas = box_atlas(cfg.extent, cfg.region_count)
    planted = atlas.labels == cfg.planted_region_label
    rng = np.random.default_rng(cfg.rng_seed)
    shape = (cfg.extent,) * 3
    n = 2 * cfg.samples_per_class
    vols = np.empty((n, *shape))
    labels = np.arange(n) % 2
    for i in range(n):
        v = cfg.background_amplitude * _smooth_field(rng, shape, cfg.smoothing_sigma)
        v += rng.normal(scale=cfg.noise_sigma, size=shape) if cfg.noise_sigma > 0 else 0.0
        if labels[i] == 1:
            v[planted] += cfg.class_effect_magnitude
        vols[i] = v
    return vols, labels, atlas


@dataclass(frozen=True)
class SyntheticDataset:
    root: Path
    manifest_path: Path
    atlas_path: Path
    names_path: Path
    atlas: Atlas
    manifest: DatasetManifest


def generate_synthetic(cfg: SynthesisConfig, out_dir) -> SyntheticDataset:
    """Write a synthetic dataset to ``out_dir``.

    Layout: ``volumes/sub-NNNN.vvol``, ``atlas.vvol`` (int16),
    ``atlas_names.tsv``, ``manifest.csv`` (with splits) and
    ``synthesis.json`` holding the configuration.
    """
    root = Path(out_dir)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    vols, labels, atlas = synthesize(cfg)
    width = max(4, len(str(len(vols))))
    records = []
    for i, (v, y) in enumerate(zip(vols, labels)):
        rel = f"volumes/sub-{i + 1:0{width}d}.vvol"
        write_volume(v, root / rel)
        records.append(Record(f"sub-{i + 1:0{width}d}", rel, cfg.class_names[y]))
    manifest = split_manifest(records, cfg.train_fraction, cfg.val_fraction, cfg.rng_seed)

    atlas_path = root / "atlas.vvol"
    names_path = root / "atlas_names.tsv"
    manifest_path = root / "manifest.csv"
    write_volume(atlas.labels, atlas_path, dtype="int16")
    write_region_names(atlas.names, names_path)
    write_manifest(manifest, manifest_path)
    with open(root / "synthesis.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return SyntheticDataset(root, manifest_path, atlas_path, names_path, atlas, manifest)
