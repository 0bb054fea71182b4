"""Region atlases and per-region relevance reports.

An atlas is an integer label volume (0 = background) plus a name for each
non-zero label. Reports sum a transformed attribution map inside each
region, express the sums as percentages of the total over all regions and
rank them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .attribution import GUIDED, LRP, OCCLUSION, REGION_OCCLUSION, SENSITIVITY, AttributionMap
from .errors import AtlasError, ShapeError

MODES = ("abs", "positive", "signed")

DEFAULT_MODE = {
    SENSITIVITY: "abs",
    GUIDED: "abs",
    OCCLUSION: "positive",
    REGION_OCCLUSION: "positive",
    LRP: "positive",
}


@dataclass(frozen=True)
class Atlas:
    labels: np.ndarray
    names: dict

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise AtlasError(f"atlas labels must be 3-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise AtlasError("atlas labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min() < 0:
            raise AtlasError("atlas labels must be non-negative")
        names = {int(k): str(v) for k, v in self.names.items()}
        if 0 in names:
            raise AtlasError("label 0 is reserved for background and cannot be named")
        present = {int(v) for v in np.unique(labels)} - {0}
        if not present:
            raise AtlasError("atlas has no non-background voxel")
        missing = sorted(present - set(names))
        if missing:
            raise AtlasError(f"labels without a name: {missing}")
        if len(set(names.values())) != len(names):
            raise AtlasError("region names must be unique")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", names)

    @property
    def shape(self):
        return self.labels.shape

    @property
    def regions(self) -> list[int]:
        """Non-background labels present in the volume, ascending."""
        return [int(v) for v in np.unique(self.labels) if v != 0]


def region_masks(atlas: Atlas) -> dict[int, np.ndarray]:
    """Flat voxel indices of each non-background region."""
    flat = atlas.labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    masks = {}
    for r in atlas.regions:
        lo, hi = np.searchsorted(sorted_labels, [r, r + 1])
        masks[r] = np.sort(order[lo:hi])
    return masks


# ---------------------------------------------------------------------------
# reports


def round_half_up(value: float, places: int = 2) -> Decimal:
    """Half-up rounding of the shortest decimal repr of ``value``."""
    return Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class RegionEntry:
    name: str
    label: int
    relevance: float
    percentage: float

    def format(self) -> str:
        return f"{self.name} ({round_half_up(self.percentage)}%)"


@dataclass(frozen=True)
class RegionReport:
    entries: tuple
    total_relevance: float
    method: str
    mode: str
    k: int
    degenerate: bool = False
    target_class: int | None = None

    def lines(self) -> list[str]:
        return [e.format() for e in self.entries]


def _transform(values: np.ndarray, mode: str) -> np.ndarray:
    if mode == "abs":
        return np.abs(values)
    if mode == "positive":
        return np.maximum(values, 0.0)
    if mode == "signed":
        return values
    raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {MODES}")


def _rank_key(e: RegionEntry):
    return (-e.percentage, e.name)


def aggregate_relevance(amap: AttributionMap, atlas: Atlas, mode: str | None = None) -> RegionReport:
    """Per-region sums and percentages, ranked descending.

    ``mode`` defaults per method: ``abs`` for gradient maps, ``positive``
    for occlusion and LRP maps. When the total over all regions is zero
    the report is flagged ``degenerate`` and every percentage is 0.
    """
    if amap.values.shape != atlas.shape:
        raise ShapeError(f"map shape {amap.values.shape} does not match atlas shape {atlas.shape}")
    mode = DEFAULT_MODE[amap.method] if mode is None else mode
    values = _transform(amap.values, mode).ravel()

    sums = {r: float(values[idx].sum()) for r, idx in region_masks(atlas).items()}
    total = float(sum(sums.values()))
    degenerate = total == 0.0
    entries = [
        RegionEntry(atlas.names[r], r, s, 0.0 if degenerate else s / total * 100.0)
        for r, s in sums.items()
    ]
    entries.sort(key=_rank_key)
    return RegionReport(tuple(entries), total, amap.method, mode, len(entries), degenerate, amap.target_class)


def top_k(report: RegionReport, k: int = 5) -> RegionReport:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    entries = tuple(sorted(report.entries, key=_rank_key)[:k])
    return replace(report, entries=entries, k=len(entries))


METHOD_TITLES = {
    SENSITIVITY: "Sensitivity Analysis",
    GUIDED: "Guided Backpropagation",
    OCCLUSION: "Occlusion Sensitivity",
    REGION_OCCLUSION: "Brain Area Occlusion",
    LRP: "Layer-wise Relevance Propagation",
}


def format_reports(reports) -> str:
    """Side-by-side text table, one column per report."""
    reports = list(reports)
    headers = [METHOD_TITLES.get(r.method, r.method) for r in reports]
    columns = [r.lines() for r in reports]
    depth = max((len(c) for c in columns), default=0)
    widths = [max([len(h)] + [len(s) for s in c]) for h, c in zip(headers, columns)]

    def row(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [rule, row(headers), rule]
    for i in range(depth):
        out.append(row([c[i] if i < len(c) else "" for c in columns]))
    out.append(rule)
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# names sidecar: one "label<TAB>name" per line, UTF-8


def read_region_names(path) -> dict[int, str]:
    names = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            label, sep, name = line.partition("\t")
            if not sep or not name:
                raise AtlasError(f"{path}:{lineno}: expected 'label<TAB>name'")
            try:
                key = int(label)
            except ValueError:
                raise AtlasError(f"{path}:{lineno}: label {label!r} is not an integer") from None
            if key in names:
                raise AtlasError(f"{path}:{lineno}: duplicate label {key}")
            names[key] = name
    return names


def write_region_names(names: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label in sorted(names):
            fh.write(f"{label}\t{names[label]}\n")


def load_atlas(volume_path, names_path) -> Atlas:
    from .volumes import load_volume

    vf = load_volume(volume_path)
    return Atlas(vf.data, read_region_names(names_path))
