"""Fixed-size tiling of CellOMaps and growth-pattern labelling from region annotations."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import Polygon, box
from shapely.ops import unary_union

from .codec import CellOMap
from .errors import MalformedInput, OutOfBounds, TileTooLarge


class PatternClass(str, enum.Enum):
    Lepidic = "Lepidic"
    Acinar = "Acinar"
    Papillary = "Papillary"
    Micropapillary = "Micropapillary"
    Solid = "Solid"
    Normal = "Normal"

    @property
    def index(self) -> int:
        return PATTERNS.index(self)

    @classmethod
    def parse(cls, name: str) -> "PatternClass":
        try:
            return cls(name)
        except ValueError:
            raise MalformedInput(f"unknown growth pattern {name!r}") from None


PATTERNS = list(PatternClass)
NUM_PATTERNS = len(PATTERNS)

TILE_SIZES = (224, 256, 448, 1024)
DEFAULT_MIN_OVERLAP = 0.95
DEFAULT_MIN_NUCLEI = 25


@dataclass(frozen=True)
class RegionAnnotation:
    polygon: tuple[tuple[float, float], ...]
    label: PatternClass

    def __post_init__(self):
        object.__setattr__(self, "polygon", tuple((float(x), float(y)) for x, y in self.polygon))
        if len(self.polygon) < 3:
            raise MalformedInput("annotation polygon needs at least 3 vertices")
        if not self.shape.is_valid:
            raise MalformedInput(f"{self.label.value} annotation polygon is not simple")

    @property
    def shape(self) -> Polygon:
        return Polygon(self.polygon)

    def check_bounds(self, width: int, height: int) -> None:
        for x, y in self.polygon:
            if not (0 <= x <= width and 0 <= y <= height):
                raise OutOfBounds(f"annotation vertex ({x}, {y}) outside {width}x{height} map")


@dataclass(frozen=True, eq=False)
class Tile:
    slide_id: str
    patient_id: str
    x: int
    y: int
    size: int
    pixels: np.ndarray  # (C, size, size) bool view into the map raster

    @property
    def tile_id(self) -> str:
        return tile_id(self.slide_id, self.x, self.y)

    @property
    def nuclei_count(self) -> int:
        return int(np.count_nonzero(self.pixels))


@dataclass(frozen=True, eq=False)
class LabeledTile(Tile):
    label: PatternClass = PatternClass.Normal


def tile_id(slide_id: str, x: int, y: int) -> str:
    return f"{slide_id}@{x},{y}"


def tile_origins(width: int, height: int, size: int, stride: int) -> list[tuple[int, int]]:
    if size > min(width, height):
        raise TileTooLarge(f"tile size {size} exceeds map {width}x{height}")
    if stride < 1 or size < 1:
        raise MalformedInput("tile size and stride must be positive")
    return [
        (x, y)
        for y in range(0, height - size + 1, stride)
        for x in range(0, width - size + 1, stride)
    ]


def tile_map(cmap: CellOMap, size: int, stride: int | None = None, bits: np.ndarray | None = None) -> list[Tile]:
    """Full windows only, row-major by origin; partial border windows are dropped.

    ``bits`` may pass an already unpacked raster to avoid unpacking twice.
    """
    stride = size if stride is None else stride
    origins = tile_origins(cmap.width, cmap.height, size, stride)
    if bits is None:
        bits = cmap.bits()
    return [
        Tile(cmap.slide_id, cmap.patient_id, x, y, size, bits[:, y:y + size, x:x + size])
        for x, y in origins
    ]


def _label_shapes(annotations: Sequence[RegionAnnotation]):
    grouped: dict[PatternClass, list[Polygon]] = {}
    for ann in annotations:
        grouped.setdefault(ann.label, []).append(ann.shape)
    return {label: unary_union(polys) for label, polys in grouped.items()}


def _fractions(shapes, x: int, y: int, size: int) -> dict[PatternClass, float]:
    window = box(x, y, x + size, y + size)
    area = float(size * size)
    return {label: s.intersection(window).area / area for label, s in shapes.items()}


def overlap_fractions(x: int, y: int, size: int, annotations: Sequence[RegionAnnotation]) -> dict[PatternClass, float]:
    """Fraction of the tile square covered by the union of each label's regions."""
    return _fractions(_label_shapes(annotations), x, y, size)


def label_tiles(tiles: Iterable[Tile], annotations: Sequence[RegionAnnotation],
                min_overlap: float = DEFAULT_MIN_OVERLAP) -> list[LabeledTile]:
    """Keep tiles that are pure enough under ``min_overlap``; drop the rest."""
    if not 0.5 < min_overlap <= 1.0:
        raise MalformedInput(f"min_overlap must lie in (0.5, 1], got {min_overlap}")
    shapes = _label_shapes(annotations)
    out = []
    for t in tiles:
        fractions = _fractions(shapes, t.x, t.y, t.size)
        winner = [lab for lab, f in fractions.items() if f >= min_overlap]
        if len(winner) != 1:
            continue
        if any(f > 1.0 - min_overlap for lab, f in fractions.items() if lab != winner[0]):
            continue
        out.append(LabeledTile(t.slide_id, t.patient_id, t.x, t.y, t.size, t.pixels, winner[0]))
    return out


def filter_sparse_tiles(tiles: Iterable[Tile], min_nuclei: int = DEFAULT_MIN_NUCLEI) -> list[Tile]:
    if min_nuclei < 0:
        raise MalformedInput("min_nuclei must be non-negative")
    return [t for t in tiles if t.nuclei_count >= min_nuclei]


def annotations_from_dict(doc: dict) -> tuple[str, list[RegionAnnotation]]:
    try:
        slide_id = doc["slide_id"]
        regions = [
            RegionAnnotation(tuple(tuple(v) for v in r["polygon"]), PatternClass.parse(r["label"]))
            for r in doc["regions"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MalformedInput):
            raise
        raise MalformedInput(f"bad annotation document: {exc}") from None
    return slide_id, regions


def load_annotations(path) -> tuple[str, list[RegionAnnotation]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: invalid JSON ({exc})") from None
    return annotations_from_dict(doc)


def annotations_to_dict(slide_id: str, annotations: Sequence[RegionAnnotation]) -> dict:
    return {
        "slide_id": slide_id,
        "regions": [
            {"label": a.label.value, "polygon": [[x, y] for x, y in a.polygon]} for a in annotations
        ],
    }


@dataclass(frozen=True)
class ManifestRow:
    slide_id: str
    patient_id: str
    x: int
    y: int
    size: int
    label: PatternClass

    @property
    def tile_id(self) -> str:
        return tile_id(self.slide_id, self.x, self.y)


MANIFEST_COLUMNS = ("slide_id", "patient_id", "x", "y", "size", "label")


def manifest_rows(tiles: Iterable[LabeledTile]) -> list[ManifestRow]:
    return [ManifestRow(t.slide_id, t.patient_id, t.x, t.y, t.size, t.label) for t in tiles]


def write_manifest(rows: Iterable[ManifestRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            writer.writerow([r.slide_id, r.patient_id, r.x, r.y, r.size, r.label.value])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(MANIFEST_COLUMNS) - set(reader.fieldnames):
            raise MalformedInput(f"{path}: manifest needs columns {', '.join(MANIFEST_COLUMNS)}")
        try:
            return [
                ManifestRow(r["slide_id"], r["patient_id"], int(r["x"]), int(r["y"]),
                            int(r["size"]), PatternClass.parse(r["label"]))
                for r in reader
            ]
        except ValueError as exc:
            if isinstance(exc, MalformedInput):
                raise
            raise MalformedInput(f"{path}: {exc}") from None
