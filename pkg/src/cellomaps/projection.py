"""Project tile predictions back onto the slide grid and summarise them per slide."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DuplicateCoordinate, EmptyInput, MalformedInput, OffGridOrigin
from .tiler import NUM_PATTERNS, PATTERNS, PatternClass

UNCLASSIFIED = -1

PALETTE: dict[PatternClass, tuple[int, int, int]] = {
    PatternClass.Lepidic: (255, 255, 0),
    PatternClass.Acinar: (255, 165, 0),
    PatternClass.Papillary: (0, 255, 255),
    PatternClass.Micropapillary: (255, 0, 255),
    PatternClass.Solid: (139, 0, 0),
    PatternClass.Normal: (0, 255, 0),
}
UNCLASSIFIED_COLOR = (0, 0, 0)


@dataclass(frozen=True, eq=False)
class PatternOverlay:
    grid: np.ndarray  # (rows, cols) class indices, UNCLASSIFIED where no tile was predicted
    tile_size: int
    width: int
    height: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def build_overlay(predictions: Sequence, width: int, height: int, tile_size: int) -> PatternOverlay:
    """Place each prediction's argmax at its tile's grid cell."""
    if tile_size < 1:
        raise MalformedInput("tile size must be positive")
    rows, cols = height // tile_size, width // tile_size
    grid = np.full((rows, cols), UNCLASSIFIED, dtype=np.int8)
    for p in predictions:
        if p.x % tile_size or p.y % tile_size:
            raise OffGridOrigin(f"origin ({p.x}, {p.y}) is not on the {tile_size}-pixel grid")
        gx, gy = p.x // tile_size, p.y // tile_size
        if not (0 <= gx < cols and 0 <= gy < rows):
            raise OffGridOrigin(f"origin ({p.x}, {p.y}) lies outside the {cols}x{rows} grid")
        if grid[gy, gx] != UNCLASSIFIED:
            raise DuplicateCoordinate(f"more than one prediction for origin ({p.x}, {p.y})")
        grid[gy, gx] = p.predicted
    return PatternOverlay(grid, tile_size, width, height)


@dataclass(frozen=True, eq=False)
class SlideFeatureVector:
    fractions: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return {p.value.lower(): float(f) for p, f in zip(PATTERNS, self.fractions)}


def feature_vector(predictions: Sequence) -> SlideFeatureVector:
    """Share of tiles whose argmax is each pattern."""
    if len(predictions) == 0:
        raise EmptyInput("cannot build a feature vector from no predictions")
    counts = np.bincount([p.predicted for p in predictions], minlength=NUM_PATTERNS)
    return SlideFeatureVector(counts / counts.sum())


def overlay_array(overlay: PatternOverlay, block: int = 8) -> np.ndarray:
    lut = np.array([PALETTE[p] for p in PATTERNS] + [UNCLASSIFIED_COLOR], dtype=np.uint8)
    # UNCLASSIFIED (-1) indexes the last row
    rgb = lut[overlay.grid.astype(np.int64)]
    return np.repeat(np.repeat(rgb, block, axis=0), block, axis=1)


def render_overlay_png(overlay: PatternOverlay, block: int = 8) -> bytes:
    if block < 1:
        raise MalformedInput("block factor must be positive")
    rgb = overlay_array(overlay, block)
    if rgb.size == 0:
        # PNG cannot be 0 pixels wide; an empty grid renders as one black block
        rgb = np.zeros((block, block, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def legend(overlay: PatternOverlay | None = None, block: int = 8) -> dict:
    doc = {
        "palette": {p.value: list(PALETTE[p]) for p in PATTERNS},
        "unclassified": list(UNCLASSIFIED_COLOR),
        "block": block,
    }
    if overlay is not None:
        doc.update(tile_size=overlay.tile_size, grid_rows=overlay.shape[0], grid_cols=overlay.shape[1])
    return doc


def palette_from_legend(doc: dict) -> dict[PatternClass, tuple[int, int, int]]:
    try:
        return {PatternClass.parse(name): tuple(rgb) for name, rgb in doc["palette"].items()}
    except (KeyError, AttributeError, TypeError) as exc:
        raise MalformedInput(f"bad legend: {exc}") from None


def write_overlay(overlay: PatternOverlay, png_path, block: int = 8) -> Path:
    """Write the PNG and a ``.legend.json`` sidecar; returns the sidecar path."""
    png_path = Path(png_path)
    png_path.write_bytes(render_overlay_png(overlay, block))
    sidecar = png_path.with_suffix(".legend.json")
    sidecar.write_text(json.dumps(legend(overlay, block), indent=1) + "\n", encoding="utf-8")
    return sidecar


FEATURE_COLUMNS = ["slide_id", "patient_id"] + [p.value.lower() for p in PATTERNS]


def write_features(rows: Sequence[tuple[str, str, SlideFeatureVector]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURE_COLUMNS)
        for slide_id, patient_id, fv in rows:
            writer.writerow([slide_id, patient_id, *(repr(float(f)) for f in fv.fractions)])


def read_features(path) -> list[tuple[str, str, SlideFeatureVector]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(FEATURE_COLUMNS) - set(reader.fieldnames):
            raise MalformedInput(f"{path}: feature CSV needs columns {', '.join(FEATURE_COLUMNS)}")
        try:
            return [
                (r["slide_id"], r["patient_id"],
                 SlideFeatureVector(np.array([float(r[c]) for c in FEATURE_COLUMNS[2:]])))
                for r in reader
            ]
        except ValueError as exc:
            raise MalformedInput(f"{path}: {exc}") from None
