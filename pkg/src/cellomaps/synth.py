"""Seeded synthetic nuclei point patterns for the six growth-pattern classes.

Tiles are generated directly at map resolution. Two pairs of classes share
their geometry and differ only in cell type (lepidic/normal on the alveolar
lattice, acinar/micropapillary on small rings with scattered cells), so the
spatial arrangement of *typed* nuclei is needed to tell all six apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedInput
from .ingest import CellClass, NucleusRecord, SlideNucleiSet, write_nuclei_file
from .tiler import PATTERNS, ManifestRow, PatternClass, RegionAnnotation, annotations_to_dict, write_manifest

NEO = CellClass.NeoplasticEpithelial
NON = CellClass.NonNeoplasticEpithelial
CONN = CellClass.Connective
_ALL_CLASSES = list(CellClass)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    tiles_per_class: int = 60
    tile_size: int = 448
    patients: int = 6
    map_mpp: float = 2.0
    source_mpp: float = 0.5
    noise_fraction: float = 0.02
    cell_spacing: float = 4.0  # px between neighbouring nuclei along a structure
    jitter: float = 0.7
    ring_radius: tuple[float, float] = (9.0, 14.0)  # acinar glands and micropapillary tufts
    ring_gap: float = 7.0
    lattice_spacing: float = 45.0  # alveolar walls (lepidic, normal)
    solid_spacing: float = 5.0
    solid_radius: tuple[float, float] = (0.3, 0.45)  # fraction of tile side
    papilla_length: float = 1.8  # core length per tile is this * tile_size**2 / 100 px
    scatter_density: float = 1 / 180  # stromal / detached cells between rings, per px^2
    sparse_density: float = 1 / 500  # interstitial connective on the lattice, per px^2

    def __post_init__(self):
        if self.tile_size <= 0 or self.tiles_per_class <= 0 or self.patients <= 0:
            raise MalformedInput("tile size, tiles per class and patient count must be positive")
        if not 0 <= self.noise_fraction <= 0.2:
            raise MalformedInput("noise fraction must lie in [0, 0.2]")
        if self.cell_spacing <= 0 or self.lattice_spacing <= 0 or self.solid_spacing <= 0:
            raise MalformedInput("spacings must be positive")
        if self.map_mpp < self.source_mpp:
            raise MalformedInput("map resolution must not be finer than the source")


def _along(p0: np.ndarray, p1: np.ndarray, spacing: float) -> np.ndarray:
    length = float(np.hypot(*(p1 - p0)))
    n = max(1, int(length // spacing))
    t = (np.arange(n) + 0.5) / n
    return p0 + t[:, None] * (p1 - p0)


def _ring(rng, center, radius: float, spacing: float) -> np.ndarray:
    n = max(6, int(round(2 * math.pi * radius / spacing)))
    theta = rng.uniform(0, 2 * math.pi) + np.arange(n) * 2 * math.pi / n
    return center + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _uniform(rng, size: float, density: float) -> np.ndarray:
    n = rng.poisson(density * size * size)
    return rng.uniform(0, size, (n, 2))


def _rings(rng, cfg: SynthConfig) -> tuple[np.ndarray, list[tuple[np.ndarray, float]]]:
    """Non-overlapping rings packed by dart throwing."""
    size = cfg.tile_size
    lo, hi = cfg.ring_radius
    attempts = int(15 * size * size / (math.pi * hi * hi))
    radii = rng.uniform(lo, hi, attempts)
    centers = rng.uniform(0, 1, (attempts, 2)) * (size - 2 * radii[:, None]) + radii[:, None]
    keep_c = np.zeros((attempts, 2))
    keep_r = np.zeros(attempts)
    n = 0
    for c, r in zip(centers, radii):
        d = np.hypot(keep_c[:n, 0] - c[0], keep_c[:n, 1] - c[1])
        if np.all(d >= keep_r[:n] + r + cfg.ring_gap):
            keep_c[n], keep_r[n] = c, r
            n += 1
    placed = [(keep_c[i], float(keep_r[i])) for i in range(n)]
    pts = [_ring(rng, c, r, cfg.cell_spacing) for c, r in placed]
    return (np.concatenate(pts) if pts else np.zeros((0, 2))), placed


def _between_rings(rng, cfg: SynthConfig, rings) -> np.ndarray:
    pts = _uniform(rng, cfg.tile_size, cfg.scatter_density)
    if rings and len(pts):
        centers = np.array([c for c, _ in rings])
        radii = np.array([r for _, r in rings])
        d = np.hypot(pts[:, None, 0] - centers[None, :, 0], pts[:, None, 1] - centers[None, :, 1])
        pts = pts[(d > radii[None, :] + 3).all(axis=1)]
    return pts


def _lattice(rng, cfg: SynthConfig) -> np.ndarray:
    """Jittered quadrilateral lattice; nuclei sit along its walls."""
    size, step = cfg.tile_size, cfg.lattice_spacing
    n = int(math.ceil(size / step)) + 2
    offset = rng.uniform(0, step, 2)
    gx, gy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    verts = np.stack([gx, gy], axis=-1) * step - step + offset
    verts = verts + rng.normal(0, step * 0.18, verts.shape)
    segs = []
    for i in range(n):
        for j in range(n):
            if j + 1 < n:
                segs.append(_along(verts[i, j], verts[i, j + 1], cfg.cell_spacing))
            if i + 1 < n:
                segs.append(_along(verts[i, j], verts[i + 1, j], cfg.cell_spacing))
    return np.concatenate(segs)


def _papillae(rng, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Branching random-walk cores (connective) lined on both sides by tumour cells."""
    size, step = cfg.tile_size, cfg.cell_spacing
    budget = cfg.papilla_length * size * size / 100.0
    cores, linings = [], []
    walked = 0.0
    stack = []
    while walked < budget:
        if not stack:
            stack.append((rng.uniform(0, size, 2), rng.uniform(0, 2 * math.pi), 0))
        pos, heading, depth = stack.pop()
        for k in range(int(rng.integers(12, 30))):
            heading += rng.normal(0, 0.18)
            nxt = pos + step * np.array([math.cos(heading), math.sin(heading)])
            if not (0 <= nxt[0] < size and 0 <= nxt[1] < size):
                break
            normal = np.array([-math.sin(heading), math.cos(heading)])
            cores.append(nxt)
            linings.append(nxt + 4.0 * normal)
            linings.append(nxt - 4.0 * normal)
            pos = nxt
            walked += step
            if depth < 3 and k > 4 and rng.random() < 0.06:
                stack.append((pos.copy(), heading + rng.choice([-1, 1]) * rng.uniform(0.5, 1.1), depth + 1))
        if depth < 3 and rng.random() < 0.5:
            stack.append((pos.copy(), heading + rng.uniform(-0.8, 0.8), depth + 1))
    return np.array(cores).reshape(-1, 2), np.array(linings).reshape(-1, 2)


def _solid(rng, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    size = cfg.tile_size
    lo, hi = cfg.solid_radius
    center = rng.uniform(0.35, 0.65, 2) * size
    ra, rb = rng.uniform(lo, hi, 2) * size
    phase = rng.uniform(0, 2 * math.pi, 3)
    s = cfg.solid_spacing
    g = np.arange(s / 2, size, s)
    pts = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    pts = pts + rng.normal(0, s * 0.2, pts.shape)
    rel = pts - center
    angle = np.arctan2(rel[:, 1], rel[:, 0])
    wobble = 1 + 0.12 * np.sin(3 * angle + phase[0]) + 0.08 * np.sin(5 * angle + phase[1])
    inside = (rel[:, 0] / ra) ** 2 + (rel[:, 1] / rb) ** 2 <= wobble ** 2
    outside = pts[~inside]
    n_conn = min(len(outside), int(0.04 * inside.sum()))
    conn = outside[rng.choice(len(outside), n_conn, replace=False)] if n_conn else np.zeros((0, 2))
    return pts[inside], conn


def _jitter(rng, pts: np.ndarray, sigma: float) -> np.ndarray:
    return pts + rng.normal(0, sigma, pts.shape) if len(pts) else pts


def class_points(pattern: PatternClass, cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, CellClass]]:
    if pattern is PatternClass.Solid:
        neo, conn = _solid(rng, cfg)
        return [(neo, NEO), (conn, CONN)]
    if pattern in (PatternClass.Acinar, PatternClass.Micropapillary):
        ring_pts, rings = _rings(rng, cfg)
        scatter = _between_rings(rng, cfg, rings)
        # acinar glands sit in stroma; micropapillary tufts float free with no stromal cores
        other = CONN if pattern is PatternClass.Acinar else NON
        return [(_jitter(rng, ring_pts, cfg.jitter), NEO), (scatter, other)]
    if pattern is PatternClass.Papillary:
        cores, linings = _papillae(rng, cfg)
        return [(_jitter(rng, linings, cfg.jitter), NEO), (_jitter(rng, cores, cfg.jitter), CONN)]
    walls = _jitter(rng, _lattice(rng, cfg), cfg.jitter)
    sparse = _uniform(rng, cfg.tile_size, cfg.sparse_density)
    lining = NEO if pattern is PatternClass.Lepidic else NON
    return [(walls, lining), (sparse, CONN)]


def generate_class_tile(pattern: PatternClass, config: SynthConfig = SynthConfig(), tile_index: int = 0) -> SlideNucleiSet:
    """One tile of ``pattern`` at map resolution, deterministic in (seed, pattern, index)."""
    pattern = PatternClass(pattern)
    rng = np.random.default_rng([config.seed, pattern.index, tile_index])
    size = config.tile_size
    xs, ys, classes = [], [], []
    for pts, cls in class_points(pattern, config, rng):
        if not len(pts):
            continue
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < size) & (pts[:, 1] >= 0) & (pts[:, 1] < size)
        pts = np.floor(pts[keep]).astype(np.int64)
        xs.append(pts[:, 0])
        ys.append(pts[:, 1])
        classes.extend([cls] * len(pts))
    x = np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    y = np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)
    if config.noise_fraction and len(classes):
        flip = np.flatnonzero(rng.random(len(classes)) < config.noise_fraction)
        for i, k in zip(flip, rng.integers(0, len(_ALL_CLASSES), len(flip))):
            classes[i] = _ALL_CLASSES[k]
    records = tuple(NucleusRecord(int(a), int(b), c) for a, b, c in zip(x, y, classes))
    return SlideNucleiSet(f"synth-{pattern.value.lower()}-{tile_index}", "synth", config.map_mpp, size, size, records)


@dataclass
class SyntheticCorpus:
    config: SynthConfig
    slides: list[SlideNucleiSet]  # at source resolution
    annotations: dict[str, list[RegionAnnotation]]
    truth: list[ManifestRow] = field(default_factory=list)


def generate_corpus(config: SynthConfig = SynthConfig()) -> SyntheticCorpus:
    """Synthetic patients, one slide each, every patient holding tiles of every class.

    Class tile ``i`` goes to patient ``i mod patients``; tiles are laid out
    on a shuffled grid and annotated with one square region each.
    """
    if config.tiles_per_class < 10:
        raise MalformedInput("need at least 10 tiles per class")
    if config.patients < 6:
        raise MalformedInput("need at least 6 synthetic patients")
    size = config.tile_size
    scale = config.map_mpp / config.source_mpp
    if abs(scale - round(scale)) > 1e-9:
        raise MalformedInput("map/source resolution ratio must be an integer")
    scale = int(round(scale))
    slides, annotations, truth = [], {}, []
    for k in range(config.patients):
        patient_id, slide_id = f"synth-p{k:02d}", f"synth-s{k:02d}"
        members = [
            (pattern, i) for pattern in PATTERNS for i in range(config.tiles_per_class)
            if i % config.patients == k
        ]
        cols = max(1, int(math.ceil(math.sqrt(len(members)))))
        rows = int(math.ceil(len(members) / cols))
        rng = np.random.default_rng([config.seed, 1000 + k])
        cells = rng.permutation(rows * cols)[:len(members)]
        records, regions = [], []
        for (pattern, i), cell in zip(members, cells):
            ox, oy = int(cell % cols) * size, int(cell // cols) * size
            frag = generate_class_tile(pattern, config, i)
            sub = rng.integers(0, scale, (len(frag.records), 2))
            for r, (dx, dy) in zip(frag.records, sub):
                records.append(NucleusRecord((ox + r.x) * scale + int(dx), (oy + r.y) * scale + int(dy), r.cell_class))
            poly = ((ox, oy), (ox + size, oy), (ox + size, oy + size), (ox, oy + size))
            regions.append(RegionAnnotation(poly, pattern))
            truth.append(ManifestRow(slide_id, patient_id, ox, oy, size, pattern))
        slides.append(SlideNucleiSet(slide_id, patient_id, config.source_mpp,
                                     cols * size * scale, rows * size * scale, tuple(records)))
        annotations[slide_id] = regions
    return SyntheticCorpus(config, slides, annotations, truth)


def write_corpus(corpus: SyntheticCorpus, out_dir) -> Path:
    """nuclei JSON per slide at the top level, annotations/ and truth.csv beside them."""
    out = Path(out_dir)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    for s in corpus.slides:
        write_nuclei_file(s, out / f"{s.slide_id}.json")
        doc = annotations_to_dict(s.slide_id, corpus.annotations[s.slide_id])
        (out / "annotations" / f"{s.slide_id}.json").write_text(json.dumps(doc), encoding="utf-8")
    write_manifest(corpus.truth, out / "truth.csv")
    return out
