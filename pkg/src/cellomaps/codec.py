"""CellOMaps: bit-packed multi-channel centroid rasters.

Each channel is a binary plane marking the centroids of one cell class.
Planes are stored 1 bit per pixel, row-major, MSB-first, with rows padded
to a whole byte, inside a small little-endian container::

    offset  size  field
    0       4     magic b"CLOM"
    4       1     version (1)
    5       1     channel count C
    6       2     reserved (0)
    8       4     width
    12      4     height
    16      4     mpp * 1000, rounded
    20      C     cell class code per channel
    20+C    ...   C planes of height * ceil(width / 8) bytes
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    EmptyTile,
    MalformedInput,
    NonzeroPadding,
    TooManyChannels,
    TruncatedPayload,
    UnsupportedVersion,
)
from .ingest import CellClass, SlideNucleiSet

MAGIC = b"CLOM"
VERSION = 1
_FIXED_HEADER = struct.Struct("<4sBBHIII")

DEFAULT_CHANNELS = (
    CellClass.NeoplasticEpithelial,
    CellClass.NonNeoplasticEpithelial,
    CellClass.Connective,
)

# display colours; classes outside this table take the leftover primaries
CHANNEL_COLORS = {
    CellClass.NeoplasticEpithelial: 1,  # green
    CellClass.Connective: 0,  # red
    CellClass.NonNeoplasticEpithelial: 2,  # blue
}


def channel_spec(classes: Iterable[CellClass | str] = DEFAULT_CHANNELS) -> tuple[CellClass, ...]:
    spec = tuple(c if isinstance(c, CellClass) else CellClass.parse(c) for c in classes)
    if not 1 <= len(spec) <= 5:
        raise MalformedInput(f"channel spec needs 1..5 classes, got {len(spec)}")
    if len(set(spec)) != len(spec):
        raise MalformedInput("channel spec contains duplicate classes")
    return spec


def row_bytes(width: int) -> int:
    return (width + 7) // 8


def header_length(channel_count: int) -> int:
    return _FIXED_HEADER.size + channel_count


@dataclass(frozen=True, eq=False)
class CellOMap:
    """Immutable packed map.

    ``planes`` has shape (C, height, ceil(width/8)), dtype uint8. The slide
    and patient ids are metadata only: the container does not carry them
    and they do not take part in equality.
    """

    mpp: float
    width: int
    height: int
    channels: tuple[CellClass, ...]
    planes: np.ndarray
    slide_id: str = field(default="")
    patient_id: str = field(default="")

    def __post_init__(self):
        planes = np.ascontiguousarray(self.planes, dtype=np.uint8)
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "channels", channel_spec(self.channels))
        expected = (len(self.channels), self.height, row_bytes(self.width))
        if planes.shape != expected:
            raise MalformedInput(f"plane array shape {planes.shape}, expected {expected}")
        pad = 8 * row_bytes(self.width) - self.width
        if pad and planes.size and np.any(planes[:, :, -1] & ((1 << pad) - 1)):
            raise NonzeroPadding("padding bits beyond the row width must be zero")

    @classmethod
    def from_bits(cls, bits: np.ndarray, channels, mpp: float, slide_id="", patient_id=""):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 3:
            raise MalformedInput("bit raster must be (channels, height, width)")
        _, height, width = bits.shape
        planes = np.packbits(bits, axis=-1, bitorder="big")
        return cls(mpp, width, height, tuple(channels), planes, slide_id, patient_id)

    def bits(self) -> np.ndarray:
        """Unpacked (C, H, W) boolean raster."""
        return np.unpackbits(self.planes, axis=-1, count=self.width, bitorder="big").astype(bool)

    @property
    def mpp_micro(self) -> int:
        return int(round(self.mpp * 1000))

    def __eq__(self, other):
        if not isinstance(other, CellOMap):
            return NotImplemented
        return (
            self.mpp_micro == other.mpp_micro
            and self.width == other.width
            and self.height == other.height
            and self.channels == other.channels
            and np.array_equal(self.planes, other.planes)
        )

    __hash__ = None


def build_cellomap(nset: SlideNucleiSet, channels: Sequence[CellClass] = DEFAULT_CHANNELS) -> CellOMap:
    """Rasterize centroids, one binary plane per requested class.

    ``nset`` must already be at the map resolution; nuclei of classes not in
    ``channels`` are ignored and coincident centroids collapse to one bit.
    """
    channels = channel_spec(channels)
    bits = np.zeros((len(channels), nset.height, nset.width), dtype=bool)
    index = {c: i for i, c in enumerate(channels)}
    if nset.records:
        cs, ys, xs = [], [], []
        for r in nset.records:
            ch = index.get(r.cell_class)
            if ch is not None:
                cs.append(ch)
                ys.append(int(r.y))
                xs.append(int(r.x))
        bits[cs, ys, xs] = True
    return CellOMap.from_bits(bits, channels, nset.source_mpp, nset.slide_id, nset.patient_id)


def encode(cmap: CellOMap) -> bytes:
    header = _FIXED_HEADER.pack(
        MAGIC, VERSION, len(cmap.channels), 0, cmap.width, cmap.height, cmap.mpp_micro
    )
    codes = bytes(c.code for c in cmap.channels)
    return header + codes + cmap.planes.tobytes()


def decode(data: bytes, slide_id: str = "", patient_id: str = "") -> CellOMap:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a CLOM container")
    if len(data) < _FIXED_HEADER.size:
        raise TruncatedPayload("header is truncated")
    _, version, n_channels, _reserved, width, height, mpp_micro = _FIXED_HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"CLOM version {version} is not supported")
    if not 1 <= n_channels <= 5:
        raise MalformedInput(f"channel count {n_channels} out of range")
    hlen = header_length(n_channels)
    if len(data) < hlen:
        raise TruncatedPayload("channel table is truncated")
    channels = tuple(CellClass.from_code(b) for b in data[_FIXED_HEADER.size:hlen])
    payload = n_channels * height * row_bytes(width)
    if len(data) < hlen + payload:
        raise TruncatedPayload(f"expected {payload} payload bytes, got {len(data) - hlen}")
    if len(data) > hlen + payload:
        raise MalformedInput(f"{len(data) - hlen - payload} trailing bytes after payload")
    planes = np.frombuffer(data, dtype=np.uint8, count=payload, offset=hlen)
    planes = planes.reshape(n_channels, height, row_bytes(width))
    return CellOMap(mpp_micro / 1000.0, width, height, channels, planes, slide_id, patient_id)


def read_clom(path, slide_id: str = "", patient_id: str = "") -> CellOMap:
    with open(path, "rb") as fh:
        return decode(fh.read(), slide_id, patient_id)


def write_clom(cmap: CellOMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(cmap))


def square_dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation of the last two axes by a (2r+1)^2 square, zero padded."""
    if radius == 0:
        return bits.copy()
    h, w = bits.shape[-2:]
    pad = [(0, 0)] * (bits.ndim - 2) + [(radius, radius), (radius, radius)]
    padded = np.pad(bits, pad)
    out = np.zeros_like(bits)
    # separable: rows first, then columns
    rows = np.zeros(bits.shape[:-2] + (h + 2 * radius, w), dtype=bits.dtype)
    for dx in range(2 * radius + 1):
        rows |= padded[..., :, dx:dx + w]
    for dy in range(2 * radius + 1):
        out |= rows[..., dy:dy + h, :]
    return out


def channel_colors(channels: Sequence[CellClass]) -> list[int]:
    if len(channels) > 3:
        raise TooManyChannels(f"cannot render {len(channels)} channels as RGB")
    fixed = [CHANNEL_COLORS.get(c) for c in channels]
    spare = [k for k in range(3) if k not in fixed]
    return [k if k is not None else spare.pop(0) for k in fixed]


def render_array(cmap: CellOMap, dot_radius: int = 0) -> np.ndarray:
    """(H, W, 3) uint8 image: set bits as 255-valued squares on black."""
    if dot_radius < 0:
        raise MalformedInput("dot radius must be non-negative")
    colors = channel_colors(cmap.channels)
    bits = square_dilate(cmap.bits(), dot_radius)
    rgb = np.zeros((cmap.height, cmap.width, 3), dtype=np.uint8)
    for ch, color in enumerate(colors):
        rgb[..., color][bits[ch]] = 255
    return rgb


def render_png(cmap: CellOMap, dot_radius: int = 0) -> bytes:
    rgb = render_array(cmap, dot_radius)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@dataclass(frozen=True)
class EntropyReport:
    bits_per_pixel: float
    symbol_histogram: np.ndarray


def composite_symbols(bits: np.ndarray) -> np.ndarray:
    """Fold a (C, H, W) bit raster into one symbol per pixel, bit c -> 2**c."""
    bits = np.asarray(bits, dtype=np.uint8)
    weights = (1 << np.arange(bits.shape[0], dtype=np.uint16))[:, None, None]
    return (bits.astype(np.uint16) * weights).sum(axis=0)


def shannon_entropy(symbols: np.ndarray, alphabet_size: int) -> EntropyReport:
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        raise EmptyTile("entropy of an empty tile is undefined")
    if alphabet_size < 1:
        raise MalformedInput("alphabet size must be positive")
    flat = symbols.ravel()
    if flat.min() < 0 or flat.max() >= alphabet_size:
        raise MalformedInput(f"symbols must lie in [0, {alphabet_size})")
    hist = np.bincount(flat.astype(np.int64), minlength=alphabet_size)
    p = hist[hist > 0] / flat.size
    # abs() folds the -0.0 of a single-symbol tile
    return EntropyReport(abs(float((p * np.log2(p)).sum())), hist)


def map_entropy(cmap: CellOMap) -> EntropyReport:
    return shannon_entropy(composite_symbols(cmap.bits()), 2 ** len(cmap.channels))


def luminance(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an 8-bit RGB image, as the comparison alphabet."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def compression_ratio(cmap: CellOMap, reference_bits_per_pixel: float, reference_pixel_count: int) -> float:
    """Reference raster size over encoded container size, header included."""
    if reference_bits_per_pixel <= 0 or reference_pixel_count <= 0:
        raise MalformedInput("reference size must be positive")
    return reference_bits_per_pixel * reference_pixel_count / (8 * len(encode(cmap)))


def encoded_length(width: int, height: int, channel_count: int) -> int:
    return header_length(channel_count) + channel_count * height * row_bytes(width)


def tile_entropies(cmap: CellOMap, size: int, stride: int | None = None):
    """Yield (x, y, bits_per_pixel) for each full window of the map."""
    stride = stride or size
    symbols = composite_symbols(cmap.bits())
    alphabet = 2 ** len(cmap.channels)
    for y in range(0, cmap.height - size + 1, stride):
        for x in range(0, cmap.width - size + 1, stride):
            yield x, y, shannon_entropy(symbols[y:y + size, x:x + size], alphabet).bits_per_pixel

