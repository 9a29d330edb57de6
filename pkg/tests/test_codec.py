import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cellomaps.codec import (
    DEFAULT_CHANNELS,
    CellOMap,
    build_cellomap,
    channel_spec,
    composite_symbols,
    compression_ratio,
    decode,
    encode,
    encoded_length,
    header_length,
    luminance,
    map_entropy,
    render_array,
    render_png,
    shannon_entropy,
    tile_entropies,
)
from cellomaps.errors import (
    BadMagic,
    EmptyTile,
    MalformedInput,
    NonzeroPadding,
    TooManyChannels,
    TruncatedPayload,
    UnsupportedVersion,
)
from cellomaps.ingest import CellClass, NucleusRecord, SlideNucleiSet

from conftest import random_map

NEO, NON, CONN, INF, NEC = list(CellClass)


def nset(points, w=64, h=64):
    return SlideNucleiSet("s", "p", 2.0, w, h, tuple(NucleusRecord(x, y, c) for x, y, c in points))


def rasterize_oracle(points, channels, w, h):
    """Plain nested-list rasterization, independent of numpy indexing."""
    planes = [[[0] * w for _ in range(h)] for _ in channels]
    for x, y, c in points:
        for k, ch in enumerate(channels):
            if ch == c:
                planes[k][y][x] = 1
    return np.array(planes, dtype=bool)


def pack_oracle(plane):
    """Row-major MSB-first packing written bit by bit."""
    out = bytearray()
    for row in plane:
        for start in range(0, len(row), 8):
            byte = 0
            for k, bit in enumerate(row[start:start + 8]):
                if bit:
                    byte |= 0x80 >> k
            out.append(byte)
    return bytes(out)


def test_empty_set_gives_zero_planes():
    m = build_cellomap(nset([]))
    assert m.planes.shape == (3, 64, 8)
    assert not m.planes.any()


def test_colliding_centroids_set_once():
    m = build_cellomap(nset([(5, 6, NEO), (5, 6, NEO)]))
    bits = m.bits()
    assert bits[0, 6, 5] and bits.sum() == 1


def test_one_per_class_matches_oracle():
    pts = [(1, 2, NEO), (10, 20, NON), (30, 3, CONN), (40, 40, INF), (50, 60, NEC)]
    m = build_cellomap(nset(pts))
    assert np.array_equal(m.bits(), rasterize_oracle(pts, DEFAULT_CHANNELS, 64, 64))
    assert m.bits().sum(axis=(1, 2)).tolist() == [1, 1, 1]


def test_build_is_order_independent():
    rng = np.random.default_rng(3)
    pts = [(int(x), int(y), list(CellClass)[c]) for x, y, c in
           zip(rng.integers(0, 64, 300), rng.integers(0, 64, 300), rng.integers(0, 5, 300))]
    m1 = build_cellomap(nset(pts))
    m2 = build_cellomap(nset([pts[i] for i in rng.permutation(len(pts))]))
    assert m1 == m2
    assert np.array_equal(m1.bits(), rasterize_oracle(pts, DEFAULT_CHANNELS, 64, 64))


def test_payload_size_448():
    m = build_cellomap(nset([], 448, 448))
    data = encode(m)
    assert len(data) - header_length(3) == 3 * 448 * 56 == 75264


def test_single_bit_is_msb():
    m = CellOMap.from_bits(np.ones((1, 1, 1), bool), [NEO], 2.0)
    data = encode(m)
    assert data[header_length(1):] == b"\x80"


def test_header_layout():
    m = CellOMap.from_bits(np.zeros((2, 3, 9), bool), [CONN, NEC], 2.0)
    data = encode(m)
    assert struct.unpack_from("<4sBBHIII", data) == (b"CLOM", 1, 2, 0, 9, 3, 2000)
    assert data[20:22] == bytes([2, 4])
    assert len(data) == encoded_length(9, 3, 2) == 22 + 2 * 3 * 2


def test_packing_matches_bitwise_oracle():
    rng = np.random.default_rng(11)
    m = random_map(rng, 13, 7, 2, density=0.4)
    payload = encode(m)[header_length(2):]
    assert payload == b"".join(pack_oracle(p.tolist()) for p in m.bits())


def test_roundtrip_random_maps():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        m = random_map(rng, int(rng.integers(1, 80)), int(rng.integers(1, 80)), int(rng.integers(1, 6)),
                       density=float(rng.random()))
        data = encode(m)
        back = decode(data)
        assert back == m
        assert encode(back) == data
        assert len(data) == header_length(len(m.channels)) + len(m.channels) * m.height * math.ceil(m.width / 8)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_roundtrip_property(w, h, c, seed):
    m = random_map(np.random.default_rng(seed), w, h, c, density=0.3)
    assert decode(encode(m)) == m


def test_decode_errors():
    m = CellOMap.from_bits(np.ones((1, 2, 10), bool), [NEO], 2.0)
    data = encode(m)
    with pytest.raises(BadMagic):
        decode(b"CLOX" + data[4:])
    with pytest.raises(TruncatedPayload):
        decode(data[:-1])
    with pytest.raises(TruncatedPayload):
        decode(data[:10])
    with pytest.raises(UnsupportedVersion):
        decode(data[:4] + b"\x02" + data[5:])
    with pytest.raises(MalformedInput):
        decode(data + b"\x00")
    # last byte of a 10-pixel row holds 2 pixels and 6 padding bits
    bad = bytearray(data)
    bad[-1] |= 0x01
    with pytest.raises(NonzeroPadding):
        decode(bytes(bad))


def test_ids_are_metadata():
    m = CellOMap.from_bits(np.zeros((1, 4, 4), bool), [NEO], 2.0, "slide", "patient")
    back = decode(encode(m), "slide", "patient")
    assert back == m and back.slide_id == "slide"


def test_channel_spec_invariants():
    assert channel_spec() == (NEO, NON, CONN)
    with pytest.raises(MalformedInput):
        channel_spec([NEO, NEO])
    with pytest.raises(MalformedInput):
        channel_spec([])


def png_pixels(data):
    img = Image.open(io.BytesIO(data))
    assert img.mode == "RGB"
    return np.asarray(img)


def test_render_black():
    assert not png_pixels(render_png(build_cellomap(nset([])))).any()


def test_render_single_green_pixel():
    img = png_pixels(render_png(build_cellomap(nset([(10, 12, NEO)])), 0))
    assert img[12, 10].tolist() == [0, 255, 0]
    assert np.count_nonzero(img.any(axis=2)) == 1


def test_render_radius_two_block():
    img = render_array(build_cellomap(nset([(10, 12, NEO)])), 2)
    mask = img.any(axis=2)
    assert mask.sum() == 25 and mask[10:15, 8:13].all()
    assert (img[mask] == [0, 255, 0]).all()


def test_render_colors_per_class():
    img = render_array(build_cellomap(nset([(1, 1, NEO), (3, 3, NON), (5, 5, CONN)])))
    assert img[1, 1].tolist() == [0, 255, 0]
    assert img[3, 3].tolist() == [0, 0, 255]
    assert img[5, 5].tolist() == [255, 0, 0]


def test_render_radius_zero_counts_bits():
    rng = np.random.default_rng(5)
    m = random_map(rng, 30, 20, 3, density=0.05)
    img = render_array(m, 0)
    assert np.count_nonzero(img) == m.bits().sum()


def test_render_too_many_channels():
    m = CellOMap.from_bits(np.zeros((4, 2, 2), bool), [NEO, NON, CONN, INF], 2.0)
    with pytest.raises(TooManyChannels):
        render_png(m)


def test_entropy_examples():
    assert shannon_entropy(np.zeros((8, 8), int), 8).bits_per_pixel == 0.0
    uniform = np.arange(64).reshape(8, 8) % 8
    assert shannon_entropy(uniform, 8).bits_per_pixel == pytest.approx(3.0, abs=1e-9)
    rep = shannon_entropy(np.array([0, 0, 1, 3]), 4)
    assert rep.symbol_histogram.tolist() == [2, 1, 0, 1]
    assert rep.bits_per_pixel == pytest.approx(1.5, abs=1e-12)
    with pytest.raises(EmptyTile):
        shannon_entropy(np.zeros((0, 3)), 2)
    with pytest.raises(MalformedInput):
        shannon_entropy(np.array([4]), 4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=300), st.randoms(use_true_random=False))
def test_entropy_bounded_and_permutation_invariant(symbols, rnd):
    h = shannon_entropy(np.array(symbols), 8).bits_per_pixel
    assert 0 <= h <= 3 + 1e-12
    shuffled = list(symbols)
    rnd.shuffle(shuffled)
    assert shannon_entropy(np.array(shuffled), 8).bits_per_pixel == pytest.approx(h, abs=1e-12)


def test_composite_symbols_and_map_entropy():
    bits = np.zeros((3, 1, 4), bool)
    bits[0, 0, 1] = bits[2, 0, 2] = True
    bits[:, 0, 3] = True
    assert composite_symbols(bits)[0].tolist() == [0, 1, 4, 7]
    m = CellOMap.from_bits(bits, DEFAULT_CHANNELS, 2.0)
    assert map_entropy(m).bits_per_pixel == pytest.approx(2.0)


def test_tile_entropies_zero_tiles():
    m = build_cellomap(nset([(70, 70, NEO)], 128, 128))
    vals = {(x, y): h for x, y, h in tile_entropies(m, 64)}
    assert vals[(0, 0)] == 0.0 and vals[(64, 64)] > 0


def test_luminance_range():
    rgb = np.array([[[255, 255, 255], [0, 0, 0], [255, 0, 0]]], dtype=np.uint8)
    assert luminance(rgb).tolist() == [[255, 0, 76]]


def test_compression_ratios():
    m = build_cellomap(nset([], 448, 448))
    assert compression_ratio(m, 24, 448 * 448) == pytest.approx(8.0, rel=1e-3)
    # the same field at 0.5 mpp is 4x wider and taller
    assert compression_ratio(m, 24, 1792 * 1792) == pytest.approx(128.0, rel=1e-3)
    tiny = CellOMap.from_bits(np.ones((1, 1, 1), bool), [NEO], 2.0)
    assert compression_ratio(tiny, 24, 1) < 1  # header dominates
