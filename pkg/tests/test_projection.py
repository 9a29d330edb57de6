import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cellomaps.classifier import PredictionRecord
from cellomaps.errors import DuplicateCoordinate, EmptyInput, OffGridOrigin
from cellomaps.projection import (
    PALETTE,
    UNCLASSIFIED,
    build_overlay,
    feature_vector,
    legend,
    palette_from_legend,
    read_features,
    render_overlay_png,
    write_features,
    write_overlay,
)
from cellomaps.tiler import PATTERNS

L, A, P, M, S, N = PATTERNS


def rec(x, y, cls):
    return PredictionRecord("s", x, y, np.eye(6)[cls.index if hasattr(cls, "index") else cls])


def png(data):
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def test_single_tile_overlay():
    ov = build_overlay([rec(0, 0, S)], 448, 448, 448)
    assert ov.grid.tolist() == [[S.index]]


def test_checkerboard():
    preds = [rec(x * 10, y * 10, S if (x + y) % 2 else N) for y in range(3) for x in range(4)]
    ov = build_overlay(preds, 45, 30, 10)
    expected = [[S.index if (x + y) % 2 else N.index for x in range(4)] for y in range(3)]
    assert ov.grid.tolist() == expected
    rev = build_overlay(preds[::-1], 45, 30, 10)
    assert np.array_equal(rev.grid, ov.grid)


def test_overlay_errors_and_unclassified():
    with pytest.raises(DuplicateCoordinate):
        build_overlay([rec(0, 0, S), rec(0, 0, N)], 20, 20, 10)
    with pytest.raises(OffGridOrigin):
        build_overlay([rec(5, 0, S)], 20, 20, 10)
    with pytest.raises(OffGridOrigin):
        build_overlay([rec(20, 0, S)], 20, 20, 10)
    ov = build_overlay([rec(10, 0, A)], 20, 20, 10)
    assert ov.grid.tolist() == [[UNCLASSIFIED, A.index], [UNCLASSIFIED, UNCLASSIFIED]]


def test_render_blocks():
    ov = build_overlay([rec(0, 0, L), rec(10, 0, A), rec(0, 10, M)], 20, 20, 10)
    img = png(render_overlay_png(ov, block=3))
    assert img.shape == (6, 6, 3)
    assert (img[:3, :3] == PALETTE[L]).all() and (img[:3, 3:] == PALETTE[A]).all()
    assert (img[3:, :3] == PALETTE[M]).all() and (img[3:, 3:] == 0).all()


def test_render_empty_grid_black():
    ov = build_overlay([], 20, 20, 10)
    assert not png(render_overlay_png(ov)).any()
    ov0 = build_overlay([], 5, 5, 10)
    assert ov0.shape == (0, 0) and not png(render_overlay_png(ov0)).any()


def test_legend_roundtrip(tmp_path):
    assert palette_from_legend(json.loads(json.dumps(legend()))) == PALETTE
    ov = build_overlay([rec(0, 0, P)], 10, 10, 10)
    sidecar = write_overlay(ov, tmp_path / "o.png", block=2)
    doc = json.loads(sidecar.read_text())
    assert sidecar.name == "o.legend.json" and doc["grid_rows"] == 1
    assert (png((tmp_path / "o.png").read_bytes()) == PALETTE[P]).all()


def test_feature_vector_examples():
    assert feature_vector([rec(0, 0, S)] * 5).fractions.tolist() == [0, 0, 0, 0, 1, 0]
    fv = feature_vector([rec(0, 0, A)] * 3 + [rec(0, 0, N)])
    assert fv.fractions.tolist() == [0, 0.75, 0, 0, 0, 0.25]
    with pytest.raises(EmptyInput):
        feature_vector([])


def test_feature_vector_matches_histogram():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(6), 200)
    preds = [PredictionRecord("s", 0, 0, p) for p in probs]
    counts = [0] * 6
    for p in probs:
        counts[max(range(6), key=lambda i: (p[i], -i))] += 1
    assert feature_vector(preds).fractions.tolist() == [c / 200 for c in counts]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=100))
def test_feature_vector_sums_to_one(classes):
    fv = feature_vector([rec(0, 0, c) for c in classes]).fractions
    assert abs(fv.sum() - 1) < 1e-9 and ((fv >= 0) & (fv <= 1)).all()


def test_features_csv_roundtrip(tmp_path):
    fv = feature_vector([rec(0, 0, A)] * 2 + [rec(0, 0, L)])
    write_features([("s1", "p1", fv)], tmp_path / "f.csv")
    (sid, pid, back), = read_features(tmp_path / "f.csv")
    assert (sid, pid) == ("s1", "p1") and np.array_equal(back.fractions, fv.fractions)
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "slide_id,patient_id,lepidic,acinar,papillary,micropapillary,solid,normal"
