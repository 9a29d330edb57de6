import numpy as np
import pytest

from cellomaps.codec import build_cellomap
from cellomaps.errors import MalformedInput
from cellomaps.ingest import CellClass, parse_nuclei_file, scale_coordinates
from cellomaps.synth import SynthConfig, generate_class_tile, generate_corpus, write_corpus
from cellomaps.tiler import PATTERNS, PatternClass, label_tiles, load_annotations, read_manifest, tile_map

SMALL = SynthConfig(seed=3, tiles_per_class=12, tile_size=128)


def class_counts(nset):
    counts = dict.fromkeys(CellClass, 0)
    for r in nset.records:
        counts[r.cell_class] += 1
    return counts


def test_solid_mostly_neoplastic():
    for i in range(5):
        c = class_counts(generate_class_tile(PatternClass.Solid, SMALL, i))
        assert c[CellClass.NeoplasticEpithelial] >= 0.9 * sum(c.values())


def test_normal_has_no_neoplastic_before_noise():
    cfg = SynthConfig(tile_size=128, noise_fraction=0.0)
    for i in range(5):
        c = class_counts(generate_class_tile(PatternClass.Normal, cfg, i))
        assert c[CellClass.NeoplasticEpithelial] == 0 and c[CellClass.NonNeoplasticEpithelial] > 0


def test_micropapillary_has_no_connective_before_noise():
    cfg = SynthConfig(tile_size=128, noise_fraction=0.0)
    c = class_counts(generate_class_tile(PatternClass.Micropapillary, cfg, 0))
    assert c[CellClass.Connective] == 0


def test_tile_determinism():
    for p in PATTERNS:
        a = generate_class_tile(p, SMALL, 4)
        assert a == generate_class_tile(p, SMALL, 4)
        assert a != generate_class_tile(p, SMALL, 5)
        assert all(0 <= r.x < 128 and 0 <= r.y < 128 for r in a.records)


def test_counts_not_separable_alone():
    cfg = SynthConfig(tile_size=128)
    totals = {p: [len(generate_class_tile(p, cfg, i).records) for i in range(10)] for p in PATTERNS}
    neo = {p: np.mean([class_counts(generate_class_tile(p, cfg, i))[CellClass.NeoplasticEpithelial]
                       for i in range(10)]) for p in PATTERNS}
    # mean neoplastic load differs by class, yet total counts of the hard pairs overlap
    assert len({round(v) for v in neo.values()}) == 6
    for a, b in [(PatternClass.Acinar, PatternClass.Micropapillary), (PatternClass.Lepidic, PatternClass.Normal)]:
        assert max(min(totals[a]), min(totals[b])) <= min(max(totals[a]), max(totals[b]))


def test_config_validation():
    with pytest.raises(MalformedInput):
        SynthConfig(noise_fraction=0.3)
    with pytest.raises(MalformedInput):
        SynthConfig(tile_size=0)
    with pytest.raises(MalformedInput):
        generate_corpus(SynthConfig(tiles_per_class=9))


def test_corpus_structure():
    corpus = generate_corpus(SMALL)
    assert len(corpus.truth) == 72
    assert len({s.patient_id for s in corpus.slides}) == 6
    for s in corpus.slides:
        labels = {r.label for r in corpus.truth if r.patient_id == s.patient_id}
        assert labels == set(PATTERNS)
    again = generate_corpus(SMALL)
    assert [s.records for s in again.slides] == [s.records for s in corpus.slides]


def test_corpus_parses_through_pipeline(tmp_path):
    corpus = generate_corpus(SMALL)
    out = write_corpus(corpus, tmp_path / "corpus")
    truth = read_manifest(out / "truth.csv")
    labeled = []
    for path in sorted(out.glob("*.json")):
        nset = parse_nuclei_file(path)
        cmap = build_cellomap(scale_coordinates(nset, 2.0))
        slide_id, anns = load_annotations(out / "annotations" / path.name)
        assert slide_id == nset.slide_id
        labeled += label_tiles(tile_map(cmap, 128), anns)
    assert sorted((t.slide_id, t.x, t.y, t.label) for t in labeled) == \
        sorted((r.slide_id, r.x, r.y, r.label) for r in truth)
    # labelled tiles carry the generated nuclei
    first = truth[0]
    tile = next(t for t in labeled if (t.slide_id, t.x, t.y) == (first.slide_id, first.x, first.y))
    assert tile.nuclei_count > 0
