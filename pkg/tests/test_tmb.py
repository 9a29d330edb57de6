import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellomaps import nn
from cellomaps.classifier import PredictionRecord
from cellomaps.errors import DuplicateCoordinate, EmptyGraph, MalformedInput, SingleClassDataset
from cellomaps.tmb import (
    GNNModel,
    MLPModel,
    TMBLabel,
    TMBTrainConfig,
    TileGraph,
    build_tile_graph,
    gnn_forward,
    gnn_gradient_check,
    graph_from_predictions,
    load_model,
    mlp_gradient_check,
    read_graph,
    read_tmb_labels,
    save_model,
    train_gnn,
    train_mlp,
    write_graph,
)


def adjacency_oracle(coords):
    coords = [tuple(c) for c in coords]
    return {(i, j) for i in range(len(coords)) for j in range(i + 1, len(coords))
            if abs(coords[i][0] - coords[j][0]) + abs(coords[i][1] - coords[j][1]) == 1}


def random_sparse_grid(rng, size=8, density=0.4):
    cells = np.argwhere(rng.random((size, size)) < density)[:, ::-1]
    if len(cells) == 0:
        cells = np.array([[0, 0]])
    return cells, rng.dirichlet(np.ones(6), len(cells))


def gnn_manual(params, coords, feats):
    """Per-node loops: closed-neighbourhood mean, dense, ReLU, node mean, dense, softmax."""
    coords = [tuple(c) for c in coords]
    n = len(coords)
    hidden = []
    for v in range(n):
        group = [u for u in range(n) if u == v or abs(coords[u][0] - coords[v][0]) + abs(coords[u][1] - coords[v][1]) == 1]
        agg = sum(feats[u] for u in group) / len(group)
        z = np.concatenate([feats[v], agg]) @ params["mp.w"] + params["mp.b"]
        hidden.append(np.maximum(z, 0))
    out = (sum(hidden) / n) @ params["out.w"] + params["out.b"]
    e = np.exp(out - out.max())
    return e / e.sum()


def separable_toy(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.dirichlet(np.ones(6), n)
    y = np.where(x[:, 3] + x[:, 4] > 1 / 3, TMBLabel.High, TMBLabel.Low)
    return x, y


# labels

def test_tmb_threshold(tmp_path):
    assert TMBLabel.from_mutations(10) == TMBLabel.High
    assert TMBLabel.from_mutations(9.99) == TMBLabel.Low
    path = tmp_path / "t.csv"
    path.write_text("patient_id,mut_per_mb,label\na,12,\nb,,low\nc,3,High\n")
    assert read_tmb_labels(path) == {"a": TMBLabel.High, "b": TMBLabel.Low, "c": TMBLabel.Low}
    path.write_text("patient_id,label\na,medium\n")
    with pytest.raises(MalformedInput):
        read_tmb_labels(path)


# graph

def test_graph_examples():
    g = build_tile_graph([[3, 4]], np.ones((1, 6)) / 6)
    assert g.edges == ()
    g = build_tile_graph([[0, 0], [1, 0], [0, 1], [1, 1]], np.ones((4, 6)) / 6)
    assert len(g.edges) == 4 and g.degrees().tolist() == [2, 2, 2, 2]
    with pytest.raises(DuplicateCoordinate):
        build_tile_graph([[0, 0], [0, 0]], np.ones((2, 6)))


def test_graph_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        coords, feats = random_sparse_grid(rng)
        g = build_tile_graph(coords, feats)
        assert set(g.edges) == adjacency_oracle(coords)
        assert g.degrees().max(initial=0) <= 4
        assert all(i < j for i, j in g.edges) and len(set(g.edges)) == len(g.edges)


def test_graph_from_predictions_and_json(tmp_path):
    preds = [PredictionRecord("s", x, y, np.eye(6)[0]) for x, y in [(0, 0), (256, 0), (512, 256)]]
    g = graph_from_predictions(preds, 256)
    assert g.coords.tolist() == [[0, 0], [1, 0], [2, 1]] and g.edges == ((0, 1),)
    write_graph(g, tmp_path / "g.json")
    back = read_graph(tmp_path / "g.json")
    assert np.array_equal(back.coords, g.coords) and back.edges == g.edges
    assert np.array_equal(back.features, g.features)


# GNN

def test_gnn_hand_computed_3x3():
    rng = np.random.default_rng(1)
    coords = [(c, r) for r in range(3) for c in range(3)]
    feats = rng.dirichlet(np.ones(6), 9)
    model = GNNModel.create(seed=4)
    got = gnn_forward(model, build_tile_graph(coords, feats))
    assert np.abs(got - gnn_manual(model.params, coords, feats)).max() < 1e-12


def test_gnn_identical_features_fixed_point():
    rng = np.random.default_rng(2)
    f = rng.dirichlet(np.ones(6))
    coords, _ = random_sparse_grid(rng, 6, 0.6)
    model = GNNModel.create(seed=1)
    many = gnn_forward(model, build_tile_graph(coords, np.tile(f, (len(coords), 1))))
    one = gnn_forward(model, build_tile_graph([[0, 0]], f[None]))
    assert np.abs(many - one).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gnn_permutation_bit_identical(seed):
    rng = np.random.default_rng(seed)
    coords, feats = random_sparse_grid(rng)
    model = GNNModel.create(seed=seed % 7)
    perm = rng.permutation(len(coords))
    a = gnn_forward(model, build_tile_graph(coords, feats))
    b = gnn_forward(model, build_tile_graph(coords[perm], feats[perm]))
    assert np.array_equal(a, b)


def test_gnn_empty_graph():
    with pytest.raises(EmptyGraph):
        gnn_forward(GNNModel.create(), build_tile_graph(np.zeros((0, 2)), np.zeros((0, 6))))


def test_gnn_gradients_and_training():
    rng = np.random.default_rng(3)
    graphs, labels = [], []
    for i in range(8):
        coords, feats = random_sparse_grid(rng, 4, 0.6)
        graphs.append(build_tile_graph(coords, feats))
        labels.append(TMBLabel(int(feats[:, 4].mean() > 1 / 6)) if i > 1 else TMBLabel(i))
    model = GNNModel.create(seed=0)
    for g, y in zip(graphs[:3], labels):
        assert gnn_gradient_check(model, g, int(y)) < 1e-4
    _, hist_a = train_gnn(graphs, labels, TMBTrainConfig(epochs=20))
    _, hist_b = train_gnn(graphs, labels, TMBTrainConfig(epochs=20))
    assert hist_a == hist_b and hist_a[-1][0] < hist_a[0][0]


# MLP

def test_mlp_learns_separable_toy():
    x, y = separable_toy()
    model, hist = train_mlp(x, y, TMBTrainConfig(epochs=200, seed=0))
    assert hist[-1][1] == 1.0
    model2, hist2 = train_mlp(x, y, TMBTrainConfig(epochs=200, seed=0))
    assert hist == hist2
    assert all(np.array_equal(model.params[k], model2.params[k]) for k in model.params)
    assert np.allclose(model.predict_proba(x).sum(axis=1), 1.0)


def test_mlp_zero_lr_keeps_init():
    x, y = separable_toy(10)
    model, _ = train_mlp(x, y, TMBTrainConfig(learning_rate=0.0, epochs=5, seed=2))
    init = MLPModel.create(16, 6, 2)
    assert all(np.array_equal(model.params[k], init.params[k]) for k in init.params)


def test_mlp_gradient_check():
    x, y = separable_toy(12, seed=5)
    assert mlp_gradient_check(MLPModel.create(seed=3), x, y.astype(int)) < 1e-4


def test_mlp_single_class():
    with pytest.raises(SingleClassDataset):
        train_mlp(np.ones((3, 6)) / 6, [TMBLabel.High] * 3)


def test_model_save_load(tmp_path):
    for model in (MLPModel.create(seed=1), GNNModel.create(seed=1)):
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert type(back) is type(model)
        assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
