"""TMB high/low prediction from growth-pattern features.

Two models: an MLP over the per-slide 6-way pattern fractions, and a
one-layer message-passing network over the 4-connected tile grid whose
node features are the tile's predicted pattern probabilities.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .errors import DuplicateCoordinate, EmptyGraph, MalformedInput, SingleClassDataset
from .tiler import NUM_PATTERNS

HIGH_TMB_THRESHOLD = 10.0  # mutations per megabase


class TMBLabel(enum.IntEnum):
    Low = 0
    High = 1

    @classmethod
    def from_mutations(cls, mut_per_mb: float) -> "TMBLabel":
        return cls.High if mut_per_mb >= HIGH_TMB_THRESHOLD else cls.Low

    @classmethod
    def parse(cls, text: str) -> "TMBLabel":
        try:
            return cls[text.strip().capitalize()]
        except KeyError:
            raise MalformedInput(f"TMB label must be High or Low, got {text!r}") from None


def read_tmb_labels(path) -> dict[str, TMBLabel]:
    """patient_id -> label from a CSV with either ``mut_per_mb`` or ``label``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        if "patient_id" not in cols or not cols & {"mut_per_mb", "label"}:
            raise MalformedInput(f"{path}: need patient_id and mut_per_mb or label columns")
        out = {}
        for r in reader:
            if r.get("mut_per_mb") not in (None, ""):
                try:
                    out[r["patient_id"]] = TMBLabel.from_mutations(float(r["mut_per_mb"]))
                except ValueError:
                    raise MalformedInput(f"{path}: bad mut_per_mb {r['mut_per_mb']!r}") from None
            else:
                out[r["patient_id"]] = TMBLabel.parse(r["label"])
        return out


@dataclass(frozen=True, eq=False)
class TileGraph:
    coords: np.ndarray  # (n, 2) integer grid (col, row)
    features: np.ndarray  # (n, 6)
    edges: tuple[tuple[int, int], ...]  # i < j, sorted

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"col": int(c[0]), "row": int(c[1]), "features": [float(f) for f in feat]}
                for c, feat in zip(self.coords, self.features)
            ],
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TileGraph":
        try:
            coords = np.array([[n["col"], n["row"]] for n in doc["nodes"]], dtype=np.int64).reshape(-1, 2)
            feats = np.array([n["features"] for n in doc["nodes"]], dtype=np.float64).reshape(len(coords), -1)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInput(f"bad graph document: {exc}") from None
        return build_tile_graph(coords, feats)


def build_tile_graph(coords, features) -> TileGraph:
    """Connect grid cells at Manhattan distance 1 (4-connectivity)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    features = np.asarray(features, dtype=np.float64)
    if len(features) != len(coords):
        raise MalformedInput("one feature vector per node is required")
    index: dict[tuple[int, int], int] = {}
    for i, (c, r) in enumerate(coords.tolist()):
        if (c, r) in index:
            raise DuplicateCoordinate(f"two nodes at grid cell ({c}, {r})")
        index[(c, r)] = i
    edges = set()
    for (c, r), i in index.items():
        for nb in ((c + 1, r), (c, r + 1)):
            j = index.get(nb)
            if j is not None:
                edges.add((min(i, j), max(i, j)))
    return TileGraph(coords, features, tuple(sorted(edges)))


def graph_from_predictions(predictions: Sequence, tile_size: int) -> TileGraph:
    coords = [(p.x // tile_size, p.y // tile_size) for p in predictions]
    feats = [p.probabilities for p in predictions]
    return build_tile_graph(np.array(coords).reshape(-1, 2), np.array(feats).reshape(len(coords), -1))


def write_graph(graph: TileGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict()), encoding="utf-8")


def read_graph(path) -> TileGraph:
    try:
        return TileGraph.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: invalid JSON ({exc})") from None


def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its logit gradient."""
    logp = nn.log_softmax(logits)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


@dataclass(frozen=True)
class TMBTrainConfig:
    hidden: int = 16
    learning_rate: float = 0.05
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise MalformedInput("hidden must be positive; epochs and learning rate non-negative")


@dataclass
class MLPModel:
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, hidden: int = 16, in_features: int = NUM_PATTERNS, seed: int = 0) -> "MLPModel":
        rng = np.random.default_rng(seed)
        return cls({
            "w1": nn.he_normal(rng, (in_features, hidden), in_features),
            "b1": np.zeros(hidden),
            "w2": nn.he_normal(rng, (hidden, 2), hidden),
            "b2": np.zeros(2),
        })

    def logits(self, x: np.ndarray):
        z1 = x @ self.params["w1"] + self.params["b1"]
        h, mask = nn.relu_forward(z1)
        return h @ self.params["w2"] + self.params["b2"], (x, h, mask)

    def predict_proba(self, x) -> np.ndarray:
        return nn.softmax(self.logits(np.atleast_2d(np.asarray(x, dtype=np.float64)))[0])

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray):
        z, (x, h, mask) = self.logits(x)
        loss, dz = _softmax_ce(z, labels)
        dh = nn.relu_backward(dz @ self.params["w2"].T, mask)
        grads = {"w2": h.T @ dz, "b2": dz.sum(axis=0), "w1": x.T @ dh, "b1": dh.sum(axis=0)}
        return loss, grads

    def loss(self, x, labels) -> float:
        return _softmax_ce(self.logits(x)[0], labels)[0]


def _check_binary(labels) -> np.ndarray:
    y = np.array([int(v) for v in labels])
    if len(y) < 2 or len(set(y.tolist())) < 2:
        raise SingleClassDataset("TMB training needs at least two examples covering both labels")
    return y


def train_mlp(features, labels: Sequence[TMBLabel], config: TMBTrainConfig = TMBTrainConfig()):
    """Full-batch Adam on cross-entropy. Returns (model, per-epoch (loss, accuracy))."""
    x = np.stack([np.asarray(getattr(f, "fractions", f), dtype=np.float64) for f in features])
    y = _check_binary(labels)
    model = MLPModel.create(config.hidden, x.shape[1], config.seed)
    opt = nn.Adam(model.params, lr=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        loss, grads = model.loss_and_grads(x, y)
        opt.step(model.params, grads)
        acc = float((model.predict_proba(x).argmax(axis=1) == y).mean())
        history.append((loss, acc))
    return model, history


def mlp_gradient_check(model: MLPModel, x, labels, epsilon: float = 1e-6, floor: float = 1e-8) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    _, analytic = model.loss_and_grads(x, y)
    numeric = nn.numeric_gradients(model.params, lambda: model.loss(x, y), epsilon)
    return nn.max_relative_error(analytic, numeric, floor)


@dataclass
class GNNModel:
    """Message passing: h_v = ReLU([x_v | mean over {v} + N(v) of x_u] W + b);
    graph readout is the node mean, then a dense layer and softmax."""

    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, hidden: int = 16, in_features: int = NUM_PATTERNS, seed: int = 0) -> "GNNModel":
        rng = np.random.default_rng(seed)
        return cls({
            "mp.w": nn.he_normal(rng, (2 * in_features, hidden), 2 * in_features),
            "mp.b": np.zeros(hidden),
            "out.w": nn.he_normal(rng, (hidden, 2), hidden),
            "out.b": np.zeros(2),
        })

    def logits(self, graph: TileGraph):
        if graph.num_nodes == 0:
            raise EmptyGraph("GNN needs at least one node")
        # canonical (row, col) order makes every reduction independent of node numbering
        order = np.lexsort((graph.coords[:, 0], graph.coords[:, 1]))
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        n = graph.num_nodes
        adj = np.eye(n)
        for i, j in graph.edges:
            adj[rank[i], rank[j]] = adj[rank[j], rank[i]] = 1.0
        x = graph.features[order]
        agg = (adj @ x) / adj.sum(axis=1, keepdims=True)
        h0 = np.concatenate([x, agg], axis=1)
        z = h0 @ self.params["mp.w"] + self.params["mp.b"]
        h, mask = nn.relu_forward(z)
        pooled = h.mean(axis=0)
        out = pooled @ self.params["out.w"] + self.params["out.b"]
        return out, (h0, mask, pooled, n)

    def loss_and_grads(self, graph: TileGraph, label: int):
        z, (h0, mask, pooled, n) = self.logits(graph)
        loss, dz = _softmax_ce(z[None], np.array([label]))
        dz = dz[0]
        dpooled = self.params["out.w"] @ dz
        dh = nn.relu_backward(np.broadcast_to(dpooled / n, mask.shape), mask)
        grads = {
            "out.w": np.outer(pooled, dz),
            "out.b": dz,
            "mp.w": h0.T @ dh,
            "mp.b": dh.sum(axis=0),
        }
        return loss, grads


def gnn_forward(model: GNNModel, graph: TileGraph) -> np.ndarray:
    """2-class (Low, High) distribution for one slide graph."""
    return nn.softmax(model.logits(graph)[0])


def _gnn_batch(model: GNNModel, graphs, labels):
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for g, y in zip(graphs, labels):
        loss, gg = model.loss_and_grads(g, int(y))
        total += loss
        for k in grads:
            grads[k] += gg[k]
    m = len(graphs)
    return total / m, {k: v / m for k, v in grads.items()}


def train_gnn(graphs: Sequence[TileGraph], labels: Sequence[TMBLabel], config: TMBTrainConfig = TMBTrainConfig()):
    y = _check_binary(labels)
    model = GNNModel.create(config.hidden, graphs[0].features.shape[1], config.seed)
    opt = nn.Adam(model.params, lr=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        loss, grads = _gnn_batch(model, graphs, y)
        opt.step(model.params, grads)
        acc = float(np.mean([gnn_forward(model, g).argmax() == t for g, t in zip(graphs, y)]))
        history.append((loss, acc))
    return model, history


def gnn_gradient_check(model: GNNModel, graph: TileGraph, label: int, epsilon: float = 1e-6,
                       floor: float = 1e-8) -> float:
    _, analytic = model.loss_and_grads(graph, label)
    numeric = nn.numeric_gradients(model.params, lambda: model.loss_and_grads(graph, label)[0], epsilon)
    return nn.max_relative_error(analytic, numeric, floor)


def save_model(model: MLPModel | GNNModel, path) -> None:
    kind = "mlp" if isinstance(model, MLPModel) else "gnn"
    doc = {
        "format": f"cellomaps-tmb-{kind}",
        "version": 1,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path) -> MLPModel | GNNModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        kind = {"cellomaps-tmb-mlp": MLPModel, "cellomaps-tmb-gnn": GNNModel}[doc["format"]]
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"{path}: bad TMB model ({exc})") from None
    return kind(params)
