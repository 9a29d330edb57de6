"""Command-line entry point: ``cellomaps <subcommand> ...``.

Values resolve as flags > ``--config`` file > built-in defaults. The
resolved configuration is logged and written as ``<command>.config.ini``
beside each command's outputs. Exit codes: 0 success, 1 bad input,
2 internal invariant violation or unexpected failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (
    LOSSES,
    ClassifierModel,
    TrainConfig,
    load_checkpoint,
    predict,
    read_predictions,
    save_checkpoint,
    train,
    write_predictions,
    write_training_log,
)
from .codec import (
    build_cellomap,
    channel_spec,
    compression_ratio,
    encode,
    read_clom,
    render_png,
    tile_entropies,
    write_clom,
)
from .errors import CellOMapsError, EmptyInput, InvariantViolation, MalformedInput
from .evaluation import compute_metrics, make_split, read_plan, summarize_repeats, write_plan
from .ingest import NECROSIS_TO_NEOPLASTIC, apply_remap, parse_nuclei_file, parse_remap_rules, scale_coordinates
from .projection import build_overlay, feature_vector, read_features, write_features, write_overlay
from .synth import SynthConfig, generate_corpus, write_corpus
from .tiler import (
    DEFAULT_MIN_NUCLEI,
    DEFAULT_MIN_OVERLAP,
    Tile,
    filter_sparse_tiles,
    label_tiles,
    load_annotations,
    manifest_rows,
    read_manifest,
    tile_id,
    tile_map,
    tile_origins,
    write_manifest,
)
from .tmb import (
    TileGraph,
    TMBTrainConfig,
    gnn_forward,
    graph_from_predictions,
    read_tmb_labels,
    save_model,
    train_gnn,
    train_mlp,
)

log = logging.getLogger("cellomaps")

DEFAULT_TILE = 448
DEFAULT_MPP = 2.0
CONFIG_SECTION = "cellomaps"


# helpers

def _need(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise MalformedInput(f"{args.command}: missing required option(s) {flags}")


def _existing(paths, what="input"):
    out = [Path(p) for p in paths]
    for p in out:
        if not p.exists():
            raise MalformedInput(f"{what} {p} does not exist")
    return out


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _out_file(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _meta_path(clom: Path) -> Path:
    return clom.with_suffix(".meta.json")


def read_map(path):
    """A CLOM file plus its ids from the ``.meta.json`` sidecar (file stem if absent)."""
    path = Path(path)
    meta = _meta_path(path)
    slide_id = patient_id = path.stem
    if meta.exists():
        try:
            doc = json.loads(meta.read_text(encoding="utf-8"))
            slide_id, patient_id = doc["slide_id"], doc["patient_id"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise MalformedInput(f"{meta}: bad map metadata ({exc})") from None
    return read_clom(path, slide_id, patient_id)


def _map_paths(items) -> list[Path]:
    out = []
    for p in _existing(items, "map"):
        out.extend(sorted(p.glob("*.clom")) if p.is_dir() else [p])
    if not out:
        raise EmptyInput("no .clom maps found")
    return out


def _map_index(items) -> dict[str, Path]:
    index = {}
    for p in _map_paths(items):
        sid = read_map(p).slide_id
        if sid in index:
            raise MalformedInput(f"slide {sid!r} appears in both {index[sid]} and {p}")
        index[sid] = p
    return index


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.replace(",", " ").split() if v)


def _config_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return str(v)


def _snapshot(args, out_dir: Path | None) -> None:
    """Log the resolved options and write them as ``<command>.config.ini``.

    The snapshot uses the ``--config`` format, so it can be replayed as is.
    """
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k not in ("func", "command", "config") and v is not None}
    log.info("cellomaps %s resolved config: %s", __version__,
             "; ".join(f"{k}={_config_value(v)}" for k, v in resolved.items()))
    if out_dir is None:
        return
    cp = configparser.ConfigParser()
    cp[args.command] = {k: _config_value(v) for k, v in resolved.items()}
    with open(out_dir / f"{args.command}.config.ini", "w", encoding="utf-8") as fh:
        fh.write(f"# cellomaps {__version__}\n")
        cp.write(fh)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _select_rows(args):
    """Manifest rows, optionally narrowed to one subset of a split plan."""
    rows = read_manifest(_existing([args.manifest], "manifest")[0])
    if getattr(args, "plan", None):
        plan = read_plan(_existing([args.plan], "plan")[0])
        keep = set(getattr(plan, args.subset))
        rows = [r for r in rows if r.tile_id in keep]
    return rows


def _tiles_for_rows(rows, maps: dict[str, Path]) -> list:
    by_slide: dict[str, list] = {}
    for r in rows:
        by_slide.setdefault(r.slide_id, []).append(r)
    tiles = {}
    for sid, slide_rows in by_slide.items():
        if sid not in maps:
            raise MalformedInput(f"no map found for slide {sid!r}")
        bits = read_map(maps[sid]).bits()
        for r in slide_rows:
            if r.x + r.size > bits.shape[2] or r.y + r.size > bits.shape[1]:
                raise MalformedInput(f"tile {r.tile_id} lies outside its map")
            tiles[r.tile_id] = Tile(r.slide_id, r.patient_id, r.x, r.y, r.size,
                                    bits[:, r.y:r.y + r.size, r.x:r.x + r.size])
    return tiles


class _Labeled:
    __slots__ = ("pixels", "label", "slide_id", "x", "y")

    def __init__(self, tile, label):
        self.pixels, self.label = tile.pixels, label
        self.slide_id, self.x, self.y = tile.slide_id, tile.x, tile.y


# subcommands

def cmd_synth(args) -> None:
    _need(args, "out")
    cfg = SynthConfig(seed=args.seed, tiles_per_class=args.tiles_per_class, tile_size=args.tile,
                      patients=args.patients, noise_fraction=args.noise)
    out = _out_dir(args.out)
    _snapshot(args, out)
    corpus = generate_corpus(cfg)
    write_corpus(corpus, out)
    log.info("wrote %d slides, %d labelled tiles to %s", len(corpus.slides), len(corpus.truth), out)


def _build_one(job):
    path, out_dir, target_mpp, channels, remap = job
    nset = parse_nuclei_file(path)
    rules = parse_remap_rules(remap)
    nset = apply_remap(nset, rules)
    scaled = scale_coordinates(nset, target_mpp)
    cmap = build_cellomap(scaled, channels)
    dest = Path(out_dir) / f"{Path(path).stem}.clom"
    write_clom(cmap, dest)
    meta = {
        "slide_id": nset.slide_id,
        "patient_id": nset.patient_id,
        "source_mpp": nset.source_mpp,
        "mpp": scaled.source_mpp,
        "channels": [c.value for c in channels],
        "remap": list(remap),
    }
    _meta_path(dest).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    size = len(encode(cmap))
    ratio = compression_ratio(cmap, 24, nset.width * nset.height)
    set_bits = int(cmap.bits().sum())
    return [nset.slide_id, nset.patient_id, cmap.width, cmap.height, len(nset.records), set_bits, size,
            f"{ratio:.4f}", dest.name]


def cmd_build_maps(args) -> None:
    _need(args, "inputs")
    inputs = _existing(args.inputs)
    channels = channel_spec(args.channels)
    remap = list(args.remap or [])
    if args.remap_necrosis:
        remap.append(f"{NECROSIS_TO_NEOPLASTIC.from_class.value}={NECROSIS_TO_NEOPLASTIC.to_class.value}")
    parse_remap_rules(remap)  # validate before any work
    # default output is a maps/ directory beside the first input, keeping *.json globs clean
    out_dir = _out_dir(args.out or inputs[0].parent / "maps")
    _snapshot(args, out_dir)
    jobs = [(str(p), str(out_dir), args.target_mpp, channels, tuple(remap)) for p in inputs]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_build_one, jobs))
    else:
        rows = [_build_one(j) for j in jobs]
    _write_rows(out_dir / "maps.csv",
                ["slide_id", "patient_id", "width", "height", "nuclei", "set_bits", "bytes",
                 "ratio_vs_24bit_source", "file"], rows)
    log.info("built %d maps", len(rows))


def cmd_render(args) -> None:
    _need(args, "map", "out")
    cmap = read_map(_existing([args.map], "map")[0])
    out = _out_file(args.out)
    _snapshot(args, out.parent)
    out.write_bytes(render_png(cmap, args.dot_radius))


def cmd_entropy(args) -> None:
    from .plotting import plot_entropy_heatmap

    _need(args, "maps")
    paths = _map_paths(args.maps)
    out = _out_file(args.out) if args.out else None
    _snapshot(args, out.parent if out else None)
    rows = []
    for p in paths:
        cmap = read_map(p)
        tile_origins(cmap.width, cmap.height, args.tile, args.stride or args.tile)
        entries = list(tile_entropies(cmap, args.tile, args.stride))
        rows.extend([cmap.slide_id, x, y, repr(float(h))] for x, y, h in entries)
        if out is not None:
            plot_entropy_heatmap(entries, args.stride or args.tile,
                                 out.with_name(f"{out.stem}.{cmap.slide_id}.png"), float(len(cmap.channels)))
        if entries:
            log.info("%s: mean %.4f bits over %d tiles", cmap.slide_id,
                     float(np.mean([h for _, _, h in entries])), len(entries))
    header = ["slide_id", "x", "y", "bits_per_pixel"]
    if out is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    else:
        _write_rows(out, header, rows)


def _annotation_for(cmap, clom: Path, ann_dir: Path) -> Path:
    for name in (cmap.slide_id, clom.stem):
        cand = ann_dir / f"{name}.json"
        if cand.exists():
            return cand
    raise MalformedInput(f"no annotation file for slide {cmap.slide_id!r} in {ann_dir}")


def cmd_tile(args) -> None:
    _need(args, "maps", "annotations", "out")
    ann_dir = _existing([args.annotations], "annotation directory")[0]
    paths = _map_paths(args.maps)
    out = _out_file(args.out)
    _snapshot(args, out.parent)
    rows = []
    for p in paths:
        cmap = read_map(p)
        slide_id, anns = load_annotations(_annotation_for(cmap, p, ann_dir))
        if slide_id != cmap.slide_id:
            raise MalformedInput(f"annotation slide id {slide_id!r} does not match map {cmap.slide_id!r}")
        for a in anns:
            a.check_bounds(cmap.width, cmap.height)
        tiles = filter_sparse_tiles(tile_map(cmap, args.tile, args.stride), args.min_nuclei)
        labeled = label_tiles(tiles, anns, args.min_overlap)
        log.info("%s: %d tiles labelled", cmap.slide_id, len(labeled))
        rows.extend(manifest_rows(labeled))
    write_manifest(rows, out)


def cmd_split(args) -> None:
    _need(args, "manifest", "out")
    rows = read_manifest(_existing([args.manifest], "manifest")[0])
    out = _out_file(args.out)
    _snapshot(args, out.parent)
    plan = make_split(rows, args.mode, args.test_patients, args.val_fraction, args.seed, args.max_retries)
    write_plan(plan, out)
    log.info("split: %d train, %d val, %d test", len(plan.train), len(plan.val), len(plan.test))


def cmd_train(args) -> None:
    from .plotting import plot_training_curves

    _need(args, "manifest", "plan", "maps", "out")
    rows = read_manifest(_existing([args.manifest], "manifest")[0])
    plan = read_plan(_existing([args.plan], "plan")[0])
    maps = _map_index(args.maps)
    out = _out_dir(args.out)
    _snapshot(args, out)
    labels = {r.tile_id: r.label for r in rows}
    missing = [t for t in plan.train + plan.val if t not in labels]
    if missing:
        raise MalformedInput(f"plan references {len(missing)} tiles missing from the manifest, e.g. {missing[0]}")
    wanted = set(plan.train + plan.val)
    tiles = _tiles_for_rows([r for r in rows if r.tile_id in wanted], maps)
    sizes = {t.size for t in tiles.values()}
    if len(sizes) != 1:
        raise MalformedInput(f"training tiles must share one size, got {sorted(sizes)}")
    in_channels = next(iter(tiles.values())).pixels.shape[0]
    model = ClassifierModel.create(in_channels, sizes.pop(), args.conv_channels, seed=args.seed,
                                   merge_channels=args.merge_channels)
    cfg = TrainConfig(args.lr, args.batch_size, args.epochs, args.seed, args.hflip, args.vflip, args.loss, args.gamma)
    train_set = [_Labeled(tiles[t], labels[t]) for t in plan.train]
    val_set = [_Labeled(tiles[t], labels[t]) for t in plan.val]
    result = train(model, train_set, val_set, cfg)
    save_checkpoint(result.model, out / "model.json")
    write_training_log(result.history, out / "training_log.csv")
    plot_training_curves(result.history, out / "training_curves.png")
    log.info("best epoch %d", result.best_epoch)


def cmd_predict(args) -> None:
    _need(args, "model", "maps", "out")
    model = load_checkpoint(_existing([args.model], "model")[0])
    maps = _map_index(args.maps)
    out = _out_file(args.out)
    _snapshot(args, out.parent)
    if args.manifest:
        rows = _select_rows(args)
        tiles_by_id = _tiles_for_rows(rows, maps)
        tiles = [tiles_by_id[r.tile_id] for r in rows]
    else:
        tiles = []
        for sid in sorted(maps):
            cmap = read_map(maps[sid])
            tiles.extend(filter_sparse_tiles(tile_map(cmap, model.tile_size), args.min_nuclei))
    if not tiles:
        raise EmptyInput("no tiles to predict")
    records = predict(model, tiles)
    write_predictions(records, out)
    log.info("wrote %d predictions", len(records))


def cmd_eval(args) -> None:
    from .plotting import plot_confusion_matrix

    _need(args, "predictions", "manifest")
    truth_rows = _select_rows(args)
    out = _out_file(args.out) if args.out else None
    _snapshot(args, out.parent if out else None)
    reports = []
    for path in _existing(args.predictions, "predictions"):
        preds = {tile_id(p.slide_id, p.x, p.y): p for p in read_predictions(path)}
        missing = [r.tile_id for r in truth_rows if r.tile_id not in preds]
        if missing:
            raise MalformedInput(f"{path}: no prediction for {len(missing)} tiles, e.g. {missing[0]}")
        reports.append(compute_metrics([preds[r.tile_id] for r in truth_rows], [r.label for r in truth_rows]))
    for path, rep in zip(args.predictions, reports):
        if len(reports) > 1:
            print(f"# {path}")
        print(rep.table())
    doc = reports[0].to_dict() if len(reports) == 1 else {
        "runs": [r.to_dict() for r in reports], "summary": summarize_repeats(reports)}
    if len(reports) > 1:
        s = doc["summary"]
        print(f"macro-F1 {s['macro_f1']['mean']:.4f} +/- {s['macro_f1']['std']:.4f} over {s['runs']} runs")
    if out is not None:
        out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        plot_confusion_matrix(reports[0].confusion_matrix, out.with_suffix(".confusion.png"))


def _predictions_by_slide(path) -> dict[str, list]:
    by_slide: dict[str, list] = {}
    for p in read_predictions(_existing([path], "predictions")[0]):
        by_slide.setdefault(p.slide_id, []).append(p)
    if not by_slide:
        raise EmptyInput(f"{path} holds no predictions")
    return by_slide


def cmd_project(args) -> None:
    _need(args, "predictions", "maps", "out")
    by_slide = _predictions_by_slide(args.predictions)
    maps = _map_index(args.maps)
    out = _out_dir(args.out)
    _snapshot(args, out)
    for sid in sorted(by_slide):
        if sid not in maps:
            raise MalformedInput(f"no map found for slide {sid!r}")
        cmap = read_map(maps[sid])
        overlay = build_overlay(by_slide[sid], cmap.width, cmap.height, args.tile)
        write_overlay(overlay, out / f"{sid}.overlay.png", args.block)


def cmd_features(args) -> None:
    from .plotting import plot_pattern_fractions

    _need(args, "predictions", "out")
    by_slide = _predictions_by_slide(args.predictions)
    patients = {}
    if args.maps:
        patients = {sid: read_map(p).patient_id for sid, p in _map_index(args.maps).items()}
    out = _out_file(args.out)
    _snapshot(args, out.parent)
    rows = [(sid, patients.get(sid, sid), feature_vector(by_slide[sid])) for sid in sorted(by_slide)]
    write_features(rows, out)
    plot_pattern_fractions([(sid, fv.fractions) for sid, _, fv in rows], out.with_suffix(".png"))


def cmd_graph(args) -> None:
    _need(args, "predictions", "out")
    by_slide = _predictions_by_slide(args.predictions)
    patients = {}
    if args.maps:
        patients = {sid: read_map(p).patient_id for sid, p in _map_index(args.maps).items()}
    out = _out_dir(args.out)
    _snapshot(args, out)
    for sid in sorted(by_slide):
        graph = graph_from_predictions(by_slide[sid], args.tile)
        doc = graph.to_dict()
        doc.update(slide_id=sid, patient_id=patients.get(sid, sid), tile_size=args.tile)
        (out / f"{sid}.graph.json").write_text(json.dumps(doc) + "\n", encoding="utf-8")
        log.info("%s: %d nodes, %d edges", sid, graph.num_nodes, len(graph.edges))


def cmd_tmb_train(args) -> None:
    from .plotting import plot_tmb_history

    _need(args, "labels", "out")
    labels = read_tmb_labels(_existing([args.labels], "labels")[0])
    out = _out_dir(args.out)
    cfg = TMBTrainConfig(args.hidden, args.lr, args.epochs, args.seed)
    if args.model == "mlp":
        _need(args, "features")
        rows = [r for r in read_features(_existing([args.features], "features")[0]) if r[1] in labels]
        _snapshot(args, out)
        if not rows:
            raise EmptyInput("no feature rows have a TMB label")
        model, history = train_mlp([fv for _, _, fv in rows], [labels[pid] for _, pid, _ in rows], cfg)
        ids = [sid for sid, _, _ in rows]
        probs = model.predict_proba(np.stack([fv.fractions for _, _, fv in rows]))
        truth = [labels[pid] for _, pid, _ in rows]
    else:
        _need(args, "graphs")
        graphs, ids, truth = [], [], []
        for p in _map_paths_with(args.graphs, "*.graph.json"):
            doc = json.loads(p.read_text(encoding="utf-8"))
            pid = doc.get("patient_id", doc.get("slide_id", p.stem))
            if pid in labels:
                graphs.append(TileGraph.from_dict(doc))
                ids.append(doc.get("slide_id", p.stem))
                truth.append(labels[pid])
        _snapshot(args, out)
        if not graphs:
            raise EmptyInput("no graphs have a TMB label")
        model, history = train_gnn(graphs, truth, cfg)
        probs = np.stack([gnn_forward(model, g) for g in graphs])
    save_model(model, out / "tmb_model.json")
    _write_rows(out / "tmb_history.csv", ["epoch", "loss", "accuracy"],
                [[i + 1, repr(loss), repr(acc)] for i, (loss, acc) in enumerate(history)])
    _write_rows(out / "tmb_predictions.csv", ["slide_id", "p_low", "p_high", "predicted", "label"],
                [[sid, repr(float(p[0])), repr(float(p[1])), ["Low", "High"][int(p.argmax())], t.name]
                 for sid, p, t in zip(ids, probs, truth)])
    plot_tmb_history(history, out / "tmb_history.png")
    log.info("final training accuracy %.4f", history[-1][1] if history else float("nan"))


def _map_paths_with(items, pattern: str) -> list[Path]:
    out = []
    for p in _existing(items):
        out.extend(sorted(p.glob(pattern)) if p.is_dir() else [p])
    return out


# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file; flags override it")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="cellomaps", description="CellOMaps pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a seeded synthetic corpus")
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiles-per-class", type=int, default=60)
    p.add_argument("--tile", type=int, default=DEFAULT_TILE, help="tile side at map resolution")
    p.add_argument("--patients", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.02, help="fraction of nuclei given a random class")

    p = add("build-maps", cmd_build_maps, "nuclei JSON -> CLOM maps")
    p.add_argument("inputs", nargs="*", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: maps/ beside the first input)")
    p.add_argument("--target-mpp", type=float, default=DEFAULT_MPP)
    p.add_argument("--channels", type=_str_list, default=("NeoplasticEpithelial", "NonNeoplasticEpithelial",
                                                          "Connective"))
    p.add_argument("--remap", action="append", metavar="FROM=TO", help="relabel a cell class (repeatable)")
    p.add_argument("--remap-necrosis", action="store_true", help="treat Necrotic nuclei as NeoplasticEpithelial")
    p.add_argument("--workers", type=int, default=1)

    p = add("render", cmd_render, "render a map as an RGB PNG")
    p.add_argument("map", nargs="?", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--dot-radius", type=int, default=0)

    p = add("entropy", cmd_entropy, "per-tile composite-symbol entropy")
    p.add_argument("maps", nargs="*", type=Path)
    p.add_argument("--tile", type=int, default=DEFAULT_TILE)
    p.add_argument("--stride", type=int)
    p.add_argument("--out", type=Path, help="CSV path (default: standard output)")

    p = add("tile", cmd_tile, "tile maps and label them from annotations")
    p.add_argument("maps", nargs="*", type=Path)
    p.add_argument("--annotations", type=Path, help="directory of annotation JSON files")
    p.add_argument("--tile", type=int, default=DEFAULT_TILE)
    p.add_argument("--stride", type=int)
    p.add_argument("--min-overlap", type=float, default=DEFAULT_MIN_OVERLAP)
    p.add_argument("--min-nuclei", type=int, default=DEFAULT_MIN_NUCLEI)
    p.add_argument("--out", type=Path, help="manifest CSV")

    p = add("split", cmd_split, "patient- or tile-level split plan")
    p.add_argument("manifest", nargs="?", type=Path)
    p.add_argument("--mode", default="patient_level", choices=["patient_level", "tile_level", "patient", "tile"])
    p.add_argument("--test-patients", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-retries", type=int, default=1000)
    p.add_argument("--out", type=Path)

    p = add("train", cmd_train, "train the tile classifier")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--plan", type=Path)
    p.add_argument("--maps", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", default="focal", choices=LOSSES)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--hflip", type=float, default=0.5)
    p.add_argument("--vflip", type=float, default=0.5)
    p.add_argument("--conv-channels", type=_int_list, default=(16, 32, 64))
    p.add_argument("--merge-channels", action="store_true", help="OR all channels into one (untyped ablation)")

    p = add("predict", cmd_predict, "predict growth patterns for tiles")
    p.add_argument("--model", type=Path)
    p.add_argument("--maps", nargs="+", type=Path)
    p.add_argument("--manifest", type=Path, help="predict these tiles instead of every full tile")
    p.add_argument("--plan", type=Path)
    p.add_argument("--subset", default="test", choices=["train", "val", "test"])
    p.add_argument("--min-nuclei", type=int, default=DEFAULT_MIN_NUCLEI)
    p.add_argument("--out", type=Path, help="predictions CSV")

    p = add("eval", cmd_eval, "metrics for predictions against manifest labels")
    p.add_argument("--predictions", nargs="+", type=Path, help="one file per repeat")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--plan", type=Path)
    p.add_argument("--subset", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", type=Path, help="metrics JSON")

    p = add("project", cmd_project, "overlay predictions on the slide grid")
    p.add_argument("--predictions", type=Path)
    p.add_argument("--maps", nargs="+", type=Path)
    p.add_argument("--tile", type=int, default=DEFAULT_TILE)
    p.add_argument("--block", type=int, default=8, help="pixels per grid cell in the PNG")
    p.add_argument("--out", type=Path, help="output directory")

    p = add("features", cmd_features, "per-slide pattern fraction vectors")
    p.add_argument("--predictions", type=Path)
    p.add_argument("--maps", nargs="*", type=Path, help="maps supplying patient ids")
    p.add_argument("--out", type=Path, help="features CSV")

    p = add("graph", cmd_graph, "4-connected tile graphs per slide")
    p.add_argument("--predictions", type=Path)
    p.add_argument("--maps", nargs="*", type=Path, help="maps supplying patient ids")
    p.add_argument("--tile", type=int, default=DEFAULT_TILE)
    p.add_argument("--out", type=Path, help="output directory")

    p = add("tmb-train", cmd_tmb_train, "train the TMB high/low MLP or GNN")
    p.add_argument("--model", default="mlp", choices=["mlp", "gnn"])
    p.add_argument("--features", type=Path)
    p.add_argument("--graphs", nargs="*", type=Path, help="graph JSON files or directories")
    p.add_argument("--labels", type=Path, help="CSV with patient_id and mut_per_mb or label")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output directory")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise InvariantViolation("parser has no subcommands")


def _convert(action: argparse.Action, raw: str):
    if action.nargs == 0:
        state = configparser.ConfigParser.BOOLEAN_STATES.get(raw.strip().lower())
        if state is None:
            raise MalformedInput(f"config: {action.dest} expects a boolean, got {raw!r}")
        return state if action.const is True else not state
    convert = action.type or str
    try:
        if action.nargs in ("+", "*") or isinstance(action, argparse._AppendAction):
            values = [convert(v) for v in raw.split()]
        else:
            values = convert(raw.strip())
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise MalformedInput(f"config: bad value for {action.dest}: {exc}") from None
    if action.choices is not None:
        for v in values if isinstance(values, list) else [values]:
            if v not in action.choices:
                raise MalformedInput(f"config: {action.dest} must be one of {list(action.choices)}")
    return values


def load_config(path: Path, command: str, sub: argparse.ArgumentParser) -> dict:
    """Defaults from ``[cellomaps]`` then ``[<command>]`` sections of an INI-style file."""
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise MalformedInput(f"config file {path} does not exist") from None
    except configparser.Error as exc:
        raise MalformedInput(f"config file {path}: {exc}") from None
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    values = {}
    for section in (CONFIG_SECTION, command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section, raw=True):
            dest = key.replace("-", "_")
            if dest not in actions:
                if section == CONFIG_SECTION:
                    continue  # shared section may hold keys for other commands
                raise MalformedInput(f"config: unknown option {key!r} for {command}")
            values[dest] = _convert(actions[dest], raw)
    return values


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = _subparser(parser, args.command)
        sub.set_defaults(**load_config(args.config, args.command, sub))
        args = parser.parse_args(argv)
    return args


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except CellOMapsError as exc:
        print(f"cellomaps: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse usage errors and --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        args.func(args)
    except CellOMapsError as exc:
        print(f"cellomaps {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cellomaps {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except InvariantViolation as exc:
        print(f"cellomaps {args.command}: internal invariant violated: {exc}", file=sys.stderr)
        return 2
    except Exception:
        print(f"cellomaps {args.command}: internal error", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
