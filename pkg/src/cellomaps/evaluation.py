"""Dataset splitting and classification metrics.

Patient-level splits hold whole patients out before any tile is seen;
the tile-level mode exists only as the leaky contrast.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    EmptyInput,
    InsufficientPatients,
    LengthMismatch,
    MalformedInput,
    StratificationFailed,
)
from .tiler import NUM_PATTERNS, PATTERNS, ManifestRow

MODES = ("patient_level", "tile_level")
DEFAULT_RETRIES = 1000


@dataclass
class SplitPlan:
    mode: str
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]
    test_patients: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SplitPlan":
        try:
            plan = cls(doc["mode"], int(doc["seed"]), list(doc["train"]), list(doc["val"]),
                       list(doc["test"]), list(doc.get("test_patients", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInput(f"bad split plan: {exc}") from None
        if plan.mode not in MODES:
            raise MalformedInput(f"unknown split mode {plan.mode!r}")
        return plan


def write_plan(plan: SplitPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_plan(path) -> SplitPlan:
    try:
        return SplitPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: invalid JSON ({exc})") from None


def _normalize_mode(mode: str) -> str:
    mode = {"patient": "patient_level", "tile": "tile_level"}.get(mode, mode)
    if mode not in MODES:
        raise MalformedInput(f"split mode must be one of {MODES}, got {mode!r}")
    return mode


def _candidate_test_sets(patients: list[str], k: int, rng: np.random.Generator, budget: int):
    """Seeded candidate test-patient sets.

    Small problems are enumerated exhaustively in shuffled order, so a
    failure there means no valid set exists; larger ones are sampled.
    """
    if math.comb(len(patients), k) <= budget:
        combos = list(itertools.combinations(patients, k))
        for i in rng.permutation(len(combos)):
            yield combos[i]
    else:
        for _ in range(budget):
            yield tuple(rng.choice(patients, size=k, replace=False))


def _train_val(ids: list[str], val_fraction: float, rng: np.random.Generator, order: dict[str, int]):
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n_val = int(round(val_fraction * len(shuffled)))
    val = sorted(shuffled[:n_val], key=order.__getitem__)
    train = sorted(shuffled[n_val:], key=order.__getitem__)
    return train, val


def make_split(rows: Sequence[ManifestRow], mode: str = "patient_level", test_patient_count: int = 10,
               val_fraction: float = 0.2, seed: int = 0, max_retries: int = DEFAULT_RETRIES) -> SplitPlan:
    """Split a tile manifest into train/val/test id lists.

    Patient mode draws ``test_patient_count`` patients until every label in
    the manifest has a test tile, then splits the remaining tiles
    ``1 - val_fraction`` / ``val_fraction``. Tile mode shuffles all tiles
    and holds out the same share a patient split would.
    """
    mode = _normalize_mode(mode)
    if not rows:
        raise EmptyInput("manifest is empty")
    if not 0 <= val_fraction < 1:
        raise MalformedInput("val_fraction must lie in [0, 1)")
    ids = [r.tile_id for r in rows]
    if len(set(ids)) != len(ids):
        raise MalformedInput("manifest has duplicate tiles")
    order = {tid: i for i, tid in enumerate(ids)}
    patients = sorted({r.patient_id for r in rows})
    if test_patient_count < 1 or len(patients) < test_patient_count + 1:
        raise InsufficientPatients(
            f"need at least {test_patient_count + 1} patients for {test_patient_count} test patients, "
            f"got {len(patients)}"
        )
    rng = np.random.default_rng(seed)

    if mode == "tile_level":
        n_test = max(1, int(round(len(ids) * test_patient_count / len(patients))))
        perm = rng.permutation(len(ids))
        test = sorted((ids[i] for i in perm[:n_test]), key=order.__getitem__)
        train, val = _train_val([ids[i] for i in perm[n_test:]], val_fraction, rng, order)
        return SplitPlan(mode, seed, train, val, test, [])

    labels_by_patient: dict[str, set] = {p: set() for p in patients}
    for r in rows:
        labels_by_patient[r.patient_id].add(r.label)
    needed = set().union(*labels_by_patient.values())
    for candidate in _candidate_test_sets(patients, test_patient_count, rng, max_retries):
        covered = set().union(*(labels_by_patient[p] for p in candidate))
        if covered >= needed:
            test_patients = {str(p) for p in candidate}
            break
    else:
        raise StratificationFailed(
            f"no set of {test_patient_count} test patients covering all {len(needed)} patterns "
            f"found within {max_retries} draws"
        )
    test = [r.tile_id for r in rows if r.patient_id in test_patients]
    rest = [r.tile_id for r in rows if r.patient_id not in test_patients]
    train, val = _train_val(rest, val_fraction, rng, order)
    return SplitPlan(mode, seed, train, val, test, sorted(test_patients))


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    macro_auc_roc: float
    per_class_auc: list[float]
    confusion_matrix: list[list[int]]
    support: list[int]
    f1_skipped: list[str]
    auc_skipped: list[str]

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no NaN; skipped classes are listed separately
        d["per_class_auc"] = [None if math.isnan(a) else a for a in self.per_class_auc]
        if math.isnan(self.macro_auc_roc):
            d["macro_auc_roc"] = None
        return d

    def table(self) -> str:
        lines = [f"{'pattern':<16}{'support':>8}{'F1':>8}{'AUC':>8}"]
        for i, pattern in enumerate(PATTERNS):
            auc = self.per_class_auc[i]
            lines.append(
                f"{pattern.value:<16}{self.support[i]:>8d}{self.per_class_f1[i]:>8.3f}"
                f"{'-' if math.isnan(auc) else format(auc, '.3f'):>8}"
            )
        lines.append(f"accuracy {self.accuracy:.4f}  macro-F1 {self.macro_f1:.4f}  "
                     f"macro AUC-ROC {self.macro_auc_roc:.4f}")
        return "\n".join(lines)


def confusion_matrix(y_true, y_pred, num_classes: int = NUM_PATTERNS) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return f1


def macro_f1_score(y_true, y_pred, num_classes: int = NUM_PATTERNS) -> float:
    """Unweighted mean F1 over classes that occur in ``y_true``."""
    cm = confusion_matrix(y_true, y_pred, num_classes)
    present = cm.sum(axis=1) > 0
    return float(per_class_f1(cm)[present].mean()) if present.any() else 0.0


def rank_auc(scores, positives) -> float:
    """Mann-Whitney AUC with midranks for ties; NaN without both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)  # average ranks
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _as_probabilities(predictions) -> np.ndarray:
    if len(predictions) and hasattr(predictions[0], "probabilities"):
        return np.stack([np.asarray(p.probabilities, dtype=np.float64) for p in predictions])
    return np.asarray(predictions, dtype=np.float64)


def compute_metrics(predictions, truths, num_classes: int = NUM_PATTERNS) -> MetricsReport:
    """Metrics over aligned prediction records (or an (n, K) probability array) and labels."""
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} labels")
    if len(predictions) == 0:
        raise EmptyInput("no predictions to evaluate")
    probs = _as_probabilities(predictions)
    y = np.array([t if isinstance(t, (int, np.integer)) else t.index for t in truths])
    y_hat = probs.argmax(axis=1)
    cm = confusion_matrix(y, y_hat, num_classes)
    support = cm.sum(axis=1)
    f1 = per_class_f1(cm)
    has_support = support > 0
    aucs = np.array([rank_auc(probs[:, c], y == c) for c in range(num_classes)])
    auc_ok = ~np.isnan(aucs)
    names = [p.value for p in PATTERNS][:num_classes]
    return MetricsReport(
        accuracy=float(np.trace(cm) / cm.sum()),
        macro_f1=float(f1[has_support].mean()),
        per_class_f1=f1.tolist(),
        macro_auc_roc=float(aucs[auc_ok].mean()) if auc_ok.any() else float("nan"),
        per_class_auc=aucs.tolist(),
        confusion_matrix=cm.tolist(),
        support=support.tolist(),
        f1_skipped=[names[c] for c in range(num_classes) if not has_support[c]],
        auc_skipped=[names[c] for c in range(num_classes) if not auc_ok[c]],
    )


def summarize_repeats(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample standard deviation over repeated runs."""
    if not reports:
        raise EmptyInput("no reports to summarise")

    def stats(values):
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        return {"mean": float(values.mean()), "std": std}

    return {
        "runs": len(reports),
        "accuracy": stats([r.accuracy for r in reports]),
        "macro_f1": stats([r.macro_f1 for r in reports]),
        "macro_auc_roc": stats([r.macro_auc_roc for r in reports]),
        "per_class_f1": {
            p.value: stats([r.per_class_f1[i] for r in reports]) for i, p in enumerate(PATTERNS)
        },
    }
