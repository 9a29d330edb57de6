"""Nuclei detections: parsing, class remapping and resolution scaling."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConflictingRules, InvalidScale, MalformedInput, OutOfBounds, UnknownClass


class CellClass(str, enum.Enum):
    NeoplasticEpithelial = "NeoplasticEpithelial"
    NonNeoplasticEpithelial = "NonNeoplasticEpithelial"
    Connective = "Connective"
    Inflammatory = "Inflammatory"
    Necrotic = "Necrotic"

    @property
    def code(self) -> int:
        return _CLASS_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> "CellClass":
        try:
            return _CLASS_ORDER[code]
        except IndexError:
            raise UnknownClass(f"unknown cell class code {code}") from None

    @classmethod
    def parse(cls, name: str) -> "CellClass":
        try:
            return cls(name)
        except ValueError:
            raise UnknownClass(f"unknown cell class {name!r}") from None


_CLASS_ORDER = list(CellClass)


@dataclass(frozen=True)
class NucleusRecord:
    x: float
    y: float
    cell_class: CellClass
    confidence: float | None = None


@dataclass(frozen=True)
class SlideNucleiSet:
    slide_id: str
    patient_id: str
    source_mpp: float
    width: int
    height: int
    records: tuple[NucleusRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.slide_id:
            raise MalformedInput("slide_id must be non-empty")
        if not self.patient_id:
            raise MalformedInput("patient_id must be non-empty")
        if not self.source_mpp > 0:
            raise MalformedInput(f"mpp must be positive, got {self.source_mpp}")
        if self.width <= 0 or self.height <= 0:
            raise MalformedInput(f"bad slide dimensions {self.width}x{self.height}")
        object.__setattr__(self, "records", tuple(self.records))
        for r in self.records:
            if not (0 <= r.x < self.width and 0 <= r.y < self.height):
                raise OutOfBounds(
                    f"nucleus at ({r.x}, {r.y}) outside {self.width}x{self.height} slide {self.slide_id}"
                )

    def class_counts(self) -> dict[CellClass, int]:
        counts = {c: 0 for c in CellClass}
        for r in self.records:
            counts[r.cell_class] += 1
        return counts


@dataclass(frozen=True)
class RemapRule:
    from_class: CellClass
    to_class: CellClass

    def __post_init__(self):
        if self.from_class == self.to_class:
            raise ConflictingRules(f"remap rule maps {self.from_class.value} onto itself")


NECROSIS_TO_NEOPLASTIC = RemapRule(CellClass.Necrotic, CellClass.NeoplasticEpithelial)


def _require(obj: dict, key: str, types):
    if key not in obj:
        raise MalformedInput(f"missing key {key!r}")
    value = obj[key]
    # bool is an int subclass; never a valid number here
    if isinstance(value, bool) or not isinstance(value, types):
        raise MalformedInput(f"key {key!r} has wrong type {type(value).__name__}")
    return value


def _resolve_type(raw, class_codes: dict[str, str]) -> CellClass:
    if isinstance(raw, bool):
        raise MalformedInput(f"bad nucleus type {raw!r}")
    if isinstance(raw, int):
        try:
            name = class_codes[str(raw)]
        except KeyError:
            raise UnknownClass(f"integer type {raw} has no entry in class_codes") from None
        return CellClass.parse(name)
    if isinstance(raw, str):
        return CellClass.parse(raw)
    raise MalformedInput(f"bad nucleus type {raw!r}")


def nuclei_from_dict(doc: dict) -> SlideNucleiSet:
    if not isinstance(doc, dict):
        raise MalformedInput("top-level JSON value must be an object")
    slide_id = _require(doc, "slide_id", str)
    patient_id = _require(doc, "patient_id", str)
    mpp = float(_require(doc, "mpp", (int, float)))
    width = _require(doc, "width", int)
    height = _require(doc, "height", int)
    class_codes = doc.get("class_codes") or {}
    if not isinstance(class_codes, dict):
        raise MalformedInput("class_codes must be an object")
    nuclei = _require(doc, "nuclei", list)

    records = []
    for i, item in enumerate(nuclei):
        if not isinstance(item, dict):
            raise MalformedInput(f"nucleus #{i} is not an object")
        x = _require(item, "x", (int, float))
        y = _require(item, "y", (int, float))
        if "type" not in item:
            raise MalformedInput(f"nucleus #{i} has no type")
        cls = _resolve_type(item["type"], class_codes)
        conf = item.get("confidence")
        if conf is not None:
            if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0 <= conf <= 1:
                raise MalformedInput(f"nucleus #{i} confidence {conf!r} not in [0, 1]")
        if x < 0 or y < 0 or x >= width or y >= height:
            raise OutOfBounds(f"nucleus #{i} at ({x}, {y}) outside {width}x{height}")
        records.append(NucleusRecord(x, y, cls, conf))
    return SlideNucleiSet(slide_id, patient_id, mpp, width, height, tuple(records))


def parse_nuclei_file(path) -> SlideNucleiSet:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: invalid JSON ({exc})") from None
    except UnicodeDecodeError as exc:
        raise MalformedInput(f"{path}: not UTF-8 ({exc})") from None
    return nuclei_from_dict(doc)


def nuclei_to_dict(nset: SlideNucleiSet) -> dict:
    nuclei = []
    for r in nset.records:
        item = {"x": r.x, "y": r.y, "type": r.cell_class.value}
        if r.confidence is not None:
            item["confidence"] = r.confidence
        nuclei.append(item)
    return {
        "slide_id": nset.slide_id,
        "patient_id": nset.patient_id,
        "mpp": nset.source_mpp,
        "width": nset.width,
        "height": nset.height,
        "nuclei": nuclei,
    }


def write_nuclei_file(nset: SlideNucleiSet, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(nuclei_to_dict(nset)), encoding="utf-8")
    return path


def apply_remap(nset: SlideNucleiSet, rules: Sequence[RemapRule]) -> SlideNucleiSet:
    """Relabel records per ``rules``. Each source class may appear once."""
    table: dict[CellClass, CellClass] = {}
    for rule in rules:
        if rule.from_class in table:
            raise ConflictingRules(f"duplicate remap rule for {rule.from_class.value}")
        table[rule.from_class] = rule.to_class
    # chained or cyclic rules would make the result depend on application count
    chained = set(table) & set(table.values())
    if chained:
        raise ConflictingRules(f"remap rules chain through {sorted(c.value for c in chained)}")
    if not table:
        return nset
    records = tuple(
        replace(r, cell_class=table[r.cell_class]) if r.cell_class in table else r
        for r in nset.records
    )
    return replace(nset, records=records)


def scale_coordinates(nset: SlideNucleiSet, target_mpp: float) -> SlideNucleiSet:
    """Resample centroids to ``target_mpp``.

    Points are floored and dimensions ceiled, so every in-bounds point stays
    in bounds.
    """
    if target_mpp < nset.source_mpp:
        raise InvalidScale(f"cannot upsample from {nset.source_mpp} to {target_mpp} mpp")
    if target_mpp == nset.source_mpp:
        return nset
    ratio = nset.source_mpp / target_mpp
    width = math.ceil(nset.width * ratio)
    height = math.ceil(nset.height * ratio)
    # the min() only bites when x*ratio rounds onto the scaled border
    records = tuple(
        replace(
            r,
            x=min(math.floor(r.x * ratio), width - 1),
            y=min(math.floor(r.y * ratio), height - 1),
        )
        for r in nset.records
    )
    return SlideNucleiSet(
        nset.slide_id, nset.patient_id, float(target_mpp), width, height, records
    )


def parse_remap_rules(specs: Iterable[str]) -> list[RemapRule]:
    """Parse ``"From=To"`` strings, e.g. ``"Necrotic=NeoplasticEpithelial"``."""
    rules = []
    for spec in specs:
        src, sep, dst = spec.partition("=")
        if not sep:
            raise MalformedInput(f"remap rule {spec!r} is not of the form From=To")
        rules.append(RemapRule(CellClass.parse(src.strip()), CellClass.parse(dst.strip())))
    return rules
