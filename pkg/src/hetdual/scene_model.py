"""Domain vocabulary: ontology, detected objects, scenes and triplets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

INTERACTIVE = "interactive"
NON_INTERACTIVE = "non_interactive"
RELATION_TYPES = (INTERACTIVE, NON_INTERACTIVE)
BACKGROUND = 0

_TYPE_ALIASES = {
    "interactive": INTERACTIVE, "phi": INTERACTIVE, "φ": INTERACTIVE,
    "non_interactive": NON_INTERACTIVE, "non-interactive": NON_INTERACTIVE,
    "delta": NON_INTERACTIVE, "δ": NON_INTERACTIVE,
}
LONGTAIL_SPLITS = ("head", "body", "tail")


class SchemaError(ValueError):
    """Input file or record does not satisfy its documented schema."""


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class ConfigError(ValueError):
    """Configuration cannot be satisfied."""


@dataclass(frozen=True)
class Ontology:
    object_classes: tuple
    relation_classes: tuple
    type_map: dict
    longtail_partition: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "object_classes", tuple(self.object_classes))
        object.__setattr__(self, "relation_classes", tuple(self.relation_classes))
        _validate_ontology(self)

    @property
    def n_objects(self):
        return len(self.object_classes)

    @property
    def n_relations(self):
        """Number of relation classes including background."""
        return len(self.relation_classes)

    def relation_index(self, name):
        return self.relation_classes.index(name)

    def object_index(self, name):
        return self.object_classes.index(name)

    def type_index_array(self):
        """Per relation index: 0 interactive, 1 non-interactive, -1 background."""
        out = np.full(self.n_relations, -1, dtype=np.int64)
        for i, name in enumerate(self.relation_classes[1:], start=1):
            out[i] = RELATION_TYPES.index(self.type_map[name])
        return out

    def to_dict(self):
        return {
            "object_classes": list(self.object_classes),
            "relation_classes": list(self.relation_classes),
            "type_map": {k: self.type_map[k] for k in self.relation_classes[1:]},
            "longtail_partition": {k: self.longtail_partition[k]
                                   for k in self.relation_classes[1:] if k in self.longtail_partition},
        }

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Ontology) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.digest())


def _validate_ontology(o):
    for kind, names in (("object", o.object_classes), ("relation", o.relation_classes)):
        seen = set()
        for n in names:
            if n in seen:
                raise SchemaError(f"duplicate {kind} class: {n}")
            seen.add(n)
    if not o.object_classes:
        raise SchemaError("ontology needs at least one object class")
    if len(o.relation_classes) < 2:
        raise SchemaError("ontology needs a background class and at least one relation class")
    bg = o.relation_classes[0]
    if bg in o.type_map:
        raise SchemaError(f"background relation {bg!r} must not be typed")
    normalized = {}
    for name in o.relation_classes[1:]:
        if name not in o.type_map:
            raise SchemaError(f"untyped relation: {name}")
        t = _TYPE_ALIASES.get(o.type_map[name])
        if t is None:
            raise SchemaError(f"unknown relation type {o.type_map[name]!r} for {name}")
        normalized[name] = t
    extra = set(o.type_map) - set(o.relation_classes)
    if extra:
        raise SchemaError(f"type_map names unknown relations: {sorted(extra)}")
    object.__setattr__(o, "type_map", normalized)
    for name, split in o.longtail_partition.items():
        if name not in o.relation_classes[1:]:
            raise SchemaError(f"longtail_partition names unknown relation: {name}")
        if split not in LONGTAIL_SPLITS:
            raise SchemaError(f"unknown long-tail split {split!r} for {name}")


def load_ontology(path):
    """Read and validate an ontology JSON file."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"ontology is not valid JSON: {e}") from e
    return ontology_from_dict(raw)


def ontology_from_dict(raw):
    for key in ("object_classes", "relation_classes", "type_map"):
        if key not in raw:
            raise SchemaError(f"ontology missing key: {key}")
    return Ontology(
        object_classes=raw["object_classes"],
        relation_classes=raw["relation_classes"],
        type_map=dict(raw["type_map"]),
        longtail_partition=dict(raw.get("longtail_partition", {})),
    )


def save_ontology(ontology, path):
    Path(path).write_text(json.dumps(ontology.to_dict(), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def default_vg_ontology():
    """The shipped 150-object / 50-relation configuration."""
    with resources.files("hetdual.data").joinpath("vg150_ontology.json").open(encoding="utf-8") as f:
        return ontology_from_dict(json.load(f))


def toy_ontology(n_objects=10, n_relations=9):
    """Small generated vocabulary for synthetic experiments.

    Relations alternate between the two types; the first third is head,
    the last third tail and the rest body.
    """
    rels = [f"rel{r:02d}" for r in range(1, n_relations + 1)]
    third = max(1, n_relations // 3)
    split = {name: "head" if k < third else "tail" if k >= n_relations - third else "body"
             for k, name in enumerate(rels)}
    return Ontology(
        object_classes=[f"obj{c:02d}" for c in range(n_objects)],
        relation_classes=["__background__"] + rels,
        type_map={name: RELATION_TYPES[k % 2] for k, name in enumerate(rels)},
        longtail_partition=split,
    )


def relation_type_of(ontology, rel):
    if not isinstance(rel, (int, np.integer)) or rel <= BACKGROUND or rel >= ontology.n_relations:
        raise DomainError(f"relation index {rel!r} is background or out of range")
    return ontology.type_map[ontology.relation_classes[rel]]


def longtail_partition_from_counts(counts, head_coverage=0.5, tail_share=0.01):
    """Split relation names into head/body/tail from GT instance counts.

    Head is the most frequent prefix covering ``head_coverage`` of all
    instances; tail is every remaining class holding less than
    ``tail_share`` of the instances each.
    """
    total = sum(counts.values())
    ranked = sorted(counts, key=lambda k: (-counts[k], k))
    out, covered = {}, 0
    for name in ranked:
        if total and covered < head_coverage * total:
            out[name] = "head"
            covered += counts[name]
        elif total == 0 or counts[name] < tail_share * total:
            out[name] = "tail"
        else:
            out[name] = "body"
    return out


@dataclass(frozen=True)
class DetectedObject:
    box: tuple
    visual_feature: np.ndarray
    label: int
    distribution: np.ndarray

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) != 4:
            raise SchemaError("box needs 4 coordinates")
        if not (box[0] < box[2] and box[1] < box[3]):
            raise SchemaError(f"degenerate box {box}")
        object.__setattr__(self, "box", box)
        dist = np.asarray(self.distribution, dtype=np.float64)
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-6:
            raise SchemaError(f"class distribution must be nonnegative and sum to 1 (sum={dist.sum():.6g})")
        object.__setattr__(self, "distribution", dist)
        object.__setattr__(self, "visual_feature", np.asarray(self.visual_feature, dtype=np.float64))
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True)
class GTTriplet:
    s_box: tuple
    s_label: int
    rel: int
    o_box: tuple
    o_label: int


@dataclass(frozen=True)
class Scene:
    scene_id: str
    width: float
    height: float
    objects: tuple
    gt_triplets: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.gt_triplets is not None:
            object.__setattr__(self, "gt_triplets", tuple(self.gt_triplets))
        for obj in self.objects:
            _check_in_image(obj.box, self.width, self.height)

    @property
    def has_gt(self):
        return bool(self.gt_triplets)

    def gt_objects(self):
        """Unique (box, label) ground-truth objects in order of first mention."""
        seen = {}
        for t in self.gt_triplets or ():
            for box, lab in ((t.s_box, t.s_label), (t.o_box, t.o_label)):
                key = (tuple(box), lab)
                if key not in seen:
                    seen[key] = len(seen)
        return list(seen)


@dataclass
class ObjectSet:
    """Column-wise view of a scene's objects, the form the model consumes."""
    boxes: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    distributions: np.ndarray
    width: float
    height: float

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_scene(cls, scene, n_classes=None, feature_dim=None):
        objs = scene.objects
        if not objs:
            return cls(np.zeros((0, 4)), np.zeros((0, feature_dim or 0)), np.zeros(0, dtype=np.int64),
                       np.zeros((0, n_classes or 0)), scene.width, scene.height)
        return cls(np.array([o.box for o in objs], dtype=np.float64),
                   np.stack([o.visual_feature for o in objs]),
                   np.array([o.label for o in objs], dtype=np.int64),
                   np.stack([o.distribution for o in objs]),
                   scene.width, scene.height)


def _check_in_image(box, width, height, tol=1e-6):
    x1, y1, x2, y2 = box
    if x1 < -tol or y1 < -tol or x2 > width + tol or y2 > height + tol:
        raise SchemaError(f"box {box} outside image {width}x{height}")


@dataclass(frozen=True)
class Triplet:
    subject_idx: int
    object_idx: int
    relation: int
    score: float

    def __post_init__(self):
        if self.subject_idx == self.object_idx:
            raise DomainError("triplet subject and object must differ")


@dataclass(frozen=True)
class RankedTriplet:
    """A scored prediction with the boxes and labels it is matched on."""
    s: int
    o: int
    rel: int
    score: float
    s_box: tuple
    o_box: tuple
    s_label: int
    o_label: int

    def to_dict(self):
        return {"s": self.s, "o": self.o, "rel": self.rel, "score": self.score,
                "s_box": list(self.s_box), "o_box": list(self.o_box),
                "s_label": self.s_label, "o_label": self.o_label}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["s"]), int(d["o"]), int(d["rel"]), float(d["score"]),
                   tuple(float(v) for v in d["s_box"]), tuple(float(v) for v in d["o_box"]),
                   int(d["s_label"]), int(d["o_label"]))
