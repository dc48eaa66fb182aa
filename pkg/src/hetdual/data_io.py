"""Scene ingestion, co-occurrence statistics, synthetic scenes, checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scene_model import (BACKGROUND, ConfigError, DetectedObject, GTTriplet, RankedTriplet,
                          Scene, SchemaError)

log = logging.getLogger(__name__)


# -- scenes ---------------------------------------------------------------------

def scene_from_dict(d, ontology=None):
    try:
        objects = [
            DetectedObject(box=o["box"], visual_feature=o["feature"], label=o["label"],
                           distribution=o["distribution"])
            for o in d["objects"]
        ]
        gts = None
        if d.get("gt_triplets") is not None:
            gts = [GTTriplet(tuple(float(v) for v in t["s_box"]), int(t["s_label"]), int(t["rel"]),
                             tuple(float(v) for v in t["o_box"]), int(t["o_label"]))
                   for t in d["gt_triplets"]]
        scene = Scene(str(d["scene_id"]), float(d["width"]), float(d["height"]), objects, gts)
    except KeyError as e:
        raise SchemaError(f"scene record missing key {e}") from e
    if ontology is not None:
        _check_dims(scene, ontology)
    return scene


def _check_dims(scene, ontology):
    nc, nr = ontology.n_objects, ontology.n_relations
    for obj in scene.objects:
        if len(obj.distribution) != nc:
            raise SchemaError(f"{scene.scene_id}: distribution length {len(obj.distribution)} != {nc}")
        if not 0 <= obj.label < nc:
            raise SchemaError(f"{scene.scene_id}: class index out of range ({obj.label})")
    for t in scene.gt_triplets or ():
        if not (0 <= t.s_label < nc and 0 <= t.o_label < nc):
            raise SchemaError(f"{scene.scene_id}: class index out of range in gt triplet")
        if not 0 < t.rel < nr:
            raise SchemaError(f"{scene.scene_id}: relation index out of range ({t.rel})")
        for b in (t.s_box, t.o_box):
            if not (b[0] < b[2] and b[1] < b[3]):
                raise SchemaError(f"{scene.scene_id}: degenerate gt box {b}")


def scene_to_dict(scene):
    d = {
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "objects": [{"box": list(o.box), "feature": o.visual_feature.tolist(), "label": o.label,
                     "distribution": o.distribution.tolist()} for o in scene.objects],
    }
    if scene.gt_triplets is not None:
        d["gt_triplets"] = [{"s_box": list(t.s_box), "s_label": t.s_label, "rel": t.rel,
                             "o_box": list(t.o_box), "o_label": t.o_label} for t in scene.gt_triplets]
    return d


def load_scenes(path, ontology=None):
    scenes = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"line {lineno}: invalid JSON ({e})") from e
            try:
                scenes.append(scene_from_dict(raw, ontology))
            except SchemaError as e:
                raise SchemaError(f"line {lineno}: {e}") from e
    return scenes


def save_scenes(scenes, path):
    _atomic_write(path, "".join(json.dumps(scene_to_dict(s)) + "\n" for s in scenes).encode("utf-8"))


# -- predictions ----------------------------------------------------------------

def save_predictions(predictions, path):
    """``predictions``: iterable of (scene_id, list of RankedTriplet)."""
    lines = [json.dumps({"scene_id": sid, "triplets": [t.to_dict() for t in trips]})
             for sid, trips in predictions]
    _atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def load_predictions(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out[str(d["scene_id"])] = [RankedTriplet.from_dict(t) for t in d["triplets"]]
    return out


# -- co-occurrence statistics ----------------------------------------------------

@dataclass
class CooccurrenceStats:
    counts: np.ndarray
    pair_prob: np.ndarray

    def to_dict(self):
        return {"counts": self.counts.astype(int).tolist(), "pair_prob": self.pair_prob.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["counts"], dtype=np.float64), np.asarray(d["pair_prob"], dtype=np.float64))


def build_cooccurrence_stats(scenes, ontology):
    """Laplace-smoothed, row-conditional subject->object class pair statistics."""
    nc = ontology.n_objects
    counts = np.zeros((nc, nc))
    n_trip = 0
    for scene in scenes:
        if scene.gt_triplets is None:
            raise SchemaError(f"scene {scene.scene_id} has no ground truth")
        for t in scene.gt_triplets:
            counts[t.s_label, t.o_label] += 1
            n_trip += 1
    if n_trip == 0:
        log.warning("empty ground-truth corpus; pair statistics are uniform")
    pair_prob = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + nc)
    return CooccurrenceStats(counts, pair_prob)


def save_stats(stats, path):
    _atomic_write(path, (json.dumps(stats.to_dict()) + "\n").encode("utf-8"))


def load_stats(path):
    return CooccurrenceStats.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- synthetic long-tail scenes ----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Knobs for the rule-governed synthetic corpus.

    ``rules`` maps "a,b" (subject class, object class) to a probability row
    over relation classes; background must carry zero mass. When omitted a
    table is drawn from ``seed`` by :func:`default_rule_table`.
    Visual features are class means of expected norm ``feature_scale`` plus
    isotropic noise of expected norm ``feature_noise``.
    """
    n_scenes: int = 200
    objects_per_scene: tuple = (3, 6)
    triplets_per_scene: tuple = (2, 4)
    rules: dict | None = None
    longtail_exponent: float = 2.0
    box_noise: float = 0.0
    feature_scale: float = 1.0
    feature_noise: float = 0.1
    angle_noise: float = 0.05
    offset_range: tuple = (220.0, 340.0)
    feature_dim: int = 128
    width: float = 1024.0
    height: float = 768.0
    share_prob: float = 0.5
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["objects_per_scene"] = list(self.objects_per_scene)
        d["triplets_per_scene"] = list(self.triplets_per_scene)
        d["offset_range"] = list(self.offset_range)
        return d


def default_rule_table(ontology, seed=0, relations_per_pair=3):
    """Random sparse rule table covering every relation at least once."""
    rng = np.random.default_rng(seed)
    nc, nr = ontology.n_objects, ontology.n_relations
    pairs = [(a, b) for a in range(nc) for b in range(nc)]
    support = {p: set() for p in pairs}
    order = rng.permutation(len(pairs))
    for k, r in enumerate(range(1, nr)):
        support[pairs[order[k % len(pairs)]]].add(r)
    for p in pairs:
        while len(support[p]) < min(relations_per_pair, nr - 1):
            support[p].add(int(rng.integers(1, nr)))
    rules = {}
    for (a, b), rels in support.items():
        row = np.zeros(nr)
        row[sorted(rels)] = 1.0 / len(rels)
        rules[f"{a},{b}"] = row.tolist()
    return rules


def relation_marginal(n_relations, exponent):
    """Target frequency of relation index r (1-based rank r) ∝ r^-exponent."""
    ranks = np.arange(1, n_relations, dtype=np.float64)
    w = ranks ** (-exponent)
    return np.concatenate([[0.0], w / w.sum()])


def relation_angle(rel, n_relations):
    """Canonical direction from subject centre to object centre for a relation."""
    return 2 * np.pi * (rel - 1) / (n_relations - 1)


def _parse_rules(rules, ontology):
    nc, nr = ontology.n_objects, ontology.n_relations
    table = np.zeros((nc, nc, nr))
    for key, row in rules.items():
        a, b = (int(v) for v in str(key).split(","))
        if not (0 <= a < nc and 0 <= b < nc):
            raise ConfigError(f"rule pair {key} outside the object vocabulary")
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (nr,) or np.any(row < 0) or abs(row.sum() - 1.0) > 1e-6:
            raise ConfigError(f"rule row {key} must be a distribution over {nr} relation classes")
        if row[BACKGROUND] != 0:
            raise ConfigError(f"rule row {key} puts mass on the background class")
        table[a, b] = row
    return table


def generate_synthetic_dataset(cfg, ontology):
    """Deterministic rule-governed scenes with long-tailed relation frequencies.

    Each relation index r is drawn with probability ∝ r^-exponent; the
    subject/object class pair is then drawn from the pairs whose rule row
    supports r, and the object is placed along r's canonical direction
    from the subject. Distractor objects fill the remainder of the scene.
    """
    rules = cfg.rules if cfg.rules is not None else default_rule_table(ontology, cfg.seed)
    table = _parse_rules(rules, ontology)
    nc, nr = ontology.n_objects, ontology.n_relations
    marginal = relation_marginal(nr, cfg.longtail_exponent)
    pair_weights = table.reshape(nc * nc, nr)
    for r in range(1, nr):
        if marginal[r] > 0 and pair_weights[:, r].sum() == 0:
            raise ConfigError(f"no class pair supports relation {ontology.relation_classes[r]!r}")

    rng = np.random.default_rng(cfg.seed)
    means = rng.normal(scale=cfg.feature_scale / np.sqrt(cfg.feature_dim), size=(nc, cfg.feature_dim))
    scenes = []
    for k in range(cfg.n_scenes):
        scenes.append(_synth_scene(f"syn{k:05d}", cfg, rng, means, marginal, pair_weights, nc, nr))
    return scenes


def _synth_scene(scene_id, cfg, rng, means, marginal, pair_weights, nc, nr):
    W, H = cfg.width, cfg.height
    boxes, labels, gts = [], [], []

    def new_box(cx=None, cy=None):
        w, h = rng.uniform(40, 100, size=2)
        if cx is None:
            cx = rng.uniform(w / 2, W - w / 2)
            cy = rng.uniform(h / 2, H - h / 2)
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def inside(b):
        return b[0] >= 0 and b[1] >= 0 and b[2] <= W and b[3] <= H

    n_trip = int(rng.integers(cfg.triplets_per_scene[0], cfg.triplets_per_scene[1] + 1))
    for _ in range(n_trip):
        r = int(rng.choice(nr, p=marginal))
        col = pair_weights[:, r]
        pair = int(rng.choice(len(col), p=col / col.sum()))
        a, b = divmod(pair, nc)
        candidates = [i for i, lab in enumerate(labels) if lab == a]
        placed = None
        for attempt in range(60):
            if candidates and attempt < 20 and rng.random() < cfg.share_prob:
                si = candidates[int(rng.integers(len(candidates)))]
                sbox = boxes[si]
            else:
                si, sbox = None, new_box()
            scx, scy = (sbox[0] + sbox[2]) / 2, (sbox[1] + sbox[3]) / 2
            theta = relation_angle(r, nr) + rng.normal(0, cfg.angle_noise)
            dist = rng.uniform(*cfg.offset_range)
            obox = new_box(scx + dist * np.cos(theta), scy + dist * np.sin(theta))
            if inside(obox):
                placed = (si, sbox, obox)
                break
        if placed is None:
            continue
        si, sbox, obox = placed
        if si is None:
            boxes.append(sbox)
            labels.append(a)
        boxes.append(obox)
        labels.append(b)
        gts.append(GTTriplet(tuple(sbox), a, r, tuple(obox), b))

    n_obj = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
    while len(boxes) < n_obj:
        boxes.append(new_box())
        labels.append(int(rng.integers(nc)))

    objects = []
    for box, lab in zip(boxes, labels):
        det = np.asarray(box) + rng.normal(0, cfg.box_noise, size=4) if cfg.box_noise > 0 else np.asarray(box)
        det = np.clip(det, 0, [W, H, W, H])
        if not (det[0] < det[2] and det[1] < det[3]):
            det = np.asarray(box)
        feat = means[lab] + rng.normal(0, cfg.feature_noise / np.sqrt(cfg.feature_dim), size=cfg.feature_dim)
        eps = rng.uniform(0.0, 0.3)
        dist = np.full(nc, eps / nc)
        dist[lab] += 1.0 - eps
        objects.append(DetectedObject(tuple(float(v) for v in det), feat, lab, dist / dist.sum()))
    return Scene(scene_id, W, H, objects, gts)


def rule_ceiling(scenes, n_relations):
    """Fraction of GT triplets recoverable by decoding the placement direction.

    The generator hides each relation in the subject->object direction, so
    snapping the observed direction to the nearest canonical angle is the
    best decision any predictor can make from the observables.
    """
    hit = total = 0
    per_scene = []
    for scene in scenes:
        if not scene.gt_triplets:
            continue
        h = 0
        for t in scene.gt_triplets:
            sc = ((t.s_box[0] + t.s_box[2]) / 2, (t.s_box[1] + t.s_box[3]) / 2)
            oc = ((t.o_box[0] + t.o_box[2]) / 2, (t.o_box[1] + t.o_box[3]) / 2)
            ang = np.arctan2(oc[1] - sc[1], oc[0] - sc[0]) % (2 * np.pi)
            step = 2 * np.pi / (n_relations - 1)
            decoded = int(np.round(ang / step)) % (n_relations - 1) + 1
            h += decoded == t.rel
        per_scene.append(h / len(scene.gt_triplets))
        hit += h
        total += len(scene.gt_triplets)
    return float(np.mean(per_scene)) if per_scene else 0.0


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"HDSGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated or corrupt."""


class CheckpointMismatch(CheckpointError):
    """Checkpoint was written against a different ontology."""


@dataclass
class Checkpoint:
    params: dict
    ontology_hash: str
    config: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)


def save_checkpoint(ckpt, path):
    """Single binary file: magic, version, JSON header, raw float64 payload, sha256."""
    names = sorted(ckpt.params)
    arrays = [np.ascontiguousarray(ckpt.params[n], dtype="<f8") for n in names]
    header = {
        "ontology_hash": ckpt.ontology_hash,
        "config": ckpt.config,
        "optimizer_state": ckpt.optimizer_state,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(a.tobytes() for a in arrays)
    _atomic_write(path, body + hashlib.sha256(body).digest())


def load_checkpoint(path, ontology=None):
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = len(MAGIC) + 12
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        params[entry["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(entry["shape"]).copy()
        off += 8 * n
    if off != len(body):
        raise CheckpointError(f"{path}: payload size does not match header")
    ckpt = Checkpoint(params, header["ontology_hash"], header["config"], header["optimizer_state"])
    if ontology is not None and ontology.digest() != ckpt.ontology_hash:
        raise CheckpointMismatch(
            f"{path}: ontology hash {ckpt.ontology_hash[:12]} does not match {ontology.digest()[:12]}")
    return ckpt


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
