"""Scene-graph metrics: R@K, mR@K, pR@K, wmAP_rel/phr, score_wtd and long-tail breakdowns.

Conventions:

* predictions are ranked by descending score (stable, so file order breaks
  ties) and truncated to the top K per scene before matching;
* a triplet matches a GT triplet when both labels and the relation agree
  and both boxes reach the IoU threshold (phrase mode: the union boxes);
* triplet matching is one-to-one, greedy in rank order, each prediction
  taking the lowest-index free GT it matches;
* pair recall ignores the relation and counts a GT as found when any top-K
  prediction matches its subject and object;
* scenes without GT are left out of recall averages.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import boxes as bx
from .scene_model import LONGTAIL_SPLITS, RELATION_TYPES

DEFAULT_KS = (20, 50, 100)


@dataclass(frozen=True)
class MatchCriterion:
    iou_threshold: float = 0.5
    mode: str = "sgdet"
    phrase_mode: bool = False

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must be in (0, 1]")


def _ranked(preds):
    return sorted(preds, key=lambda t: -t.score)


def _compat(preds, gts, criterion, use_relation=True):
    """Boolean (P, G) matrix: prediction p can match GT g."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)), dtype=bool)
    ps = np.array([p.s_label for p in preds])
    po = np.array([p.o_label for p in preds])
    gs = np.array([g.s_label for g in gts])
    go = np.array([g.o_label for g in gts])
    ok = (ps[:, None] == gs[None, :]) & (po[:, None] == go[None, :])
    if use_relation:
        ok &= np.array([p.rel for p in preds])[:, None] == np.array([g.rel for g in gts])[None, :]
    psb = np.array([p.s_box for p in preds], dtype=np.float64)
    pob = np.array([p.o_box for p in preds], dtype=np.float64)
    gsb = np.array([g.s_box for g in gts], dtype=np.float64)
    gob = np.array([g.o_box for g in gts], dtype=np.float64)
    t = criterion.iou_threshold
    if criterion.phrase_mode:
        ok &= bx.iou(bx.union_boxes(psb, pob), bx.union_boxes(gsb, gob)) >= t
    else:
        ok &= (bx.iou(psb, gsb) >= t) & (bx.iou(pob, gob) >= t)
    return ok


def match_triplets(predicted, gt_triplets, criterion=MatchCriterion()):
    """Rank (0-based) at which each GT triplet is first matched; ``inf`` if never.

    GT g counts as recalled at K iff its value is < K.
    """
    preds = _ranked(predicted)
    gts = list(gt_triplets)
    hit = np.full(len(gts), np.inf)
    ok = _compat(preds, gts, criterion)
    for rank in range(len(preds)):
        free = np.nonzero(ok[rank] & np.isinf(hit))[0]
        if len(free):
            hit[free[0]] = rank
    return hit


def pair_match_ranks(predicted, gt_triplets, criterion=MatchCriterion()):
    """Earliest rank of any prediction matching each GT's subject-object pair."""
    preds = _ranked(predicted)
    gts = list(gt_triplets)
    ok = _compat(preds, gts, criterion, use_relation=False)
    hit = np.full(len(gts), np.inf)
    for g in range(len(gts)):
        rows = np.nonzero(ok[:, g])[0]
        if len(rows):
            hit[g] = rows[0]
    return hit


def recall_at_k(hit_ranks, K):
    """Mean over scenes (with GT) of the fraction of GT triplets matched within the top K."""
    per_scene = [float(np.mean(h < K)) for h in hit_ranks if len(h)]
    return float(np.mean(per_scene)) if per_scene else 0.0


def per_class_recall(hit_ranks, gt_relations, K):
    """Per relation class: scene-averaged recall over scenes containing that class."""
    acc = {}
    for h, rels in zip(hit_ranks, gt_relations):
        rels = np.asarray(rels)
        for c in np.unique(rels):
            sel = rels == c
            acc.setdefault(int(c), []).append(float(np.mean(h[sel] < K)))
    return {c: float(np.mean(v)) for c, v in sorted(acc.items())}


def mean_recall_at_k(hit_ranks, gt_relations, K):
    per_class = per_class_recall(hit_ranks, gt_relations, K)
    mr = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mr, per_class


def pair_recall_at_k(predictions, gts_per_scene, criterion, K):
    ranks = [pair_match_ranks(p, g, criterion) for p, g in zip(predictions, gts_per_scene)]
    return recall_at_k(ranks, K)


def average_precision(is_tp, n_gt):
    """Exact area under the precision-recall step curve for a ranked TP/FP list."""
    if n_gt == 0:
        return 0.0
    is_tp = np.asarray(is_tp, dtype=bool)
    if not is_tp.any():
        return 0.0
    precision = np.cumsum(is_tp) / np.arange(1, len(is_tp) + 1)
    return float(precision[is_tp].sum() / n_gt)


def weighted_map(predictions, gts_per_scene, phrase_mode=False, iou_threshold=0.5):
    """Σ_c (GT share of class c) · AP_c over relation classes with GT.

    Returns (wmAP, {class: AP}).
    """
    crit = MatchCriterion(iou_threshold, phrase_mode=phrase_mode)
    gt_count = {}
    for gts in gts_per_scene:
        for g in gts:
            gt_count[g.rel] = gt_count.get(g.rel, 0) + 1
    total = sum(gt_count.values())
    if total == 0:
        return 0.0, {}
    by_class, compat, gt_rel = {}, [], []
    for si, preds in enumerate(predictions):
        ranked = _ranked(preds)
        compat.append(_compat(ranked, gts_per_scene[si], crit))
        gt_rel.append(np.array([g.rel for g in gts_per_scene[si]], dtype=np.int64))
        for rank, p in enumerate(ranked):
            by_class.setdefault(p.rel, []).append((-p.score, si, rank))
    aps = {}
    for c in sorted(gt_count):
        entries = sorted(by_class.get(c, []))
        taken = [r != c for r in gt_rel]  # GTs of other classes are never available
        tp = np.zeros(len(entries), dtype=bool)
        for e, (_, si, rank) in enumerate(entries):
            free = np.nonzero(compat[si][rank] & ~taken[si])[0]
            if len(free):
                taken[si][free[0]] = True
                tp[e] = True
        aps[c] = average_precision(tp, gt_count[c])
    return float(sum(gt_count[c] / total * aps[c] for c in aps)), aps


def score_wtd(r50, wmap_rel, wmap_phr):
    return 0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr


def longtail_report(per_class, ontology):
    """mR restricted to the head / body / tail classes; empty splits are omitted."""
    out = {}
    for split in LONGTAIL_SPLITS:
        vals = [r for c, r in per_class.items()
                if ontology.longtail_partition.get(ontology.relation_classes[c]) == split]
        if vals:
            out[split] = float(np.mean(vals))
    return out


def relation_counts(scenes, n_relations):
    counts = np.zeros(n_relations, dtype=np.int64)
    for s in scenes:
        for t in s.gt_triplets or ():
            counts[t.rel] += 1
    return counts


def distribution_ratio_report(scenes_or_counts, ontology):
    """Per relation: share of all GT instances and share within its relation type."""
    if isinstance(scenes_or_counts, np.ndarray) or (
            isinstance(scenes_or_counts, (list, tuple)) and scenes_or_counts
            and isinstance(scenes_or_counts[0], (int, np.integer))):
        counts = np.asarray(scenes_or_counts, dtype=np.int64)
    else:
        counts = relation_counts(scenes_or_counts, ontology.n_relations)
    types = ontology.type_index_array()
    total = counts[1:].sum()
    rows = []
    for r in range(1, ontology.n_relations):
        t_total = counts[types == types[r]].sum()
        rows.append({
            "relation": ontology.relation_classes[r],
            "type": RELATION_TYPES[types[r]],
            "count": int(counts[r]),
            "global_ratio": float(counts[r] / total) if total else 0.0,
            "within_type_ratio": float(counts[r] / t_total) if t_total else 0.0,
        })
    return rows


@dataclass
class MetricReport:
    r_at: dict
    mr_at: dict
    pr_at: dict
    wmap_rel: float
    wmap_phr: float
    score_wtd: float
    per_class: dict = field(default_factory=dict)
    longtail: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self):
        """Percentages rounded to two decimals, keyed as in the field names."""
        pct = lambda v: round(100.0 * v, 2)  # noqa: E731
        return {
            "scale": "percent",
            "r_at": {str(k): pct(v) for k, v in self.r_at.items()},
            "mr_at": {str(k): {"mean": pct(v), "per_class": {n: pct(r) for n, r in self.per_class[k].items()}}
                      for k, v in self.mr_at.items()},
            "pr_at": {str(k): pct(v) for k, v in self.pr_at.items()},
            "wmap_rel": pct(self.wmap_rel),
            "wmap_phr": pct(self.wmap_phr),
            "score_wtd": pct(self.score_wtd),
            "longtail": {str(k): {s: pct(v) for s, v in d.items()} for k, d in self.longtail.items()},
            "notes": self.notes,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "k", "split", "value"])
        for k, v in self.r_at.items():
            w.writerow(["R", k, "all", f"{100 * v:.2f}"])
        for k, v in self.mr_at.items():
            w.writerow(["mR", k, "all", f"{100 * v:.2f}"])
            for split, sv in self.longtail.get(k, {}).items():
                w.writerow(["mR", k, split, f"{100 * sv:.2f}"])
        for k, v in self.pr_at.items():
            w.writerow(["pR", k, "all", f"{100 * v:.2f}"])
        for name in ("wmap_rel", "wmap_phr", "score_wtd"):
            w.writerow([name, "", "all", f"{100 * getattr(self, name):.2f}"])
        return buf.getvalue()


def evaluate_predictions(predictions, scenes, ontology, ks=DEFAULT_KS, criterion=MatchCriterion()):
    """Full metric suite. ``predictions`` maps scene_id to a ranked list of RankedTriplet."""
    preds, gts = [], []
    for s in scenes:
        preds.append(list(predictions.get(s.scene_id, [])))
        gts.append(list(s.gt_triplets or []))
    ranks = [match_triplets(p, g, criterion) for p, g in zip(preds, gts)]
    pranks = [pair_match_ranks(p, g, criterion) for p, g in zip(preds, gts)]
    gt_rels = [[g.rel for g in gs] for gs in gts]
    r_at, mr_at, pr_at, per_class, lt = {}, {}, {}, {}, {}
    for k in ks:
        r_at[k] = recall_at_k(ranks, k)
        mr, pc = mean_recall_at_k(ranks, gt_rels, k)
        mr_at[k] = mr
        per_class[k] = {ontology.relation_classes[c]: v for c, v in pc.items()}
        lt[k] = longtail_report(pc, ontology)
        pr_at[k] = recall_at_k(pranks, k)
    wrel, _ = weighted_map(preds, gts, False, criterion.iou_threshold)
    wphr, _ = weighted_map(preds, gts, True, criterion.iou_threshold)
    r50 = r_at[50] if 50 in r_at else recall_at_k(ranks, 50)
    notes = ["top-K per scene before matching; one-to-one greedy triplet matching by rank",
             "pR@K: any top-K prediction matching the subject-object pair",
             f"IoU threshold {criterion.iou_threshold}"]
    return MetricReport(r_at, mr_at, pr_at, wrel, wphr, score_wtd(r50, wrel, wphr), per_class, lt, notes)
