"""Module ablation grid and pair-selection benchmark, shared by the CLI and the tests."""
from __future__ import annotations

import itertools

import numpy as np

from .evaluation import MatchCriterion, pair_match_ranks, recall_at_k
from .graph_construction import STRATEGIES, PairSelectionParams, select_pairs_variant
from .training import prepare_objects

TOGGLES = {
    "A": "pair selection by distance, existence and confidence (off: confidence top-K only)",
    "B": "typed heterogeneous graph with type-specific inter-type weights (off: one shared type)",
    "C": "dual graph with intra-type message passing (off: no intra-type layers)",
}


def ablation_rows():
    """(row number, A, B, C) for all eight combinations; row = 1 + A + 2B + 4C.

    Row 8 is the full model; rows 4, 6 and 7 each drop exactly one module.
    """
    rows = []
    for c, b, a in itertools.product((0, 1), repeat=3):
        rows.append((1 + a + 2 * b + 4 * c, bool(a), bool(b), bool(c)))
    return sorted(rows)


def ablation_params(base, a, b, c):
    """Estimator parameters for one toggle combination on top of ``base``."""
    p = dict(base)
    p["pair_strategy"] = "full" if a else "con"
    p["typed"] = bool(b)
    if not c:
        p["layers_intra"] = 0
    return p


def run_ablation(train_scenes, test_scenes, ontology, base_params=None, stats=None, ks=(50, 100), rows=None):
    """Train and evaluate toggle combinations with the same seed; one dict per row.

    ``rows`` restricts the run to the given row numbers (all eight by default).
    """
    from .estimator import TypeAwareSGG

    out = []
    for no, a, b, c in ablation_rows():
        if rows is not None and no not in rows:
            continue
        est = TypeAwareSGG(ontology=ontology, **ablation_params(base_params or {}, a, b, c))
        est.fit(train_scenes, val_scenes=[], stats=stats)
        rep = est.evaluate(test_scenes, ks=ks)
        row = {"no": no, "A": int(a), "B": int(b), "C": int(c)}
        for k in ks:
            row[f"R@{k}"] = round(100 * rep.r_at[k], 2)
            row[f"mR@{k}"] = round(100 * rep.mr_at[k], 2)
        out.append(row)
    return out


def pairsel_bench(scenes, ontology, stats, params=None, mode="sgdet", ks=(50, 100), embeddings=None):
    """Per strategy: pair recall of the candidate edge set and mean edges per scene.

    Every kept pair is offered as a candidate with its confidence product as
    score, so pR@K measures what the selection step lets through.
    """
    params = params or PairSelectionParams()
    crit = MatchCriterion()
    rows = []
    for strategy in STRATEGIES:
        ranks, n_edges = [], []
        for s in scenes:
            objs, _ = prepare_objects(s, mode, ontology.n_objects)
            edges = select_pairs_variant(strategy, objs, stats, params, embeddings)
            n_edges.append(len(edges))
            conf = objs.distributions.max(axis=1) if len(objs) else np.zeros(0)
            cands = [_candidate(objs, int(i), int(j), float(conf[i] * conf[j])) for i, j in edges]
            ranks.append(pair_match_ranks(cands, s.gt_triplets or [], crit))
        row = {"strategy": strategy}
        for k in ks:
            row[f"pR@{k}"] = round(100 * recall_at_k(ranks, k), 2)
        row["mean_edges"] = round(float(np.mean(n_edges)) if n_edges else 0.0, 2)
        rows.append(row)
    return rows


def _candidate(objs, i, j, score):
    from .scene_model import RankedTriplet
    return RankedTriplet(i, j, 1, score, tuple(objs.boxes[i].tolist()), tuple(objs.boxes[j].tolist()),
                         int(objs.labels[i]), int(objs.labels[j]))
