"""Subject-object pair selection and the initial / heterogeneous / dual graphs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .autodiff import Tensor, softmax
from .scene_model import (INTERACTIVE, NON_INTERACTIVE, ConfigError, ObjectSet, Scene)

_STRATEGY_CLAUSES = {
    "con": ("con",), "iou": ("iou",), "iou_plus": ("iou_plus",), "sim": ("sim",), "dis": ("dis",),
    "lin": ("lin",), "dis_sim": ("dis", "sim"), "con_lin": ("con", "lin"), "dis_lin": ("dis", "lin"),
    "full": ("dis", "lin", "con"),
}
STRATEGIES = tuple(_STRATEGY_CLAUSES)


@dataclass
class PairScores:
    """Distance (pixels), confidence and existence matrices; NaN on the diagonal."""
    M_b: np.ndarray
    M_p: np.ndarray
    M_l: np.ndarray

    @property
    def n(self):
        return self.M_b.shape[0]


@dataclass
class PairSelectionParams:
    s_b: float = 600.0
    s_l: float = 1e-5
    top_k: int = 4096
    iou_threshold: float = 0.0
    sim_threshold: float = 0.0
    normalize_distance: bool = False


def _as_objects(scene):
    return ObjectSet.from_scene(scene) if isinstance(scene, Scene) else scene


def compute_pair_matrices(scene, stats, normalize_distance=False):
    objs = _as_objects(scene)
    M_b = bx.center_distance(objs.boxes, objs.boxes)
    if normalize_distance:
        M_b = M_b / np.hypot(objs.width, objs.height)
    conf = objs.distributions.max(axis=1) if len(objs) else np.zeros(0)
    M_p = np.outer(conf, conf)
    M_l = stats.pair_prob[np.ix_(objs.labels, objs.labels)].astype(np.float64)
    for M in (M_b, M_p, M_l):
        np.fill_diagonal(M, np.nan)
    return PairScores(M_b, M_p, M_l)


def _off_diagonal(n):
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return i, j


def top_k_mask(M, k):
    """Boolean mask of the k largest off-diagonal entries.

    Ties are broken by ascending (row, column) so exactly min(k, n(n-1))
    entries are selected.
    """
    n = M.shape[0]
    mask = np.zeros((n, n), dtype=bool)
    if n < 2:
        return mask
    i, j = _off_diagonal(n)
    # (i, j) arrive in lexicographic order and the sort is stable, so ties keep that order
    order = np.argsort(-M[i, j], kind="stable")[:k]
    mask[i[order], j[order]] = True
    return mask


def confidence_threshold(M_p, k):
    """s_p: the k-th largest off-diagonal confidence (smallest if fewer than k)."""
    n = M_p.shape[0]
    if n < 2:
        return np.nan
    vals = np.sort(M_p[_off_diagonal(n)])[::-1]
    return float(vals[min(k, len(vals)) - 1])


def _edges_from_mask(mask):
    np.fill_diagonal(mask, False)
    i, j = np.nonzero(mask)
    return np.stack([i, j], axis=1).astype(np.int64) if len(i) else np.zeros((0, 2), dtype=np.int64)


def select_pairs(scores, s_b=600.0, s_l=1e-5, K=4096):
    """Ordered edges passing the distance, existence and top-K confidence filters."""
    if s_b <= 0 or not 0 <= s_l < 1 or K < 1:
        raise ValueError("need s_b > 0, 0 <= s_l < 1 and K >= 1")
    n = scores.n
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        keep = (scores.M_b < s_b) & (scores.M_l > s_l) & top_k_mask(scores.M_p, K)
    return _edges_from_mask(keep)


def select_pairs_variant(strategy, scene, stats, params=None, embeddings=None):
    """Edge set under one of the pair-selection strategies.

    Single-signal strategies keep pairs whose score clears their threshold
    (``dis`` keeps distances below ``s_b``); ``con`` keeps the top-K
    confidences. ``sim`` compares rows of ``embeddings`` (class-indexed
    vectors), falling back to one-hot labels.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown pair-selection strategy: {strategy!r}")
    p = params or PairSelectionParams()
    objs = _as_objects(scene)
    n = len(objs)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    scores = compute_pair_matrices(objs, stats, p.normalize_distance)
    if strategy == "full":
        return select_pairs(scores, p.s_b, p.s_l, p.top_k)

    with np.errstate(invalid="ignore"):
        clauses = {
            "con": lambda: top_k_mask(scores.M_p, p.top_k),
            "dis": lambda: scores.M_b < p.s_b,
            "lin": lambda: scores.M_l > p.s_l,
            "iou": lambda: bx.iou(objs.boxes, objs.boxes) > p.iou_threshold,
            "iou_plus": lambda: bx.iou_min_area(objs.boxes, objs.boxes) > p.iou_threshold,
            "sim": lambda: label_similarity(objs.labels, embeddings) > p.sim_threshold,
        }
        keep = np.ones((n, n), dtype=bool)
        for part in _STRATEGY_CLAUSES[strategy]:
            keep &= clauses[part]()
    return _edges_from_mask(keep)


def label_similarity(labels, embeddings=None):
    """Cosine similarity between the class vectors of every object pair."""
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings is None:
        vecs = np.eye(int(labels.max()) + 1 if len(labels) else 1)[labels]
    else:
        vecs = np.asarray(embeddings, dtype=np.float64)[labels]
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    unit = vecs / np.where(norms > 0, norms, 1.0)
    return unit @ unit.T


# -- graphs -----------------------------------------------------------------------

@dataclass
class InitialGraph:
    n_nodes: int
    edges: np.ndarray
    object_features: Tensor
    relation_features: Tensor


@dataclass
class HeterogeneousGraph:
    n_nodes: int
    edges: np.ndarray
    object_features: Tensor
    relation_features: Tensor
    edge_type: np.ndarray
    pre_distribution: Tensor
    n_types: int = 2


@dataclass
class DualGraph:
    """Relations as nodes; an undirected edge per pair of relations sharing an object."""
    n_dual_nodes: int
    relation_edges: np.ndarray
    dual_edges: np.ndarray
    shared_object: np.ndarray

    def directed_neighbors(self):
        """(u, v) for every ordered neighbor pair, sorted by u then v."""
        if len(self.dual_edges) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        both = np.concatenate([self.dual_edges, self.dual_edges[:, ::-1]])
        return both[np.lexsort((both[:, 1], both[:, 0]))]

    def object_neighbors(self, n_objects):
        """Ordered object pairs (i, j), i != j, linked by a relation in either direction."""
        if len(self.relation_edges) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        e = self.relation_edges
        both = np.unique(np.concatenate([e, e[:, ::-1]]), axis=0)
        return both[np.lexsort((both[:, 1], both[:, 0]))]


def build_dual_graph(het):
    edges = np.asarray(het.edges if hasattr(het, "edges") else het, dtype=np.int64).reshape(-1, 2)
    incident = {}
    for e, (s, o) in enumerate(edges):
        incident.setdefault(int(s), []).append(e)
        incident.setdefault(int(o), []).append(e)
    shared = {}
    for obj in sorted(incident):
        rels = incident[obj]
        for a in range(len(rels)):
            for b in range(a + 1, len(rels)):
                key = (rels[a], rels[b])
                if key not in shared:
                    shared[key] = obj
    keys = sorted(shared)
    dual_edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
    return DualGraph(len(edges), edges, dual_edges, np.array([shared[k] for k in keys], dtype=np.int64))


def group_masks(ontology, n_types=2):
    """Per-type boolean masks over relation classes (background excluded)."""
    types = ontology.type_index_array()
    if n_types == 1:
        return [types >= 0]
    masks = [types == 0, types == 1]
    for name, m in zip((INTERACTIVE, NON_INTERACTIVE), masks):
        if not m.any():
            raise ConfigError(f"ontology has no {name} relation classes; group mean undefined")
    return masks


def assign_relation_types(graph, pre_classifier, ontology, n_types=2):
    """Type each edge by comparing per-type mean pre-classifier probabilities.

    Ties go to the interactive type. With ``n_types=1`` every edge gets
    type 0.
    """
    masks = group_masks(ontology, n_types)
    if len(graph.edges) == 0:
        pre = Tensor(np.zeros((0, ontology.n_relations)))
    else:
        pre = softmax(graph.relation_features @ pre_classifier, axis=1)
    if n_types == 1:
        types = np.zeros(len(graph.edges), dtype=np.int64)
    else:
        means = np.stack([pre.data[:, m].mean(axis=1) for m in masks], axis=1) if len(graph.edges) \
            else np.zeros((0, 2))
        types = np.where(means[:, 0] >= means[:, 1], 0, 1).astype(np.int64)
    return HeterogeneousGraph(graph.n_nodes, graph.edges, graph.object_features, graph.relation_features,
                              types, pre, n_types)
