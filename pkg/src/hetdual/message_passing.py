"""Type-aware message passing: intra-type on the dual graph, inter-type on the heterogeneous graph.

All step functions read a :class:`LayerState` and return new feature
tensors; nothing is updated in place. Empty neighbourhoods contribute a
zero message, so isolated objects and relations pass through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, index_add, segment_softmax


@dataclass
class LayerState:
    objects: Tensor
    relations: Tensor


@dataclass
class IntraParams:
    W_rel: Tensor      # relation -> relation messages
    W_obj: Tensor      # object -> object messages
    att_rel: Tensor    # length 2*D, scores [f_u ; f_v] for relation neighbours
    att_obj: Tensor    # length 2*D, same for object neighbours

    @classmethod
    def init(cls, rng, dim, scale=1.0):
        return cls(_square(rng, dim, scale), _square(rng, dim, scale),
                   _vector(rng, 2 * dim), _vector(rng, 2 * dim))

    def tensors(self):
        return {"W_rel": self.W_rel, "W_obj": self.W_obj, "att_rel": self.att_rel, "att_obj": self.att_obj}


@dataclass
class InterParams:
    """Per relation type t: object->relation maps (subject side, object side)
    and relation->object maps (outgoing, incoming)."""
    W_subj: list
    W_objt: list
    W_out: list
    W_in: list
    att_h: Tensor
    att_t: Tensor

    @property
    def n_types(self):
        return len(self.W_subj)

    @classmethod
    def init(cls, rng, dim, n_types=2, scale=1.0):
        return cls([_square(rng, dim, scale) for _ in range(n_types)],
                   [_square(rng, dim, scale) for _ in range(n_types)],
                   [_square(rng, dim, scale) for _ in range(n_types)],
                   [_square(rng, dim, scale) for _ in range(n_types)],
                   _vector(rng, dim), _vector(rng, dim))

    def tensors(self):
        out = {"att_h": self.att_h, "att_t": self.att_t}
        for name in ("W_subj", "W_objt", "W_out", "W_in"):
            for t, W in enumerate(getattr(self, name)):
                out[f"{name}.{t}"] = W
        return out


def _square(rng, dim, scale):
    return Tensor(rng.normal(0, scale / np.sqrt(dim), (dim, dim)), requires_grad=True)


def _vector(rng, n):
    return Tensor(rng.normal(0, 1.0 / np.sqrt(n), n), requires_grad=True)


# -- intra-type (dual graph) --------------------------------------------------------

def _pair_attention(feats, pairs, att, n_nodes):
    d = feats.shape[1]
    left = feats @ att.take(np.arange(d))
    right = feats @ att.take(np.arange(d, 2 * d))
    logits = left.take(pairs[:, 0]) + right.take(pairs[:, 1])
    return segment_softmax(logits, pairs[:, 0], n_nodes)


def intra_relation_attention(state, dual, params):
    """Neighbour pairs (u, v) of the dual graph and their attention weights α_{u->v}."""
    pairs = dual.directed_neighbors()
    return pairs, _pair_attention(state.relations, pairs, params.att_rel, len(state.relations))


def _attend_and_update(feats, pairs, alpha, W, record):
    if len(pairs) == 0:
        return feats
    if record is not None:
        record.append((pairs[:, 0].copy(), alpha.data.copy()))
    msgs = (feats @ W).take(pairs[:, 1]) * alpha.reshape(-1, 1)
    return feats + index_add(msgs, pairs[:, 0], len(feats)).relu()


def intra_relation_step(state, dual, params, record=None):
    pairs, alpha = intra_relation_attention(state, dual, params)
    return _attend_and_update(state.relations, pairs, alpha, params.W_rel, record)


def intra_object_attention(state, dual, params):
    pairs = dual.object_neighbors(len(state.objects))
    return pairs, _pair_attention(state.objects, pairs, params.att_obj, len(state.objects))


def intra_object_step(state, dual, params, record=None):
    pairs, alpha = intra_object_attention(state, dual, params)
    return _attend_and_update(state.objects, pairs, alpha, params.W_obj, record)


# -- inter-type (heterogeneous graph) -------------------------------------------------

def _type_select(per_type, types, index):
    """Row ``index[k]`` of ``per_type[types[k]]`` for every k."""
    out = None
    for t, M in enumerate(per_type):
        mask = (types == t).astype(np.float64)[:, None]
        if not mask.any():
            continue
        term = M.take(index) * mask
        out = term if out is None else out + term
    return out


def inter_relation_attention(state, het, params):
    """Two-way subject/object split α for each edge (subject share)."""
    e = np.asarray(het.edges, dtype=np.int64).reshape(-1, 2)
    score = state.objects @ params.att_h
    return (score.take(e[:, 0]) - score.take(e[:, 1])).sigmoid()


def inter_relation_step(state, het, params, record=None):
    e = np.asarray(het.edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        return state.relations
    alpha = inter_relation_attention(state, het, params)
    if record is not None:
        record.append((np.repeat(np.arange(len(e)), 2), np.stack([alpha.data, 1 - alpha.data], 1).ravel()))
    types = np.asarray(het.edge_type, dtype=np.int64)
    subj = _type_select([state.objects @ W for W in params.W_subj], types, e[:, 0])
    obj = _type_select([state.objects @ W for W in params.W_objt], types, e[:, 1])
    a = alpha.reshape(-1, 1)
    return state.relations + (a * subj + (1.0 - a) * obj).relu()


def _incidence(edges, types, n_types):
    """Entries (object, edge, is_outgoing) sorted by (object, type, edge)."""
    m = len(edges)
    obj = np.concatenate([edges[:, 0], edges[:, 1]])
    edge = np.concatenate([np.arange(m), np.arange(m)])
    out = np.concatenate([np.ones(m, dtype=bool), np.zeros(m, dtype=bool)])
    seg = obj * n_types + types[edge]
    order = np.lexsort((edge, seg))
    return obj[order], edge[order], out[order], seg[order]


def inter_object_attention(state, het, params):
    e = np.asarray(het.edges, dtype=np.int64).reshape(-1, 2)
    n_types = het.n_types
    obj, edge, out, seg = _incidence(e, np.asarray(het.edge_type, dtype=np.int64), n_types)
    logits = (state.relations @ params.att_t).take(edge)
    return (obj, edge, out, seg), segment_softmax(logits, seg, len(state.objects) * n_types)


def inter_object_step(state, het, params, record=None):
    """Per-type attention over incident relations, then the type-averaged residual update.

    ``state.relations`` should already hold this layer's refined relation
    features.
    """
    e = np.asarray(het.edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        return state.objects
    n_obj, n_types = len(state.objects), het.n_types
    (obj, edge, out, seg), alpha = inter_object_attention(state, het, params)
    if record is not None:
        record.append((seg.copy(), alpha.data.copy()))
    types = np.asarray(het.edge_type, dtype=np.int64)[edge]
    R = state.relations
    both = [R @ W for W in params.W_out] + [R @ W for W in params.W_in]
    # pick W_out[t] for outgoing entries and W_in[t] for incoming ones
    which = np.where(out, types, n_types + types)
    msgs = _type_select(both, which, edge) * alpha.reshape(-1, 1)
    per_type = index_add(msgs, seg, n_obj * n_types).reshape(n_obj, n_types, -1).relu()
    return state.objects + per_type.sum(axis=1) * (1.0 / n_types)


def run_tamp(initial, het, dual, intra, inter, L_intra=2, L_inter=2, record=None):
    """Intra-type layers on the dual graph, then inter-type layers on the heterogeneous graph."""
    state = LayerState(initial.object_features, initial.relation_features)
    for _ in range(L_intra):
        rel = intra_relation_step(state, dual, intra, record)
        obj = intra_object_step(state, dual, intra, record)
        state = LayerState(obj, rel)
    for _ in range(L_inter):
        rel = inter_relation_step(state, het, inter, record)
        obj = inter_object_step(LayerState(state.objects, rel), het, inter, record)
        state = LayerState(obj, rel)
    return state
