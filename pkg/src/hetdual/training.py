"""Classification heads, loss, SGD training and inference for the three evaluation modes."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxes as bx
from .autodiff import Tensor, softmax
from .feature_encoding import EncoderParams, encode_objects, encode_relations
from .graph_construction import (InitialGraph, PairSelectionParams, assign_relation_types,
                                 build_dual_graph, select_pairs_variant)
from .message_passing import InterParams, IntraParams, run_tamp
from .scene_model import BACKGROUND, ObjectSet, RankedTriplet, Triplet

log = logging.getLogger(__name__)

MODES = ("predcls", "sgcls", "sgdet")
LOSS_MODES = ("bce_on_softmax", "cross_entropy")


class UsageError(ValueError):
    """Inputs do not meet the requirements of the requested mode."""


class TrainingDiverged(FloatingPointError):
    """Loss or gradient went non-finite; ``last_good`` holds the previous parameters."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    visual_proj_dim: int = 128
    box_dim: int = 32
    class_dim: int = 64
    class_encoding: str = "embedding"
    layers_intra: int = 2
    layers_inter: int = 2
    typed: bool = True
    pair_strategy: str = "full"
    s_b: float = 600.0
    s_l: float = 1e-5
    top_k: int = 4096
    normalize_distance: bool = False
    max_objects: int | None = None
    rels_per_pair: int | None = None   # foreground relations ranked per pair; None ranks all
    box_gain: float = 16.0             # init gain of the box projection
    message_init_scale: float = 0.3    # init scale of the residual message weights

    @property
    def n_types(self):
        return 2 if self.typed else 1

    def selection_params(self):
        return PairSelectionParams(self.s_b, self.s_l, self.top_k, normalize_distance=self.normalize_distance)


@dataclass
class TrainConfig:
    learning_rate: float = 0.008
    batch_size: int = 5
    weight_decay: float = 1.0e-5
    epochs: int = 10
    seed: int = 0
    loss_mode: str = "bce_on_softmax"
    mode: str = "predcls"

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError("learning rate and weight decay must be >= 0, batch size >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class HeadParams:
    W_obj: Tensor
    W_rel: Tensor
    W_pre: Tensor

    @classmethod
    def init(cls, rng, dim, n_classes, n_relations):
        def lin(n_out):
            return Tensor(rng.normal(0, 1.0 / np.sqrt(dim), (dim, n_out)), requires_grad=True)
        return cls(lin(n_classes), lin(n_relations), lin(n_relations))

    def tensors(self):
        return {"W_obj": self.W_obj, "W_rel": self.W_rel, "W_pre": self.W_pre}


@dataclass
class ModelParams:
    encoder: EncoderParams
    intra: IntraParams
    inter: InterParams
    heads: HeadParams

    @classmethod
    def init(cls, rng, visual_dim, ontology, cfg):
        enc = EncoderParams.init(rng, visual_dim, ontology.n_objects, cfg.visual_proj_dim, cfg.box_dim,
                                 cfg.class_dim, cfg.hidden_dim, cfg.class_encoding, cfg.box_gain)
        scale = cfg.message_init_scale
        return cls(enc, IntraParams.init(rng, cfg.hidden_dim, scale),
                   InterParams.init(rng, cfg.hidden_dim, cfg.n_types, scale),
                   HeadParams.init(rng, cfg.hidden_dim, ontology.n_objects, ontology.n_relations))

    def named(self):
        """Trainable tensors keyed ``group.name``."""
        out = {}
        for group in ("encoder", "intra", "inter", "heads"):
            for name, t in getattr(self, group).tensors().items():
                if t.requires_grad:
                    out[f"{group}.{name}"] = t
        return out

    def to_arrays(self):
        return {k: t.data.copy() for k, t in self.named().items()}

    def load_arrays(self, arrays):
        named = self.named()
        if set(named) != set(arrays):
            raise ValueError(f"parameter names differ: {sorted(set(named) ^ set(arrays))}")
        for k, t in named.items():
            if t.data.shape != arrays[k].shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.data.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def zero_grad(self):
        for t in self.named().values():
            t.grad = None


@dataclass
class Prediction:
    obj_dist: np.ndarray
    rel_dist: np.ndarray
    edges: np.ndarray
    triplets: list
    labels: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def ranked(self):
        return [RankedTriplet(t.subject_idx, t.object_idx, t.relation, t.score,
                              tuple(self.boxes[t.subject_idx].tolist()), tuple(self.boxes[t.object_idx].tolist()),
                              int(self.labels[t.subject_idx]), int(self.labels[t.object_idx]))
                for t in self.triplets]


# -- inputs per mode -----------------------------------------------------------------

def prepare_objects(scene, mode, n_classes, feature_dim=None, max_objects=None):
    """The object set the model sees, plus the GT-object index of each entry (or -1).

    predcls / sgcls use the ground-truth boxes; each borrows the visual
    feature of its best-overlapping detection. predcls also substitutes
    the GT label with a one-hot distribution.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}")
    det = ObjectSet.from_scene(scene, n_classes, feature_dim)
    if mode == "sgdet":
        if max_objects is not None and len(det) > max_objects:
            keep = np.sort(np.argsort(-det.distributions.max(axis=1), kind="stable")[:max_objects])
            det = ObjectSet(det.boxes[keep], det.features[keep], det.labels[keep], det.distributions[keep],
                            det.width, det.height)
        return det, np.full(len(det), -1, dtype=np.int64)
    if not scene.has_gt:
        raise UsageError(f"mode {mode} needs ground truth but scene {scene.scene_id} has none")
    gt = scene.gt_objects()
    gboxes = np.array([b for b, _ in gt], dtype=np.float64)
    glabels = np.array([lab for _, lab in gt], dtype=np.int64)
    dim = det.features.shape[1] if len(det) else (feature_dim or 0)
    feats = np.zeros((len(gt), dim))
    dists = np.zeros((len(gt), n_classes))
    labels = glabels.copy()
    overlap = bx.iou(gboxes, det.boxes) if len(det) else np.zeros((len(gt), 0))
    for k in range(len(gt)):
        best = int(np.argmax(overlap[k])) if overlap.shape[1] else -1
        if best >= 0 and overlap[k, best] > 0:
            feats[k] = det.features[best]
            if mode == "sgcls":
                dists[k] = det.distributions[best]
                labels[k] = det.labels[best]
        elif mode == "sgcls":
            dists[k] = 1.0 / n_classes
            labels[k] = 0
        if mode == "predcls":
            dists[k, glabels[k]] = 1.0
    return ObjectSet(gboxes, feats, labels, dists, scene.width, scene.height), np.arange(len(gt))


def build_targets(scene, objects, gt_index, edges, mode, iou_threshold=0.5):
    """Object class per node (-1 when unmatched) and relation class per edge (background if unmatched)."""
    n, m = len(objects), len(edges)
    obj_t = np.full(n, -1, dtype=np.int64)
    rel_t = np.zeros(m, dtype=np.int64)
    if not scene.gt_triplets:
        return obj_t, rel_t
    gt = scene.gt_objects()
    if mode in ("predcls", "sgcls"):
        obj_t = np.array([gt[g][1] for g in gt_index], dtype=np.int64)
        key = {k: i for i, k in enumerate(gt)}
        lookup = {}
        for t in scene.gt_triplets:
            pair = (key[(tuple(t.s_box), t.s_label)], key[(tuple(t.o_box), t.o_label)])
            lookup.setdefault(pair, t.rel)
        for e, (i, j) in enumerate(edges):
            rel_t[e] = lookup.get((int(gt_index[i]), int(gt_index[j])), BACKGROUND)
        return obj_t, rel_t
    gboxes = np.array([b for b, _ in gt], dtype=np.float64)
    if n:
        ov = bx.iou(objects.boxes, gboxes)
        best = ov.argmax(axis=1)
        ok = ov[np.arange(n), best] >= iou_threshold
        obj_t[ok] = np.array([gt[g][1] for g in best[ok]], dtype=np.int64)
    for e, (i, j) in enumerate(edges):
        for t in scene.gt_triplets:
            if (objects.labels[i] == t.s_label and objects.labels[j] == t.o_label
                    and bx.iou(objects.boxes[i], t.s_box)[0, 0] >= iou_threshold
                    and bx.iou(objects.boxes[j], t.o_box)[0, 0] >= iou_threshold):
                rel_t[e] = t.rel
                break
    return obj_t, rel_t


@dataclass
class SceneCache:
    """Parameter-independent structure of one scene: objects, edges, dual graph, targets."""
    scene_id: str
    objects: ObjectSet
    edges: np.ndarray
    dual: object
    obj_targets: np.ndarray
    rel_targets: np.ndarray


def prepare_scene(scene, ontology, stats, model_cfg, mode, with_targets=True, embeddings=None, feature_dim=None):
    objects, gt_index = prepare_objects(scene, mode, ontology.n_objects, feature_dim, model_cfg.max_objects)
    edges = select_pairs_variant(model_cfg.pair_strategy, objects, stats, model_cfg.selection_params(),
                                 embeddings=embeddings)
    if with_targets and scene.has_gt:
        obj_t, rel_t = build_targets(scene, objects, gt_index, edges, mode)
    else:
        obj_t, rel_t = np.full(len(objects), -1, dtype=np.int64), np.zeros(len(edges), dtype=np.int64)
    return SceneCache(scene.scene_id, objects, edges, build_dual_graph(edges), obj_t, rel_t)


# -- forward / loss ----------------------------------------------------------------------

@dataclass
class ForwardResult:
    obj_probs: Tensor
    rel_probs: Tensor
    pre_probs: Tensor
    edge_type: np.ndarray


def forward(params, cache, ontology, model_cfg, record=None):
    objs = cache.objects
    f_obj = encode_objects(objs, params.encoder)
    f_rel = encode_relations(f_obj, cache.edges, objs, params.encoder)
    initial = InitialGraph(len(objs), cache.edges, f_obj, f_rel)
    het = assign_relation_types(initial, params.heads.W_pre, ontology, model_cfg.n_types)
    state = run_tamp(initial, het, cache.dual, params.intra, params.inter,
                     model_cfg.layers_intra, model_cfg.layers_inter, record)
    obj_probs = softmax(state.objects @ params.heads.W_obj, axis=1)
    if len(cache.edges):
        rel_probs = softmax(state.relations @ params.heads.W_rel, axis=1)
    else:
        rel_probs = Tensor(np.zeros((0, ontology.n_relations)))
    return ForwardResult(obj_probs, rel_probs, het.pre_distribution, het.edge_type)


def classify(state, heads, edges=None, override_labels=None, rels_per_pair=None):
    """Softmax both heads over final features and rank (subject, relation, object) triplets.

    Triplet score is max p_subject * best non-background p_relation *
    max p_object; with ``override_labels`` (predcls) the label scores are 1.
    Each pair contributes its ``rels_per_pair`` best foreground relations
    (all of them by default); top-K truncation happens at evaluation.
    """
    obj_dist = softmax(state.objects @ heads.W_obj, axis=1).data
    if len(state.relations):
        rel_dist = softmax(state.relations @ heads.W_rel, axis=1).data
    else:
        rel_dist = np.zeros((0, heads.W_rel.shape[1]))
    return _rank(obj_dist, rel_dist, edges, override_labels, rels_per_pair)


def _rank(obj_dist, rel_dist, edges, override_labels=None, rels_per_pair=None):
    edges = np.zeros((0, 2), dtype=np.int64) if edges is None else np.asarray(edges, dtype=np.int64)
    if override_labels is not None:
        labels = np.asarray(override_labels, dtype=np.int64)
        obj_score = np.ones(len(labels))
    else:
        labels = obj_dist.argmax(axis=1) if len(obj_dist) else np.zeros(0, dtype=np.int64)
        obj_score = obj_dist.max(axis=1) if len(obj_dist) else np.zeros(0)
    m = len(edges)
    if m == 0:
        return Prediction(obj_dist, rel_dist, edges, [], labels)
    fg = np.asarray(rel_dist)[:, 1:]
    per_pair = fg.shape[1] if rels_per_pair is None else min(rels_per_pair, fg.shape[1])
    rel = np.argsort(-fg, axis=1, kind="stable")[:, :per_pair].ravel()
    edge_idx = np.repeat(np.arange(m), per_pair)
    rank_in_pair = np.tile(np.arange(per_pair), m)
    score = obj_score[edges[edge_idx, 0]] * fg[edge_idx, rel] * obj_score[edges[edge_idx, 1]]
    # descending score; ties broken by edge order, then by rank within the pair
    order = np.lexsort((rank_in_pair, edge_idx, -score))
    triplets = [Triplet(int(edges[edge_idx[k], 0]), int(edges[edge_idx[k], 1]), int(rel[k]) + 1, float(score[k]))
                for k in order]
    return Prediction(obj_dist, rel_dist, edges, triplets, labels)


def _bce(probs, onehot):
    p = probs.clip(1e-12, 1.0 - 1e-12)
    y = Tensor(onehot)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def _ce(probs, onehot):
    return -((Tensor(onehot) * probs.clip(1e-300, 1.0).log()).sum(axis=1)).mean()


def classification_loss(probs, targets, n_classes, loss_mode="bce_on_softmax"):
    targets = np.asarray(targets, dtype=np.int64)
    valid = np.nonzero(targets >= 0)[0]
    if len(valid) == 0:
        return Tensor(0.0)
    onehot = np.zeros((len(valid), n_classes))
    onehot[np.arange(len(valid)), targets[valid]] = 1.0
    p = probs.take(valid) if len(valid) != len(targets) else probs
    return _bce(p, onehot) if loss_mode == "bce_on_softmax" else _ce(p, onehot)


def total_loss(result, obj_targets, rel_targets, loss_mode="bce_on_softmax"):
    """L_obj + L_rel. Nodes with target -1 are left out of L_obj."""
    n_c = result.obj_probs.shape[1] if result.obj_probs.data.ndim == 2 else 0
    n_r = result.rel_probs.shape[1]
    return (classification_loss(result.obj_probs, obj_targets, n_c, loss_mode)
            + classification_loss(result.rel_probs, rel_targets, n_r, loss_mode))


def training_objective(result, cache, model_cfg, loss_mode):
    """Total loss plus the pre-classifier's loss on the same relation targets."""
    loss = total_loss(result, cache.obj_targets, cache.rel_targets, loss_mode)
    if model_cfg.typed and len(cache.edges):
        loss = loss + classification_loss(result.pre_probs, cache.rel_targets, result.pre_probs.shape[1], loss_mode)
    return loss


def backward(loss, params):
    """Fill ``.grad`` of every parameter; raises on non-finite gradients."""
    params.zero_grad()
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for k, t in params.named().items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {k}")
        grads[k] = g
    return grads


def sgd_step(params, grads, lr, weight_decay):
    """Plain SGD with decoupled-form weight decay: p <- p (1 - lr wd) - lr g."""
    shrink = 1.0 - lr * weight_decay
    for k, t in params.named().items():
        t.data = t.data * shrink - lr * grads[k]


# -- loop --------------------------------------------------------------------------------

def train(scenes, ontology, stats, train_cfg, model_cfg=None, val_scenes=None, params=None, callback=None):
    """SGD over mini-batches of scenes. Returns (params, history).

    Per-epoch recall is measured on ``val_scenes``, or on the training
    scenes when it is None; an empty sequence turns the measurement off.
    """
    model_cfg = model_cfg or ModelConfig()
    if train_cfg.mode not in MODES:
        raise UsageError(f"unknown mode {train_cfg.mode!r}")
    for s in scenes:
        if not s.has_gt:
            raise UsageError(f"training scene {s.scene_id} has no ground truth")
    seed_init, seed_order = np.random.SeedSequence(train_cfg.seed).spawn(2)
    feature_dim = _feature_dim(scenes)
    if params is None:
        params = ModelParams.init(np.random.default_rng(seed_init), feature_dim, ontology, model_cfg)
    order_rng = np.random.default_rng(seed_order)
    caches = [prepare_scene(s, ontology, stats, model_cfg, train_cfg.mode,
                            embeddings=_embedding(params), feature_dim=feature_dim) for s in scenes]
    eval_scenes = scenes if val_scenes is None else list(val_scenes)
    history = []
    for epoch in range(train_cfg.epochs):
        order = order_rng.permutation(len(caches))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [caches[i] for i in order[start:start + train_cfg.batch_size]]
            snapshot = params.to_arrays()
            loss = None
            for c in batch:
                term = training_objective(forward(params, c, ontology, model_cfg), c, model_cfg, train_cfg.loss_mode)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss", last_good=snapshot)
            try:
                grads = backward(loss, params)
            except TrainingDiverged as e:
                e.last_good = snapshot
                raise
            sgd_step(params, grads, train_cfg.learning_rate, train_cfg.weight_decay)
            losses.append(float(loss.data))
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else 0.0}
        if eval_scenes:
            record.update(_validation_metrics(params, eval_scenes, ontology, stats, train_cfg, model_cfg,
                                              feature_dim))
        history.append(record)
        log.info("epoch %d %s", record["epoch"],
                 " ".join(f"{k} {v:.4f}" for k, v in record.items() if k != "epoch"))
        if callback is not None:
            callback(record, params)
    return params, history


def _validation_metrics(params, scenes, ontology, stats, train_cfg, model_cfg, feature_dim):
    from .evaluation import match_triplets, mean_recall_at_k, recall_at_k

    losses, ranks, rels = [], [], []
    for s in scenes:
        c = prepare_scene(s, ontology, stats, model_cfg, train_cfg.mode, embeddings=_embedding(params),
                          feature_dim=feature_dim)
        res = forward(params, c, ontology, model_cfg)
        losses.append(float(training_objective(res, c, model_cfg, train_cfg.loss_mode).data))
        ranked = _prediction_from(res, c, train_cfg.mode, model_cfg).ranked()[:100]
        ranks.append(match_triplets(ranked, s.gt_triplets))
        rels.append([t.rel for t in s.gt_triplets])
    out = {"val_loss": float(np.mean(losses)) if losses else 0.0}
    for k in (50, 100):
        out[f"r{k}"] = recall_at_k(ranks, k)
        out[f"mr{k}"] = mean_recall_at_k(ranks, rels, k)[0]
    return out


def _feature_dim(scenes):
    for s in scenes:
        if s.objects:
            return len(s.objects[0].visual_feature)
    return 0


def _embedding(params):
    return params.encoder.class_embedding.data


def _prediction_from(res, cache, mode, model_cfg):
    override = cache.objects.labels if mode == "predcls" else None
    pred = _rank(res.obj_probs.data, res.rel_probs.data, cache.edges, override, model_cfg.rels_per_pair)
    pred.boxes = cache.objects.boxes
    return pred


def infer(scene, params, ontology, stats, mode, model_cfg=None, record=None):
    """Full pipeline on one scene: encode, select pairs, build graphs, message passing, classify."""
    model_cfg = model_cfg or ModelConfig()
    feature_dim = params.encoder.W_v.shape[0]
    cache = prepare_scene(scene, ontology, stats, model_cfg, mode, with_targets=False,
                          embeddings=_embedding(params), feature_dim=feature_dim)
    res = forward(params, cache, ontology, model_cfg, record)
    return _prediction_from(res, cache, mode, model_cfg)


def config_snapshot(train_cfg, model_cfg):
    return {"train": asdict(train_cfg), "model": asdict(model_cfg)}
