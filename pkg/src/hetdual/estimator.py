"""Estimator front-ends: ``fit`` on scenes with ground truth, ``predict`` ranked scene graphs."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data_io import (Checkpoint, CooccurrenceStats, build_cooccurrence_stats, load_checkpoint,
                      save_checkpoint)
from .evaluation import evaluate_predictions
from .scene_model import RankedTriplet
from .training import (ModelConfig, ModelParams, TrainConfig, Prediction, _rank, infer, prepare_objects,
                       train)
from .validation import check_ontology, check_scenes

_MODEL_FIELDS = tuple(ModelConfig.__dataclass_fields__)


class TypeAwareSGG(BaseEstimator):
    """Scene graph generator with type-aware message passing on heterogeneous and dual graphs.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    ``random_state`` seeds initialisation and batch order.
    """

    def __init__(self, ontology=None, mode="predcls", hidden_dim=256, visual_proj_dim=128, box_dim=32,
                 class_dim=64, class_encoding="embedding", layers_intra=2, layers_inter=2, typed=True,
                 pair_strategy="full", s_b=600.0, s_l=1e-5, top_k=4096, normalize_distance=False,
                 max_objects=None, rels_per_pair=None, box_gain=16.0, message_init_scale=0.3,
                 learning_rate=0.008, batch_size=5, weight_decay=1e-5, epochs=10, loss_mode="bce_on_softmax",
                 random_state=0):
        self.ontology = ontology
        self.mode = mode
        self.hidden_dim = hidden_dim
        self.visual_proj_dim = visual_proj_dim
        self.box_dim = box_dim
        self.class_dim = class_dim
        self.class_encoding = class_encoding
        self.layers_intra = layers_intra
        self.layers_inter = layers_inter
        self.typed = typed
        self.pair_strategy = pair_strategy
        self.s_b = s_b
        self.s_l = s_l
        self.top_k = top_k
        self.normalize_distance = normalize_distance
        self.max_objects = max_objects
        self.rels_per_pair = rels_per_pair
        self.box_gain = box_gain
        self.message_init_scale = message_init_scale
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.loss_mode = loss_mode
        self.random_state = random_state

    def model_config(self):
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_FIELDS})

    def train_config(self):
        return TrainConfig(self.learning_rate, self.batch_size, self.weight_decay, self.epochs,
                           self.random_state, self.loss_mode, self.mode)

    def fit(self, X, y=None, val_scenes=None, stats=None, callback=None):
        """Train on scenes carrying ground-truth triplets (``y`` is unused)."""
        ontology = check_ontology(self.ontology)
        scenes = check_scenes(X, ontology, require_gt=True, mode=self.mode)
        if val_scenes is not None:
            val_scenes = check_scenes(val_scenes, ontology, require_gt=True)
        self.stats_ = stats if stats is not None else build_cooccurrence_stats(scenes, ontology)
        self.params_, self.history_ = train(scenes, ontology, self.stats_, self.train_config(),
                                            self.model_config(), val_scenes=val_scenes, callback=callback)
        self.n_features_in_ = self.params_.encoder.W_v.shape[0]
        return self

    def predict(self, X, mode=None):
        """One :class:`Prediction` per scene, in input order."""
        check_is_fitted(self, "params_")
        mode = mode or self.mode
        scenes = check_scenes(X, self.ontology, mode=mode)
        cfg = self.model_config()
        return [infer(s, self.params_, self.ontology, self.stats_, mode, cfg) for s in scenes]

    def predict_ranked(self, X, mode=None):
        scenes = check_scenes(X, self.ontology)
        return {s.scene_id: p.ranked() for s, p in zip(scenes, self.predict(scenes, mode))}

    def evaluate(self, X, ks=(20, 50, 100), mode=None):
        scenes = check_scenes(X, self.ontology, require_gt=True)
        return evaluate_predictions(self.predict_ranked(scenes, mode), scenes, self.ontology, ks)

    def score(self, X, y=None):
        """mR@50 as a fraction."""
        return self.evaluate(X, ks=(50,)).mr_at[50]

    # -- persistence -------------------------------------------------------------------

    def to_checkpoint(self, optimizer_state=None):
        check_is_fitted(self, "params_")
        arrays = self.params_.to_arrays()
        arrays["stats.counts"] = self.stats_.counts
        arrays["stats.pair_prob"] = self.stats_.pair_prob
        config = {k: v for k, v in self.get_params().items() if k != "ontology"}
        return Checkpoint(arrays, self.ontology.digest(), config,
                          optimizer_state or {"optimizer": "sgd", "epochs_done": len(self.history_)})

    def save(self, path):
        save_checkpoint(self.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ckpt, ontology):
        est = cls(ontology=ontology, **ckpt.config)
        arrays = dict(ckpt.params)
        est.stats_ = CooccurrenceStats(arrays.pop("stats.counts"), arrays.pop("stats.pair_prob"))
        visual_dim = arrays["encoder.W_v"].shape[0]
        est.params_ = ModelParams.init(np.random.default_rng(0), visual_dim, ontology, est.model_config())
        est.params_.load_arrays(arrays)
        est.n_features_in_ = visual_dim
        est.history_ = []
        return est

    @classmethod
    def load(cls, path, ontology):
        return cls.from_checkpoint(load_checkpoint(path, ontology), ontology)


class FrequencyPrior(BaseEstimator):
    """Baseline: every candidate pair gets the relation seen most often for its class pair."""

    def __init__(self, ontology=None, mode="predcls"):
        self.ontology = ontology
        self.mode = mode

    def fit(self, X, y=None):
        ontology = check_ontology(self.ontology)
        scenes = check_scenes(X, ontology, require_gt=True)
        nc, nr = ontology.n_objects, ontology.n_relations
        counts = np.zeros((nc, nc, nr))
        for s in scenes:
            for t in s.gt_triplets:
                counts[t.s_label, t.o_label, t.rel] += 1
        self.counts_ = counts
        glob = counts.sum(axis=(0, 1))
        self.global_dist_ = glob / glob.sum() if glob.sum() else np.full(nr, 1.0 / nr)
        return self

    def _rel_dist(self, a, b):
        row = self.counts_[a, b]
        return row / row.sum() if row[1:].sum() else self.global_dist_

    def predict_ranked(self, X, mode=None):
        check_is_fitted(self, "counts_")
        mode = mode or self.mode
        out = {}
        for s in check_scenes(X, self.ontology, mode=mode):
            objs, _ = prepare_objects(s, mode, self.ontology.n_objects)
            n = len(objs)
            edges = np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=np.int64).reshape(-1, 2)
            rel = np.array([self._rel_dist(objs.labels[i], objs.labels[j]) for i, j in edges]).reshape(
                len(edges), self.ontology.n_relations)
            override = objs.labels if mode == "predcls" else None
            pred = _rank(objs.distributions, rel, edges, override, rels_per_pair=1)
            pred.labels = objs.labels
            pred.boxes = objs.boxes
            out[s.scene_id] = pred.ranked()
        return out

    def evaluate(self, X, ks=(20, 50, 100), mode=None):
        scenes = check_scenes(X, self.ontology, require_gt=True)
        return evaluate_predictions(self.predict_ranked(scenes, mode), scenes, self.ontology, ks)


__all__ = ["TypeAwareSGG", "FrequencyPrior", "Prediction", "RankedTriplet"]
