import math

import numpy as np
import pytest

from hetdual.autodiff import Tensor, softmax
from hetdual.data_io import build_cooccurrence_stats
from hetdual.training import (ModelConfig, ModelParams, TrainConfig, TrainingDiverged, UsageError, _rank,
                              backward, classification_loss, forward, infer, prepare_objects, prepare_scene,
                              sgd_step, total_loss, train, training_objective)

from conftest import random_scene
from oracles import max_relative_error


def test_uniform_two_class_bce_is_ln2():
    loss = classification_loss(Tensor(np.full((3, 2), 0.5)), [0, 1, 1], 2)
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_matches_scalar_loop(rng):
    probs = softmax(Tensor(rng.normal(size=(4, 5))), axis=1).data
    targets = [2, 0, 4, 1]
    expect = 0.0
    for i, t in enumerate(targets):
        for c in range(5):
            y = 1.0 if c == t else 0.0
            expect -= y * math.log(probs[i, c]) + (1 - y) * math.log(1 - probs[i, c])
    expect /= 20
    assert float(classification_loss(Tensor(probs), targets, 5).data) == pytest.approx(expect, abs=1e-9)


def test_unmatched_nodes_are_left_out():
    probs = Tensor(np.full((2, 2), 0.5))
    assert float(classification_loss(probs, [-1, -1], 2).data) == 0.0
    assert float(classification_loss(probs, [-1, 0], 2).data) == pytest.approx(math.log(2))


def test_perfect_prediction_has_vanishing_loss():
    p = Tensor(np.array([[1 - 1e-9, 1e-9], [1e-9, 1 - 1e-9]]))
    assert float(classification_loss(p, [0, 1], 2).data) < 1e-7


def test_two_class_linear_gradient_closed_form(rng):
    x = rng.normal(size=(1, 3))
    W = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    p = softmax(Tensor(x) @ W, axis=1)
    classification_loss(p, [0], 2).backward()
    p1 = p.data[0, 1]
    np.testing.assert_allclose(W.grad, np.outer(x[0], [-p1, p1]), atol=1e-12)


def test_zero_head_weights_give_uniform_outputs(toy, small_params, small_cfg, synth_small, synth_stats):
    small_params.heads.W_obj.data[:] = 0
    small_params.heads.W_rel.data[:] = 0
    cache = prepare_scene(synth_small[0], toy, synth_stats, small_cfg, "predcls")
    res = forward(small_params, cache, toy, small_cfg)
    np.testing.assert_allclose(res.obj_probs.data, 1.0 / toy.n_objects, atol=1e-15)
    np.testing.assert_allclose(res.rel_probs.data, 1.0 / toy.n_relations, atol=1e-15)


def test_weight_decay_shrinks_by_exact_factor(small_params):
    before = small_params.to_arrays()
    zeros = {k: np.zeros_like(v) for k, v in before.items()}
    sgd_step(small_params, zeros, 0.1, 0.01)
    for k, v in small_params.to_arrays().items():
        np.testing.assert_array_equal(v, before[k] * (1 - 0.1 * 0.01))


def test_learning_rate_zero_keeps_parameters(toy, synth_small, synth_stats, small_cfg):
    params = ModelParams.init(np.random.default_rng(0), 16, toy, small_cfg)
    before = params.to_arrays()
    train(synth_small[:6], toy, synth_stats, TrainConfig(learning_rate=0.0, weight_decay=0.0, epochs=2),
          small_cfg, val_scenes=[], params=params)
    for k, v in params.to_arrays().items():
        assert np.array_equal(v, before[k])


def test_parameter_outside_the_graph_gets_zero_gradient(toy, synth_small, synth_stats):
    cfg = ModelConfig(hidden_dim=8, visual_proj_dim=4, box_dim=2, class_dim=3, layers_intra=0, layers_inter=1)
    params = ModelParams.init(np.random.default_rng(0), 16, toy, cfg)
    cache = prepare_scene(synth_small[0], toy, synth_stats, cfg, "predcls")
    grads = backward(training_objective(forward(params, cache, toy, cfg), cache, cfg, "bce_on_softmax"), params)
    for name in ("intra.W_rel", "intra.W_obj", "intra.att_rel", "intra.att_obj"):
        assert np.all(grads[name] == 0)


def test_full_pipeline_gradient_check(toy, synth_stats, rng):
    cfg = ModelConfig(hidden_dim=6, visual_proj_dim=4, box_dim=3, class_dim=3, layers_intra=1, layers_inter=1)
    scene = random_scene(rng, toy.n_objects, toy.n_relations, n_objects=3, feature_dim=16, n_triplets=2)
    params = ModelParams.init(np.random.default_rng(1), 16, toy, cfg)
    cache = prepare_scene(scene, toy, synth_stats, cfg, "sgdet")
    loss_fn = lambda: float(training_objective(forward(params, cache, toy, cfg), cache, cfg, "bce_on_softmax").data)  # noqa: E731
    backward(training_objective(forward(params, cache, toy, cfg), cache, cfg, "bce_on_softmax"), params)
    err, where, _ = max_relative_error(loss_fn, params.named(), rng, per_tensor=4)
    assert err < 1e-4, where


def test_training_reduces_loss_and_is_deterministic(toy, synth_small, synth_stats, small_cfg):
    tc = TrainConfig(epochs=4, learning_rate=0.05)
    p1, h1 = train(synth_small, toy, synth_stats, tc, small_cfg, val_scenes=synth_small[:4])
    p2, h2 = train(synth_small, toy, synth_stats, tc, small_cfg, val_scenes=synth_small[:4])
    assert h1[-1]["train_loss"] < h1[0]["train_loss"]
    assert h1 == h2
    for k, v in p1.to_arrays().items():
        assert np.array_equal(v, p2.to_arrays()[k])
    assert set(h1[0]) == {"epoch", "train_loss", "val_loss", "r50", "r100", "mr50", "mr100"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_last_good_parameters(toy, synth_small, synth_stats, small_cfg):
    with pytest.raises(TrainingDiverged) as info:
        train(synth_small[:5], toy, synth_stats, TrainConfig(epochs=3, learning_rate=1e200), small_cfg,
              val_scenes=[])
    assert info.value.last_good is not None


def test_modes_and_missing_ground_truth(toy, synth_small, rng):
    scene = synth_small[0]
    objs, idx = prepare_objects(scene, "predcls", toy.n_objects)
    assert np.all(objs.distributions.max(axis=1) == 1.0) and np.all(idx >= 0)
    objs, _ = prepare_objects(scene, "sgcls", toy.n_objects)
    assert len(objs) == len(scene.gt_objects())
    det, idx = prepare_objects(scene, "sgdet", toy.n_objects)
    assert len(det) == len(scene.objects) and np.all(idx == -1)
    bare = random_scene(rng, toy.n_objects, toy.n_relations, n_objects=1)
    with pytest.raises(UsageError):
        prepare_objects(bare, "predcls", toy.n_objects)
    with pytest.raises(UsageError):
        prepare_objects(scene, "detect", toy.n_objects)


def test_inference_edge_cases(toy, small_params, small_cfg, synth_stats, synth_small, rng):
    lone = random_scene(rng, toy.n_objects, toy.n_relations, n_objects=1, feature_dim=16)
    assert infer(lone, small_params, toy, synth_stats, "sgdet", small_cfg).triplets == []
    a = infer(synth_small[1], small_params, toy, synth_stats, "predcls", small_cfg)
    b = infer(synth_small[1], small_params, toy, synth_stats, "predcls", small_cfg)
    assert a.triplets == b.triplets
    np.testing.assert_allclose(a.rel_dist.sum(axis=1), 1.0, atol=1e-12)


def test_ranking_order_and_rels_per_pair():
    obj = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    rel = np.array([[0.1, 0.6, 0.3], [0.1, 0.3, 0.6], [0.2, 0.4, 0.4]])
    edges = np.array([[0, 1], [1, 2], [2, 0]])
    full = _rank(obj, rel, edges)
    scores = [t.score for t in full.triplets]
    assert scores == sorted(scores, reverse=True) and len(full.triplets) == 6
    # ties: edge order first, then rank within the pair
    tied = _rank(obj, np.array([[0, 0.5, 0.5]] * 3), edges, override_labels=[0, 1, 0], rels_per_pair=2)
    assert [(t.subject_idx, t.relation) for t in tied.triplets] == [(0, 1), (0, 2), (1, 1), (1, 2), (2, 1), (2, 2)]
    top1 = _rank(obj, rel, edges, rels_per_pair=1)
    assert [t.relation for t in top1.triplets if t.subject_idx == 1] == [2]
    assert _rank(obj, np.zeros((0, 3)), np.zeros((0, 2))).triplets == []


def test_total_loss_adds_object_and_relation_terms(toy, small_params, small_cfg, synth_small, synth_stats):
    cache = prepare_scene(synth_small[2], toy, synth_stats, small_cfg, "predcls")
    res = forward(small_params, cache, toy, small_cfg)
    both = float(total_loss(res, cache.obj_targets, cache.rel_targets).data)
    parts = (float(classification_loss(res.obj_probs, cache.obj_targets, toy.n_objects).data)
             + float(classification_loss(res.rel_probs, cache.rel_targets, toy.n_relations).data))
    assert both == pytest.approx(parts, abs=1e-12)


def test_train_config_domain():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="hinge")
