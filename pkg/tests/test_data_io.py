import json

import numpy as np
import pytest

from hetdual.data_io import (Checkpoint, CheckpointError, CheckpointMismatch, SyntheticConfig,
                             build_cooccurrence_stats, generate_synthetic_dataset, load_checkpoint,
                             load_predictions, load_scenes, load_stats, rule_ceiling, save_checkpoint,
                             save_predictions, save_scenes, save_stats, scene_to_dict)
from hetdual.scene_model import (ConfigError, DetectedObject, GTTriplet, Ontology, RankedTriplet, Scene,
                                 SchemaError, default_vg_ontology)
from hetdual.training import ModelConfig, ModelParams


def _scene_dict(sid, n_obj=3, n_classes=3, label=0):
    return {"scene_id": sid, "width": 100, "height": 80,
            "objects": [{"box": [k, k, k + 10, k + 10], "feature": [0.1 * k, 1.0], "label": label,
                         "distribution": np.eye(n_classes)[label].tolist()} for k in range(n_obj)]}


def test_load_two_scenes(tmp_path, tiny_ontology):
    p = tmp_path / "s.jsonl"
    p.write_text("\n".join(json.dumps(_scene_dict(f"s{k}")) for k in range(2)) + "\n")
    scenes = load_scenes(p, tiny_ontology)
    assert [len(s.objects) for s in scenes] == [3, 3]


def test_bad_distribution_and_class_index(tmp_path, tiny_ontology):
    d = _scene_dict("a")
    d["objects"][0]["distribution"] = [0.5, 0.3, 0.0]
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(d) + "\n")
    with pytest.raises(SchemaError):
        load_scenes(p, tiny_ontology)
    d = _scene_dict("b", n_classes=4, label=3)
    p.write_text(json.dumps(d) + "\n")
    with pytest.raises(SchemaError, match="distribution length|class index out of range"):
        load_scenes(p, tiny_ontology)


def _man_horse():
    onto = Ontology(["man", "horse", "hat"], ["__background__", "riding"], {"riding": "interactive"})
    man, horse = (0, 0, 10, 10), (5, 5, 20, 20)
    objs = [DetectedObject(man, [0.0], 0, [1, 0, 0]), DetectedObject(horse, [0.0], 1, [0, 1, 0])]
    return onto, Scene("x", 50, 50, objs, [GTTriplet(man, 0, 1, horse, 1)])


def test_cooccurrence_smoothing():
    onto, scene = _man_horse()
    stats = build_cooccurrence_stats([scene], onto)
    assert stats.counts[0, 1] == 1
    assert stats.pair_prob[0, 1] == pytest.approx(0.5)
    np.testing.assert_allclose(stats.pair_prob.sum(axis=1), 1.0)
    triple = build_cooccurrence_stats([scene] * 3, onto)
    assert triple.counts[0, 1] == 3


def test_empty_corpus_gives_uniform_stats(caplog):
    onto = Ontology(["a", "b"], ["__background__", "r"], {"r": "interactive"})
    stats = build_cooccurrence_stats([Scene("e", 10, 10, [], [])], onto)
    np.testing.assert_array_equal(stats.pair_prob, 0.5)
    assert "empty" in caplog.text


def test_stats_round_trip(tmp_path):
    onto, scene = _man_horse()
    stats = build_cooccurrence_stats([scene], onto)
    save_stats(stats, tmp_path / "st.json")
    back = load_stats(tmp_path / "st.json")
    np.testing.assert_array_equal(back.pair_prob, stats.pair_prob)


def test_scene_and_prediction_round_trip(tmp_path, synth_small):
    save_scenes(synth_small[:3], tmp_path / "a.jsonl")
    back = load_scenes(tmp_path / "a.jsonl")
    assert [scene_to_dict(s) for s in back] == [scene_to_dict(s) for s in synth_small[:3]]
    preds = [("s0", [RankedTriplet(0, 1, 2, 0.25, (0, 0, 1, 1), (1, 1, 2, 2), 3, 4)]), ("s1", [])]
    save_predictions(preds, tmp_path / "p.jsonl")
    assert load_predictions(tmp_path / "p.jsonl") == dict(preds)


def test_synthetic_is_deterministic(tmp_path, toy):
    cfg = SyntheticConfig(n_scenes=5, seed=7)
    save_scenes(generate_synthetic_dataset(cfg, toy), tmp_path / "a.jsonl")
    save_scenes(generate_synthetic_dataset(cfg, toy), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def _rel_counts(scenes, nr):
    c = np.zeros(nr)
    for s in scenes:
        for t in s.gt_triplets:
            c[t.rel] += 1
    return c[1:]


def test_longtail_slope_and_flat_exponent():
    onto = default_vg_ontology()
    cfg = SyntheticConfig(n_scenes=3400, objects_per_scene=(3, 4), triplets_per_scene=(3, 3), feature_dim=2,
                          longtail_exponent=2.0, seed=1)
    counts = _rel_counts(generate_synthetic_dataset(cfg, onto), onto.n_relations)
    assert counts.sum() >= 10000
    ranked = np.sort(counts)[::-1]
    keep = ranked > 0
    slope = np.polyfit(np.log(np.arange(1, len(ranked) + 1)[keep]), np.log(ranked[keep]), 1)[0]
    assert abs(slope + 2.0) <= 0.3
    flat = SyntheticConfig(n_scenes=3400, objects_per_scene=(3, 4), triplets_per_scene=(3, 3), feature_dim=2,
                           longtail_exponent=0.0, seed=1)
    counts = _rel_counts(generate_synthetic_dataset(flat, onto), onto.n_relations)
    assert counts.max() / counts.min() < 2


def test_unsatisfiable_rules(tiny_ontology):
    rules = {"0,1": [0, 1.0, 0, 0]}  # nothing supports relations 2 and 3
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticConfig(n_scenes=1, rules=rules), tiny_ontology)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticConfig(n_scenes=1, rules={"0,1": [0.5, 0.5, 0, 0]}), tiny_ontology)


def test_gt_follows_rule_table_and_ceiling(toy):
    from hetdual.data_io import default_rule_table
    rules = default_rule_table(toy, seed=0)
    scenes = generate_synthetic_dataset(SyntheticConfig(n_scenes=40, seed=0), toy)
    for s in scenes:
        for t in s.gt_triplets:
            assert rules[f"{t.s_label},{t.o_label}"][t.rel] > 0
    assert rule_ceiling(scenes, toy.n_relations) > 0.95


# -- checkpoints -------------------------------------------------------------------------

@pytest.fixture
def ckpt(toy):
    p = ModelParams.init(np.random.default_rng(0), 8, toy, ModelConfig(hidden_dim=6, visual_proj_dim=4, box_dim=2,
                                                                       class_dim=3))
    return Checkpoint(p.to_arrays(), toy.digest(), {"hidden_dim": 6}, {"epochs_done": 1})


def test_checkpoint_round_trip_is_bit_exact(tmp_path, toy, ckpt):
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", toy)
    assert set(back.params) == set(ckpt.params)
    for k, v in ckpt.params.items():
        assert np.array_equal(back.params[k], v)
    assert back.config == ckpt.config and back.optimizer_state == ckpt.optimizer_state


def test_checkpoint_ontology_mismatch(tmp_path, ckpt, tiny_ontology):
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m.ckpt", tiny_ontology)


def test_truncated_or_corrupt_checkpoint(tmp_path, ckpt):
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(blob[:100] + bytes([blob[100] ^ 1]) + blob[101:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
