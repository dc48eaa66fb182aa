import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetdual import boxes as bx
from hetdual.scene_model import (INTERACTIVE, NON_INTERACTIVE, DetectedObject, DomainError, Ontology, SchemaError,
                                 default_vg_ontology, load_ontology, longtail_partition_from_counts,
                                 relation_type_of, save_ontology, toy_ontology)


def test_vg_ontology_shape_and_types():
    o = default_vg_ontology()
    assert o.n_objects == 150 and o.n_relations == 51
    assert relation_type_of(o, o.relation_index("riding")) == INTERACTIVE
    assert relation_type_of(o, o.relation_index("on")) == NON_INTERACTIVE
    with pytest.raises(DomainError):
        relation_type_of(o, 0)
    assert set(o.longtail_partition) == set(o.relation_classes[1:])


def test_minimal_ontology_and_symbol_aliases():
    o = Ontology(["thing"], ["__background__", "r1"], {"r1": "φ"})
    assert o.type_map == {"r1": INTERACTIVE}


def test_untyped_relation_is_rejected():
    with pytest.raises(SchemaError, match="untyped relation: on"):
        Ontology(["a"], ["__background__", "on"], {})


def test_ontology_round_trip(tmp_path, tiny_ontology):
    path = tmp_path / "o.json"
    save_ontology(tiny_ontology, path)
    assert load_ontology(path) == tiny_ontology
    assert load_ontology(path).digest() == tiny_ontology.digest()


def test_malformed_ontology_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError):
        load_ontology(p)
    p.write_text(json.dumps({"object_classes": ["a"]}))
    with pytest.raises(SchemaError):
        load_ontology(p)


def test_toy_ontology_has_both_types_and_all_splits():
    o = toy_ontology()
    assert set(o.type_map.values()) == {INTERACTIVE, NON_INTERACTIVE}
    assert set(o.longtail_partition.values()) == {"head", "body", "tail"}


def test_longtail_partition_from_counts():
    split = longtail_partition_from_counts({"a": 60, "b": 30, "c": 9, "d": 1}, tail_share=0.05)
    assert split == {"a": "head", "b": "body", "c": "body", "d": "tail"}


def test_detected_object_validation():
    with pytest.raises(SchemaError):
        DetectedObject((0, 0, 1, 1), [0.0], 0, [0.5, 0.3])
    with pytest.raises(SchemaError):
        DetectedObject((5, 0, 1, 1), [0.0], 0, [1.0])


def test_union_box_examples():
    assert bx.union_box((0, 0, 10, 10), (5, 5, 20, 20)) == (0, 0, 20, 20)
    assert bx.union_box((0, 0, 1, 1), (9, 9, 10, 10)) == (0, 0, 10, 10)
    assert bx.union_box((1, 2, 3, 4), (1, 2, 3, 4)) == (1, 2, 3, 4)


def test_iou_values():
    a = np.array([[0, 0, 10, 10]])
    np.testing.assert_allclose(bx.iou(a, a), [[1.0]])
    np.testing.assert_allclose(bx.iou(a, [[5, 0, 15, 10]]), [[50 / 150]])
    np.testing.assert_allclose(bx.iou(a, [[20, 20, 30, 30]]), [[0.0]])


coord = st.floats(0, 100, allow_nan=False)
box = st.tuples(coord, coord, st.floats(1, 50), st.floats(1, 50)).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(box, box)
def test_union_is_commutative_idempotent_and_covering(a, b):
    u = bx.union_box(a, b)
    assert u == bx.union_box(b, a)
    assert bx.union_box(u, u) == u
    assert u[0] <= min(a[0], b[0]) and u[2] >= max(a[2], b[2])


@settings(max_examples=60)
@given(box, box)
def test_iou_is_symmetric_and_bounded(a, b):
    v = bx.iou([a], [b])[0, 0]
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(bx.iou([b], [a])[0, 0])
