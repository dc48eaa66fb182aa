import numpy as np
import pytest

from hetdual.data_io import SyntheticConfig, build_cooccurrence_stats, generate_synthetic_dataset
from hetdual.scene_model import DetectedObject, GTTriplet, Ontology, Scene, toy_ontology
from hetdual.training import ModelConfig, ModelParams


def random_scene(rng, n_classes, n_relations, n_objects=None, feature_dim=8, width=400.0, height=300.0,
                 n_triplets=None, scene_id="s"):
    """Random scene with well-formed boxes, peaked class distributions and a few GT triplets."""
    n = int(rng.integers(2, 7)) if n_objects is None else n_objects
    objects = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, width - 60), rng.uniform(0, height - 60)
        w, h = rng.uniform(10, 60), rng.uniform(10, 60)
        lab = int(rng.integers(n_classes))
        dist = rng.dirichlet(np.ones(n_classes) * 0.3)
        dist = 0.5 * dist + 0.5 * np.eye(n_classes)[lab]
        objects.append(DetectedObject((x1, y1, x1 + w, y1 + h), rng.normal(size=feature_dim), lab, dist / dist.sum()))
    gts = []
    if n >= 2:
        k = int(rng.integers(1, 4)) if n_triplets is None else n_triplets
        for _ in range(k):
            i, j = rng.choice(n, 2, replace=False)
            a, b = objects[i], objects[j]
            gts.append(GTTriplet(a.box, a.label, int(rng.integers(1, n_relations)), b.box, b.label))
    return Scene(scene_id, width, height, objects, gts or None)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    return toy_ontology()


@pytest.fixture(scope="session")
def tiny_ontology():
    return Ontology(["person", "horse", "hat"], ["__background__", "riding", "on", "wearing"],
                    {"riding": "interactive", "on": "non_interactive", "wearing": "interactive"},
                    {"riding": "head", "on": "body", "wearing": "tail"})


@pytest.fixture(scope="session")
def synth_small(toy):
    return generate_synthetic_dataset(SyntheticConfig(n_scenes=30, feature_dim=16, seed=3), toy)


@pytest.fixture(scope="session")
def synth_stats(toy, synth_small):
    return build_cooccurrence_stats(synth_small, toy)


@pytest.fixture
def small_cfg():
    return ModelConfig(hidden_dim=12, visual_proj_dim=6, box_dim=4, class_dim=5, layers_intra=1, layers_inter=1)


@pytest.fixture
def small_params(toy, small_cfg):
    return ModelParams.init(np.random.default_rng(0), 16, toy, small_cfg)
