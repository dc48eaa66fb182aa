"""Type-aware message passing on heterogeneous and dual graphs for scene graph generation."""
from .estimator import FrequencyPrior, TypeAwareSGG
from .scene_model import Ontology, Scene, default_vg_ontology, load_ontology

__all__ = ["TypeAwareSGG", "FrequencyPrior", "Ontology", "Scene", "load_ontology", "default_vg_ontology"]
__version__ = "0.1.0"
