"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

from pathlib import Path

from .data_io import _check_dims, load_scenes
from .scene_model import Ontology, Scene, SchemaError
from .training import MODES, UsageError


def check_ontology(ontology):
    if not isinstance(ontology, Ontology):
        raise TypeError(f"expected an Ontology, got {type(ontology).__name__}")
    return ontology


def check_scenes(scenes, ontology=None, require_gt=False, mode=None):
    """Accept a path, a Scene or an iterable of Scenes; return a validated list."""
    if isinstance(scenes, (str, Path)):
        scenes = load_scenes(scenes, ontology)
    elif isinstance(scenes, Scene):
        scenes = [scenes]
    scenes = list(scenes)
    for s in scenes:
        if not isinstance(s, Scene):
            raise TypeError(f"expected Scene records, got {type(s).__name__}")
        if ontology is not None:
            _check_dims(s, ontology)
    if mode is not None and mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {MODES}")
    if require_gt or mode in ("predcls", "sgcls"):
        missing = [s.scene_id for s in scenes if not s.has_gt]
        if missing:
            raise UsageError(f"{len(missing)} scene(s) lack ground truth, e.g. {missing[0]}")
    dims = {len(o.visual_feature) for s in scenes for o in s.objects}
    if len(dims) > 1:
        raise SchemaError(f"inconsistent visual feature dimensions: {sorted(dims)}")
    return scenes
