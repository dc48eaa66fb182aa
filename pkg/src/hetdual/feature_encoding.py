"""Initial object and relation features from detections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .autodiff import Tensor, concat
from .boxes import union_box  # noqa: F401  (part of this module's surface)


class DimensionError(ValueError):
    pass


@dataclass
class EncoderParams:
    """Linear maps stored input-major: ``x @ W`` maps rows of x."""
    W_v: Tensor
    W_b: Tensor
    W_o: Tensor
    W_r: Tensor
    class_embedding: Tensor

    @property
    def hidden_dim(self):
        return self.W_o.shape[1]

    @classmethod
    def init(cls, rng, visual_dim, n_classes, visual_proj_dim=128, box_dim=32, class_dim=64,
             hidden_dim=256, class_encoding="embedding", box_gain=1.0):
        """Gaussian init. ``box_gain`` multiplies the box projection: normalised
        coordinates vary over a small range, so without a gain the geometric
        part of f_i starts out buried under the appearance and class parts.
        """
        if class_encoding == "onehot":
            class_dim = n_classes
            emb = Tensor(np.eye(n_classes))
        elif class_encoding == "embedding":
            emb = Tensor(rng.normal(0, 1.0 / np.sqrt(class_dim), (n_classes, class_dim)), requires_grad=True)
        else:
            raise ValueError(f"unknown class encoding {class_encoding!r}")
        return cls(
            W_v=_glorot(rng, visual_dim, visual_proj_dim),
            W_b=_glorot(rng, 4, box_dim, box_gain),
            W_o=_glorot(rng, visual_proj_dim + box_dim + class_dim, hidden_dim),
            W_r=_glorot(rng, 2 * hidden_dim + box_dim, hidden_dim),
            class_embedding=emb,
        )

    def tensors(self):
        return {"W_v": self.W_v, "W_b": self.W_b, "W_o": self.W_o, "W_r": self.W_r,
                "class_embedding": self.class_embedding}


def _glorot(rng, fan_in, fan_out, gain=1.0):
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0, std, (fan_in, fan_out)), requires_grad=True)


def _check(x, W, what):
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"{what}: input dimension {x.shape[-1]} does not match weight {W.shape}")


def encode_objects(objects, params):
    """f_i = W_o [W_v v_i ; W_b b_i ; embed(c_i)] for every object, as an (N, D_h) tensor.

    Boxes are normalised by the image size before ``W_b``.
    """
    feats = Tensor(objects.features)
    _check(feats, params.W_v, "visual feature")
    nbox = Tensor(bx.normalize(objects.boxes, objects.width, objects.height))
    parts = [feats @ params.W_v, nbox @ params.W_b, params.class_embedding.take(objects.labels)]
    return concat(parts, axis=1) @ params.W_o


def encode_object(visual_feature, box, label, width, height, params):
    v = Tensor(np.asarray(visual_feature, dtype=np.float64)[None, :])
    _check(v, params.W_v, "visual feature")
    b = Tensor(bx.normalize(box, width, height))
    x = concat([v @ params.W_v, b @ params.W_b, params.class_embedding.take([int(label)])], axis=1)
    return (x @ params.W_o).reshape(-1)


def encode_relations(object_features, edges, objects, params):
    """f_{i->j} = W_r [f_i ; f_j ; W_b b_{i->j}] for every edge (i, j)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return Tensor(np.zeros((0, params.hidden_dim)))
    ub = bx.union_boxes(objects.boxes[edges[:, 0]], objects.boxes[edges[:, 1]])
    nub = Tensor(bx.normalize(ub, objects.width, objects.height))
    x = concat([object_features.take(edges[:, 0]), object_features.take(edges[:, 1]), nub @ params.W_b], axis=1)
    _check(x, params.W_r, "relation input")
    return x @ params.W_r


def encode_relation(f_i, f_j, b_union, width, height, params):
    f_i = f_i if isinstance(f_i, Tensor) else Tensor(f_i)
    f_j = f_j if isinstance(f_j, Tensor) else Tensor(f_j)
    b = Tensor(bx.normalize(b_union, width, height))
    x = concat([f_i.reshape(1, -1), f_j.reshape(1, -1), b @ params.W_b], axis=1)
    _check(x, params.W_r, "relation input")
    return (x @ params.W_r).reshape(-1)
