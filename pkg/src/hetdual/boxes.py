"""Box geometry on (x1, y1, x2, y2) pixel coordinates."""
import numpy as np


def union_box(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def union_boxes(a, b):
    """Row-wise union of two (n, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([np.minimum(a[:, :2], b[:, :2]), np.maximum(a[:, 2:], b[:, 2:])], axis=1)


def area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def intersection(a, b):
    """Pairwise intersection areas, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    return wh[..., 0] * wh[..., 1]


def iou(a, b):
    """Pairwise IoU matrix."""
    inter = intersection(a, b)
    union = area(np.asarray(a).reshape(-1, 4))[:, None] + area(np.asarray(b).reshape(-1, 4))[None, :] - inter
    return inter / union


def iou_min_area(a, b):
    """Overlap divided by the smaller of the two box areas."""
    inter = intersection(a, b)
    smaller = np.minimum(area(np.asarray(a).reshape(-1, 4))[:, None], area(np.asarray(b).reshape(-1, 4))[None, :])
    return inter / smaller


def centers(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], axis=1)


def center_distance(a, b):
    ca, cb = centers(a), centers(b)
    return np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1))


def normalize(boxes, width, height):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return boxes / np.array([width, height, width, height], dtype=np.float64)
