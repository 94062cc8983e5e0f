"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .data import Split


def check_crops(X, resolution):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (resolution, resolution, 3):
        raise ValueError(f"expected crops of shape (n, {resolution}, {resolution}, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("crops contain non-finite values")
    return X


def check_labels(labels):
    if not labels:
        raise ValueError("a non-empty label list of (verb, object) pairs is required")
    out = [tuple(l) for l in labels]
    if any(len(l) != 2 for l in out):
        raise ValueError("labels must be (verb, object) pairs")
    return out


def check_split(X):
    if not isinstance(X, Split):
        raise TypeError(f"expected a data.Split, got {type(X).__name__}")
    if not X.image_ids:
        raise ValueError("split has no images")
    for i in X.image_ids:
        img = X.images[i]
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image {i} is not (h, w, 3)")
    return X
