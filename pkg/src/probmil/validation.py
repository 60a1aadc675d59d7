"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .data import Bag, Dataset


def check_bags(X, feature_dim=None):
    """Validate a collection of bags.

    Accepts a (N, L, M) array or a sequence of (L_i, M) arrays.  Returns a
    float64 3-D array when all bags share ``L``, otherwise a list of
    float64 2-D arrays.
    """
    if isinstance(X, Dataset):
        X = X.instances()
    if isinstance(X, np.ndarray) and X.dtype != object:
        if X.ndim != 3:
            raise ValueError(f"expected bags of shape (n_bags, n_instances, n_features), got {X.shape}")
        bags = np.asarray(X, dtype=np.float64)
        if bags.shape[1] == 0:
            raise ValueError("bags must contain at least one instance")
        dims = {bags.shape[2]}
    else:
        bags = [np.asarray(b, dtype=np.float64) for b in X]
        for i, b in enumerate(bags):
            if b.ndim != 2 or b.shape[0] == 0:
                raise ValueError(f"bag {i} must be a non-empty (n_instances, n_features) array, got {b.shape}")
        dims = {b.shape[1] for b in bags}
        if len({b.shape[0] for b in bags}) == 1 and bags:
            bags = np.stack(bags)
    if len(bags) == 0:
        raise ValueError("no bags given")
    if len(dims) != 1:
        raise ValueError(f"bags disagree on feature dimension: {sorted(dims)}")
    (m,) = dims
    if feature_dim is not None and m != feature_dim:
        raise ValueError(f"bags have {m} features, expected {feature_dim}")
    finite = np.isfinite(bags).all() if isinstance(bags, np.ndarray) else all(np.isfinite(b).all() for b in bags)
    if not finite:
        raise ValueError("bags contain NaN or infinite values")
    return bags


def check_labels(Y, n_bags, n_classes=None) -> np.ndarray:
    """Validate an (N, K) multi-hot label matrix; 1-D input means K=1."""
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if Y.ndim != 2 or Y.shape[0] != n_bags:
        raise ValueError(f"labels must be ({n_bags}, n_classes), got {Y.shape}")
    if not np.isin(Y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if n_classes is not None and Y.shape[1] != n_classes:
        raise ValueError(f"labels have {Y.shape[1]} classes, expected {n_classes}")
    return Y.astype(bool)


def to_dataset(X, Y) -> Dataset:
    bags = check_bags(X)
    Y = check_labels(Y, len(bags))
    return Dataset([Bag(b, y, str(i)) for i, (b, y) in enumerate(zip(bags, Y))],
                   Y.shape[1], bags[0].shape[1])
