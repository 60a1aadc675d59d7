"""scikit-learn compatible wrapper around the MIL network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import evaluate
from .model import forward_batch, parse_strategy
from .training import ExperimentConfig, predict_scores, train
from .validation import check_bags, check_labels, to_dataset


class MilClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label bag classifier.

    Each bag is an (n_instances, n_features) array; ``X`` is either a 3-D
    array of equal-length bags or a list of 2-D arrays.  ``Y`` is an
    (n_bags, n_classes) 0/1 matrix.

    Parameters
    ----------
    strategy : {"attention", "collective", "max", "weighted"}
        How instance predictions are pooled into a bag prediction.
    phi : {"softmax", "sigmoid", "relu"}
        Non-negative function of the measure head (attention only).
    hidden : tuple of int
        Widths of the fully connected embedding layers.
    dropout : float
        Dropout rate after each embedding layer during training.
    lr, batch_size, steps : training schedule (Adam, mini-batches).
    balanced : bool
        Class-balanced round-robin batches instead of uniform shuffling.
    eval_every : int
        Evaluation cadence when ``eval_set`` is passed to :meth:`fit`.
    random_state : int
        Seed for initialisation, dropout and batch order.

    Attributes
    ----------
    network_ : MilNetwork
        The selected network (best eval mAP if ``eval_set`` was given,
        otherwise the best training loss among evaluations).
    run_log_ : RunLog
    n_features_in_, n_classes_ : int
    """

    def __init__(self, strategy="attention", phi="softmax", hidden=(500, 500, 500),
                 dropout=0.2, lr=1e-3, batch_size=32, steps=10000, balanced=True,
                 eval_every=500, random_state=0):
        self.strategy = strategy
        self.phi = phi
        self.hidden = hidden
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.balanced = balanced
        self.eval_every = eval_every
        self.random_state = random_state

    def _config(self):
        return ExperimentConfig(strategy=self.strategy, phi=self.phi, hidden=tuple(self.hidden),
                                dropout=self.dropout, lr=self.lr, batch_size=self.batch_size,
                                steps=self.steps, balanced=self.balanced,
                                eval_every=self.eval_every, seed=self.random_state)

    def fit(self, X, Y, eval_set=None):
        train_ds = to_dataset(X, Y)
        eval_ds = to_dataset(*eval_set) if eval_set is not None else None
        self.network_, _, self.run_log_ = train(train_ds, eval_ds, self._config())
        self.n_features_in_ = train_ds.feature_dim
        self.n_classes_ = train_ds.num_classes
        self.classes_ = np.arange(self.n_classes_)
        return self

    def predict_proba(self, X):
        """Bag-level class probabilities, shape (n_bags, n_classes)."""
        check_is_fitted(self, "network_")
        return predict_scores(self.network_, self.strategy, check_bags(X, self.n_features_in_))

    def predict(self, X, threshold=0.5):
        return (self.predict_proba(X) >= threshold).astype(int)

    def score(self, X, Y, sample_weight=None):
        """Macro mean average precision."""
        scores = self.predict_proba(X)
        return evaluate(scores, check_labels(Y, len(scores), self.n_classes_)).mAP

    def attention_weights(self, X):
        """Per-bag probability measures, a list of (n_instances, n_classes) arrays.

        Only defined for strategies with a measure head.
        """
        check_is_fitted(self, "network_")
        strategy = parse_strategy(self.strategy)
        if not strategy.uses_measure:
            raise ValueError(f"{strategy.name} pooling has no attention weights")
        net = self.network_.eval()
        out = [forward_batch(net, strategy, b[None]).p[0] for b in check_bags(X, self.n_features_in_)]
        net.last_forward = None
        return out

    def _more_tags(self):
        return {"multilabel": True}
