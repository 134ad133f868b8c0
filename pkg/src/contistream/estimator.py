"""A scikit-learn style front end to the continual learner.

:class:`ContinualClassifier` learns one task per :meth:`partial_fit` call.
Every call must introduce classes the estimator has not seen before, and
:meth:`predict` chooses among all classes seen so far.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metrics import softmax_rows
from .strategies import STRATEGIES, ContinualLearner, TrainConfig


class ContinualClassifier(ClassifierMixin, BaseEstimator):
    """Class-incremental classifier.

    Parameters mirror :class:`~contistream.strategies.TrainConfig`;
    ``random_state`` seeds the model, the memory and the data order.

    Examples
    --------
    >>> clf = ContinualClassifier(strategy="replay", epochs=2)  # doctest: +SKIP
    >>> clf.partial_fit(X_task1, y_task1).partial_fit(X_task2, y_task2)  # doctest: +SKIP
    >>> clf.predict(X_test)  # doctest: +SKIP
    """

    def __init__(self, strategy="md", head_mode="cascaded_gates", lam=0.1, alpha=0.1, epochs=20,
                 batch_size=32, learning_rate=0.01, momentum=0.8, memory_capacity=200,
                 hidden=(64,), embedding_dim=64, random_state=0):
        self.strategy = strategy
        self.head_mode = head_mode
        self.lam = lam
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.memory_capacity = memory_capacity
        self.hidden = hidden
        self.embedding_dim = embedding_dim
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            momentum=self.momentum, memory_capacity=self.memory_capacity, lam=self.lam,
            alpha=self.alpha, head_mode=self.head_mode, hidden=tuple(self.hidden),
            embedding_dim=self.embedding_dim, seed=int(self.random_state or 0), diagnostics=False)

    def partial_fit(self, X, y):
        """Learn one new task made of the classes present in ``y``."""
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not hasattr(self, "learner_"):
            self.learner_ = ContinualLearner(self.strategy, self._train_config(), X.shape[1])
            self.n_features_in_ = X.shape[1]
            self.classes_ = np.array([], dtype=y.dtype)
            self.task_log_ = []
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        new = np.unique(y)
        if len(new) < 2:
            raise ValueError("each task needs at least two classes")
        if np.isin(new, self.classes_).any():
            raise ValueError("a task may only contain classes that were not seen before")
        start = len(self.classes_)
        self.classes_ = np.concatenate([self.classes_, new])
        internal = start + np.searchsorted(new, y)
        self.task_log_.append(self.learner_.learn_task(X, internal, len(new)))
        return self

    def fit(self, X, y, tasks=None):
        """Train from scratch; ``tasks`` assigns each row to a task, learned in sorted order."""
        X, y = check_X_y(X, y, dtype=np.float64)
        for attr in ("learner_", "classes_", "n_features_in_", "task_log_"):
            self.__dict__.pop(attr, None)
        if tasks is None:
            return self.partial_fit(X, y)
        tasks = np.asarray(tasks)
        if tasks.shape != y.shape:
            raise ValueError("tasks must give one task id per sample")
        for t in np.unique(tasks):
            mask = tasks == t
            self.partial_fit(X[mask], y[mask])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "learner_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.learner_.model.predict_logits(X)

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
