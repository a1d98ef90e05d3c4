"""Scikit-learn style wrappers so the pipeline composes with the ecosystem.

All estimators take X as a (n, H, W, C) float array in [0, 1] and integer
task labels for y. ``get_params``/``set_params`` come from BaseEstimator,
so the classes work inside sklearn model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .baseline import TeacherModel, extract_features, fit_baseline
from .data import Dataset
from .distill import StudentModel, student_predict
from .encoder import Encoder, EncoderConfig
from .pretrain import PretrainConfig, pretrain


def check_images(X, input_size: int | None = None) -> np.ndarray:
    """Validate an image batch: 4-D float array with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected (n, H, W, C) images, got shape {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    if input_size is not None and X.shape[1:3] != (input_size, input_size):
        raise ValueError(f"expected {input_size}x{input_size} images, got {X.shape[1:3]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y.astype(np.int64)


class ContrastivePretrainer(BaseEstimator, TransformerMixin):
    """Unsupervised contrastive pretraining exposed as fit/transform.

    ``fit(X)`` trains the query encoder on unlabeled images;
    ``transform(X)`` returns unit-norm embeddings.
    """

    def __init__(self, enc_config: EncoderConfig | None = None, config: PretrainConfig | None = None):
        self.enc_config = enc_config
        self.config = config

    def fit(self, X, y=None):
        enc_config = self.enc_config or EncoderConfig()
        config = self.config or PretrainConfig()
        X = check_images(X, enc_config.input_size)
        base = Dataset(
            images=X,
            labels=np.zeros(len(X), dtype=np.int64),
            class_names=("unlabeled",),
            id="pretrainer-input",
        )
        self.encoder_, self.log_ = pretrain(base, enc_config, config)
        return self

    def transform(self, X):
        self._check_fitted()
        return extract_features(self.encoder_, check_images(X))

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("ContrastivePretrainer is not fitted")


class FrozenEncoderClassifier(BaseEstimator, ClassifierMixin):
    """Teacher-style classifier: frozen encoder + logistic regression head."""

    def __init__(self, encoder: Encoder | None = None, c: float = 1.0):
        self.encoder = encoder
        self.c = c

    def fit(self, X, y):
        if self.encoder is None:
            raise ValueError("an encoder is required")
        X = check_images(X)
        y = check_labels(y, len(X))
        self.model_: TeacherModel = fit_baseline(self.encoder, X, y, c=self.c)
        self.classes_ = np.asarray(self.model_.class_labels)
        return self

    def predict_proba(self, X):
        self._check_fitted()
        return self.model_.predict_proba(check_images(X))

    def predict(self, X):
        self._check_fitted()
        return self.model_.predict(check_images(X))

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("FrozenEncoderClassifier is not fitted")


class DistilledStudentClassifier(BaseEstimator, ClassifierMixin):
    """Inference wrapper around a trained student.

    usage='direct' uses the trained softmax head; ``fit`` is then a no-op,
    so the estimator drops into the episodic protocol unchanged.
    usage='lr_refit' refits a logistic-regression head on the support set
    passed to ``fit``.
    """

    def __init__(self, student: StudentModel | None = None, usage: str = "direct"):
        self.student = student
        self.usage = usage

    def fit(self, X, y=None):
        if self.student is None:
            raise ValueError("a student model is required")
        if self.usage == "lr_refit":
            if y is None:
                raise ValueError("lr_refit requires support labels")
            X = check_images(X)
            self.support_ = (X, check_labels(y, len(X)))
        else:
            self.support_ = None
        self.classes_ = np.asarray(self.student.class_labels)
        return self

    def predict_proba(self, X):
        if self.student is None:
            raise ValueError("a student model is required")
        support = getattr(self, "support_", None)
        if self.usage == "lr_refit" and support is None:
            raise NotFittedError("lr_refit mode requires fit() on a support set")
        return student_predict(self.student, check_images(X), usage=self.usage, support=support)

    def predict(self, X):
        probs = self.predict_proba(X)
        labels = np.asarray(self.student.class_labels)
        return labels[probs.argmax(axis=1)]
