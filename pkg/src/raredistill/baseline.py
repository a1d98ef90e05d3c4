"""Teacher model: frozen pretrained encoder + logistic regression head.

The classifier is fit on the tiny support set only; the encoder is never
touched. Probabilities come from a softmax over explicit (N, d) weights so
hand-set heads behave predictably in tests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression

from .data import center_resize
from .encoder import Encoder, embed, load_checkpoint, save_checkpoint


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def extract_features(encoder: Encoder, images: np.ndarray) -> np.ndarray:
    """Deterministic inference-mode embeddings of clean (center-resized) images."""
    clean = center_resize(images, encoder.config.input_size)
    return embed(encoder, clean, training=False).numpy()


@dataclass
class TeacherModel:
    """F = f_c(f_q): frozen encoder and an (N, d) linear softmax head."""

    encoder: Encoder
    weights: np.ndarray  # (N, d)
    bias: np.ndarray  # (N,)
    class_labels: tuple[int, ...]  # task labels, ascending, one per head row

    @property
    def n_way(self) -> int:
        return len(self.class_labels)

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        feats = extract_features(self.encoder, images)
        return self.predict_proba_features(feats)

    def predict_proba_features(self, feats: np.ndarray) -> np.ndarray:
        return softmax(feats @ self.weights.T + self.bias)

    def predict(self, images: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(images)
        return np.asarray([self.class_labels[i] for i in probs.argmax(axis=1)])


def fit_logistic_head(
    features: np.ndarray, labels: np.ndarray, c: float = 1.0
) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Multinomial logistic regression to tight tolerance; returns (W, b, classes).

    Binary problems are expanded to two softmax rows so downstream code sees
    a uniform (N, d) head.
    """
    clf = LogisticRegression(C=c, solver="lbfgs", tol=1e-8, max_iter=5000)
    clf.fit(features, labels)
    classes = tuple(int(x) for x in clf.classes_)
    if len(classes) == 2 and clf.coef_.shape[0] == 1:
        weights = np.vstack([-clf.coef_ / 2.0, clf.coef_ / 2.0])
        bias = np.array([-clf.intercept_[0] / 2.0, clf.intercept_[0] / 2.0])
    else:
        weights = clf.coef_.copy()
        bias = clf.intercept_.copy()
    return weights, bias, classes


def fit_baseline(
    encoder: Encoder,
    support_images: np.ndarray,
    support_labels: np.ndarray,
    c: float = 1.0,
) -> TeacherModel:
    """Fit the logistic-regression head on support features; encoder frozen."""
    feats = extract_features(encoder, support_images)
    weights, bias, classes = fit_logistic_head(feats, support_labels, c=c)
    return TeacherModel(encoder=encoder, weights=weights, bias=bias, class_labels=classes)


def predict_proba(model: TeacherModel, images: np.ndarray) -> np.ndarray:
    return model.predict_proba(images)


# ---------------------------------------------------------------------------
# Persistence: teacher artifact = encoder checkpoint reference + head JSON


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def save_teacher(path: str | Path, model: TeacherModel, encoder_ckpt: str | Path | None = None) -> Path:
    """Write the teacher as JSON; the encoder goes to a sibling checkpoint
    unless an existing one is referenced."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if encoder_ckpt is None:
        encoder_ckpt = path.with_suffix(".encoder.ckpt")
        save_checkpoint(encoder_ckpt, model.encoder)
    encoder_ckpt = Path(encoder_ckpt)
    payload = {
        "version": 1,
        "encoder_checkpoint": encoder_ckpt.name,
        "encoder_sha256": _file_sha256(encoder_ckpt),
        "weights": model.weights.tolist(),
        "bias": model.bias.tolist(),
        "class_labels": list(model.class_labels),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def load_teacher(path: str | Path) -> TeacherModel:
    path = Path(path)
    with open(path) as fh:
        payload = json.load(fh)
    ckpt = path.parent / payload["encoder_checkpoint"]
    if _file_sha256(ckpt) != payload["encoder_sha256"]:
        raise ValueError(f"encoder checkpoint hash mismatch for {ckpt}")
    encoder, _ = load_checkpoint(ckpt)
    return TeacherModel(
        encoder=encoder,
        weights=np.asarray(payload["weights"], dtype=np.float64),
        bias=np.asarray(payload["bias"], dtype=np.float64),
        class_labels=tuple(payload["class_labels"]),
    )
