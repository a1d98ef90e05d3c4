"""Pseudo-label self-distillation into a born-again student.

The frozen teacher labels every base image with rare-class probabilities;
the student (same encoder architecture, random init, plus a linear softmax
head) trains on a hybrid of the contrastive loss and a pseudo-label
classification loss. Adaptive designs blend the teacher label with the
student's own detached prediction, trusting the student more as training
progresses.
"""

from __future__ import annotations

import pickle
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .baseline import TeacherModel, extract_features, fit_logistic_head, softmax
from .data import AugmentConfig, Dataset, augment_twice, center_resize
from .encoder import Encoder, EncoderConfig, build_encoder, images_to_tensor, momentum_update
from .pretrain import KeyQueue, PretrainConfig, TrainingDiverged, info_nce_loss, iterate_batches, lr_schedule

LABEL_DESIGNS = ("hard", "soft", "adaptive_hard", "adaptive_soft")
LOSS_VARIANTS = ("cls_only", "con_plus_cls", "con_plus_reg")

# probability clamp inside logs; avoids -inf on saturated softmax outputs
EPS = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    label_design: str = "adaptive_hard"
    alpha_final: float = 0.7
    epochs: int = 20
    loss_variant: str = "con_plus_cls"
    batch_size: int = 16
    lr: float = 0.03
    lr_decay_points: tuple[float, ...] = (0.6, 0.8)
    lr_decay_factor: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.07
    queue_size: int = 64
    encoder_momentum: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.label_design not in LABEL_DESIGNS:
            raise ValueError(f"unknown label design {self.label_design!r}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if not 0.0 <= self.alpha_final <= 1.0:
            raise ValueError("alpha_final must be in [0, 1]")

    def optimizer_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay_points=self.lr_decay_points,
            lr_decay_factor=self.lr_decay_factor,
            sgd_momentum=self.sgd_momentum,
            weight_decay=self.weight_decay,
            temperature=self.temperature,
            queue_size=self.queue_size,
            encoder_momentum=self.encoder_momentum,
            seed=self.seed,
        )


# ---------------------------------------------------------------------------
# Pseudo labels


def _check_rows_normalized(probs: np.ndarray, tol: float = 1e-6):
    sums = probs.sum(axis=-1)
    if np.any(probs < -tol) or np.any(np.abs(sums - 1.0) > tol):
        raise ValueError("rows must be probability vectors summing to 1")


def make_pseudo_labels(probs: np.ndarray, design: str) -> np.ndarray:
    """Teacher probabilities -> pseudo labels.

    hard: one-hot at the argmax (ties broken toward the lowest index);
    soft: the probability vector itself. The adaptive designs start from
    the corresponding base design and are blended in later via
    ``adapt_labels``.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    _check_rows_normalized(probs)
    base = design.removeprefix("adaptive_")
    if base == "soft":
        return probs.copy()
    if base == "hard":
        out = np.zeros_like(probs)
        out[np.arange(len(probs)), probs.argmax(axis=1)] = 1.0
        return out
    raise ValueError(f"unknown label design {design!r}")


def adapt_labels(y, p_student, alpha: float):
    """Convex combination (1 - alpha) * y + alpha * p_student."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * y + alpha * p_student


def alpha_schedule(t: int, total: int, alpha_final: float) -> float:
    """Linear trust schedule: alpha_t = alpha_final * t / total."""
    if total < 1:
        raise ValueError("total epochs must be >= 1")
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return alpha_final * t / total


# ---------------------------------------------------------------------------
# Losses


def _as_tensor_pair(y, p):
    to_torch = isinstance(p, torch.Tensor) or isinstance(y, torch.Tensor)
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(np.asarray(p, dtype=np.float64))
    if not isinstance(y, torch.Tensor):
        y = torch.as_tensor(np.asarray(y, dtype=np.float64), dtype=p.dtype)
    return y, p, to_torch


def classification_loss(y, p, design: str):
    """Pseudo-label classification loss, mean-reduced over the batch.

    hard/adaptive_hard: cross-entropy -sum y log p.
    soft/adaptive_soft: KL(y || p) with the 0 log 0 = 0 convention.
    Differentiable in p when given tensors; returns a float otherwise.
    """
    if design not in LABEL_DESIGNS:
        raise ValueError(f"unknown label design {design!r}")
    y, p, to_torch = _as_tensor_pair(y, p)
    logp = torch.log(torch.clamp(p, min=EPS))
    ce = -(y * logp).sum(dim=-1)
    if design.endswith("hard"):
        per_sample = ce
    else:
        ylogy = torch.where(y > 0, y * torch.log(torch.clamp(y, min=EPS)), torch.zeros_like(y))
        per_sample = ylogy.sum(dim=-1) + ce
    loss = per_sample.mean()
    return loss if to_torch else float(loss)


def regression_loss(teacher_embed, student_embed):
    """Mean absolute difference between embeddings."""
    t, s, to_torch = _as_tensor_pair(teacher_embed, student_embed)
    if t.shape != s.shape:
        raise ValueError(f"embedding shape mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
    loss = (s - t).abs().mean()
    return loss if to_torch else float(loss)


def hybrid_loss(con, second):
    """Unweighted sum of the contrastive and second (cls or reg) terms."""
    total = con + second
    finite = torch.isfinite(total) if isinstance(total, torch.Tensor) else np.isfinite(total)
    if not bool(finite):
        raise ValueError(f"non-finite hybrid loss: con={con}, second={second}")
    return total


# ---------------------------------------------------------------------------
# Student model


@dataclass
class StudentModel:
    """Born-again student: encoder pair plus a linear softmax head."""

    encoder: Encoder
    key_encoder: Encoder
    head_weights: np.ndarray  # (N, d)
    head_bias: np.ndarray  # (N,)
    class_labels: tuple[int, ...]
    provenance: dict

    @property
    def n_way(self) -> int:
        return len(self.class_labels)


def student_predict(
    student: StudentModel,
    images: np.ndarray,
    usage: str = "direct",
    support: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Query probabilities from the student, (B, N) with rows summing to 1.

    direct: the trained softmax head. lr_refit: discard the head, fit
    logistic regression on support features, and predict with that.
    """
    feats = extract_features(student.encoder, images)
    if usage == "direct":
        return softmax(feats @ student.head_weights.T + student.head_bias)
    if usage == "lr_refit":
        if support is None:
            raise ValueError("lr_refit mode requires the support set")
        support_images, support_labels = support
        sfeats = extract_features(student.encoder, support_images)
        weights, bias, classes = fit_logistic_head(sfeats, support_labels)
        if classes != student.class_labels:
            raise ValueError(f"support labels {classes} do not match student classes")
        return softmax(feats @ weights.T + bias)
    raise ValueError(f"unknown usage {usage!r}")


def distill(
    base: Dataset,
    teacher: TeacherModel,
    enc_config: EncoderConfig,
    config: DistillConfig,
    augment: AugmentConfig | None = None,
) -> tuple[StudentModel, list[dict]]:
    """One round of hybrid self-distillation on the base dataset.

    The teacher's probabilities over base images are computed once on clean
    views and cached (the teacher is frozen, so they never change). Each
    student step combines the contrastive term from two augmented views with
    a pseudo-label classification term (or an embedding regression term for
    the ablation variant) on the clean view.
    """
    if len(base) == 0:
        raise ValueError("base dataset is empty")
    if augment is None:
        augment = AugmentConfig(output_size=enc_config.input_size)
    opt_cfg = config.optimizer_config()
    torch.manual_seed(config.seed)

    clean = center_resize(base.images, enc_config.input_size)
    teacher_probs = teacher.predict_proba(clean)
    teacher_feats = extract_features(teacher.encoder, clean) if config.loss_variant == "con_plus_reg" else None
    base_labels = make_pseudo_labels(teacher_probs, config.label_design)

    n_way = teacher.n_way
    f_q = build_encoder(enc_config, config.seed)
    f_k = build_encoder(enc_config, config.seed)
    f_k.load_state_dict(f_q.state_dict())
    for p in f_k.parameters():
        p.requires_grad_(False)
    head = nn.Linear(enc_config.embed_dim, n_way)
    queue = KeyQueue.randomized(config.queue_size, enc_config.embed_dim, config.seed)
    opt = torch.optim.SGD(
        list(f_q.parameters()) + list(head.parameters()),
        lr=config.lr,
        momentum=config.sgd_momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng((config.seed, 1))
    adaptive = config.label_design.startswith("adaptive_")
    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, opt_cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        alpha = alpha_schedule(epoch + 1, config.epochs, config.alpha_final) if adaptive else 0.0
        con_losses, cls_losses = [], []
        t0 = time.time()
        for batch in iterate_batches(len(base), config.batch_size, rng):
            f_q.train()
            f_k.train()
            if config.loss_variant == "cls_only":
                con = torch.zeros(())
            else:
                views_q, views_k = [], []
                for i in batch:
                    vq, vk = augment_twice(base.images[i], augment, int(rng.integers(2**31)))
                    views_q.append(vq)
                    views_k.append(vk)
                q = f_q(images_to_tensor(np.stack(views_q)))
                with torch.no_grad():
                    k = f_k(images_to_tensor(np.stack(views_k)))
                con, _ = info_nce_loss(q, k, queue, config.temperature)

            clean_batch = images_to_tensor(clean[batch])
            z = f_q(clean_batch)
            if config.loss_variant == "con_plus_reg":
                target = torch.as_tensor(teacher_feats[batch], dtype=z.dtype)
                second = regression_loss(target, z)
            else:
                logits = head(z)
                p = F.softmax(logits, dim=1)
                y = torch.as_tensor(base_labels[batch], dtype=p.dtype)
                if adaptive:
                    y = adapt_labels(y, p.detach(), alpha)
                second = classification_loss(y, p, config.label_design)
            loss = hybrid_loss(con, second)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, lr, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            momentum_update(f_k, f_q, config.encoder_momentum)
            if config.loss_variant != "cls_only":
                queue.push(k)
            con_losses.append(float(con.detach()))
            cls_losses.append(float(second.detach()))
            step += 1
        log.append(
            {
                "epoch": epoch,
                "con_loss": float(np.mean(con_losses)),
                "cls_loss": float(np.mean(cls_losses)),
                "alpha": alpha,
                "lr": lr,
                "wall_time": time.time() - t0,
            }
        )

    student = StudentModel(
        encoder=f_q,
        key_encoder=f_k,
        head_weights=head.weight.detach().numpy().astype(np.float64),
        head_bias=head.bias.detach().numpy().astype(np.float64),
        class_labels=teacher.class_labels,
        provenance={
            "label_design": config.label_design,
            "alpha_final": config.alpha_final,
            "loss_variant": config.loss_variant,
            "config": asdict(config),
        },
    )
    return student, log


# ---------------------------------------------------------------------------
# Persistence


STUDENT_VERSION = 1


def save_student(path: str | Path, student: StudentModel) -> Path:
    from .encoder import encoder_state_arrays

    payload = {
        "version": STUDENT_VERSION,
        "encoder_config": asdict(student.encoder.config),
        "encoder_state": encoder_state_arrays(student.encoder),
        "key_encoder_state": encoder_state_arrays(student.key_encoder),
        "head_weights": student.head_weights,
        "head_bias": student.head_bias,
        "class_labels": list(student.class_labels),
        "provenance": student.provenance,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)
    return path


def load_student(path: str | Path) -> StudentModel:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("version") != STUDENT_VERSION:
        raise ValueError(f"unsupported student artifact version in {path}")
    config = EncoderConfig(**payload["encoder_config"])
    encoder = Encoder(config)
    encoder.load_state_dict({k: torch.from_numpy(v) for k, v in payload["encoder_state"].items()})
    key_encoder = Encoder(config)
    key_encoder.load_state_dict(
        {k: torch.from_numpy(v) for k, v in payload["key_encoder_state"].items()}
    )
    return StudentModel(
        encoder=encoder,
        key_encoder=key_encoder,
        head_weights=payload["head_weights"],
        head_bias=payload["head_bias"],
        class_labels=tuple(payload["class_labels"]),
        provenance=payload["provenance"],
    )
