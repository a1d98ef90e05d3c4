"""Contrastive pretraining on the unlabeled base dataset.

Instance discrimination with a momentum key encoder and a FIFO queue of
negative keys. The loss for a query q with positive key k+ and queued
negatives k_j at temperature tau is

    -log[ exp(q.k+/tau) / (exp(q.k+/tau) + sum_j exp(q.k_j/tau)) ]

i.e. the log loss of an (L+1)-way softmax classifier with the positive as
class 0. Gradients flow into the query encoder only; the key encoder
tracks it by exponential moving average.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch.nn import functional as F

from .data import AugmentConfig, Dataset, augment_twice
from .encoder import Encoder, EncoderConfig, build_encoder, images_to_tensor, momentum_update


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries (step, lr, loss) diagnostics."""

    def __init__(self, step: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr})")
        self.step = step
        self.lr = lr
        self.loss = loss


@dataclass
class KeyQueue:
    """Ring buffer of L unit-norm key embeddings."""

    buffer: torch.Tensor  # (L, d)
    cursor: int = 0
    filled: int = 0

    @property
    def capacity(self) -> int:
        return self.buffer.shape[0]

    @classmethod
    def empty(cls, capacity: int, dim: int, dtype=torch.float32) -> "KeyQueue":
        return cls(buffer=torch.zeros(capacity, dim, dtype=dtype))

    @classmethod
    def randomized(cls, capacity: int, dim: int, seed: int, dtype=torch.float32) -> "KeyQueue":
        """Random unit-norm initialization, marked full from the start."""
        g = torch.Generator().manual_seed(seed)
        buf = torch.randn(capacity, dim, generator=g, dtype=dtype)
        return cls(buffer=F.normalize(buf, dim=1), cursor=0, filled=capacity)

    def negatives(self) -> torch.Tensor:
        return self.buffer[: self.filled]

    def push(self, keys: torch.Tensor) -> "KeyQueue":
        """Write keys at the cursor with wraparound, evicting oldest first."""
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"cannot push {b} keys into a queue of capacity {self.capacity}")
        keys = keys.detach()
        for i in range(b):
            self.buffer[(self.cursor + i) % self.capacity] = keys[i]
        self.cursor = (self.cursor + b) % self.capacity
        self.filled = min(self.filled + b, self.capacity)
        return self


def info_nce_loss(
    q: torch.Tensor, k_pos: torch.Tensor, queue: KeyQueue, tau: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Contrastive loss over the queue's filled rows as negatives.

    Returns (mean over batch, per-sample losses). Keys and queue entries are
    treated as constants; only q receives gradients.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if queue.filled < 1:
        raise ValueError("queue has no keys")
    negatives = queue.negatives().detach().to(q.dtype)
    l_pos = (q * k_pos.detach()).sum(dim=1, keepdim=True)
    l_neg = q @ negatives.t()
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    targets = torch.zeros(q.shape[0], dtype=torch.long)
    per_sample = F.cross_entropy(logits, targets, reduction="none")
    return per_sample.mean(), per_sample


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
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
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.encoder_momentum < 1.0:
            raise ValueError("encoder momentum must be in [0, 1)")
        pts = self.lr_decay_points
        if any(not 0.0 < p < 1.0 for p in pts) or list(pts) != sorted(set(pts)):
            raise ValueError("decay points must be strictly increasing fractions in (0, 1)")


def lr_schedule(epoch: int, config: PretrainConfig) -> float:
    """Piecewise-constant schedule; decay points are fractions of training."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    decays = sum(epoch >= int(round(p * config.epochs)) for p in config.lr_decay_points)
    return config.lr * config.lr_decay_factor**decays


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def pretrain(
    base: Dataset,
    enc_config: EncoderConfig,
    config: PretrainConfig,
    augment: AugmentConfig | None = None,
    initial: Encoder | None = None,
    start_epoch: int = 0,
) -> tuple[Encoder, list[dict]]:
    """Train the query encoder on the base dataset (labels never read).

    Per step: each image is augmented twice; the query view goes through the
    query encoder, the key view through the gradient-free key encoder; the
    contrastive loss drives one SGD step on the query encoder; the key
    encoder is then EMA-updated and the batch keys pushed into the queue.

    Returns the trained query encoder and a per-epoch log
    (epoch, mean_loss, lr, wall_time). Pass ``initial``/``start_epoch`` to
    resume; the schedule and logs continue from that epoch.
    """
    if len(base) == 0:
        raise ValueError("base dataset is empty")
    if augment is None:
        augment = AugmentConfig(output_size=enc_config.input_size)
    torch.manual_seed(config.seed)
    f_q = initial if initial is not None else build_encoder(enc_config, config.seed)
    f_k = build_encoder(enc_config, config.seed)
    f_k.load_state_dict(f_q.state_dict())
    for p in f_k.parameters():
        p.requires_grad_(False)

    queue = KeyQueue.randomized(config.queue_size, enc_config.embed_dim, config.seed)
    opt = torch.optim.SGD(
        f_q.parameters(),
        lr=config.lr,
        momentum=config.sgd_momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng((config.seed, start_epoch))
    log: list[dict] = []
    step = start_epoch * ((len(base) + config.batch_size - 1) // config.batch_size)
    for epoch in range(start_epoch, config.epochs):
        lr = lr_schedule(epoch, config)
        for group in opt.param_groups:
            group["lr"] = lr
        losses = []
        t0 = time.time()
        for batch in iterate_batches(len(base), config.batch_size, rng):
            views_q, views_k = [], []
            for i in batch:
                vq, vk = augment_twice(base.images[i], augment, int(rng.integers(2**31)))
                views_q.append(vq)
                views_k.append(vk)
            xq = images_to_tensor(np.stack(views_q))
            xk = images_to_tensor(np.stack(views_k))
            f_q.train()
            f_k.train()
            q = f_q(xq)
            with torch.no_grad():
                k = f_k(xk)
            loss, _ = info_nce_loss(q, k, queue, config.temperature)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, lr, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            momentum_update(f_k, f_q, config.encoder_momentum)
            queue.push(k)
            losses.append(float(loss.detach()))
            step += 1
        log.append(
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "lr": lr,
                "wall_time": time.time() - t0,
            }
        )
    return f_q, log
