"""Image encoders producing unit-norm embeddings, plus the momentum pair.

Two backbones: a small 4-block conv net (test default) and a residual
variant. Both end in a linear projection to the embedding dimension
followed by L2 normalization, so dot products of outputs are cosine
similarities.
"""

from __future__ import annotations

import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

BACKBONES = ("conv4", "resnet12_like")


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "conv4"
    input_size: int = 32
    embed_dim: int = 128
    width: int = 16  # conv channels per block = 2 * width

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise EncoderError(f"unsupported backbone {self.backbone!r}")
        if self.embed_dim < 2:
            raise EncoderError("embed_dim must be >= 2")
        if self.input_size % 4 != 0:
            raise EncoderError("input_size must be a multiple of 4")
        if self.width < 1:
            raise EncoderError("width must be >= 1")


def _conv_block(c_in: int, c_out: int, pool: bool) -> nn.Sequential:
    layers = [
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, pool: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.conv3 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1), nn.BatchNorm2d(c_out))
        self.pool = nn.MaxPool2d(2) if pool else nn.Identity()

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        h = F.relu(h + self.shortcut(x))
        return self.pool(h)


class Encoder(nn.Module):
    """Backbone + linear projection, output rows L2-normalized."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        ch = 2 * config.width
        size = config.input_size
        if config.backbone == "conv4":
            blocks = []
            c_in = 3
            for _ in range(4):
                pool = size >= 2
                blocks.append(_conv_block(c_in, ch, pool))
                if pool:
                    size //= 2
                c_in = ch
            self.features = nn.Sequential(*blocks)
            feat_dim = ch * size * size
        else:  # resnet12_like: 4 residual stages with widening channels
            chans = [ch, 2 * ch, 4 * ch, 8 * ch]
            blocks = []
            c_in = 3
            for c_out in chans:
                pool = size >= 2
                blocks.append(_ResBlock(c_in, c_out, pool))
                if pool:
                    size //= 2
                c_in = c_out
            blocks.append(nn.AdaptiveAvgPool2d(1))
            self.features = nn.Sequential(*blocks)
            feat_dim = chans[-1]
        self.projection = nn.Linear(feat_dim, config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        z = self.projection(h.flatten(1))
        return F.normalize(z, dim=1)


def build_encoder(config: EncoderConfig, seed: int) -> Encoder:
    """Construct an encoder with deterministic initialization under seed."""
    torch.manual_seed(seed)
    return Encoder(config)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, C) numpy in [0, 1] -> (B, C, H, W) tensor."""
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise EncoderError(f"expected (B, H, W, C) images, got shape {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def embed(encoder: Encoder, images, training: bool = False) -> torch.Tensor:
    """Unit-norm embeddings for a batch.

    ``training`` selects per-batch normalization statistics (used inside the
    contrastive training step); inference uses running statistics.
    """
    if isinstance(images, np.ndarray):
        images = images_to_tensor(images, dtype=next(encoder.parameters()).dtype)
    expected = encoder.config.input_size
    if images.shape[-1] != expected or images.shape[-2] != expected:
        raise EncoderError(f"expected {expected}x{expected} inputs, got {tuple(images.shape)}")
    was_training = encoder.training
    encoder.train(training)
    try:
        if training:
            return encoder(images)
        with torch.no_grad():
            return encoder(images)
    finally:
        encoder.train(was_training)


@torch.no_grad()
def momentum_update(theta_k: nn.Module, theta_q: nn.Module, m: float) -> nn.Module:
    """In-place EMA of key-encoder parameters toward the query encoder.

    theta_k <- m * theta_k + (1 - m) * theta_q, elementwise; theta_q is
    untouched. Buffers (e.g. norm running stats) are not mixed.
    """
    if not 0.0 <= m < 1.0:
        raise EncoderError(f"momentum must be in [0, 1), got {m}")
    params_k = list(theta_k.parameters())
    params_q = list(theta_q.parameters())
    if len(params_k) != len(params_q) or any(
        pk.shape != pq.shape for pk, pq in zip(params_k, params_q)
    ):
        raise EncoderError("parameter shape mismatch between key and query encoders")
    for pk, pq in zip(params_k, params_q):
        pk.mul_(m).add_(pq, alpha=1.0 - m)
    return theta_k


def encoder_state_arrays(encoder: Encoder) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in encoder.state_dict().items()}


def encoder_state_hash(encoder: Encoder) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(encoder_state_arrays(encoder).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, encoder: Encoder, step: int = 0) -> Path:
    """Write a versioned encoder checkpoint. Byte-stable for a given state."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(encoder.config),
        "step": int(step),
        "state": encoder_state_arrays(encoder),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)
    return path


def load_checkpoint(path: str | Path) -> tuple[Encoder, int]:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise EncoderError(f"unsupported checkpoint version in {path}")
    config = EncoderConfig(**payload["config"])
    encoder = Encoder(config)
    encoder.load_state_dict({k: torch.from_numpy(v) for k, v in payload["state"].items()})
    return encoder, int(payload["step"])
