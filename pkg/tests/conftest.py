from __future__ import annotations

import numpy as np
import pytest

from raredistill.data import Dataset, make_synthetic_dataset, split_base_rare
from raredistill.encoder import EncoderConfig

# Tiny encoder used for gradient checks and forward-pass oracles.
TINY_ENCODER = EncoderConfig(backbone="conv4", input_size=4, embed_dim=2, width=1)


@pytest.fixture(scope="session")
def synthetic_dataset() -> Dataset:
    return make_synthetic_dataset(n_classes=7, per_class=12, image_size=16, separability=1.0, seed=7)


@pytest.fixture(scope="session")
def base_rare(synthetic_dataset):
    return split_base_rare(synthetic_dataset, n_rare=3)


def dataset_from_counts(counts, image_size=2, seed=0) -> Dataset:
    """Dataset with prescribed per-class sample counts and trivial images."""
    rng = np.random.default_rng(seed)
    total = int(sum(counts))
    images = rng.random((total, image_size, image_size, 3)).astype(np.float32)
    labels = np.concatenate([np.full(n, c, dtype=np.int64) for c, n in enumerate(counts)])
    return Dataset(
        images=images,
        labels=labels,
        class_names=tuple(f"c{c}" for c in range(len(counts))),
        id="counts",
    )
