import numpy as np
import pytest

from sparsedense.data import SyntheticSpec, generate_synthetic
from sparsedense.rng import SplitMix64, derive_seed
from sparsedense.train import TrainData


def unit_rows(n: int, dim: int, seed: int) -> np.ndarray:
    """Seeded unit-norm rows, the scale of pooled encoder outputs."""
    stream = SplitMix64(derive_seed(seed, 0x6C))
    rows = np.array(stream.normals(n * dim)).reshape(n, dim)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def planted_bundle():
    """50-image planted-cluster task (the convergence benchmark)."""
    spec = SyntheticSpec(n_images=50, captions_per_image=2, dim=16,
                         vocab_size=64, n_clusters=50, noise_std=0.05, seed=7)
    images, captions, pairs = generate_synthetic(spec)
    return TrainData(images=images, captions=captions, train_pairs=pairs,
                     vocab_size=64)


@pytest.fixture(scope="session")
def noisy_bundle():
    """Harder variant where ablation differences are visible."""
    spec = SyntheticSpec(n_images=40, captions_per_image=2, dim=16,
                         vocab_size=64, n_clusters=40, noise_std=0.35, seed=3)
    images, captions, pairs = generate_synthetic(spec)
    return TrainData(images=images, captions=captions, train_pairs=pairs,
                     vocab_size=64)
