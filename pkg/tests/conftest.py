import numpy as np
import pytest
import torch

from profeat.data import ImageBatch, LabeledDataset, ToySpec, make_toy_dataset
from profeat.models import ModelTriple, ProjectorConfig, build_backbone, build_projector

torch.set_num_threads(1)


def tiny_triple(seed=0, feature_dim=8, width=4, projector=True, out=6, dtype=torch.float32):
    """A small backbone (+ mlp2 projector) in inference mode."""
    bb = build_backbone("tiny_cnn", feature_dim, seed=seed, width=width)
    proj = None
    if projector:
        proj = build_projector(ProjectorConfig(widths=[feature_dim, feature_dim, out]), feature_dim,
                               seed=seed + 1000)
    m = ModelTriple(bb, proj).to(dtype)
    return m.eval()


def random_images(n, size=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g, dtype=dtype)


@pytest.fixture(scope="session")
def toy():
    return make_toy_dataset(ToySpec(num_classes=4, samples_per_class=40, image_size=16, margin=2.0),
                            seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def batch_of(images: np.ndarray, labels=None) -> ImageBatch:
    ds = LabeledDataset(images, np.zeros(len(images), np.int64) if labels is None else labels,
                        num_classes=10)
    return ds.to_batch()


def color_blobs(n_per, seed, sigma=30.0):
    """Colour-coded 8x8 classes with pixel noise: linearly separable up to the noise."""
    rng = np.random.default_rng(seed)
    colors = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]]) * 30
    y = np.repeat(np.arange(4), n_per)
    img = 128 + colors[y][:, None, None, :] + rng.normal(0, sigma, (len(y), 8, 8, 3))
    return LabeledDataset(np.clip(img, 0, 255).astype(np.uint8), y, 4)


# acceptance results, one line per criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
