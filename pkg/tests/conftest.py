import numpy as np
import pytest
import torch

from ego2front.config import RunConfig, default_config
from ego2front.pipeline import FrontalSynthesizer
from ego2front.toydata import generate_toy_dataset


def tiny_config(image_size: int = 32) -> RunConfig:
    """Desk-scale-but-smaller config so unit tests run in seconds."""
    cfg = default_config()
    cfg.data.image_size = image_size
    cfg.denoiser.base_channels = 16
    cfg.denoiser.embed_dim = 32
    cfg.denoiser.num_heads = 2
    cfg.codec.base_channels = 8
    cfg.codec.pretrain_steps = 80
    cfg.schedule.steps = 50
    cfg.train.steps = 20
    cfg.train.batch_size = 2
    cfg.train.checkpoint_every = 10
    cfg.train.log_every = 2
    cfg.sample.steps = 5
    cfg.eval.sample_steps = 5
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg) -> FrontalSynthesizer:
    torch.manual_seed(0)
    return FrontalSynthesizer.from_config(tiny_cfg)


@pytest.fixture(scope="session")
def trained_tiny_model():
    """Tiny model trained 100 steps in memory on synthetic pairs."""
    from ego2front.objective import LossWeights, compound_loss, default_perceptual_net
    from ego2front.toydata import synthetic_samples

    cfg = tiny_config()
    torch.manual_seed(0)
    model = FrontalSynthesizer.from_config(cfg)
    samples = synthetic_samples(6, size=32, seed=2)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=2e-3)
    weights = LossWeights()
    pnet = default_perceptual_net()
    for step in range(100):
        batch = [samples[step % 3 * 2], samples[step % 3 * 2 + 1]]
        res = compound_loss(model, batch, weights, seed=step)
        opt.zero_grad()
        res.total.backward()
        opt.step()
    model.eval()
    return model, samples


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyds")
    generate_toy_dataset(
        root, subjects=3, frontals_per_subject=2, egos_per_frontal=4, image_size=32, seed=0
    )
    return root


@pytest.fixture(scope="session")
def toy_manifest(toy_root):
    """Paired manifest over the session toy dataset, with both splits populated."""
    from ego2front.datapipe import DatasetManifest, pair_samples, scan_directory

    ego, _ = scan_directory(toy_root / "ego", rel_to=toy_root)
    frontal, _ = scan_directory(toy_root / "frontal", mask_dir=toy_root / "masks", rel_to=toy_root)
    entries, _ = pair_samples(ego, frontal, window=5.0, per_frontal=4, val_fraction=0.3)
    if not any(e.split == "val" for e in entries):
        entries[-1].split = "val"
    if not any(e.split == "train" for e in entries):
        entries[0].split = "train"
    manifest = DatasetManifest(entries, root=toy_root)
    path = toy_root / "manifest.jsonl"
    manifest.save(path)
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
