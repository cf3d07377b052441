import dataclasses

import pytest

from tokensplat.backbone import ModelConfig
from tokensplat.config import RunConfig, TrainConfig
from tokensplat.synth import SynthConfig, synth_gen

TINY_MODEL = ModelConfig(patch_size=8, embed_dim=16, encoder_depth=1, decoder_depth=2, heads=2, height=16, width=16,
                         fuse_dim=16, epsilon=0.1)
TINY_DATA = SynthConfig(num_views=3, num_targets=1, num_gaussians=12, height=16, width=16)


@pytest.fixture
def tiny_cfg():
    return RunConfig(model=TINY_MODEL, data=TINY_DATA, train=TrainConfig(steps=3, checkpoint_every=2))


@pytest.fixture(scope="session")
def tiny_scene():
    return synth_gen(TINY_DATA, 0)


def with_steps(cfg, steps):
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=steps))
