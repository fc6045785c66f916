"""Tiny model/data configurations shared by the slower tests."""

import numpy as np
import torch

from boltzformer.boltzmann import SamplerConfig
from boltzformer.decoder import DecoderConfig
from boltzformer.encoder import EncoderConfig
from boltzformer.model import ModelConfig, build_model
from boltzformer.nn_core import DTYPE
from boltzformer.synthdata import SceneConfig


def tiny_model_config(policy="boltzmann", seed=0, **dec):
    enc = EncoderConfig(input_size=16, dim=8, level_sizes=(2, 4, 8), semantic_size=8)
    base = dict(layers=3, queries=2, dim=8, heads=2, schedule=(0, 1, 2), sampler=SamplerConfig(policy=policy, sample_ratio=0.25))
    base.update(dec)
    return ModelConfig(encoder=enc, decoder=DecoderConfig(**base), prompt_tokens=2, pigma_hidden=3, init_seed=seed)


def tiny_model(policy="boltzmann", seed=0, **dec):
    return build_model(tiny_model_config(policy, seed, **dec))


def tiny_scene():
    return SceneConfig(image_size=16, area_min=5e-3, area_max=0.2)


def random_batch(n=2, size=16, seed=0):
    g = np.random.default_rng(seed)
    images = torch.from_numpy(g.normal(size=(n, size, size, 1)))
    masks = torch.from_numpy((g.random((n, 4 * size // 2, 4 * size // 2)) > 0.7).astype(np.float64))
    prompts = torch.from_numpy(g.integers(0, 4, size=n))
    return images.to(DTYPE), masks, prompts


TINY_INI = """\
# 16x16 images, 2 queries, 3 layers: a CLI smoke configuration
[encoder]
level_sizes = 2, 4, 8
semantic_size = 8

[decoder]
layers = 3
schedule = 0, 1, 2
queries = 2
dim = 8
heads = 2
prompt_tokens = 2
pigma_hidden = 3

[sampler]
sample_ratio = 0.25

[train]
lr = 1e-3
batch_size = 8
max_epochs = 1

[data]
image_size = 16
area_min = 0.005
train_limit = 24
val_limit = 8
test_limit = 8
"""
