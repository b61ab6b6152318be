"""Shared fixtures: one small corpus and trained checkpoints per session.

Training is the expensive part, so the stage-1/stage-2 checkpoints are
built once with settings chosen for speed, not quality; tests that need a
well-fit model train their own.
"""

import numpy as np
import pytest

from spiraldiff import latent_diffusion as ld
from spiraldiff import motion_autoencoder as mae
from spiraldiff.config import CorpusConfig, Stage1Config, Stage2Config
from spiraldiff.dataset import synthesize_corpus
from spiraldiff.pyramid import build_pyramid


LEAN_STAGE1 = dict(
    latent_h=8, latent_c=16, encoder_channels=(16, 16, 32, 32),
    temporal_layers=2, temporal_heads=4, ff_mult=2, decoder_hidden=128,
    codebook_size=64,
)
LEAN_STAGE2 = dict(
    steps=10, embed_dim=64, layers=2, heads=4, ff_mult=2,
    audio_backend="conv", conv_layers=2, conv_width=3,
)


@pytest.fixture(scope="session")
def corpus():
    return synthesize_corpus(CorpusConfig(), seed=7)


@pytest.fixture(scope="session")
def pyramid(corpus):
    return build_pyramid(corpus.base_mesh, 4, (0.5, 0.5, 0.5), 9, 2)


@pytest.fixture(scope="session")
def stage1_ckpt(corpus, pyramid):
    cfg = Stage1Config(epochs=12, lr=1e-3, lr_halve_every=1000, **LEAN_STAGE1)
    return mae.train_stage1(corpus, pyramid, cfg, seed=11)


@pytest.fixture(scope="session")
def stage2_ckpt(corpus, pyramid, stage1_ckpt):
    cfg = Stage2Config(epochs=10, lr=1e-3, lr_halve_every=1000, **LEAN_STAGE2)
    return ld.train_stage2(corpus, stage1_ckpt, pyramid, cfg, seed=13)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0
