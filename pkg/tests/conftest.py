import numpy as np
import pytest

from fcl.numerics import RngStream
from fcl.toyworld import ToyImageWorld, ToyWorldConfig


@pytest.fixture(scope="session")
def toy_world():
    """One shared planted world; episodes draw their own streams."""
    return ToyImageWorld(ToyWorldConfig())


@pytest.fixture(scope="session")
def world_episode_cfg(toy_world):
    return toy_world.episode_config()


@pytest.fixture()
def gen():
    return RngStream(seed=1234, stream_id=0).generator()


class StubTextEncoder:
    """Fixed per-class embeddings, ignoring the context: lets loss formulas
    be checked against hand arithmetic without encoder geometry."""

    def __init__(self, embeddings: dict, base: dict | None = None):
        self.embeddings = embeddings
        self.n_classes = len(embeddings)

    def encode(self, class_id, ctx):
        return np.asarray(self.embeddings[class_id], dtype=np.float64)

    def encode_vjp(self, class_id, ctx, upstream):
        return np.zeros_like(ctx.tokens)


@pytest.fixture()
def stub_text_encoder():
    return StubTextEncoder
