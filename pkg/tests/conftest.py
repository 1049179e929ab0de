"""Shared fixtures: tiny model configurations and hand-built scenes."""

import numpy as np
import pytest

from socioformer.config import RunConfig
from socioformer.data import Scene


def tiny_config(**overrides) -> RunConfig:
    """Desk-scale configuration: small dims, dropout off, fast to run."""
    base = dict(d_tau=16, d_k=16, heads=2, enc_layers=1, dec_layers=1,
                ffn_dim=16, mlp_hidden=(16, 16), d_z=4, H=3, T=4, K=2,
                dropout=0.0, eta=100.0, rotate_augment=False,
                synthetic="mixed", noise=0.05, seed=1)
    base.update(overrides)
    return RunConfig(**base)


def grad_check_config(**overrides) -> RunConfig:
    """The tiny gradient-suite configuration: 2 agents, H=2, T=2, 1 layer,
    2 heads, d_tau=8, d_z=4."""
    base = dict(d_tau=8, d_k=8, heads=2, enc_layers=1, dec_layers=1,
                ffn_dim=16, mlp_hidden=(8, 8), d_z=4, H=2, T=2, K=2,
                dropout=0.0, eta=100.0, seed=3)
    base.update(overrides)
    return RunConfig(**base)


def hand_scene(rng: np.random.Generator, n_agents: int, H: int, T: int,
               spread: float = 3.0, scene_id: str = "hand") -> Scene:
    """Smooth random-walk scene with all agents present throughout."""
    steps = H + 1 + T
    start = rng.normal(scale=spread, size=(n_agents, 1, 2))
    vel = rng.normal(scale=0.4, size=(n_agents, 1, 2))
    drift = np.cumsum(rng.normal(scale=0.05, size=(n_agents, steps, 2)), axis=1)
    t = np.arange(steps).reshape(1, steps, 1)
    pos = start + vel * t + drift
    return Scene(scene_id=scene_id, agents=[f"p{i}" for i in range(n_agents)],
                 H=H, T=T, past_pos=pos[:, :H + 1],
                 past_present=np.ones((n_agents, H + 1), dtype=bool),
                 future_pos=pos[:, H + 1:],
                 evaluated=np.ones(n_agents, dtype=bool))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
