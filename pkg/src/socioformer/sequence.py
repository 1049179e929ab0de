"""Flattened multi-agent trajectory sequences, sinusoidal timestamps, and
the mask matrices that encode agent identity, connectivity, and causality.

A sequence interleaves agents within each timestep: all agents at the
earliest step come first, then all agents at the next step, and so on.
Missing (timestep, agent) pairs are simply omitted, so sequence length
equals the number of observed elements rather than N x (H+1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tc
from .data import DataError, Scene
from .tensor import Tensor


class Tag(NamedTuple):
    """Timestep and agent identity of one sequence element."""

    t: int
    agent: object


@dataclass
class MultiAgentSequence:
    """An (L, d) feature tensor with one (timestep, agent) tag per row."""

    features: Tensor
    tags: list[Tag]

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.tags):
            raise DataError(
                f"features shape {self.features.shape} does not match {len(self.tags)} tags")

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: Tensor) -> "MultiAgentSequence":
        return MultiAgentSequence(features=features, tags=self.tags)

    def agent_row_indices(self, agent) -> np.ndarray:
        return np.array([i for i, tag in enumerate(self.tags) if tag.agent == agent],
                        dtype=np.intp)


def flatten_history(scene: Scene) -> MultiAgentSequence:
    """Flatten the scene's past into a tagged sequence of state vectors.

    Elements are ordered by ascending timestep, then by agent slot within
    the timestep; missing (timestep, agent) pairs are omitted.
    """
    rows, tags = [], []
    for t in range(-scene.H, 1):
        col = t + scene.H
        for i, agent in enumerate(scene.agents):
            if scene.past_present[i, col]:
                vec = scene.state_vector(i, t)
                if scene.context is not None:
                    vec = np.concatenate([vec, scene.context[i]])
                rows.append(vec)
                tags.append(Tag(t, agent))
    if not rows:
        raise DataError("scene has no observed past elements")
    return MultiAgentSequence(features=Tensor(np.stack(rows)), tags=tags)


def flatten_future(scene: Scene) -> MultiAgentSequence:
    """Flatten the ground-truth future positions of evaluated agents."""
    rows, tags = [], []
    for t in range(1, scene.T + 1):
        for i in scene.eval_indices:
            vec = scene.future_pos[i, t - 1]
            if scene.context is not None:
                vec = np.concatenate([vec, scene.context[i]])
            rows.append(vec)
            tags.append(Tag(t, scene.agents[i]))
    return MultiAgentSequence(features=Tensor(np.stack(rows)), tags=tags)


def timestamp(t: int, H: int, d_tau: int) -> np.ndarray:
    """Sinusoidal timestamp of dimension ``d_tau`` for timestep ``t``.

    Component k is sin((t+H)/10000^(k/d_tau)) for even k and
    cos((t+H)/10000^((k-1)/d_tau)) for odd k.
    """
    if d_tau % 2 != 0:
        raise DataError("timestamp dimension must be even")
    arg = float(t + H)
    k = np.arange(d_tau, dtype=np.float64)
    exponent = np.where(k % 2 == 0, k, k - 1) / d_tau
    phase = arg / np.power(10000.0, exponent)
    out = np.where(k % 2 == 0, np.sin(phase), np.cos(phase))
    return out


def timestamp_matrix(tags: list[Tag], H: int, d_tau: int) -> np.ndarray:
    cache: dict[int, np.ndarray] = {}
    rows = []
    for tag in tags:
        if tag.t not in cache:
            cache[tag.t] = timestamp(tag.t, H, d_tau)
        rows.append(cache[tag.t])
    return np.stack(rows)


def agent_slot_encoding(tags: list[Tag], agents: list, d_tau: int) -> np.ndarray:
    """Sinusoidal encoding of the agent slot index (ablation aid only).

    Uses the same sinusoid as :func:`timestamp` with the slot index in
    place of the shifted timestep. Deliberately breaks agent-permutation
    equivariance; off by default.
    """
    slot = {a: i for i, a in enumerate(agents)}
    rows = [timestamp(slot[tag.agent], 0, d_tau) for tag in tags]
    return np.stack(rows)


def embed_with_time(seq: MultiAgentSequence, W1: Tensor, W2: Tensor,
                    H: int) -> MultiAgentSequence:
    """Map each element x to W2 (W1 x ⊕ τ) where τ is its timestamp.

    ``W1`` is (d_tau, d_in) and ``W2`` is (d_tau, 2 d_tau), matching the
    column-vector convention; rows of the sequence are treated as vectors.
    """
    d_tau = W1.shape[0]
    if W1.shape[1] != seq.dim:
        raise DataError(f"W1 expects input dim {W1.shape[1]}, sequence has {seq.dim}")
    if W2.shape != (d_tau, 2 * d_tau):
        raise DataError(f"W2 must be ({d_tau}, {2 * d_tau}), got {W2.shape}")
    tau = Tensor(timestamp_matrix(seq.tags, H, d_tau))
    projected = tc.matmul(seq.features, tc.transpose(W1))
    stamped = tc.concat_last(projected, tau)
    out = tc.matmul(stamped, tc.transpose(W2))
    return seq.with_features(out)


# ---------------------------------------------------------------------------
# mask matrices
# ---------------------------------------------------------------------------

def _agent_codes(q_tags: list[Tag], k_tags: list[Tag],
                 known: dict | None = None) -> tuple[np.ndarray, np.ndarray, dict]:
    codes = dict(known) if known else {}
    rows = [[], []]
    for out, tags in zip(rows, (q_tags, k_tags)):
        for tag in tags:
            if tag.agent not in codes:
                if known is not None:
                    raise DataError(f"agent {tag.agent!r} has no t=0 position in the scene")
                codes[tag.agent] = len(codes)
            out.append(codes[tag.agent])
    return np.array(rows[0], dtype=np.intp), np.array(rows[1], dtype=np.intp), codes


def identity_mask(q_tags: list[Tag], k_tags: list[Tag]) -> np.ndarray:
    """M[i, j] = 1 iff query i and key j belong to the same agent."""
    q, k, _ = _agent_codes(q_tags, k_tags)
    return (q[:, None] == k[None, :]).astype(np.float64)


def connectivity_mask(scene: Scene, eta: float,
                      q_tags: list[Tag], k_tags: list[Tag]) -> np.ndarray:
    """Boolean matrix, True where attention is forbidden because the two
    agents are at distance >= eta at t=0. Self pairs are always allowed."""
    if not scene.past_present[:, -1].all():
        raise DataError("connectivity requires a t=0 position for every agent")
    codes = {agent: i for i, agent in enumerate(scene.agents)}
    q, k, _ = _agent_codes(q_tags, k_tags, known=codes)
    if math.isinf(eta):
        return np.zeros((len(q_tags), len(k_tags)), dtype=bool)
    pos = scene.past_pos[:, -1, :]
    dist = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
    far = dist >= eta
    np.fill_diagonal(far, False)
    return far[q[:, None], k[None, :]]


def causal_mask(q_tags: list[Tag], k_tags: list[Tag]) -> np.ndarray:
    """Boolean matrix, True where the key's timestep exceeds the query's.

    Within a timestep all agents are mutually visible: step-t inputs are
    step-(t-1) outputs, so same-step attention never leaks the future.
    """
    q_t = np.array([tag.t for tag in q_tags])
    k_t = np.array([tag.t for tag in k_tags])
    return k_t[None, :] > q_t[:, None]
