"""Diversity-promoting trajectory sampler trained on a frozen CVAE.

One Gaussian noise vector per agent is pushed through K learned affine
maps (A, b), generated per scene from the agent's pooled past features,
yielding K latent sets that decode into K futures. The loss rewards
covering the ground truth, staying close to the prior (analytic KL of the
induced Gaussian N(b, A A^T) against the diagonal prior), and pairwise
diversity of the decoded futures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import Mlp
from .config import RunConfig, lr_for_epoch
from .cvae import (CvaeModel, DivergenceError, GaussianParams, clipped_kl,
                   future_truth_tensors, prepare_scene, reconstruction_sq)
from .data import Scene
from .sequence import MultiAgentSequence
from .tensor import Tape, Tensor

_DIAG_SHIFT = 1e-3  # added to the map's diagonal to keep it nonsingular


@dataclass
class AffineMap:
    """One latent map z = A eps + b; diagonal A stored as its diagonal."""

    a: Tensor            # (d_z, d_z) full, or (1, d_z) diagonal
    b: Tensor            # (1, d_z)
    diagonal: bool

    def apply(self, eps_row: Tensor) -> Tensor:
        if self.diagonal:
            return tc.add(tc.mul(self.a, eps_row), self.b)
        return tc.add(tc.matmul(eps_row, tc.transpose(self.a)), self.b)

    def cov_diag(self) -> Tensor:
        """Diagonal of A A^T as a (1, d_z) tensor."""
        if self.diagonal:
            return tc.square(self.a)
        return tc.reshape(tc.reduce_sum(tc.square(self.a), axis=1), (1, -1))

    def log_det_cov(self) -> Tensor:
        """log det(A A^T); for diagonal maps via log of squared entries."""
        if self.diagonal:
            return tc.reduce_sum(tc.log(tc.square(self.a)))
        return tc.scale(tc.logabsdet(self.a), 2.0)


class SamplerModel:
    """Per-scene generator of K affine latent maps per agent."""

    def __init__(self, config, rng: np.random.Generator):
        self.config = config
        self.K = config.K
        d_z = config.d_z
        self.diagonal = config.sampler_diag_a
        per_k = (d_z + d_z) if self.diagonal else (d_z * d_z + d_z)
        self.mlp = Mlp(rng, config.d_tau, config.mlp_hidden, self.K * per_k)
        self._per_k = per_k

    def named_parameters(self):
        yield from self.mlp.parameters("sampler_mlp")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def maps_for_agent(self, pooled: Tensor) -> list[AffineMap]:
        """K affine maps from one agent's pooled past feature (1, d_tau)."""
        d_z = self.config.d_z
        raw = self.mlp(pooled)
        maps = []
        for k in range(self.K):
            base = k * self._per_k
            if self.diagonal:
                a = tc.shift(tc.slice_cols(raw, base, base + d_z), _DIAG_SHIFT)
                b = tc.slice_cols(raw, base + d_z, base + 2 * d_z)
            else:
                flat = tc.slice_cols(raw, base, base + d_z * d_z)
                a = tc.add(tc.reshape(flat, (d_z, d_z)),
                           Tensor(np.eye(d_z) * _DIAG_SHIFT))
                b = tc.slice_cols(raw, base + d_z * d_z, base + d_z * d_z + d_z)
            maps.append(AffineMap(a=a, b=b, diagonal=self.diagonal))
        return maps


def generate_latent_sets(sampler: SamplerModel, cvae: CvaeModel,
                         C: MultiAgentSequence, agents: list, seed: int,
                         ) -> tuple[list[Tensor], list[list[AffineMap]]]:
    """K latent sets sharing one noise draw per agent.

    Returns the K (N, d_z) latent tensors plus the per-agent affine maps
    (outer index agent, inner index k) for KL evaluation.
    """
    d_z = sampler.config.d_z
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((len(agents), d_z))
    agent_maps = [sampler.maps_for_agent(cvae._pool_agent(C, a)) for a in agents]
    latent_sets = []
    for k in range(sampler.K):
        rows = [agent_maps[i][k].apply(Tensor(eps[i:i + 1]))
                for i in range(len(agents))]
        latent_sets.append(tc.concat_rows(rows))
    return latent_sets, agent_maps


def kl_affine_vs_diag(m: AffineMap, prior: GaussianParams) -> Tensor:
    """Analytic KL( N(b, A A^T) || N(mu, diag sigma^2) ) as a scalar."""
    sigma_sq = tc.square(prior.sigma)
    quad = tc.reduce_sum(tc.div(tc.add(m.cov_diag(), tc.square(tc.sub(m.b, prior.mu))),
                                sigma_sq))
    log_det_prior = tc.reduce_sum(tc.log(sigma_sq))
    d_z = m.b.shape[1]
    return tc.scale(tc.add(tc.sub(quad, m.log_det_cov()), tc.shift(log_det_prior, -d_z)),
                    0.5)


def sampler_loss(cvae: CvaeModel, sampler: SamplerModel, scene: Scene,
                 seed: int, rng=None) -> tuple[Tensor, dict]:
    """Best-of-K reconstruction + prior KL + pairwise diversity penalty.

    The KL of each agent is clipped as in CVAE training and averaged over
    the K maps. The diversity term averages exp(-||Y_k1 - Y_k2||^2 /
    sigma_d) over ordered sample pairs; with K=1 it is omitted.
    """
    cfg = sampler.config
    K = sampler.K
    C = cvae.encode_past(scene, rng=rng)
    agents = [scene.agents[i] for i in scene.eval_indices]
    priors = cvae.prior_params(C, agents)
    latent_sets, agent_maps = generate_latent_sets(sampler, cvae, C, agents, seed)
    decoded = [cvae.decode_future(C, z, scene, rng=rng) for z in latent_sets]
    truths = future_truth_tensors(scene)

    recon_terms = [reconstruction_sq(d, truths) for d in decoded]
    best = min(recon_terms, key=lambda t: t.item())
    loss = best

    kl_value = 0.0
    for i, prior in enumerate(priors):
        per_k = [clipped_kl(kl_affine_vs_diag(agent_maps[i][k], prior),
                            cfg.kl_clip, cfg.kl_clip_mode) for k in range(K)]
        agent_kl = per_k[0]
        for term in per_k[1:]:
            agent_kl = tc.add(agent_kl, term)
        agent_kl = tc.scale(agent_kl, 1.0 / K)
        kl_value += agent_kl.item()
        loss = tc.add(loss, agent_kl)

    diversity_value = 0.0
    if K >= 2:
        pair_sum = None
        for k1 in range(K):
            for k2 in range(k1 + 1, K):
                d_sq = reconstruction_sq(decoded[k1], decoded[k2].steps)
                term = tc.exp(tc.scale(d_sq, -1.0 / cfg.sigma_d))
                pair_sum = term if pair_sum is None else tc.add(pair_sum, term)
        diversity = tc.scale(pair_sum, 2.0 / (K * (K - 1)))
        diversity_value = diversity.item()
        loss = tc.add(loss, diversity)

    diag = {"recon": best.item(), "kl": kl_value, "diversity": diversity_value,
            "loss": loss.item()}
    return loss, diag


def train_sampler(dataset: list[Scene], cvae: CvaeModel, config: RunConfig,
                  epochs: int | None = None,
                  progress=None) -> tuple[SamplerModel, list[dict]]:
    """Optimize the sampler on a frozen CVAE.

    All CVAE parameters get ``requires_grad=False`` for the duration, so
    gradients flow through the decoder but no CVAE weight receives one.
    """
    if not dataset:
        raise tc.DomainError("train_sampler requires a nonempty dataset")
    epochs = config.epochs_sampler if epochs is None else epochs
    sampler = SamplerModel(config, np.random.default_rng(config.seed + 1))
    cvae_params = cvae.parameters()
    saved_flags = [p.requires_grad for p in cvae_params]
    for p in cvae_params:
        p.requires_grad = False
        p.grad = None
    params = sampler.parameters()
    opt = tc.Adam(params, lr=config.lr)
    log: list[dict] = []
    try:
        for epoch in range(epochs):
            opt.lr = lr_for_epoch(config.lr, epoch, config.lr_halve_every_sampler)
            epoch_rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, 13, epoch)))
            order = epoch_rng.permutation(len(dataset))
            total = {"loss": 0.0, "recon": 0.0, "kl": 0.0, "diversity": 0.0}
            clip_events = 0
            for scene_idx in order:
                step_ss = np.random.SeedSequence(
                    (config.seed, 17, epoch, int(scene_idx)))
                eps_seed, aug_seed, drop_seed = step_ss.generate_state(3)
                scene = prepare_scene(
                    dataset[scene_idx],
                    np.random.default_rng(aug_seed) if config.rotate_augment else None)
                drop_rng = np.random.default_rng(drop_seed) if config.dropout > 0 else None
                opt.zero_grad()
                try:
                    with Tape() as tape:
                        loss, diag = sampler_loss(cvae, sampler, scene,
                                                  int(eps_seed), rng=drop_rng)
                    tc.backward(loss, tape)
                except tc.NumericalError as exc:
                    raise DivergenceError(
                        f"non-finite value at sampler epoch {epoch}, scene "
                        f"{dataset[scene_idx].scene_id}: {exc}") from exc
                _, clipped = tc.clip_grad_norm(params, config.grad_clip)
                clip_events += int(clipped)
                opt.step()
                for key in ("loss", "recon", "kl", "diversity"):
                    total[key] += diag[key]
            entry = {"epoch": epoch, "lr": opt.lr, "grad_clips": clip_events}
            entry.update({k: v / len(dataset) for k, v in total.items()})
            log.append(entry)
            if progress is not None:
                progress(entry)
    finally:
        for p, flag in zip(cvae_params, saved_flags):
            p.requires_grad = flag
    return sampler, log
