"""Conditional VAE over multi-agent futures: past encoder, factorized
Gaussian prior and posterior, autoregressive future decoder, and the
training losses and loop.

Latent intent is one code per agent; prior and posterior factorize over
agents but each agent's parameters are computed from jointly attended
features, so one agent's future can shift another's distribution. The
future decoder is autoregressive with the model's own outputs (no teacher
forcing) and predicts offsets from each agent's current position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import (AttnMasks, DecoderAttention, DecoderLayerParams,
                        DecoderState, EncoderLayerParams, Mlp, decoder_forward,
                        encoder_forward)
from .config import ModelConfig, RunConfig, lr_for_epoch
from .data import Scene, rotate_scene, scene_center
from .sequence import (MultiAgentSequence, Tag, agent_slot_encoding,
                       connectivity_mask, embed_with_time, flatten_future,
                       flatten_history, identity_mask)
from .tensor import Tape, Tensor

_LOG_SIGMA_BOUND = 8.0


class DivergenceError(Exception):
    """Training produced a non-finite loss or gradient."""


@dataclass
class GaussianParams:
    """Diagonal Gaussian over one agent's latent code; sigma stored as log."""

    mu: Tensor          # (1, d_z)
    log_sigma: Tensor   # (1, d_z)

    @property
    def sigma(self) -> Tensor:
        return tc.exp(self.log_sigma)


def build_masks(scene: Scene, eta: float, q_tags: list[Tag],
                k_tags: list[Tag]) -> AttnMasks:
    forbidden = connectivity_mask(scene, eta, q_tags, k_tags)
    return AttnMasks(identity=identity_mask(q_tags, k_tags),
                     forbidden=forbidden if forbidden.any() else None)


class CvaeModel:
    """All trainable parameters of the CVAE plus its forward operations."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.d_tau
        tied = config.attention_mode == "standard"
        in_past = config.d_s + config.d_ctx
        in_future = config.d_p + config.d_ctx
        in_dec = config.d_p + config.d_z + config.d_ctx

        def embedder(d_in):
            w1 = tc.uniform_init(rng, d_in, (d, d_in))
            w2 = tc.uniform_init(rng, 2 * d, (d, 2 * d))
            return w1, w2

        self.past_W1, self.past_W2 = embedder(in_past)
        self.future_W1, self.future_W2 = embedder(in_future)
        self.dec_W1, self.dec_W2 = embedder(in_dec)
        args = (d, config.d_k, config.heads, config.ffn_dim)
        self.encoder_layers = [EncoderLayerParams(rng, *args, tied=tied)
                               for _ in range(config.enc_layers)]
        self.future_enc_layers = [DecoderLayerParams(rng, *args, tied=tied)
                                  for _ in range(config.dec_layers)]
        self.future_dec_layers = [DecoderLayerParams(rng, *args, tied=tied)
                                  for _ in range(config.dec_layers)]
        self.prior_mlp = Mlp(rng, d, config.mlp_hidden, 2 * config.d_z)
        self.posterior_mlp = Mlp(rng, d, config.mlp_hidden, 2 * config.d_z)
        self.out_mlp = Mlp(rng, d, config.mlp_hidden, config.d_p)

    def named_parameters(self):
        yield "past_embed.W1", self.past_W1
        yield "past_embed.W2", self.past_W2
        yield "future_embed.W1", self.future_W1
        yield "future_embed.W2", self.future_W2
        yield "dec_embed.W1", self.dec_W1
        yield "dec_embed.W2", self.dec_W2
        for i, layer in enumerate(self.encoder_layers):
            yield from layer.parameters(f"enc.{i}")
        for i, layer in enumerate(self.future_enc_layers):
            yield from layer.parameters(f"future_enc.{i}")
        for i, layer in enumerate(self.future_dec_layers):
            yield from layer.parameters(f"future_dec.{i}")
        yield from self.prior_mlp.parameters("prior_mlp")
        yield from self.posterior_mlp.parameters("posterior_mlp")
        yield from self.out_mlp.parameters("out_mlp")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    # -- embedding helpers ------------------------------------------------

    def _maybe_slot_encode(self, seq: MultiAgentSequence, scene: Scene) -> MultiAgentSequence:
        if not self.config.agent_encoding:
            return seq
        enc = Tensor(agent_slot_encoding(seq.tags, scene.agents, self.config.d_tau))
        return seq.with_features(tc.add(seq.features, enc))

    # -- forward operations -----------------------------------------------

    def encode_past(self, scene: Scene, rng=None) -> MultiAgentSequence:
        """Encode the scene's past into the feature sequence used as memory."""
        seq = flatten_history(scene)
        seq = embed_with_time(seq, self.past_W1, self.past_W2, scene.H)
        seq = self._maybe_slot_encode(seq, scene)
        masks = build_masks(scene, self.config.eta, seq.tags, seq.tags)
        return encoder_forward(seq, masks, self.encoder_layers,
                               dropout_rate=self.config.dropout if rng is not None else 0.0,
                               rng=rng)

    def _pool_agent(self, seq: MultiAgentSequence, agent) -> Tensor:
        idx = seq.agent_row_indices(agent)
        if idx.size == 0:
            raise tc.DomainError(f"agent {agent!r} has no elements to pool")
        rows = tc.gather_rows(seq.features, idx)
        return tc.reduce_mean(rows, axis=0, keepdims=True)

    def _gaussian_head(self, mlp: Mlp, pooled: Tensor) -> GaussianParams:
        raw = mlp(pooled)
        d_z = self.config.d_z
        mu = tc.slice_cols(raw, 0, d_z)
        log_sigma = tc.clamp_min(tc.clamp_max(tc.slice_cols(raw, d_z, 2 * d_z),
                                              _LOG_SIGMA_BOUND), -_LOG_SIGMA_BOUND)
        return GaussianParams(mu=mu, log_sigma=log_sigma)

    def prior_params(self, C: MultiAgentSequence, agents) -> list[GaussianParams]:
        """Mean-pool each agent's past features and map to (mu, log sigma)."""
        return [self._gaussian_head(self.prior_mlp, self._pool_agent(C, a))
                for a in agents]

    def posterior_params(self, scene: Scene, C: MultiAgentSequence,
                         rng=None) -> list[GaussianParams]:
        """Infer each agent's latent distribution jointly from all futures.

        The future sequence attends the past memory, so the posterior is
        conditioned on the history; cross-agent attention makes one agent's
        future shift another's parameters when they are connected.
        """
        yseq = flatten_future(scene)
        yseq = embed_with_time(yseq, self.future_W1, self.future_W2, scene.H)
        yseq = self._maybe_slot_encode(yseq, scene)
        self_masks = build_masks(scene, self.config.eta, yseq.tags, yseq.tags)
        cross_masks = build_masks(scene, self.config.eta, yseq.tags, C.tags)
        rate = self.config.dropout if rng is not None else 0.0
        out_seq, _ = decoder_forward(yseq, C, self_masks, cross_masks,
                                     self.future_enc_layers,
                                     dropout_rate=rate, rng=rng)
        agents = [scene.agents[i] for i in scene.eval_indices]
        return [self._gaussian_head(self.posterior_mlp, self._pool_agent(out_seq, a))
                for a in agents]

    def sample_latents(self, params: list[GaussianParams],
                       rng: np.random.Generator) -> Tensor:
        """Reparameterized draw z = mu + sigma * eps, one row per agent."""
        eps = rng.standard_normal((len(params), self.config.d_z))
        rows = [tc.add(p.mu, tc.mul(p.sigma, Tensor(eps[i:i + 1])))
                for i, p in enumerate(params)]
        return tc.concat_rows(rows)

    def decode_future(self, C: MultiAgentSequence, Z: Tensor, scene: Scene,
                      rng=None, collect_attention: bool = False) -> "DecodedFuture":
        """Autoregressively decode T future steps for the evaluated agents.

        Each step feeds back the generated positions concatenated with the
        latent codes; outputs are offsets added to each agent's current
        position. Every block is computed with shapes independent of how
        many steps exist, so incremental and full-prefix decoding agree
        bitwise.
        """
        cfg = self.config
        idx = scene.eval_indices
        agents = [scene.agents[i] for i in idx]
        n = len(agents)
        if Z.shape != (n, cfg.d_z):
            raise tc.ShapeError(f"latents must be ({n}, {cfg.d_z}), got {Z.shape}")
        x0 = Tensor(scene.past_pos[idx, -1, :])
        context = Tensor(scene.context[idx]) if scene.context is not None else None

        in_tags = [Tag(u, a) for u in range(scene.T) for a in agents]
        self_masks = build_masks(scene, cfg.eta, in_tags, in_tags)
        cross_masks = build_masks(scene, cfg.eta, in_tags, C.tags)
        rate = cfg.dropout if rng is not None else 0.0
        state = DecoderState(self.future_dec_layers, C, in_tags, self_masks,
                             cross_masks, dropout_rate=rate, rng=rng,
                             collect=collect_attention)
        position = x0
        steps: list[Tensor] = []
        for u in range(scene.T):
            parts = [position, Z]
            if context is not None:
                parts.append(context)
            block_tags = [Tag(u, a) for a in agents]
            block = MultiAgentSequence(features=tc.concat_last(*parts), tags=block_tags)
            block = embed_with_time(block, self.dec_W1, self.dec_W2, scene.H)
            block = self._maybe_slot_encode(block, scene)
            out_rows = state.append_block(block.features)
            offsets = self.out_mlp(out_rows)
            position = tc.add(x0, offsets)
            steps.append(position)
        tags = [Tag(t, a) for t in range(1, scene.T + 1) for a in agents]
        return DecodedFuture(steps=steps, tags=tags, agents=agents,
                             input_tags=in_tags, memory_tags=C.tags,
                             attention=state.attn)


@dataclass
class DecodedFuture:
    """Predicted future positions, one (N, 2) tensor per step 1..T."""

    steps: list[Tensor]
    tags: list[Tag]
    agents: list
    input_tags: list[Tag]
    memory_tags: list[Tag]
    attention: DecoderAttention | None = None

    @property
    def array(self) -> np.ndarray:
        """Positions as (N, T, 2)."""
        return np.stack([s.data for s in self.steps], axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def future_truth_tensors(scene: Scene) -> list[Tensor]:
    idx = scene.eval_indices
    return [Tensor(scene.future_pos[idx, t, :]) for t in range(scene.T)]


def reconstruction_sq(decoded: DecodedFuture, truths: list[Tensor]) -> Tensor:
    """Sum of squared position errors over agents, steps, and coordinates."""
    total = tc.sum_sq(tc.sub(decoded.steps[0], truths[0]))
    for pred, truth in zip(decoded.steps[1:], truths[1:]):
        total = tc.add(total, tc.sum_sq(tc.sub(pred, truth)))
    return total


def clipped_kl(kl: Tensor, clip: float, mode: str) -> Tensor:
    if mode == "upper":
        return tc.clamp_max(kl, clip)
    return tc.clamp_min(kl, clip)


def elbo_loss(model: CvaeModel, scene: Scene, seed: int,
              rng=None) -> tuple[Tensor, dict]:
    """Reconstruction (1 / 2 beta) * sum of squared errors plus the
    per-agent clipped KL between posterior and prior.

    The future is decoded from a single reparameterized posterior draw
    seeded by ``seed``; diagnostics expose both terms and the unclipped
    per-agent KL values.
    """
    cfg = model.config
    C = model.encode_past(scene, rng=rng)
    agents = [scene.agents[i] for i in scene.eval_indices]
    priors = model.prior_params(C, agents)
    posteriors = model.posterior_params(scene, C, rng=rng)
    z = model.sample_latents(posteriors, np.random.default_rng(seed))
    decoded = model.decode_future(C, z, scene, rng=rng)
    mse = tc.scale(reconstruction_sq(decoded, future_truth_tensors(scene)),
                   1.0 / (2.0 * cfg.beta))
    kl_terms = [tc.kl_diag_gaussians(q.mu, q.sigma, p.mu, p.sigma)
                for q, p in zip(posteriors, priors)]
    loss = mse
    kl_sum = 0.0
    for kl in kl_terms:
        clipped = clipped_kl(kl, cfg.kl_clip, cfg.kl_clip_mode)
        kl_sum += clipped.item()
        loss = tc.add(loss, clipped)
    diag = {
        "mse": mse.item(),
        "kl_unclipped": [kl.item() for kl in kl_terms],
        "kl": kl_sum,
        "loss": loss.item(),
    }
    return loss, diag


def variety_seeds(seed: int, k: int) -> list[np.random.Generator]:
    """K generators from one seed; prefixes are nested across different K."""
    children = np.random.SeedSequence(seed).spawn(k)
    return [np.random.default_rng(c) for c in children]


def variety_loss(model: CvaeModel, scene: Scene, K: int, seed: int,
                 rng=None) -> Tensor:
    """Best-of-K prior-sample reconstruction, normalized by agents x steps."""
    if K < 1:
        raise tc.DomainError("variety loss requires K >= 1")
    C = model.encode_past(scene, rng=rng)
    agents = [scene.agents[i] for i in scene.eval_indices]
    priors = model.prior_params(C, agents)
    truths = future_truth_tensors(scene)
    best: Tensor | None = None
    for gen in variety_seeds(seed, K):
        z = model.sample_latents(priors, gen)
        decoded = model.decode_future(C, z, scene, rng=rng)
        sq = reconstruction_sq(decoded, truths)
        if best is None or sq.item() < best.item():
            best = sq
    return tc.scale(best, 1.0 / (len(agents) * scene.T))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def prepare_scene(scene: Scene, augment_rng: np.random.Generator | None) -> Scene:
    """Center the scene; optionally rotate by a random angle (augmentation)."""
    out = scene_center(scene)
    if augment_rng is not None:
        out = rotate_scene(out, augment_rng.uniform(0.0, 2.0 * np.pi))
    return out


def train_cvae(dataset: list[Scene], config: RunConfig,
               epochs: int | None = None,
               progress=None) -> tuple[CvaeModel, list[dict]]:
    """Train the CVAE with Adam; deterministic given the config seed.

    Per-scene loss is elbo + variety_weight * variety(K). The learning
    rate starts at config.lr and is halved every ``lr_halve_every_cvae``
    epochs. Non-finite losses abort with :class:`DivergenceError`.
    """
    if not dataset:
        raise tc.DomainError("train_cvae requires a nonempty dataset")
    epochs = config.epochs_cvae if epochs is None else epochs
    model = CvaeModel(config, np.random.default_rng(config.seed))
    params = model.parameters()
    opt = tc.Adam(params, lr=config.lr)
    log: list[dict] = []
    for epoch in range(epochs):
        opt.lr = lr_for_epoch(config.lr, epoch, config.lr_halve_every_cvae)
        epoch_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 7, epoch)))
        order = epoch_rng.permutation(len(dataset))
        total = {"loss": 0.0, "mse": 0.0, "kl": 0.0, "variety": 0.0}
        clip_events = 0
        for scene_idx in order:
            step_ss = np.random.SeedSequence((config.seed, 11, epoch, int(scene_idx)))
            latent_seed, variety_seed, aug_seed, drop_seed = step_ss.generate_state(4)
            scene = prepare_scene(
                dataset[scene_idx],
                np.random.default_rng(aug_seed) if config.rotate_augment else None)
            drop_rng = np.random.default_rng(drop_seed) if config.dropout > 0 else None
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss, diag = elbo_loss(model, scene, int(latent_seed), rng=drop_rng)
                    variety = tc.scale(
                        variety_loss(model, scene, config.K, int(variety_seed),
                                     rng=drop_rng),
                        config.variety_weight)
                    loss = tc.add(loss, variety)
                tc.backward(loss, tape)
            except tc.NumericalError as exc:
                raise DivergenceError(
                    f"non-finite value at epoch {epoch}, scene "
                    f"{dataset[scene_idx].scene_id}: {exc}") from exc
            _, clipped = tc.clip_grad_norm(params, config.grad_clip)
            clip_events += int(clipped)
            opt.step()
            total["loss"] += loss.item()
            total["mse"] += diag["mse"]
            total["kl"] += diag["kl"]
            total["variety"] += variety.item()
        entry = {"epoch": epoch, "lr": opt.lr, "grad_clips": clip_events}
        entry.update({k: v / len(dataset) for k, v in total.items()})
        log.append(entry)
        if progress is not None:
            progress(entry)
    return model, log
