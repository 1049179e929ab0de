"""Tests for the CVAE: encoders, prior/posterior, latent sampling, the
autoregressive decoder, losses, and the training loop."""

from types import SimpleNamespace

import numpy as np
import pytest

from conftest import grad_check_config, hand_scene, tiny_config
from socioformer import tensor as tc
from socioformer.attention import decoder_forward
from socioformer.config import ModelConfig, lr_for_epoch
from socioformer.cvae import (CvaeModel, GaussianParams,
                              build_masks, elbo_loss, future_truth_tensors,
                              prepare_scene, reconstruction_sq, train_cvae,
                              variety_loss, variety_seeds)
from socioformer.data import generate_synthetic
from socioformer.sequence import (MultiAgentSequence, Tag, embed_with_time,
                                  flatten_history)
from socioformer.tensor import Tensor


def make_model(cfg, seed=0):
    return CvaeModel(cfg, np.random.default_rng(seed))


class TestEncodePast:
    def test_tags_match_flat_history(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 3, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        assert C.tags == flatten_history(scene).tags
        assert C.dim == cfg.d_tau

    def test_deterministic_without_dropout(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        c1 = model.encode_past(scene).features.data
        c2 = model.encode_past(scene).features.data
        assert c1.tobytes() == c2.tobytes()

    def test_distant_agent_past_isolated(self, rng):
        cfg = tiny_config(eta=10.0)
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        far = hand_scene(rng, 1, cfg.H, cfg.T)
        # place the third agent 1000 m away: beyond eta from both others
        scene2 = hand_scene(rng, 3, cfg.H, cfg.T)
        scene2.past_pos[:2] = scene.past_pos
        scene2.future_pos[:2] = scene.future_pos
        scene2.past_pos[2] = far.past_pos[0] + 1000.0
        scene2.future_pos[2] = far.future_pos[0] + 1000.0
        scene2.past_vel[:2] = scene.past_vel
        model = make_model(cfg)
        base = model.encode_past(scene2).features.data.copy()
        scene3 = hand_scene(rng, 3, cfg.H, cfg.T)
        scene3.past_pos[:] = scene2.past_pos
        scene3.future_pos[:] = scene2.future_pos
        scene3.past_vel[:] = scene2.past_vel
        scene3.past_pos[2, :-1] += 17.0   # perturb far agent's past, keep its t=0
        scene3.past_vel[2] += 0.7
        out = model.encode_past(scene3).features.data
        n_rows = 2 * (cfg.H + 1)
        near_rows = [i for i, t in enumerate(model.encode_past(scene3).tags)
                     if t.agent in ("p0", "p1")]
        assert len(near_rows) == n_rows
        assert np.array_equal(out[near_rows], base[near_rows])


class TestPriorPosterior:
    def test_pool_of_single_element(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        scene.past_present[1, :-1] = False  # agent p1 observed only at t=0
        model = make_model(cfg)
        C = model.encode_past(scene)
        idx = C.agent_row_indices("p1")
        assert idx.size == 1
        pooled = model._pool_agent(C, "p1")
        assert np.array_equal(pooled.data[0], C.features.data[idx[0]])

    def test_pool_order_invariance(self, rng):
        feats = rng.normal(size=(4, 6))
        perm = rng.permutation(4)
        assert np.allclose(feats.mean(axis=0), feats[perm].mean(axis=0), atol=1e-12)

    def test_paper_shapes(self, rng):
        cfg = tiny_config(d_z=32, mlp_hidden=(32, 16))
        scene = hand_scene(rng, 3, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        params = model.prior_params(C, scene.agents)
        assert len(params) == 3
        for p in params:
            assert p.mu.shape == (1, 32)
            assert p.log_sigma.shape == (1, 32)
            assert np.all(p.sigma.data > 0)

    def test_missing_agent_pool_error(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        with pytest.raises(tc.DomainError):
            model.prior_params(C, ["ghost"])

    def test_posterior_depends_on_connected_future(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        q1 = model.posterior_params(scene, C)
        scene.future_pos[1] += 0.5
        q2 = model.posterior_params(scene, C)
        assert not np.allclose(q1[0].mu.data, q2[0].mu.data)

    def test_prior_posterior_factorize_over_agents(self, rng):
        # relabeling equivariance: parameters travel with the agent, not the slot
        import dataclasses
        cfg = tiny_config()
        scene = hand_scene(rng, 3, cfg.H, cfg.T)
        model = make_model(cfg)
        perm = [2, 0, 1]
        scene_p = dataclasses.replace(
            scene, agents=[scene.agents[p] for p in perm],
            past_pos=scene.past_pos[perm], past_present=scene.past_present[perm],
            past_vel=scene.past_vel[perm], future_pos=scene.future_pos[perm],
            evaluated=scene.evaluated[perm])
        C = model.encode_past(scene)
        C_p = model.encode_past(scene_p)
        pri = model.prior_params(C, scene.agents)
        pri_p = model.prior_params(C_p, scene_p.agents)
        post = model.posterior_params(scene, C)
        post_p = model.posterior_params(scene_p, C_p)
        for i, p in enumerate(perm):
            assert np.allclose(pri_p[i].mu.data, pri[p].mu.data, atol=1e-10)
            assert np.allclose(post_p[i].mu.data, post[p].mu.data, atol=1e-10)
            assert np.allclose(post_p[i].log_sigma.data, post[p].log_sigma.data,
                               atol=1e-10)

    def test_posterior_isolated_when_disconnected(self, rng):
        cfg = tiny_config(eta=1e-6)
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        q1 = model.posterior_params(scene, C)
        scene.future_pos[1] += 0.5
        q2 = model.posterior_params(scene, C)
        assert np.array_equal(q1[0].mu.data, q2[0].mu.data)
        assert np.array_equal(q1[0].log_sigma.data, q2[0].log_sigma.data)


class TestSampleLatents:
    def _params(self, mu, log_sigma):
        return GaussianParams(mu=Tensor(np.array([mu])),
                              log_sigma=Tensor(np.array([log_sigma])))

    def test_zero_sigma_returns_mu(self, rng):
        cfg = tiny_config()
        model = make_model(cfg)
        p = self._params([0.5, -1.0, 2.0, 0.0], [-40.0] * 4)
        z = model.sample_latents([p], np.random.default_rng(0))
        assert np.allclose(z.data[0], [0.5, -1.0, 2.0, 0.0], atol=1e-12)

    def test_monte_carlo_mean(self, rng):
        cfg = tiny_config(d_z=2)
        model = make_model(cfg)
        p = self._params([1.0, -2.0], [0.0, 0.5])
        gen = np.random.default_rng(1)
        draws = np.stack([model.sample_latents([p], gen).data[0]
                          for _ in range(100_000)])
        sigma = np.exp([0.0, 0.5])
        bound = 3 * sigma / np.sqrt(100_000)
        assert np.all(np.abs(draws.mean(axis=0) - [1.0, -2.0]) < bound)

    def test_pathwise_gradient_identity(self, rng):
        cfg = tiny_config()
        model = make_model(cfg)
        mu = Tensor(np.zeros((1, 4)), requires_grad=True)
        p = GaussianParams(mu=mu, log_sigma=Tensor(np.zeros((1, 4))))
        with tc.Tape() as tape:
            z = model.sample_latents([p], np.random.default_rng(2))
            out = tc.reduce_sum(z)
        tc.backward(out, tape)
        assert np.array_equal(mu.grad, np.ones((1, 4)))


class TestDecodeFuture:
    def test_output_tags_and_length(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 3, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        z = Tensor(rng.normal(size=(3, cfg.d_z)))
        decoded = model.decode_future(C, z, scene)
        assert len(decoded.tags) == 3 * cfg.T
        assert decoded.tags == [Tag(t, a) for t in range(1, cfg.T + 1)
                                for a in scene.agents]
        assert decoded.array.shape == (3, cfg.T, 2)

    def test_latent_of_other_agent_influences(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        z = rng.normal(size=(2, cfg.d_z))
        base = model.decode_future(C, Tensor(z), scene).array
        z2 = z.copy()
        z2[1] += 0.5
        out = model.decode_future(C, Tensor(z2), scene).array
        assert np.abs(out[0] - base[0]).max() > 1e-9

    def test_incremental_matches_full_prefix_bitwise(self, rng):
        cfg = tiny_config(dec_layers=2)
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        z = Tensor(rng.normal(size=(2, cfg.d_z)))
        decoded = model.decode_future(C, z, scene)

        agents = [scene.agents[i] for i in scene.eval_indices]
        x0 = Tensor(scene.past_pos[scene.eval_indices, -1, :])
        positions = [x0] + decoded.steps[:-1]
        blocks, in_tags = [], []
        for u, pos in enumerate(positions):
            tags = [Tag(u, a) for a in agents]
            block = MultiAgentSequence(features=tc.concat_last(pos, z), tags=tags)
            block = embed_with_time(block, model.dec_W1, model.dec_W2, scene.H)
            blocks.append(block.features)
            in_tags.extend(tags)
        emb = MultiAgentSequence(features=tc.concat_rows(blocks), tags=in_tags)
        out_seq, _ = decoder_forward(emb, C,
                                     build_masks(scene, cfg.eta, in_tags, in_tags),
                                     build_masks(scene, cfg.eta, in_tags, C.tags),
                                     model.future_dec_layers)
        n = len(agents)
        for u in range(scene.T):
            rows = tc.gather_rows(out_seq.features, np.arange(u * n, (u + 1) * n))
            pred = tc.add(x0, model.out_mlp(rows))
            assert pred.data.tobytes() == decoded.steps[u].data.tobytes()

    def test_wrong_latent_shape(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        C = model.encode_past(scene)
        with pytest.raises(tc.ShapeError):
            model.decode_future(C, Tensor(np.zeros((3, cfg.d_z))), scene)


class TestLosses:
    def test_kl_zero_when_posterior_equals_prior(self):
        p = GaussianParams(mu=Tensor(np.array([[0.2, -0.4]])),
                           log_sigma=Tensor(np.array([[0.1, -0.3]])))
        kl = tc.kl_diag_gaussians(p.mu, p.sigma, p.mu, p.sigma)
        assert kl.item() == 0.0

    def test_mse_zero_when_prediction_equals_truth(self, rng):
        cfg = tiny_config()
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        truths = future_truth_tensors(scene)
        fake = SimpleNamespace(steps=truths)
        assert reconstruction_sq(fake, truths).item() == 0.0

    def test_beta_default_one(self):
        assert ModelConfig().beta == 1.0

    def test_elbo_diagnostics(self, rng):
        cfg = tiny_config()
        scene = prepare_scene(hand_scene(rng, 2, cfg.H, cfg.T), None)
        model = make_model(cfg)
        loss, diag = elbo_loss(model, scene, seed=4)
        assert loss.item() == pytest.approx(diag["mse"] + diag["kl"])
        assert all(k >= -1e-12 for k in diag["kl_unclipped"])

    def test_kl_clip_modes(self):
        big = Tensor(np.array(5.0))
        assert tc.clamp_max(big, 2.0).item() == 2.0
        assert tc.clamp_min(big, 2.0).item() == 5.0
        small = Tensor(np.array(0.5))
        assert tc.clamp_max(small, 2.0).item() == 0.5
        assert tc.clamp_min(small, 2.0).item() == 2.0

    def test_variety_k1_is_plain_mse(self, rng):
        cfg = tiny_config()
        scene = prepare_scene(hand_scene(rng, 2, cfg.H, cfg.T), None)
        model = make_model(cfg)
        loss1 = variety_loss(model, scene, K=1, seed=9).item()
        C = model.encode_past(scene)
        priors = model.prior_params(C, [scene.agents[i] for i in scene.eval_indices])
        z = model.sample_latents(priors, variety_seeds(9, 1)[0])
        decoded = model.decode_future(C, z, scene)
        manual = reconstruction_sq(decoded, future_truth_tensors(scene)).item()
        assert loss1 == pytest.approx(manual / (2 * cfg.T))

    def test_variety_zero_when_sample_hits_truth(self, rng):
        cfg = tiny_config()
        scene = prepare_scene(hand_scene(rng, 2, cfg.H, cfg.T), None)
        model = make_model(cfg)
        C = model.encode_past(scene)
        priors = model.prior_params(C, [scene.agents[i] for i in scene.eval_indices])
        z = model.sample_latents(priors, variety_seeds(21, 3)[0])
        decoded = model.decode_future(C, z, scene)
        scene.future_pos[scene.eval_indices] = decoded.array
        assert variety_loss(model, scene, K=3, seed=21).item() == 0.0

    def test_variety_nested_monotone(self, rng):
        cfg = tiny_config()
        scene = prepare_scene(hand_scene(rng, 3, cfg.H, cfg.T), None)
        model = make_model(cfg)
        v1 = variety_loss(model, scene, K=1, seed=33).item()
        v5 = variety_loss(model, scene, K=5, seed=33).item()
        assert v5 <= v1 + 1e-15


class TestConfigVariants:
    def test_standard_attention_mode_ties_projections(self, rng):
        cfg = tiny_config(attention_mode="standard")
        scene = prepare_scene(hand_scene(rng, 2, cfg.H, cfg.T), None)
        model = make_model(cfg)
        names = [n for n, _ in model.named_parameters()]
        assert not any("other" in n for n in names)
        head = model.encoder_layers[0].attn.heads[0]
        assert head.Wq_other is head.Wq_self
        loss, diag = elbo_loss(model, scene, seed=2)
        assert np.isfinite(loss.item())

    def test_agent_encoding_breaks_equivariance(self, rng):
        # the ablation deliberately injects slot order into the features
        import dataclasses
        cfg = tiny_config(agent_encoding=True)
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        model = make_model(cfg)
        perm = [1, 0]
        scene_p = dataclasses.replace(
            scene, agents=[scene.agents[p] for p in perm],
            past_pos=scene.past_pos[perm], past_present=scene.past_present[perm],
            past_vel=scene.past_vel[perm], future_pos=scene.future_pos[perm],
            evaluated=scene.evaluated[perm])
        c1 = model.encode_past(scene).features.data
        c2 = model.encode_past(scene_p).features.data
        row_perm = np.concatenate([t * 2 + np.array(perm) for t in range(cfg.H + 1)])
        assert not np.allclose(c2, c1[row_perm], atol=1e-8)

    def test_heading_state_dimension(self, rng):
        import dataclasses
        cfg = tiny_config(use_heading=True, d_s=5)
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        heading = rng.uniform(0, 2 * np.pi, size=(2, cfg.H + 1))
        scene = dataclasses.replace(scene, heading=heading)
        assert scene.state_dim() == 5
        assert scene.state_vector(0, 0).shape == (5,)
        model = make_model(cfg)
        C = model.encode_past(scene)
        assert C.dim == cfg.d_tau

    def test_context_vector_feeds_all_stages(self, rng):
        import dataclasses
        cfg = tiny_config(d_ctx=3)
        scene = hand_scene(rng, 2, cfg.H, cfg.T)
        ctx = rng.normal(size=(2, 3))
        scene = dataclasses.replace(scene, context=ctx)
        model = make_model(cfg)
        loss1, _ = elbo_loss(model, scene, seed=3)
        scene2 = dataclasses.replace(scene, context=ctx + 1.0)
        loss2, _ = elbo_loss(model, scene2, seed=3)
        assert loss1.item() != loss2.item()


class TestTraining:
    def test_lr_schedule(self):
        assert lr_for_epoch(1e-4, 0, 10) == 1e-4
        assert lr_for_epoch(1e-4, 9, 10) == 1e-4
        assert lr_for_epoch(1e-4, 10, 10) == 5e-5
        assert lr_for_epoch(1e-4, 20, 10) == 2.5e-5

    def test_loss_decreases_and_deterministic(self):
        cfg = tiny_config(synthetic_train=6, lr=3e-3, epochs_cvae=8, K=2)
        scenes = generate_synthetic("mixed", 6, 0.05, seed=5, H=cfg.H, T=cfg.T)
        model1, log1 = train_cvae(scenes, cfg)
        model2, log2 = train_cvae(scenes, cfg)
        assert [e["loss"] for e in log1] == [e["loss"] for e in log2]
        for (_, p1), (_, p2) in zip(model1.named_parameters(),
                                    model2.named_parameters()):
            assert p1.data.tobytes() == p2.data.tobytes()
        first, last = log1[0]["loss"], log1[-1]["loss"]
        assert last < first

    def test_empty_dataset_rejected(self):
        with pytest.raises(tc.DomainError):
            train_cvae([], tiny_config())


class TestFullGradients:
    def test_elbo_gradient_check_tiny(self, rng):
        cfg = grad_check_config()
        scene = prepare_scene(hand_scene(rng, 2, cfg.H, cfg.T), None)
        model = make_model(cfg, seed=7)
        params = model.parameters()
        report = tc.finite_diff_check_params(
            lambda: elbo_loss(model, scene, seed=11)[0], params,
            tol=1e-4, max_coords=250)
        assert report.passed, str(report)
