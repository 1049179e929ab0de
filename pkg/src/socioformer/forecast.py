"""Sample generation and metric evaluation for trained models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cvae import CvaeModel
from .data import (SampleSet, Scene, ade_fde, constant_velocity_baseline,
                   scene_center)
from .sampler import SamplerModel, generate_latent_sets


def prior_sample_set(model: CvaeModel, scene: Scene, K: int, seed: int) -> SampleSet:
    """K futures decoded from K independent prior latent draws.

    The scene must already be in the coordinate frame the model was
    trained in (centered); positions come back in that same frame.
    """
    C = model.encode_past(scene)
    agents = [scene.agents[i] for i in scene.eval_indices]
    priors = model.prior_params(C, agents)
    rng = np.random.default_rng(seed)
    futures = []
    for _ in range(K):
        z = model.sample_latents(priors, rng)
        futures.append(model.decode_future(C, z, scene).array)
    return SampleSet(futures=np.stack(futures))


def sampler_sample_set(model: CvaeModel, sampler: SamplerModel, scene: Scene,
                       seed: int) -> SampleSet:
    """K futures decoded from the sampler's K latent sets (shared noise)."""
    C = model.encode_past(scene)
    agents = [scene.agents[i] for i in scene.eval_indices]
    latent_sets, _ = generate_latent_sets(sampler, model, C, agents, seed)
    futures = [model.decode_future(C, z, scene).array for z in latent_sets]
    return SampleSet(futures=np.stack(futures))


def scene_sample_set(model: CvaeModel, sampler: SamplerModel | None,
                     scene: Scene, K: int, seed: int) -> SampleSet:
    if sampler is not None:
        if sampler.K != K:
            raise ValueError(f"sampler produces K={sampler.K} samples, requested {K}")
        return sampler_sample_set(model, sampler, scene, seed)
    return prior_sample_set(model, scene, K, seed)


@dataclass
class EvalReport:
    """Mean metrics over all evaluated agents of all scenes."""

    ade: float
    fde: float
    baseline_ade: float
    baseline_fde: float
    n_scenes: int
    n_agents: int
    k: int

    def lines(self) -> list[str]:
        return [
            f"scenes evaluated      : {self.n_scenes}",
            f"agents evaluated      : {self.n_agents}",
            f"samples per scene (K) : {self.k}",
            f"model       ADE/FDE   : {self.ade:.4f} / {self.fde:.4f}",
            f"baseline CV ADE/FDE   : {self.baseline_ade:.4f} / {self.baseline_fde:.4f}",
        ]

    def records(self) -> dict[str, float]:
        return {
            "n_scenes": self.n_scenes, "n_agents": self.n_agents, "k": self.k,
            "ade": self.ade, "fde": self.fde,
            "baseline_ade": self.baseline_ade, "baseline_fde": self.baseline_fde,
        }


def evaluate_scenes(model: CvaeModel, sampler: SamplerModel | None,
                    scenes: list[Scene], K: int, seed: int,
                    squared: bool = False) -> EvalReport:
    """Mean best-of-K ADE/FDE over agents, with the constant-velocity row.

    Scenes are centered before encoding; metrics are translation-invariant
    so they are computed in the centered frame. Per-scene sampling seeds
    derive deterministically from ``seed`` and the scene index.
    """
    ades, fdes, base_ades, base_fdes = [], [], [], []
    for i, raw in enumerate(scenes):
        scene = scene_center(raw)
        scene_seed = int(np.random.SeedSequence((seed, 23, i)).generate_state(1)[0])
        samples = scene_sample_set(model, sampler, scene, K, scene_seed)
        truth = scene.future_pos[scene.eval_indices]
        result = ade_fde(samples, truth, squared=squared)
        baseline = ade_fde(constant_velocity_baseline(scene), truth, squared=squared)
        ades.append(result.ade_per_agent)
        fdes.append(result.fde_per_agent)
        base_ades.append(baseline.ade_per_agent)
        base_fdes.append(baseline.fde_per_agent)
    all_ade = np.concatenate(ades)
    all_fde = np.concatenate(fdes)
    return EvalReport(
        ade=float(all_ade.mean()), fde=float(all_fde.mean()),
        baseline_ade=float(np.concatenate(base_ades).mean()),
        baseline_fde=float(np.concatenate(base_fdes).mean()),
        n_scenes=len(scenes), n_agents=int(all_ade.size), k=K,
    )


def min_pairwise_distance(samples: SampleSet) -> float:
    """Smallest Euclidean distance between any two whole-scene futures."""
    flat = samples.futures.reshape(samples.k, -1)
    best = np.inf
    for i in range(samples.k):
        for j in range(i + 1, samples.k):
            best = min(best, float(np.linalg.norm(flat[i] - flat[j])))
    return best
