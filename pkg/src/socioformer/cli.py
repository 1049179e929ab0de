"""Command-line front end: train, eval, sample, and viz-attention.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
Every run writes a manifest (config snapshot, seed, version) to the output
directory so it can be reproduced bit-exactly.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import (CheckpointError, load_checkpoint, restore_params,
                         save_checkpoint)
from .config import ConfigError, RunConfig, parse_config, serialize_config
from .cvae import CvaeModel, DivergenceError, train_cvae
from .data import (DataError, Scene, build_scenes, generate_synthetic,
                   load_trajectory_file, scene_center, uncenter_points)
from .forecast import evaluate_scenes, scene_sample_set
from .sampler import SamplerModel, train_sampler


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        cfg = parse_config(text, base=cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _dataset(cfg: RunConfig, split: str) -> list[Scene]:
    files = cfg.train_files if split == "train" else cfg.test_files
    stride = cfg.stride_train if split == "train" else cfg.eval_stride()
    if files:
        scenes = []
        for path in files:
            records = load_trajectory_file(path)
            scenes.extend(build_scenes(records, cfg.H, cfg.T, stride=stride,
                                       source=os.path.basename(path)))
        if not scenes:
            raise DataError(f"no usable scenes in {split} files {list(files)}")
        return scenes
    if cfg.synthetic != "none":
        count = cfg.synthetic_train if split == "train" else cfg.synthetic_test
        tag = 101 if split == "train" else 202
        seed = int(np.random.SeedSequence((cfg.seed, tag)).generate_state(1)[0])
        return generate_synthetic(cfg.synthetic, count, cfg.noise, seed,
                                  H=cfg.H, T=cfg.T)
    raise DataError(f"no {split} data: set {split}_files or synthetic in the config")


def _write_manifest(out_dir: str, cfg: RunConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# socioformer {__version__} run manifest\n")
        fh.write(f"version = {__version__}\n")
        fh.write(serialize_config(cfg))


def _write_log(path: str, log: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fields = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                              for k, v in entry.items())
            fh.write(fields + "\n")


def _build_models(path: str) -> tuple[RunConfig, CvaeModel, SamplerModel | None]:
    cfg, cvae_arrays, sampler_arrays = load_checkpoint(path)
    model = CvaeModel(cfg, np.random.default_rng(cfg.seed))
    restore_params(model.named_parameters(), cvae_arrays, "cvae")
    sampler = None
    if sampler_arrays is not None:
        sampler = SamplerModel(cfg, np.random.default_rng(cfg.seed + 1))
        restore_params(sampler.named_parameters(), sampler_arrays, "sampler")
    return cfg, model, sampler


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out
    _write_manifest(out_dir, cfg)
    ckpt_path = os.path.join(out_dir, "checkpoint.json")

    if args.stage == "sampler":
        if not args.checkpoint:
            raise UsageError("sampler-only training needs --checkpoint with a trained CVAE")
        cfg_ck, model, _ = _build_models(args.checkpoint)
        dataset = _dataset(cfg, "train")
        sampler, log = train_sampler(dataset, model, cfg)
        save_checkpoint(ckpt_path, cfg, model.named_parameters(),
                        sampler.named_parameters())
        _write_log(os.path.join(out_dir, "sampler_log.txt"), log)
        print(f"sampler trained for {len(log)} epochs; checkpoint at {ckpt_path}")
        return 0

    dataset = _dataset(cfg, "train")
    model, log = train_cvae(dataset, cfg,
                            progress=lambda e: print(
                                f"epoch {e['epoch']:3d} loss {e['loss']:.4f} "
                                f"mse {e['mse']:.4f} kl {e['kl']:.4f} lr {e['lr']:.2e}"))
    save_checkpoint(ckpt_path, cfg, model.named_parameters())
    _write_log(os.path.join(out_dir, "train_log.txt"), log)
    print(f"cvae trained for {len(log)} epochs; checkpoint at {ckpt_path}")

    if args.stage == "both":
        sampler, slog = train_sampler(dataset, model, cfg)
        save_checkpoint(ckpt_path, cfg, model.named_parameters(),
                        sampler.named_parameters())
        _write_log(os.path.join(out_dir, "sampler_log.txt"), slog)
        print(f"sampler trained for {len(slog)} epochs; checkpoint updated")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    cfg_ck, model, sampler = _build_models(args.checkpoint)
    scenes = _dataset(cfg, "test")
    k = args.k if args.k else cfg_ck.K
    if sampler is not None and sampler.K != k:
        raise UsageError(f"checkpointed sampler produces K={sampler.K}, requested K={k}")
    report = evaluate_scenes(model, sampler, scenes, k, cfg.seed,
                             squared=cfg_ck.squared_metrics)
    _write_manifest(args.out, cfg)
    lines = report.lines()
    source = "sampler" if sampler is not None else "prior"
    lines.insert(0, f"sample source         : {source}")
    for line in lines:
        print(line)
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(args.out, "metrics.kv"), "w", encoding="utf-8") as fh:
        fh.write(f"sample_source = {source}\n")
        for key, value in report.records().items():
            fh.write(f"{key} = {value}\n")
    return 0


def _select_scene(scenes: list[Scene], selector: str | None) -> Scene:
    if selector is None:
        return scenes[0]
    for scene in scenes:
        if scene.scene_id == selector:
            return scene
    raise DataError(f"unknown scene id {selector!r}; available: "
                    f"{[s.scene_id for s in scenes[:10]]}...")


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    cfg_ck, model, sampler = _build_models(args.checkpoint)
    scenes = _dataset(cfg, "test")
    raw = _select_scene(scenes, args.scene)
    scene = scene_center(raw)
    k = args.k if args.k else cfg_ck.K
    if sampler is not None and sampler.K != k:
        raise UsageError(f"checkpointed sampler produces K={sampler.K}, requested K={k}")
    samples = scene_sample_set(model, sampler, scene, k, cfg.seed)

    _write_manifest(args.out, cfg)
    path = os.path.join(args.out, "samples.csv")
    idx = scene.eval_indices
    agents = [scene.agents[i] for i in idx]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scene_id,kind,k,agent_id,t,x,y\n")
        for i, agent in enumerate(scene.agents):
            for h in range(scene.H + 1):
                if raw.past_present[i, h]:
                    x, y = (float(v) for v in raw.past_pos[i, h])
                    fh.write(f"{raw.scene_id},past,-1,{agent},{h - scene.H},{x!r},{y!r}\n")
        for t in range(scene.T):
            for j, agent in enumerate(agents):
                x, y = (float(v) for v in raw.future_pos[idx[j], t])
                fh.write(f"{raw.scene_id},truth,-1,{agent},{t + 1},{x!r},{y!r}\n")
        for ki in range(samples.k):
            pred = uncenter_points(samples.futures[ki], scene)
            for t in range(scene.T):
                for j, agent in enumerate(agents):
                    x, y = (float(v) for v in pred[j, t])
                    fh.write(f"{raw.scene_id},sample,{ki},{agent},{t + 1},{x!r},{y!r}\n")
    print(f"wrote {path}")
    return 0


def cmd_viz_attention(args) -> int:
    cfg = _load_config(args)
    cfg_ck, model, sampler = _build_models(args.checkpoint)
    scenes = _dataset(cfg, "test")
    raw = _select_scene(scenes, args.scene)
    scene = scene_center(raw)
    agents = [scene.agents[i] for i in scene.eval_indices]
    if args.agent is None:
        target_agent = agents[0]
    else:
        try:
            target_agent = type(scene.agents[0])(args.agent)
        except (TypeError, ValueError):
            raise UsageError(f"agent id {args.agent!r} does not match the scene's "
                             f"agent id type") from None
    target_t = args.t
    if target_agent not in agents:
        raise UsageError(f"agent {args.agent!r} is not an evaluated agent of the scene")
    if not 1 <= target_t <= scene.T:
        raise UsageError(f"target step {target_t} outside the future horizon 1..{scene.T}")

    C = model.encode_past(scene)
    priors = model.prior_params(C, agents)
    z = model.sample_latents(priors, np.random.default_rng(cfg.seed))
    decoded = model.decode_future(C, z, scene, collect_attention=True)
    attn = decoded.attention
    in_tags = decoded.input_tags
    mem_tags = decoded.memory_tags

    _write_manifest(args.out, cfg)
    path = os.path.join(args.out, "attention.csv")
    blocks = target_t  # decoder pass producing step target_t has input blocks 0..t-1
    n = len(agents)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scene_id,stage,layer,head,query_agent,query_t,key_agent,key_t,weight\n")
        for li in range(len(attn.self_weights)):
            for hi, w in enumerate(attn.self_weights[li]):
                for qi in range(blocks * n):
                    qt = in_tags[qi]
                    for kj in range((qt.t + 1) * n):
                        kt = in_tags[kj]
                        fh.write(f"{raw.scene_id},self,{li},{hi},{qt.agent},"
                                 f"{qt.t + 1},{kt.agent},{kt.t},{float(w[qi, kj])!r}\n")
            for hi, w in enumerate(attn.cross_weights[li]):
                for qi in range(blocks * n):
                    qt = in_tags[qi]
                    for kj, kt in enumerate(mem_tags):
                        fh.write(f"{raw.scene_id},cross,{li},{hi},{qt.agent},"
                                 f"{qt.t + 1},{kt.agent},{kt.t},{float(w[qi, kj])!r}\n")
    print(f"wrote {path}")
    return 0


def _make_parser() -> _Parser:
    parser = _Parser(prog="socioformer",
                     description="Socio-temporal transformer trajectory forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="socioformer_out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")

    p_train = sub.add_parser("train", help="train the CVAE and optionally the sampler")
    common(p_train)
    p_train.add_argument("--stage", choices=("both", "cvae", "sampler"), default="both")
    p_train.add_argument("--checkpoint", help="existing CVAE checkpoint (sampler stage)")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate best-of-K metrics on test scenes")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--k", type=int, help="samples per scene (default: config K)")
    p_eval.set_defaults(fn=cmd_eval)

    p_sample = sub.add_parser("sample", help="export sampled futures for one scene")
    common(p_sample, checkpoint=True)
    p_sample.add_argument("--k", type=int, help="samples per scene (default: config K)")
    p_sample.add_argument("--scene", help="scene id (default: first test scene)")
    p_sample.set_defaults(fn=cmd_sample)

    p_viz = sub.add_parser("viz-attention", help="export decoder attention weights")
    common(p_viz, checkpoint=True)
    p_viz.add_argument("--scene", help="scene id (default: first test scene)")
    p_viz.add_argument("--agent", help="target agent id (default: first evaluated)")
    p_viz.add_argument("--t", type=int, default=1, help="target future step (1..T)")
    p_viz.set_defaults(fn=cmd_viz_attention)
    return parser


def main(argv=None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
