"""Conditioning ablation and colour-loss comparison on synthetic data.

All arms share the data, the visual/text checkpoints, the pretrained base
DiT, the training seed and the step budget; only the HFFM mode or
``lambda_cd`` differs. Scores are random-projection Frechet distances of
DDIM samples (conditioned on held-out captions) against the held-out images.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import RunConfig, apply_overrides
from .diffusion import generate, linear_schedule, loss_mse
from .metrics import FeatureExtractor, GaussianStats, extract_features, frechet_distance
from .nncore import load_checkpoint, stream
from .pipeline import (build_diffusion_models, condition_inputs, gen_data, load_inference, load_text,
                       train_diffusion_stage, train_text_stage, train_visual_stage)
from .synthdata import read_dataset, stack


@dataclass
class AblationConfig:
    n_train: int = 2000
    n_eval: int = 500
    seed: int = 0
    pretrain_steps: int = 2000
    steps: int = 600
    lr: float = 1e-3
    warmup_steps: int = 50
    every_n: int = 5
    lambda_cd: float = 0.05
    rollout_steps: int = 5
    sample_steps: int = 10
    arms: tuple = ("disentangled", "class_label_only", "naive_concat", "disentangled_cd0")
    overrides: dict = field(default_factory=dict)


ARM_SETTINGS = {
    "disentangled": {"hffm.mode": "disentangled"},
    "class_label_only": {"hffm.mode": "class_label_only"},
    "naive_concat": {"hffm.mode": "naive_concat"},
    "disentangled_cd0": {"hffm.mode": "disentangled", "diffusion.lambda_cd": 0.0},
}


def channel_mean_gap(gen: np.ndarray, real: np.ndarray) -> np.ndarray:
    """Per-channel absolute gap between corpus means."""
    return np.abs(gen.mean(axis=(0, 2, 3)) - real.mean(axis=(0, 2, 3)))


def rp_frechet(gen: np.ndarray, real: np.ndarray, seed: int = 0) -> float:
    ex = FeatureExtractor("random_projection", 64, seed)
    return frechet_distance(GaussianStats.fit(extract_features(gen, ex)),
                            GaussianStats.fit(extract_features(real, ex)))


def _score(gen: np.ndarray, real: np.ndarray, seed: int) -> dict:
    gap = channel_mean_gap(gen, real)
    return {"rp_frechet": rp_frechet(gen, real, seed), "channel_mean_gap": gap.tolist(),
            "mean_gap": float(gap.mean())}


@torch.no_grad()
def heldout_mse(dit, images: np.ndarray, schedule, seed: int = 0, batch_size: int = 250) -> float:
    """Unconditional epsilon MSE on held-out images with a fixed (t, noise) draw."""
    dit.eval()
    g = stream(seed, "ablation.heldout")
    total = 0.0
    for i in range(0, len(images), batch_size):
        x0 = torch.from_numpy(images[i:i + batch_size]) * 2 - 1
        total += float(loss_mse(dit, x0, None, schedule, generator=g)) * len(x0)
    return total / len(images)


def run_ablation(acfg: AblationConfig, workdir: str | Path, log: Callable | None = None) -> dict:
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)
    t0 = time.time()
    base = apply_overrides(RunConfig(seed=acfg.seed), {
        "data.n": acfg.n_train,
        "diffusion.pretrain_steps": acfg.pretrain_steps, "diffusion.max_steps": acfg.steps,
        "diffusion.lr": acfg.lr, "diffusion.warmup_steps": acfg.warmup_steps,
        "diffusion.every_n": acfg.every_n, "diffusion.sample_steps": acfg.rollout_steps,
        "diffusion.lambda_cd": acfg.lambda_cd,
        **acfg.overrides,
    })
    timings = {}

    def timed(name, fn, *a):
        s = time.time()
        out = fn(*a)
        timings[name] = time.time() - s
        say(f"{name}: {timings[name]:.1f}s")
        return out

    train_dir, eval_dir = work / "train", work / "eval"
    timed("data", lambda: (gen_data(base, train_dir),
                           gen_data(apply_overrides(base, {"data.n": acfg.n_eval, "seed": acfg.seed + 1}), eval_dir)))
    paths = {"paths.data": str(train_dir), "paths.visual_ckpt": str(work / "visual.dgn"),
             "paths.text_ckpt": str(work / "text.dgn"), "paths.base_ckpt": str(work / "base.dgn")}
    cfg = apply_overrides(base, paths)
    timed("visual", train_visual_stage, apply_overrides(cfg, {"paths.out": paths["paths.visual_ckpt"]}))
    timed("text", train_text_stage, apply_overrides(cfg, {"paths.out": paths["paths.text_ckpt"]}))

    eval_samples = read_dataset(eval_dir)
    real, _ = stack(eval_samples)
    captions = [s.caption for s in eval_samples]
    labels = [s.class_label for s in eval_samples]
    schedule = linear_schedule(cfg.diffusion.num_timesteps, cfg.diffusion.beta_start, cfg.diffusion.beta_end,
                               cfg.diffusion.schedule_reference_steps or None)

    # untrained reference: freshly initialised HFFM + DiT, no base training
    embedder, heads, _ = load_text(paths["paths.text_ckpt"])
    with torch.no_grad():
        inputs = condition_inputs(embedder, heads, captions, labels)
    hffm0, dit0 = build_diffusion_models(cfg, heads.cfg, real.shape[1:])
    gen0 = timed("sample.untrained", generate, dit0, hffm0, inputs, schedule, acfg.sample_steps, acfg.seed)
    results = {"untrained": _score(gen0, real, acfg.seed)}
    fit = {"init": heldout_mse(dit0, real, schedule, acfg.seed)}

    for arm in acfg.arms:
        ckpt = work / f"{arm}.dgn"
        arm_cfg = apply_overrides(cfg, {**ARM_SETTINGS[arm], "paths.out": str(ckpt)})
        man = timed(f"train.{arm}", train_diffusion_stage, arm_cfg)
        bundle = load_inference(ckpt)
        with torch.no_grad():
            arm_inputs = condition_inputs(bundle.embedder, bundle.heads, captions, labels)
        gen = timed(f"sample.{arm}", generate, bundle.dit, bundle.hffm, arm_inputs, schedule,
                    acfg.sample_steps, acfg.seed)
        results[arm] = {**_score(gen, real, acfg.seed), "final_mse": man.history[-1]["mse"] if man.history else None}
        say(f"{arm}: {json.dumps(results[arm])}")
    base_path = Path(paths["paths.base_ckpt"])
    if base_path.is_file():
        tensors, _ = load_checkpoint(base_path, ("dit.",))
        dit0.load_state_dict({k[len("dit."):]: v for k, v in tensors.items()})
        fit["base"] = heldout_mse(dit0, real, schedule, acfg.seed)
        say(f"held-out mse: {fit}")
    report = {"config": asdict(acfg), "results": results, "heldout_mse": fit, "timings": timings, "seconds": time.time() - t0}
    (work / "ablation.json").write_text(json.dumps(report, indent=1))
    return report
