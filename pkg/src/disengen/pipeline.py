"""Three-stage training pipeline, sampling, evaluation and exports.

Every stage writes a DGN1 checkpoint whose meta block carries the resolved
config, the loss history and the digests of its upstream artifacts, plus a
JSON run manifest next to it.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .config import RunConfig, config_from_dict
from .diffusion import ConditionInputs, DiffusionTrainer, generate, linear_schedule, pretrain_base
from .dit import DiT, DiTConfig, merge_lora
from .errors import ConfigError, DatasetError, DependencyError
from .hffm import HFFM, HffmConfig
from .metrics import evaluate, parse_extractors, write_embeddings_csv, write_report
from .nncore import file_digest, load_checkpoint, save_checkpoint
from .synthdata import (SyntheticSample, generate_dataset, parse_caption, read_dataset, stack,
                        write_dataset, write_image)
from .textdis import FrozenTextEmbedder, TextdisConfig, TextHeads, embed_text, train_text
from .visdis import VisdisConfig, VisualDisentangler, encode_dataset, train_visual

VISUAL_PREFIXES = ("visdis.",)
INFERENCE_PREFIXES = ("embedder.", "textheads.", "hffm.", "dit.")


@dataclass
class RunManifest:
    stage: str
    config: dict
    version: str = __version__
    history: list = field(default_factory=list)
    seconds: float = 0.0
    checkpoints: dict = field(default_factory=dict)
    upstream: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True))
        return path


def manifest_path(ckpt: str | Path) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".manifest.json")


def _prefixed(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def _strip(prefix: str, tensors: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _require(path: str, flag: str) -> Path:
    if not path:
        raise DependencyError(f"missing prerequisite checkpoint: --{flag} not given")
    p = Path(path)
    if not p.is_file():
        raise DependencyError(f"missing prerequisite checkpoint {flag}: {p} does not exist")
    return p


def _require_data(path: str) -> list[SyntheticSample]:
    if not path:
        raise DependencyError("missing prerequisite dataset: --data not given")
    return read_dataset(path)


def write_history_csv(path: str | Path, history: list[dict]) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)


# ---------------------------------------------------------------------------
# loaders


def load_visual(path: str | Path) -> tuple[VisualDisentangler, dict]:
    tensors, meta = load_checkpoint(path, VISUAL_PREFIXES)
    if not tensors:
        raise DatasetError(f"{path}: no visual-encoder tensors in checkpoint")
    cfg = VisdisConfig(**meta["visdis"])
    model = VisualDisentangler(cfg)
    model.load_state_dict(_strip("visdis.", tensors))
    model.eval()
    return model, meta


def load_text(path: str | Path) -> tuple[FrozenTextEmbedder, TextHeads, dict]:
    tensors, meta = load_checkpoint(path, ("embedder.", "textheads."))
    cfg = TextdisConfig(**meta["textdis"])
    embedder = FrozenTextEmbedder(dim=cfg.text_dim, length=cfg.caption_len, seed=cfg.embedder_seed)
    embedder.load_state_dict(_strip("embedder.", tensors))
    heads = TextHeads(cfg)
    heads.load_state_dict(_strip("textheads.", tensors))
    heads.eval()
    return embedder, heads, meta


@dataclass
class InferenceBundle:
    embedder: FrozenTextEmbedder
    heads: TextHeads
    hffm: HFFM
    dit: DiT
    meta: dict
    loaded: tuple[str, ...]


def load_inference(path: str | Path) -> InferenceBundle:
    """Load only what sampling needs; visual encoders are never read."""
    tensors, meta = load_checkpoint(path, INFERENCE_PREFIXES)
    tcfg = TextdisConfig(**meta["textdis"])
    embedder = FrozenTextEmbedder(dim=tcfg.text_dim, length=tcfg.caption_len, seed=tcfg.embedder_seed)
    embedder.load_state_dict(_strip("embedder.", tensors))
    heads = TextHeads(tcfg)
    heads.load_state_dict(_strip("textheads.", tensors))
    hffm = HFFM(HffmConfig(**meta["hffm"]))
    hffm.load_state_dict(_strip("hffm.", tensors))
    dit = DiT(DiTConfig(**meta["dit"]))
    dit.load_state_dict(_strip("dit.", tensors))
    for m in (heads, hffm, dit):
        m.eval()
    return InferenceBundle(embedder, heads, hffm, dit, meta, tuple(sorted(tensors)))


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg: RunConfig, out: str | Path) -> Path:
    samples = generate_dataset(cfg.data.n, cfg.data.synth(), seed=cfg.seed)
    return write_dataset(samples, out, cfg.data.synth())


def _text_features(embedder: FrozenTextEmbedder, samples) -> np.ndarray:
    return embed_text(embedder, [s.caption for s in samples]).pooled.numpy()


@torch.no_grad()
def condition_inputs(embedder: FrozenTextEmbedder, heads: TextHeads, captions, labels) -> ConditionInputs:
    heads.eval()
    pooled = embed_text(embedder, list(captions)).pooled
    dt = heads(pooled)
    return ConditionInputs(dt.f_a, dt.f_s, pooled, torch.as_tensor(np.asarray(labels), dtype=torch.long))


def train_visual_stage(cfg: RunConfig, log: Callable | None = None) -> RunManifest:
    samples = _require_data(cfg.paths.data)
    out = _out(cfg)
    images, masks = stack(samples)
    vcfg = dataclasses.replace(cfg.visdis, channels=images.shape[1], image_size=images.shape[-1])
    model = VisualDisentangler(vcfg, seed=cfg.seed)
    t0 = time.time()
    history = train_visual(model, images, masks, seed=cfg.seed, log=log)
    meta = {"stage": "visual", "visdis": dataclasses.asdict(vcfg), "config": cfg.to_dict(),
            "history": history}
    digest = save_checkpoint(out, _prefixed("visdis.", model), meta)
    write_history_csv(out.with_suffix(".csv"), history)
    man = RunManifest("visual", cfg.to_dict(), history=history, seconds=time.time() - t0,
                      checkpoints={str(out): digest})
    man.write(manifest_path(out))
    return man


def train_text_stage(cfg: RunConfig, log: Callable | None = None) -> RunManifest:
    vpath = _require(cfg.paths.visual_ckpt, "visual-ckpt")
    samples = _require_data(cfg.paths.data)
    out = _out(cfg)
    visual, _ = load_visual(vpath)
    images, _ = stack(samples)
    feats = encode_dataset(visual, images)
    tcfg = cfg.textdis
    if tcfg.anatomy_dim != visual.cfg.anatomy_dim or tcfg.style_dim != visual.cfg.style_dim:
        tcfg = dataclasses.replace(tcfg, anatomy_dim=visual.cfg.anatomy_dim, style_dim=visual.cfg.style_dim)
    embedder = FrozenTextEmbedder(dim=tcfg.text_dim, length=tcfg.caption_len, seed=tcfg.embedder_seed)
    heads = TextHeads(tcfg, seed=cfg.seed)
    t0 = time.time()
    history = train_text(heads, _text_features(embedder, samples), feats["pooled"], feats["mu"],
                         seed=cfg.seed, log=log)
    upstream = {"visual_ckpt": file_digest(vpath)}
    meta = {"stage": "text", "textdis": dataclasses.asdict(tcfg), "config": cfg.to_dict(),
            "history": history, "upstream": upstream}
    tensors = {**_prefixed("embedder.", embedder), **_prefixed("textheads.", heads)}
    digest = save_checkpoint(out, tensors, meta)
    write_history_csv(out.with_suffix(".csv"), history)
    man = RunManifest("text", cfg.to_dict(), history=history, seconds=time.time() - t0,
                      checkpoints={str(out): digest}, upstream=upstream)
    man.write(manifest_path(out))
    return man


def build_diffusion_models(cfg: RunConfig, tcfg: TextdisConfig, image_shape) -> tuple[HFFM, DiT]:
    c, h = image_shape[0], image_shape[-1]
    n_classes = max(cfg.data.n_classes, cfg.hffm.n_classes)
    hcfg = dataclasses.replace(cfg.hffm, anatomy_dim=tcfg.anatomy_dim, style_dim=tcfg.style_dim,
                               text_dim=tcfg.text_dim, n_classes=n_classes)
    dcfg = dataclasses.replace(cfg.dit, in_channels=c, image_size=h, cond_dim=hcfg.dc,
                               num_timesteps=cfg.diffusion.num_timesteps, lora=False)
    return HFFM(hcfg, seed=cfg.seed), DiT(dcfg, seed=cfg.seed)


def base_dit(cfg: RunConfig, dit: DiT, images: np.ndarray, log: Callable | None = None) -> tuple[list, str]:
    """Fill ``dit`` with base weights and return (pretrain history, source).

    An existing ``paths.base_ckpt`` is loaded as-is. Otherwise the base is
    pretrained unconditionally and, if ``paths.base_ckpt`` is set, cached
    there so several conditioning variants can share one base.
    """
    path = cfg.paths.base_ckpt
    if path and Path(path).is_file():
        tensors, meta = load_checkpoint(path, ("dit.",))
        adapter_free = {"lora": False, "lora_rank": 0, "lora_alpha": 0.0}
        if dataclasses.replace(DiTConfig(**meta["dit"]), **adapter_free) != dataclasses.replace(dit.cfg, **adapter_free):
            raise ConfigError(f"base checkpoint {path} was built for a different DiT config")
        dit.load_state_dict(_strip("dit.", tensors))
        return meta.get("history", []), str(path)
    history = pretrain_base(dit, images, cfg.diffusion, seed=cfg.seed, log=log)
    if path:
        save_checkpoint(path, _prefixed("dit.", dit), {"stage": "base", "dit": dataclasses.asdict(dit.cfg),
                                                      "diffusion": dataclasses.asdict(cfg.diffusion),
                                                      "history": history})
    return history, "pretrained"


def train_diffusion_stage(cfg: RunConfig, log: Callable | None = None) -> RunManifest:
    tpath = _require(cfg.paths.text_ckpt, "text-ckpt")
    vpath = _require(cfg.paths.visual_ckpt, "visual-ckpt")
    samples = _require_data(cfg.paths.data)
    out = _out(cfg)
    embedder, heads, tmeta = load_text(tpath)
    images, _ = stack(samples)
    inputs = condition_inputs(embedder, heads, [s.caption for s in samples], [s.class_label for s in samples])
    hffm, dit = build_diffusion_models(cfg, heads.cfg, images.shape[1:])
    t0 = time.time()
    base_history, base_source = base_dit(cfg, dit, images, log)
    if cfg.dit.lora:
        dit.freeze_base_and_adapt(seed=cfg.seed)
    trainer = DiffusionTrainer(dit, hffm, images, inputs, cfg.diffusion, seed=cfg.seed)
    history = trainer.fit(log=log)
    upstream = {"text_ckpt": file_digest(tpath), "visual_ckpt": file_digest(vpath)}
    meta = {"stage": "diffusion", "textdis": dataclasses.asdict(heads.cfg),
            "hffm": dataclasses.asdict(hffm.cfg), "dit": dataclasses.asdict(dit.cfg),
            "diffusion": dataclasses.asdict(cfg.diffusion), "config": cfg.to_dict(),
            "history": history, "base_history": base_history, "base_source": base_source,
            "upstream": upstream}
    tensors = {**_prefixed("embedder.", embedder), **_prefixed("textheads.", heads),
               **_prefixed("hffm.", hffm), **_prefixed("dit.", dit)}
    digest = save_checkpoint(out, tensors, meta)
    write_history_csv(out.with_suffix(".csv"), history)
    man = RunManifest("diffusion", cfg.to_dict(), history=history, seconds=time.time() - t0,
                      checkpoints={str(out): digest}, upstream=upstream)
    man.write(manifest_path(out))
    return man


def _out(cfg: RunConfig) -> Path:
    if not cfg.paths.out:
        raise ConfigError("paths.out (--out-ckpt/--out) is required")
    return Path(cfg.paths.out)


STAGE_RUNNERS = {"visual": train_visual_stage, "text": train_text_stage, "diffusion": train_diffusion_stage}


def run_stage(cfg: RunConfig, log: Callable | None = None) -> RunManifest:
    return STAGE_RUNNERS[cfg.stage](cfg, log)


# ---------------------------------------------------------------------------
# inference and reporting


def sample(ckpt: str | Path, caption: str, n: int, seed: int, out: str | Path, steps: int = 20) -> dict:
    """Generate ``n`` images for one caption into ``out/images``."""
    try:
        parsed = parse_caption(caption)
    except ValueError as exc:
        raise ConfigError(f"cannot parse caption: {exc}") from exc
    bundle = load_inference(_require(str(ckpt), "ckpt"))
    if parsed["class_label"] >= bundle.hffm.cfg.n_classes and bundle.hffm.cfg.mode == "class_label_only":
        raise ConfigError(f"class {parsed['class_label']} outside the trained label range")
    inputs = condition_inputs(bundle.embedder, bundle.heads, [caption] * n, [parsed["class_label"]] * n)
    dcfg = bundle.meta["diffusion"]
    schedule = linear_schedule(dcfg["num_timesteps"], dcfg["beta_start"], dcfg["beta_end"],
                               dcfg["schedule_reference_steps"] or None)
    images = generate(bundle.dit, bundle.hffm, inputs, schedule, steps=steps, seed=seed)
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_image(out / "images" / f"{i:05d}.ppm", img)
    manifest = {"caption": caption, "parsed": parsed, "n": n, "seed": seed, "steps": steps,
                "ckpt": str(ckpt), "ckpt_digest": file_digest(ckpt), "loaded_tensors": list(bundle.loaded)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def eval_corpora(gen: str | Path, real: str | Path, extractors: str, seed: int, out: str | Path,
                 visual_ckpt: str = "") -> dict:
    exs = parse_extractors(extractors, seed=seed)
    visual = None
    if any(e.kind == "anatomy_encoder_pooled" for e in exs):
        visual, _ = load_visual(_require(visual_ckpt, "visual-ckpt"))
    report = evaluate(gen, real, exs, visual)
    write_report(report, out)
    return report


def export_embeddings(data: str | Path, visual_ckpt: str, text_ckpt: str, out: str | Path) -> int:
    samples = _require_data(str(data))
    visual, _ = load_visual(_require(visual_ckpt, "visual-ckpt"))
    embedder, heads, _ = load_text(_require(text_ckpt, "text-ckpt"))
    images, _ = stack(samples)
    feats = encode_dataset(visual, images)
    inputs = condition_inputs(embedder, heads, [s.caption for s in samples], [s.class_label for s in samples])
    spaces = {
        "anatomy": {"text": inputs.f_a.numpy(), "image": feats["pooled"]},
        "style": {"text": inputs.f_s.numpy(), "image": feats["mu"]},
    }
    return write_embeddings_csv(out, list(range(len(samples))), spaces)


def merge_lora_ckpt(ckpt: str | Path, out: str | Path) -> str:
    """Fold the LoRA adapters into the base projections and drop them."""
    bundle = load_inference(_require(str(ckpt), "ckpt"))
    merged = merge_lora(bundle.dit)
    state = {k: v for k, v in merged.state_dict().items() if ".lora_" not in k}
    dcfg = dataclasses.replace(bundle.dit.cfg, lora=False)
    plain = DiT(dcfg)
    plain.load_state_dict(state)
    meta = dict(bundle.meta, dit=dataclasses.asdict(dcfg), upstream={"diffusion_ckpt": file_digest(ckpt)})
    tensors = {**_prefixed("embedder.", bundle.embedder), **_prefixed("textheads.", bundle.heads),
               **_prefixed("hffm.", bundle.hffm), **_prefixed("dit.", plain)}
    return save_checkpoint(out, tensors, meta)


def load_config_of(ckpt: str | Path) -> RunConfig:
    _, meta = load_checkpoint(ckpt, prefixes=())
    return config_from_dict(meta["config"])
