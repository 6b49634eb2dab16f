"""Noise schedule, epsilon-prediction objective with the periodic colour
loss, and DDIM / ancestral samplers.

Images live in [-1, 1] inside this module.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, RangeError
from .hffm import HFFM, ConditionEmbedding
from .nncore import AdamW, LrSchedule, lr_at, np_stream, stream

ModelFn = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


@dataclass
class DiffusionConfig:
    num_timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_reference_steps: int = 1000
    lambda_cd: float = 0.05
    every_n: int = 100
    sample_steps: int = 10
    cd_target: str = "batch"
    epochs: int = 15
    max_steps: int = 0
    batch_size: int = 32
    lr: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 0.01
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_warmup_steps: int = 100


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "DiffusionSchedule":
        beta = torch.as_tensor(beta, dtype=torch.float64)
        if not ((beta > 0) & (beta < 1)).all():
            raise ConfigError("betas must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        return cls(beta, alpha, torch.cumprod(alpha, 0))


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                    reference_steps: int | None = 1000) -> DiffusionSchedule:
    """Linear betas; endpoints are quoted for ``reference_steps`` and rescaled
    by ``reference_steps / T`` so a short chain still ends near pure noise.
    Pass ``reference_steps=None`` for the raw endpoints."""
    scale = 1.0 if reference_steps is None else reference_steps / T
    betas = torch.linspace(beta_start * scale, beta_end * scale, T, dtype=torch.float64)
    return DiffusionSchedule.from_betas(betas.clamp(max=0.999))


def _check_t(schedule: DiffusionSchedule, t: torch.Tensor) -> None:
    if (t < 0).any() or (t >= schedule.T).any():
        raise RangeError(f"timestep outside [0, {schedule.T})")


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: torch.Tensor, alpha_bar_t, eps: torch.Tensor) -> torch.Tensor:
    """``sqrt(abar) x0 + sqrt(1 - abar) eps`` for a scalar or per-row ``abar``."""
    ab = torch.as_tensor(alpha_bar_t, dtype=x0.dtype)
    if ab.dim() == 1:
        ab = _bcast(ab, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def forward_diffuse(schedule: DiffusionSchedule, x0: torch.Tensor, t: torch.Tensor,
                    eps: torch.Tensor | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    _check_t(schedule, t)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return q_sample(x0, schedule.alpha_bar[t], eps)


def loss_mse(model: ModelFn, x0: torch.Tensor, cond, schedule: DiffusionSchedule,
             generator: torch.Generator | None = None, t: torch.Tensor | None = None,
             eps: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between injected and predicted noise, ``t ~ U[0, T)``."""
    b = x0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.T, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_diffuse(schedule, x0, t, eps)
    return F.mse_loss(model(x_t, t, cond), eps)


def color_distribution_loss(gen: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Sum over channels of squared gaps in per-channel mean and std.

    Statistics pool batch and pixels; batch sizes may differ.
    """
    if gen.shape[1] != real.shape[1]:
        raise ConfigError(f"channel mismatch: {gen.shape[1]} vs {real.shape[1]}")
    g = gen.transpose(0, 1).reshape(gen.shape[1], -1)
    r = real.transpose(0, 1).reshape(real.shape[1], -1)
    dmu = g.mean(1) - r.mean(1)
    dsd = g.std(1, unbiased=False) - r.std(1, unbiased=False)
    return (dmu.pow(2) + dsd.pow(2)).sum()


# ---------------------------------------------------------------------------
# samplers


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ConfigError(f"sampler steps must be in [1, {T}], got {steps}")
    return sorted({int(round(v)) for v in np.linspace(T - 1, 0, steps)}, reverse=True)


def predict_x0(schedule: DiffusionSchedule, x_t: torch.Tensor, t: int, eps_hat: torch.Tensor) -> torch.Tensor:
    ab = schedule.alpha_bar[t].to(x_t.dtype)
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def _ddim_update(schedule, x, t, t_prev, eps_hat, eta, generator, clip=True):
    x0 = predict_x0(schedule, x, t, eps_hat)
    if clip:
        x0 = x0.clamp(-1.0, 1.0)
        eps_hat = (x - schedule.alpha_bar[t].to(x.dtype).sqrt() * x0) / (1.0 - schedule.alpha_bar[t]).to(x.dtype).sqrt()
    if t_prev < 0:
        return x0
    ab, ab_prev = schedule.alpha_bar[t].to(x.dtype), schedule.alpha_bar[t_prev].to(x.dtype)
    sigma = eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)).sqrt()
    x_next = ab_prev.sqrt() * x0 + (1 - ab_prev - sigma**2).clamp(min=0).sqrt() * eps_hat
    if eta > 0:
        x_next = x_next + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x_next


@torch.no_grad()
def ddim_sample(model: ModelFn, cond, schedule: DiffusionSchedule, shape: tuple, steps: int = 20,
                eta: float = 0.0, generator: torch.Generator | None = None,
                x_T: torch.Tensor | None = None, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """DDIM from pure noise (or the given ``x_T``); deterministic for ``eta=0``."""
    ts = ddim_timesteps(schedule.T, steps)
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_T is None else x_T.clone()
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        tt = torch.full((shape[0],), t, dtype=torch.long)
        x = _ddim_update(schedule, x, t, t_prev, model(x, tt, cond), eta, generator)
    return x.clamp(-1.0, 1.0)


@torch.no_grad()
def ddpm_sample(model: ModelFn, cond, schedule: DiffusionSchedule, shape: tuple,
                generator: torch.Generator | None = None, x_T: torch.Tensor | None = None,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Ancestral sampling through all T steps with the clipped-x0 posterior."""
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_T is None else x_T.clone()
    for t in range(schedule.T - 1, -1, -1):
        tt = torch.full((shape[0],), t, dtype=torch.long)
        x0 = predict_x0(schedule, x, t, model(x, tt, cond)).clamp(-1.0, 1.0)
        if t == 0:
            x = x0
            break
        ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
        beta = schedule.beta[t]
        c0 = (ab_prev.sqrt() * beta / (1 - ab)).to(x.dtype)
        ct = (schedule.alpha[t].sqrt() * (1 - ab_prev) / (1 - ab)).to(x.dtype)
        var = (beta * (1 - ab_prev) / (1 - ab)).to(x.dtype)
        x = c0 * x0 + ct * x + var.sqrt() * torch.randn(shape, generator=generator, dtype=x.dtype)
    return x.clamp(-1.0, 1.0)


def rollout_timesteps(T: int, steps: int) -> list[int]:
    """``steps`` evenly spaced timesteps that stop short of 0.

    The last model call happens at roughly ``T / steps``. At t=0 the x0
    prediction scales the model output by sqrt(1 - alpha_bar_0), which is
    tiny, so a loss on x0 would barely reach the model.
    """
    if not 1 <= steps < T:
        raise ConfigError(f"rollout steps must be in [1, {T - 1}], got {steps}")
    return ddim_timesteps(T, steps + 1)[:-1]


def rollout_x0(model: ModelFn, cond, schedule: DiffusionSchedule, shape: tuple, steps: int,
               generator: torch.Generator | None = None, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Short DDIM chain whose final denoising step keeps its graph.

    Gradients reach the model only through that last prediction.
    """
    ts = rollout_timesteps(schedule.T, steps)
    x = torch.randn(shape, generator=generator, dtype=dtype)
    with torch.no_grad():
        for i, t in enumerate(ts[:-1]):
            tt = torch.full((shape[0],), t, dtype=torch.long)
            x = _ddim_update(schedule, x, t, ts[i + 1], model(x, tt, cond), 0.0, generator)
    t = ts[-1]
    eps_hat = model(x, torch.full((shape[0],), t, dtype=torch.long), cond)
    return predict_x0(schedule, x, t, eps_hat)


# ---------------------------------------------------------------------------
# stage-3 training


@dataclass
class ConditionInputs:
    """Per-sample inputs for every HFFM mode (rows aligned with the images)."""
    f_a: torch.Tensor
    f_s: torch.Tensor
    pooled: torch.Tensor
    labels: torch.Tensor

    def take(self, idx) -> "ConditionInputs":
        return ConditionInputs(self.f_a[idx], self.f_s[idx], self.pooled[idx], self.labels[idx])


def make_condition(hffm: HFFM, inputs: ConditionInputs) -> ConditionEmbedding:
    from .textdis import DisentangledText

    return hffm(dt=DisentangledText(inputs.f_a, inputs.f_s), pooled=inputs.pooled, labels=inputs.labels)


class DiffusionTrainer:
    """Stage-3 loop over a DiT + HFFM pair.

    Only parameters with ``requires_grad`` enter the optimiser, so a frozen
    base never moves. Colour-loss rollouts draw from their own noise stream
    and leave the main trajectory's randomness untouched. With ``hffm=None``
    the DiT is trained unconditionally (null context).
    """

    def __init__(self, dit: nn.Module, hffm: HFFM | None, images: np.ndarray, inputs: ConditionInputs | None,
                 cfg: DiffusionConfig, seed: int = 0, total_steps: int | None = None):
        self.dit, self.hffm, self.cfg = dit, hffm, cfg
        self.x0 = torch.from_numpy(images) * 2.0 - 1.0
        self.inputs = inputs
        self.schedule = linear_schedule(cfg.num_timesteps, cfg.beta_start, cfg.beta_end,
                                        cfg.schedule_reference_steps or None)
        n = len(self.x0)
        self.steps_per_epoch = max(1, n // cfg.batch_size)
        if total_steps is None:
            total_steps = cfg.max_steps or cfg.epochs * self.steps_per_epoch
        self.total_steps = total_steps
        self.lr_schedule = LrSchedule(min(cfg.warmup_steps, total_steps), total_steps, cfg.lr, 0.0)
        named = [("dit." + k, p) for k, p in dit.named_parameters() if p.requires_grad]
        if hffm is not None:
            named += [("hffm." + k, p) for k, p in hffm.named_parameters() if p.requires_grad]
        if not named:
            raise ConfigError("nothing to train: every parameter is frozen")
        self.opt = AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.order_rng = np_stream(seed, "diffusion.order")
        self.noise = stream(seed, "diffusion.noise")
        self.rollout_noise = stream(seed, "diffusion.rollout")
        self.step = 0
        self._perm = np.empty(0, dtype=np.int64)

    def _batch_indices(self) -> torch.Tensor:
        bs = self.cfg.batch_size
        if len(self._perm) < bs:
            self._perm = self.order_rng.permutation(len(self.x0))
        idx, self._perm = self._perm[:bs], self._perm[bs:]
        return torch.from_numpy(idx)

    def train_step(self) -> dict:
        cfg = self.cfg
        self._mode(True)
        idx = self._batch_indices()
        x0 = self.x0[idx]
        cond = None if self.hffm is None else make_condition(self.hffm, self.inputs.take(idx))
        mse = loss_mse(self.dit, x0, cond, self.schedule, generator=self.noise)
        cd = torch.zeros(())
        if cfg.lambda_cd > 0 and self.step % cfg.every_n == 0:
            gen = rollout_x0(self.dit, cond, self.schedule, tuple(x0.shape), cfg.sample_steps, self.rollout_noise,
                             dtype=x0.dtype)
            real = self.x0 if cfg.cd_target == "dataset" else x0
            cd = color_distribution_loss(gen, real)
        total = mse + cfg.lambda_cd * cd
        parts = {"step": self.step, "mse": float(mse.detach()), "cd": float(cd.detach()),
                 "total": float(total.detach())}
        if not torch.isfinite(total):
            raise NumericError(f"non-finite loss at step {self.step}: {parts}")
        self.opt.zero_grad()
        total.backward()
        self.opt.step(lr_at(self.lr_schedule, self.step + 1))
        self.step += 1
        return parts

    def fit(self, steps: int | None = None, log=None, log_every: int = 100) -> list[dict]:
        steps = self.total_steps - self.step if steps is None else steps
        history, acc, t0 = [], [], time.time()
        for _ in range(steps):
            acc.append(self.train_step())
            if len(acc) == log_every or self.step == self.total_steps:
                row = {"step": self.step, "mse": float(np.mean([a["mse"] for a in acc])),
                       "cd": float(np.sum([a["cd"] for a in acc])),
                       "total": float(np.mean([a["total"] for a in acc])), "seconds": time.time() - t0}
                history.append(row)
                if log:
                    log(row)
                acc, t0 = [], time.time()
        self._mode(False)
        return history

    def _mode(self, train: bool) -> None:
        self.dit.train(train)
        if self.hffm is not None:
            self.hffm.train(train)

    @torch.no_grad()
    def validation_mse(self, images: np.ndarray, inputs: ConditionInputs, seed: int = 0) -> float:
        """Epsilon MSE on fixed (t, eps) draws; comparable across training."""
        self._mode(False)
        x0 = torch.from_numpy(images) * 2.0 - 1.0
        g = stream(seed, "diffusion.validation")
        t = torch.randint(0, self.schedule.T, (len(x0),), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        total = 0.0
        for i in range(0, len(x0), 128):
            sl = slice(i, i + 128)
            cond = None if self.hffm is None else make_condition(self.hffm, inputs.take(sl))
            total += float(loss_mse(self.dit, x0[sl], cond, self.schedule, t=t[sl], eps=eps[sl])) * len(x0[sl])
        return total / len(x0)


def pretrain_base(dit: nn.Module, images: np.ndarray, cfg: DiffusionConfig, seed: int = 0,
                  log=None) -> list[dict]:
    """Unconditional epsilon-prediction training of every DiT weight.

    This produces the base model that the conditional stage later freezes.
    """
    pre = DiffusionConfig(**{**cfg.__dict__, "lr": cfg.pretrain_lr, "lambda_cd": 0.0,
                             "max_steps": cfg.pretrain_steps, "warmup_steps": cfg.pretrain_warmup_steps})
    if pre.max_steps <= 0:
        return []
    return DiffusionTrainer(dit, None, images, None, pre, seed=seed + 7919).fit(log=log)


@torch.no_grad()
def generate(dit: nn.Module, hffm: HFFM, inputs: ConditionInputs, schedule: DiffusionSchedule,
             steps: int = 20, seed: int = 0, batch_size: int = 128) -> np.ndarray:
    """DDIM samples in [0, 1], one per condition row."""
    dit.eval()
    hffm.eval()
    g = stream(seed, "diffusion.sample")
    n = len(inputs.labels)
    cfg = dit.cfg
    out = []
    for i in range(0, n, batch_size):
        sub = inputs.take(slice(i, i + batch_size))
        cond = make_condition(hffm, sub)
        shape = (len(sub.labels), cfg.in_channels, cfg.image_size, cfg.image_size)
        out.append(ddim_sample(dit, cond, schedule, shape, steps=steps, generator=g))
    return ((torch.cat(out) + 1.0) / 2.0).numpy()
