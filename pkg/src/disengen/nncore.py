"""Deterministic tensor substrate: checked primitive ops, initialisation
streams, AdamW, the warmup-cosine schedule, finite-difference gradient
checking and the ``DGN1`` checkpoint container.

Tensors are ``torch.Tensor``; reverse-mode differentiation is torch's tape.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DatasetError, DimensionError, NumericError

__all__ = [
    "stream",
    "np_stream",
    "init_module",
    "freeze",
    "linear_forward",
    "conv2d_forward",
    "attention",
    "OptimizerState",
    "AdamW",
    "adamw_step",
    "LrSchedule",
    "lr_at",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "file_digest",
]


# ---------------------------------------------------------------------------
# seeded streams


def _stream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def stream(seed: int, name: str) -> torch.Generator:
    """A torch generator for the named stream ``name`` under ``seed``."""
    g = torch.Generator()
    g.manual_seed(_stream_seed(seed, name))
    return g


def np_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(_stream_seed(seed, name))


def init_module(module: nn.Module, seed: int, name: str) -> nn.Module:
    """Kaiming-uniform conv/linear weights, zero biases, N(0, 0.02) embeddings.

    Submodules are visited in registration order, so the result depends only
    on ``(seed, name)`` and the architecture.
    """
    g = stream(seed, name)
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=g)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=g)
    return module


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# ---------------------------------------------------------------------------
# primitive ops


def linear_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``y = x W^T + b`` over the last axis of ``x``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: x {tuple(x.shape)} incompatible with W {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: b {tuple(bias.shape)} incompatible with W {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def conv2d_forward(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """Zero-padded cross-correlation of ``x[B,C,H,W]`` with ``kernel[Co,C,k,k]``."""
    if x.dim() != 4 or kernel.dim() != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: x {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {tuple(kernel.shape[-2:])}")
    for extent in x.shape[-2:]:
        if (extent + 2 * pad - k) % stride != 0 or extent + 2 * pad < k:
            raise ConfigError(
                f"conv2d: output extent ({extent}+2*{pad}-{k})/{stride}+1 is not a positive integer"
            )
    return F.conv2d(x, kernel, bias, stride=stride, padding=pad)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(D)) v`` over the last two axes; leading axes are batch."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} do not agree"
        )
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if not torch.isfinite(logits).all():
        raise NumericError("attention: non-finite logits")
    return torch.softmax(logits, dim=-1) @ v


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    lr_base: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: OptimizerState,
    lr: float | None = None,
) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Parameters whose gradient is ``None`` are left untouched (no decay either).
    """
    lr = state.lr_base if lr is None else lr
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if state.weight_decay:
                p.mul_(1.0 - lr * state.weight_decay)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


class AdamW:
    """Named-parameter wrapper around :func:`adamw_step`.

    Only the parameters handed in are ever touched, which is how frozen
    weights stay bit-identical.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(named_params)
        self.state = OptimizerState(0, {}, {}, lr, tuple(betas), eps, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        adamw_step(self.params, grads, self.state, lr)


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    total_steps: int
    lr_base: float
    lr_min: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not 0 <= self.lr_min <= self.lr_base:
            raise ConfigError("need 0 <= lr_min <= lr_base")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from 0 (at step 0) to ``lr_base`` (at ``warmup_steps``), then
    cosine decay to ``lr_min`` at ``total_steps``; constant afterwards.

    Trainers query ``lr_at(s, k + 1)`` for their k-th update so the first
    update is not wasted on a zero rate.
    """
    if step < schedule.warmup_steps:
        return schedule.lr_base * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = 1.0 if span == 0 else min(1.0, (step - schedule.warmup_steps) / span)
    return schedule.lr_min + 0.5 * (schedule.lr_base - schedule.lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    floor: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` recomputes a scalar from ``params`` (f64 leaf tensors) on each call
    and must be deterministic. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` a seeded random
    subset of coordinates is probed per tensor. Kinks of piecewise-linear
    activations are not detected; callers pick inputs away from them.
    """
    for p in params:
        p.grad = None
        p.requires_grad_(True)
    out = f()
    analytic = torch.autograd.grad(out, list(params), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            a_flat = a.reshape(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = rng.choice(flat.numel(), size=max_coords, replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                ana = a_flat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"DGN1"
_DTYPES = {
    torch.float32: ("f32", "<f4"),
    torch.float64: ("f64", "<f8"),
    torch.int64: ("i64", "<i8"),
}
_BY_TAG = {tag: (dt, np_dt) for dt, (tag, np_dt) in _DTYPES.items()}


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> str:
    """Write ``tensors`` in the DGN1 layout and return the file's sha256.

    Layout: magic ``DGN1``, u64 little-endian manifest length, manifest JSON
    (``{"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}``),
    then the raw little-endian blobs, offsets relative to the first blob.
    """
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        if t.dtype not in _DTYPES:
            raise ConfigError(f"checkpoint: unsupported dtype {t.dtype} for {name!r}")
        tag, np_dt = _DTYPES[t.dtype]
        raw = t.detach().cpu().contiguous().numpy().astype(np_dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    return file_digest(path)


def load_checkpoint(path: str | Path, prefixes: Sequence[str] | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a DGN1 file; with ``prefixes`` only matching tensors are materialised."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise DatasetError(f"{path}: not a DGN1 checkpoint (magic {data[:4]!r})")
    (mlen,) = struct.unpack("<Q", data[4:12])
    try:
        manifest = json.loads(data[12 : 12 + mlen])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: corrupt checkpoint manifest: {exc}") from exc
    base = 12 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        if prefixes is not None and not any(e["name"].startswith(p) for p in prefixes):
            continue
        dt, np_dt = _BY_TAG[e["dtype"]]
        raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dt).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(dt)
    return tensors, manifest["meta"]


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
