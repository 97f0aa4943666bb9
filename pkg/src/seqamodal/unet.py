"""Noise-prediction network: a small residual U-Net with sinusoidal
timestep embeddings, consuming the 5-channel conditioned input
(RGB + cumulative mask + noisy mask) and emitting a 1-channel noise map.

Checkpoints are a single file: JSON header followed by raw little-endian
tensor payloads; see docs/checkpoint_format.md.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ConditionedInput

CHECKPOINT_MAGIC = b"SAMCKPT\x01"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 128
    in_channels: int = 5  # RGB(3) + CM(1) + noisy mask(1)
    out_channels: int = 1
    parameter_seed: int = 0

    def validate(self):
        if self.in_channels != 5 or self.out_channels != 1:
            raise ValueError("conditioned input is fixed at 5 channels in, 1 out")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.image_size % (2 ** self.depth) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^depth = {2 ** self.depth}"
            )

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size, "base_width": self.base_width,
            "depth": self.depth, "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "parameter_seed": self.parameter_seed,
        }

    @staticmethod
    def from_json(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**d)


class CheckpointError(RuntimeError):
    pass


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    """Residual block with additive timestep conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """eps-predictor over the stacked conditioned input."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        w, d, tdim = config.base_width, config.depth, config.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        self.stem = nn.Conv2d(config.in_channels, w, 3, padding=1)

        widths = [w * (2 ** i) for i in range(d + 1)]
        self.down_blocks = nn.ModuleList(
            ResBlock(widths[i], widths[i + 1], tdim) for i in range(d)
        )
        self.downsamples = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i + 1], 3, stride=2, padding=1)
            for i in range(d)
        )
        self.mid = ResBlock(widths[d], widths[d], tdim)
        self.up_blocks = nn.ModuleList(
            ResBlock(widths[i + 1] * 2, widths[i], tdim) for i in reversed(range(d))
        )
        self.out_norm = _norm(w)
        self.out_conv = nn.Conv2d(w, config.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(x.dtype))
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for block in self.up_blocks:
            skip = skips.pop()
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


def init_denoiser(config: DenoiserConfig) -> Denoiser:
    """Build a denoiser with parameters deterministic in parameter_seed."""
    config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(config.parameter_seed)
        model = Denoiser(config)
    model.eval()
    return model


def predict_epsilon(model: Denoiser, cond: ConditionedInput) -> torch.Tensor:
    """Evaluate the denoiser on a conditioned input; read-only, finite output."""
    cfg = model.config
    size = (cfg.image_size, cfg.image_size)
    if tuple(cond.noisy_mask.shape[-2:]) != size:
        raise ValueError(
            f"input spatial size {tuple(cond.noisy_mask.shape[-2:])} does not match "
            f"model config image_size {cfg.image_size}"
        )
    out = model(cond.stacked(), cond.t)
    if not torch.all(torch.isfinite(out)):
        raise FloatingPointError("denoiser produced non-finite values")
    return out


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(model: Denoiser, path, optimizer=None, step: int = 0,
                    schedule_digest: str = "") -> None:
    """Atomic single-file checkpoint: magic, JSON header, raw tensors,
    optional optimizer blob."""
    state = model.state_dict()
    tensors = []
    payload = io.BytesIO()
    for name in sorted(state):
        array = state[name].detach().cpu().contiguous().numpy()
        tensors.append({"name": name, "dtype": str(array.dtype),
                        "shape": list(array.shape), "nbytes": array.nbytes})
        payload.write(array.tobytes())
    opt_blob = b""
    if optimizer is not None:
        buf = io.BytesIO()
        torch.save(optimizer.state_dict(), buf)
        opt_blob = buf.getvalue()
    header = json.dumps({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_json(),
        "step": step,
        "schedule_digest": schedule_digest,
        "tensors": tensors,
        "optimizer_nbytes": len(opt_blob),
    }, sort_keys=True).encode()

    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(payload.getvalue())
            f.write(opt_blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Load a checkpoint; returns (model, header dict, optimizer state or None).

    Fails cleanly on truncation or version mismatch, never a partial model."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"not a checkpoint file: {path}")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + hlen > len(data):
        raise CheckpointError(f"truncated checkpoint header: {path}")
    try:
        header = json.loads(data[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    off += hlen
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version: {header.get('format_version')}"
        )
    total = sum(t["nbytes"] for t in header["tensors"]) + header.get("optimizer_nbytes", 0)
    if off + total > len(data):
        raise CheckpointError(f"truncated checkpoint payload: {path}")

    state = {}
    for t in header["tensors"]:
        raw = data[off:off + t["nbytes"]]
        off += t["nbytes"]
        array = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        state[t["name"]] = torch.from_numpy(array)
    opt_state = None
    if header.get("optimizer_nbytes", 0):
        blob = data[off:off + header["optimizer_nbytes"]]
        opt_state = torch.load(io.BytesIO(blob), weights_only=False)

    model = init_denoiser(DenoiserConfig.from_json(header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, header, opt_state
