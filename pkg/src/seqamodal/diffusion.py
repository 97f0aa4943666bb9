"""DDPM core for mask diffusion: noise schedule, closed-form forward
noising, the conditioned reverse step, and the noise-prediction MSE loss.

Only the mask channel is ever noised; the RGB image and the cumulative
mask ride along as clean conditioning channels. Masks enter in the signed
convention (-1 background, +1 object).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

SIGMA_MODES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise tables, index t in 1..T (arrays are 0-based).

    alpha_bar_prev(1) == 1 by convention so t=1 formulas are uniform.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float
    sigma_mode: str

    def a(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def abar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def sig(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigma[t - 1])

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def digest(self) -> str:
        payload = json.dumps(
            {"T": self.T, "beta_start": self.beta_start,
             "beta_end": self.beta_end, "sigma_mode": self.sigma_mode},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "sigma_mode": self.sigma_mode}

    @staticmethod
    def from_json(d: dict) -> "NoiseSchedule":
        return linear_schedule(d["T"], d["beta_start"], d["beta_end"],
                               d.get("sigma_mode", "beta"))


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                    sigma_mode: str = "beta") -> NoiseSchedule:
    """Linear beta schedule; sigma_t^2 = beta_t, or the posterior variance
    beta_tilde_t when sigma_mode == "beta_tilde"."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if sigma_mode not in SIGMA_MODES:
        raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma_mode == "beta":
        var = beta
    else:
        abar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
        var = (1.0 - abar_prev) / (1.0 - alpha_bar) * beta
    sigma = np.sqrt(var)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=sigma, beta_start=beta_start, beta_end=beta_end,
                         sigma_mode=sigma_mode)


@dataclass
class ConditionedInput:
    """What the denoiser sees: clean image + clean cumulative mask + noisy
    mask at timestep t. All channels share spatial dimensions."""

    image: torch.Tensor       # (B, 3, H, W), values in [-1, 1]
    cm: torch.Tensor          # (B, 1, H, W), signed mask
    noisy_mask: torch.Tensor  # (B, 1, H, W)
    t: torch.Tensor           # (B,) long

    def __post_init__(self):
        if self.image.shape[-2:] != self.cm.shape[-2:] or \
           self.image.shape[-2:] != self.noisy_mask.shape[-2:]:
            raise ValueError(
                f"channel spatial sizes disagree: image {tuple(self.image.shape)}, "
                f"cm {tuple(self.cm.shape)}, noisy {tuple(self.noisy_mask.shape)}"
            )

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.image, self.cm, self.noisy_mask], dim=1)


def _as_signed_tensor(mask) -> torch.Tensor:
    """Accept bool numpy masks (mapped to +-1) or already-signed tensors."""
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        return torch.from_numpy(np.where(mask, 1.0, -1.0).astype(np.float32))
    if isinstance(mask, np.ndarray):
        return torch.from_numpy(mask.astype(np.float32))
    return mask


def forward_sample(schedule: NoiseSchedule, mask, t: int, epsilon: torch.Tensor):
    """Closed-form forward noising: sqrt(abar_t) * M + sqrt(1 - abar_t) * eps.

    epsilon is supplied by the caller (explicit for testability)."""
    m = _as_signed_tensor(mask)
    if epsilon.shape != m.shape:
        raise ValueError(f"epsilon shape {tuple(epsilon.shape)} != mask shape {tuple(m.shape)}")
    abar = schedule.abar(t)
    return math.sqrt(abar) * m + math.sqrt(1.0 - abar) * epsilon


def reverse_step(schedule: NoiseSchedule, denoiser, cond: ConditionedInput,
                 z: torch.Tensor, clip_x0: bool = False) -> torch.Tensor:
    """One reverse diffusion step on the mask channel only.

    M_{t-1} = (M_t - (1-a_t)/sqrt(1-abar_t) * eps_hat) / sqrt(a_t) + sigma_t * z
    z must be all-zero at t = 1.

    With clip_x0, the implied clean-signal estimate is clamped to [-1, 1]
    before the posterior mean is formed (the two means coincide when the
    estimate is already in range). Signed masks live on {-1, +1}, so the
    clamp only removes out-of-distribution drift; samplers want it on,
    closed-form identity tests want it off."""
    t = int(cond.t.reshape(-1)[0].item())
    if not torch.all(cond.t == t):
        raise ValueError("reverse_step expects a single shared timestep per call")
    if t == 1 and torch.any(z != 0):
        raise ValueError("z must be zero at t = 1")
    eps_hat = denoiser(cond)
    if eps_hat.shape != cond.noisy_mask.shape:
        raise ValueError(
            f"denoiser output shape {tuple(eps_hat.shape)} != "
            f"noisy mask shape {tuple(cond.noisy_mask.shape)}"
        )
    a_t = schedule.a(t)
    abar_t = schedule.abar(t)
    if clip_x0:
        abar_prev = schedule.abar(t - 1)
        x0_hat = (cond.noisy_mask - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        beta_t = 1.0 - a_t
        mean = (math.sqrt(abar_prev) * beta_t / (1.0 - abar_t)) * x0_hat \
            + (math.sqrt(a_t) * (1.0 - abar_prev) / (1.0 - abar_t)) * cond.noisy_mask
    else:
        mean = (cond.noisy_mask - (1.0 - a_t) / math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(a_t)
    return mean + schedule.sig(t) * z


def training_loss(schedule: NoiseSchedule, denoiser, image: torch.Tensor,
                  cm: torch.Tensor, mask, t, epsilon: torch.Tensor) -> torch.Tensor:
    """Noise-prediction MSE: mean over pixels of (eps - eps_hat)^2.

    t may be a single int or a per-example long tensor; forward noising is
    applied per example in the latter case."""
    m = _as_signed_tensor(mask)
    if isinstance(t, int):
        t_tensor = torch.full((m.shape[0],), t, dtype=torch.long)
        noisy = forward_sample(schedule, m, t, epsilon)
    else:
        t_tensor = t.to(torch.long)
        abar = torch.from_numpy(schedule.alpha_bar.astype(np.float32))[t_tensor - 1]
        abar = abar.view(-1, *([1] * (m.dim() - 1)))
        noisy = torch.sqrt(abar) * m + torch.sqrt(1.0 - abar) * epsilon
    cond = ConditionedInput(image=image, cm=cm, noisy_mask=noisy, t=t_tensor)
    eps_hat = denoiser(cond)
    loss = torch.mean((epsilon - eps_hat) ** 2)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    return loss
