"""Continuous-time variance-preserving noise schedule.

Defines the marginal q(z_t | x0) = N(alpha_t x0, sigma_t^2 I) through the
log signal-to-noise ratio lambda_t = log(alpha_t^2 / sigma_t^2), plus the
algebra connecting the x0 / eps / v views of a latent point:

    z_t = alpha_t x0 + sigma_t eps
    v   = alpha_t eps - sigma_t x0
    x0  = alpha_t z_t - sigma_t v
    eps = (z_t - alpha_t x0) / sigma_t

Convention: t=0 is clean data, t=1 is maximum noise. The cosine schedule is
lambda(t) = -2 ln tan(pi t / 2), clamped to [lambda_min, lambda_max] so the
endpoints stay finite. All quantities are computed in float64 and cast back
to the caller's dtype; this avoids cancellation near t in {0, 1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

LOSS_WEIGHTINGS = ("uniform_eps", "snr_truncated")


@dataclass(frozen=True)
class Schedule:
    """Cosine noise schedule with log-SNR clamped to [lambda_min, lambda_max]."""

    kind: str = "cosine"
    lambda_min: float = -15.0
    lambda_max: float = 15.0

    def __post_init__(self) -> None:
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be below lambda_max")


def _as_time(t: float | Tensor) -> Tensor:
    t64 = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t64 < 0) or torch.any(t64 > 1):
        raise ValueError(f"t must lie in [0, 1], got {t!r}")
    return t64


def log_snr(schedule: Schedule, t: float | Tensor) -> float | Tensor:
    """Log signal-to-noise ratio lambda_t = -2 ln tan(pi t / 2), clamped.

    Strictly decreasing on the clamp-free interior; the endpoints map to
    lambda_max (t=0) and lambda_min (t=1) rather than +/- infinity.
    """
    t64 = _as_time(t)
    lam = -2.0 * torch.log(torch.tan(math.pi / 2 * t64))
    lam = lam.clamp(schedule.lambda_min, schedule.lambda_max)
    if isinstance(t, Tensor):
        return lam
    return float(lam)


def alpha_sigma(schedule: Schedule, t: float | Tensor) -> tuple[float, float] | tuple[Tensor, Tensor]:
    """Signal and noise scales alpha_t = sqrt(sigmoid(lambda_t)), sigma_t = sqrt(sigmoid(-lambda_t)).

    Variance preserving: alpha_t^2 + sigma_t^2 = 1 exactly (up to float64
    rounding) for every t.
    """
    lam = _as_time(t)
    lam = log_snr(schedule, lam)
    alpha = torch.sqrt(torch.sigmoid(lam))
    sigma = torch.sqrt(torch.sigmoid(-lam))
    if isinstance(t, Tensor):
        return alpha, sigma
    return float(alpha), float(sigma)


def _coef(value: float | Tensor, like: Tensor) -> Tensor:
    """Broadcast a scalar or per-sample (B,) coefficient against `like`."""
    coef = torch.as_tensor(value, dtype=torch.float64)
    if coef.ndim == 0:
        return coef.to(like.dtype)
    if coef.ndim == 1 and coef.shape[0] == like.shape[0]:
        return coef.view(-1, *([1] * (like.ndim - 1))).to(like.dtype)
    raise ValueError(f"coefficient shape {tuple(coef.shape)} does not broadcast against {tuple(like.shape)}")


def _check_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_marginal(schedule: Schedule, x0: Tensor, t: float | Tensor, eps: Tensor) -> Tensor:
    """Reparameterized forward marginal z_t = alpha_t x0 + sigma_t eps.

    `eps` is drawn by the caller; `t` may be a scalar or a per-sample (B,)
    tensor when x0 is batched.
    """
    _check_shapes(x0, eps, "forward_marginal")
    alpha, sigma = alpha_sigma(schedule, _as_time(t))
    return _coef(alpha, x0) * x0 + _coef(sigma, eps) * eps


def v_from(x0: Tensor, eps: Tensor, alpha: float | Tensor, sigma: float | Tensor) -> Tensor:
    """Velocity target v = alpha eps - sigma x0."""
    _check_shapes(x0, eps, "v_from")
    return _coef(alpha, eps) * eps - _coef(sigma, x0) * x0


def x0_from_v(z_t: Tensor, v: Tensor, alpha: float | Tensor, sigma: float | Tensor) -> Tensor:
    """Recover the clean image x0 = alpha z_t - sigma v.

    Exact inverse of (forward_marginal, v_from) when alpha^2 + sigma^2 = 1.
    """
    _check_shapes(z_t, v, "x0_from_v")
    return _coef(alpha, z_t) * z_t - _coef(sigma, v) * v


def eps_from(z_t: Tensor, x0_hat: Tensor, alpha: float | Tensor, sigma: float | Tensor) -> Tensor:
    """Implied noise eps = (z_t - alpha x0_hat) / sigma. Requires sigma > 0."""
    _check_shapes(z_t, x0_hat, "eps_from")
    sig = torch.as_tensor(sigma, dtype=torch.float64)
    if torch.any(sig <= 0):
        raise ValueError("eps_from requires sigma > 0")
    return (z_t - _coef(alpha, x0_hat) * x0_hat) / _coef(sig, z_t)


def loss_weight(schedule: Schedule, t: float | Tensor, weighting: str = "uniform_eps") -> float | Tensor:
    """Per-timestep loss weight w(lambda_t).

    uniform_eps: constant 1 (plain residual loss on the model's target).
    snr_truncated: max(e^lambda, 1) / e^lambda, i.e. 1 in the high-SNR half
    and e^{-lambda} below lambda=0; upweights the noisy end of the schedule.
    """
    if weighting not in LOSS_WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}; expected one of {LOSS_WEIGHTINGS}")
    lam = log_snr(schedule, _as_time(t))
    if weighting == "uniform_eps":
        w = torch.ones_like(lam)
    else:
        w = torch.exp(-torch.clamp(lam, max=0.0))
    if isinstance(t, Tensor):
        return w
    return float(w)
