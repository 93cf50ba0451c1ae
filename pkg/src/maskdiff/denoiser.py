"""Conditional denoising network (eps- or v-prediction).

A residual U-Net that takes the noisy image z_t, the log-SNR lambda_t and a
ConditioningBundle. The segmentation mask is concatenated channel-wise with
z_t at the input (an all-zeros stack means "no mask", which doubles as the
unconditional token for classifier-free guidance); scalar covariates and
lambda_t share an embedding pathway that modulates every residual block.
Super-resolution stages additionally concatenate the upsampled
low-resolution conditioning image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

PARAMETERIZATIONS = ("eps", "v")


@dataclass
class ConditioningBundle:
    """Conditioning inputs for one batch.

    mask: (B, C-1, H, W) foreground one-hot in {0, 1}; all-zeros = empty mask.
    scalars: (B, S) covariates normalized to [-1, 1], or None.
    lowres: (B, in_channels, H, W) conditioning image for super-res stages.
    is_null: marks the unconditional token (zeroed mask and scalars).
    """

    mask: Tensor
    scalars: Tensor | None = None
    lowres: Tensor | None = None
    is_null: bool = False

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]

    def null_like(self) -> "ConditioningBundle":
        """The unconditional bundle: zeroed mask/scalars, lowres preserved."""
        return ConditioningBundle(
            mask=torch.zeros_like(self.mask),
            scalars=None if self.scalars is None else torch.zeros_like(self.scalars),
            lowres=self.lowres,
            is_null=True,
        )


def drop_conditioning(cond: ConditioningBundle, u: float, p: float) -> ConditioningBundle:
    """Classifier-free-guidance dropout: null bundle when u < p, else unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    if u < p:
        return cond.null_like()
    return cond


@dataclass
class DenoiserConfig:
    resolution: int
    in_channels: int = 3
    num_classes: int = 4  # includes background; the mask stack has num_classes - 1 channels
    parameterization: str = "eps"
    base_width: int = 32
    depth: int = 2
    scalar_dim: int = 0
    cond_dropout_p: float = 0.1
    lowres_channels: int = 0  # in_channels for super-resolution stages, 0 for the base stage

    def __post_init__(self) -> None:
        if self.resolution < 8 or self.resolution & (self.resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {self.resolution}")
        if self.depth < 1 or self.depth > int(math.log2(self.resolution)) - 2:
            raise ValueError(f"depth {self.depth} out of range for resolution {self.resolution}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ValueError("cond_dropout_p must be in [0, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background + foreground)")

    @property
    def mask_channels(self) -> int:
        return self.num_classes - 1


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


def sinusoidal_embedding(x: Tensor, dim: int, scale: float = 100.0) -> Tensor:
    """Sin/cos features of a scalar signal, shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = scale * x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def lambda_features(lam: Tensor, dim: int) -> Tensor:
    """Sinusoidal features of lambda plus the schedule's raw coefficients.

    The denoising map's z-coefficient grows like e^{lambda/2} toward the
    clean end of the schedule; exposing e^{+/-lambda/2} (and alpha, sigma)
    directly lets the modulation layers reach those gains with small weights
    instead of having to synthesize an exponential from sinusoids.
    """
    lam64 = lam.double()
    raw = torch.stack(
        [
            lam64 / 10.0,
            torch.sqrt(torch.sigmoid(lam64)),
            torch.sqrt(torch.sigmoid(-lam64)),
            torch.exp(lam64 / 2) / 100.0,
            torch.exp(-lam64 / 2) / 100.0,
        ],
        dim=-1,
    ).to(lam.dtype)
    sin_dim = dim - raw.shape[-1]
    sins = sinusoidal_embedding(lam, sin_dim + 1)[:, :sin_dim]
    return torch.cat([sins, raw], dim=-1)


class ResBlock(nn.Module):
    """Residual block with scale-shift embedding conditioning.

    The embedding modulates the normalized activations multiplicatively
    (h * (1 + scale) + shift), which lets the network express the large
    lambda-dependent gains the denoising map needs near the clean end of the
    schedule; purely additive conditioning cannot.
    """

    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * c_out)
        nn.init.zeros_(self.emb_proj.weight)
        nn.init.zeros_(self.emb_proj.bias)
        self.norm2 = _group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        scale, shift = self.emb_proj(torch.nn.functional.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(torch.nn.functional.silu(h))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """U-Net predicting eps or v per config.parameterization.

    The output head is zero-initialized, so a freshly constructed model
    predicts an all-zeros tensor for any input.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        chans = [cfg.base_width * min(2**i, 8) for i in range(cfg.depth + 1)]
        emb_dim = 4 * cfg.base_width
        in_total = cfg.in_channels + cfg.mask_channels + cfg.lowres_channels

        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.scalar_proj = nn.Linear(cfg.scalar_dim, emb_dim) if cfg.scalar_dim > 0 else None

        self.stem = nn.Conv2d(in_total, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(cfg.depth):
            self.down_blocks.append(ResBlock(chans[i], chans[i], emb_dim))
            self.downsamples.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
        self.middle = ResBlock(chans[-1], chans[-1], emb_dim)
        self.up_convs = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up_convs.append(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1))
            self.up_blocks.append(ResBlock(2 * chans[i], chans[i], emb_dim))

        self.out_norm = _group_norm(chans[0])
        self.out_conv = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _embedding(self, lambda_t: Tensor, cond: ConditioningBundle) -> Tensor:
        emb = self.emb_mlp(lambda_features(lambda_t, 4 * self.config.base_width))
        if self.scalar_proj is not None:
            scalars = cond.scalars
            if scalars is None:
                scalars = torch.zeros(lambda_t.shape[0], self.config.scalar_dim, dtype=emb.dtype, device=emb.device)
            emb = emb + self.scalar_proj(scalars)
        return emb

    def forward(self, z_t: Tensor, lambda_t: float | Tensor, cond: ConditioningBundle) -> Tensor:
        dtype = z_t.dtype
        if not isinstance(lambda_t, Tensor):
            lambda_t = torch.full((z_t.shape[0],), float(lambda_t), dtype=dtype, device=z_t.device)
        lambda_t = lambda_t.to(dtype)

        parts = [z_t, cond.mask.to(dtype)]
        if self.config.lowres_channels > 0:
            if cond.lowres is None:
                raise ValueError("this stage requires lowres conditioning but cond.lowres is None")
            parts.append(cond.lowres.to(dtype))
        x = self.stem(torch.cat(parts, dim=1))

        emb = self._embedding(lambda_t, cond)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            x = block(x, emb)
            skips.append(x)
            x = down(x)
        x = self.middle(x, emb)
        for conv, block in zip(self.up_convs, self.up_blocks):
            x = conv(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))
            x = block(torch.cat([x, skips.pop()], dim=1), emb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(x)))


def predict(model: Denoiser, z_t: Tensor, lambda_t: float | Tensor, cond: ConditioningBundle) -> Tensor:
    """Validated forward pass; output has the same shape as z_t.

    Interpreted as eps-hat or v-hat per model.config.parameterization.
    Deterministic given (weights, inputs); gradients flow when enabled.
    """
    cfg = model.config
    expected = (cfg.in_channels, cfg.resolution, cfg.resolution)
    if z_t.ndim != 4 or tuple(z_t.shape[1:]) != expected:
        raise ValueError(f"z_t shape {tuple(z_t.shape)} does not match (B, {expected})")
    if tuple(cond.mask.shape) != (z_t.shape[0], cfg.mask_channels, cfg.resolution, cfg.resolution):
        raise ValueError(f"mask shape {tuple(cond.mask.shape)} does not match model config")
    if not torch.isfinite(z_t).all():
        raise ValueError("z_t contains non-finite values")
    return model(z_t, lambda_t, cond)


def empty_bundle(
    batch: int,
    config: DenoiserConfig,
    *,
    lowres: Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> ConditioningBundle:
    """All-zeros (empty-mask) bundle matching a model config."""
    mask = torch.zeros(batch, config.mask_channels, config.resolution, config.resolution, dtype=dtype)
    scalars = torch.zeros(batch, config.scalar_dim, dtype=dtype) if config.scalar_dim > 0 else None
    return ConditioningBundle(mask=mask, scalars=scalars, lowres=lowres)
