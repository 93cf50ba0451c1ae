"""Training objective and deterministic DDIM generation.

Sampling walks a strictly decreasing timestep grid from t=1 to t=0. Each step
converts the network output into an (x0_hat, eps_hat) pair, clamps x0_hat to
[-1, 1], and re-noises to the next grid time. The grid endpoint t=0 denotes
the clean-image marginal and is treated as (alpha, sigma) = (1, 0) exactly,
so the terminal step returns the clamped x0 prediction instead of the
clamped-log-SNR approximation of it.

Classifier-free guidance mixes conditional and unconditional predictions,
(1 + w) * f(cond) - w * f(null); the mix is linear in the network output and
therefore applies unchanged to eps- and v-parameterized models.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoints import load_checkpoint
from .denoiser import ConditioningBundle, Denoiser, DenoiserConfig, drop_conditioning, predict
from .schedules import Schedule, alpha_sigma, eps_from, forward_marginal, log_snr, loss_weight, v_from, x0_from_v


class TrainingError(RuntimeError):
    """Non-finite training loss; carries the offending timesteps."""


class SamplingError(RuntimeError):
    """Non-finite intermediate during sampling; carries the step index."""


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from arbitrary parts (for per-record/per-stage streams)."""
    digest = hashlib.blake2s(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def uniform_grid(num_steps: int) -> list[float]:
    """Uniform timestep grid [1, ..., 0] with num_steps segments."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    return [float(v) for v in torch.linspace(1.0, 0.0, num_steps + 1)]


@dataclass
class SamplerRun:
    """One sampling run: seed, timestep grid, optional x0_hat trace."""

    seed: int
    grid: list[float]
    keep_trace: bool = False
    trace: list[Tensor] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.grid) < 2 or self.grid[0] != 1.0 or self.grid[-1] != 0.0:
            raise ValueError("grid must run from exactly 1.0 to exactly 0.0")
        if any(a <= b for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly decreasing")


def training_loss(
    model: Denoiser,
    schedule: Schedule,
    x0: Tensor,
    cond: ConditioningBundle,
    rng: torch.Generator,
    weighting: str = "uniform_eps",
) -> Tensor:
    """Denoising loss w(lambda_t) * ||target - prediction||^2, averaged over the batch.

    The rng supplies t ~ U(0,1) per sample, eps ~ N(0,I), and the conditioning
    dropout draw. The target is eps or v per model.config.parameterization.
    Returns a differentiable scalar.
    """
    if x0.ndim != 4:
        raise ValueError(f"x0 must be (B, C, H, W), got {tuple(x0.shape)}")
    t = torch.rand(x0.shape[0], generator=rng, dtype=torch.float64)
    lam = log_snr(schedule, t)
    alpha, sigma = alpha_sigma(schedule, t)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    z_t = forward_marginal(schedule, x0, t, eps)
    u = float(torch.rand((), generator=rng))
    used = drop_conditioning(cond, u, model.config.cond_dropout_p)
    pred = predict(model, z_t, lam.to(x0.dtype), used)
    if model.config.parameterization == "v":
        target = v_from(x0, eps, alpha, sigma)
    else:
        target = eps
    w = loss_weight(schedule, t, weighting)
    per_sample = ((pred - target) ** 2).flatten(1).mean(dim=1)
    loss = (w.to(x0.dtype) * per_sample).mean()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at t={t.tolist()}")
    return loss


def guided_prediction(
    model: Denoiser, z_t: Tensor, lambda_t: float | Tensor, cond: ConditioningBundle, w: float
) -> Tensor:
    """Classifier-free guidance mix (1 + w) * f(cond) - w * f(null); w=0 is f(cond) exactly."""
    if w < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w}")
    cond_out = predict(model, z_t, lambda_t, cond)
    if w == 0:
        return cond_out
    null_out = predict(model, z_t, lambda_t, cond.null_like())
    return (1.0 + w) * cond_out - w * null_out


def predicted_x0(
    schedule: Schedule, z_t: Tensor, prediction: Tensor, t: float, parameterization: str
) -> Tensor:
    """x0_hat implied by the network output at time t, clamped to [-1, 1]."""
    alpha_t, sigma_t = alpha_sigma(schedule, t)
    if parameterization == "v":
        x0_hat = x0_from_v(z_t, prediction, alpha_t, sigma_t)
    elif parameterization == "eps":
        x0_hat = (z_t - sigma_t * prediction) / alpha_t
    else:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    return x0_hat.clamp(-1.0, 1.0)


def ddim_step(
    schedule: Schedule, z_t: Tensor, prediction: Tensor, t: float, s: float, parameterization: str
) -> Tensor:
    """Deterministic step from time t to s < t via the implied (x0_hat, eps_hat) pair."""
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"require 0 <= s < t <= 1, got s={s}, t={t}")
    alpha_t, sigma_t = alpha_sigma(schedule, t)
    x0_hat = predicted_x0(schedule, z_t, prediction, t, parameterization)
    if s == 0.0:
        return x0_hat
    eps_hat = eps_from(z_t, x0_hat, alpha_t, sigma_t)
    alpha_s, sigma_s = alpha_sigma(schedule, s)
    return alpha_s * x0_hat + sigma_s * eps_hat


def sample(
    model: Denoiser,
    schedule: Schedule,
    cond: ConditioningBundle,
    run: SamplerRun,
    w: float,
    z_init: Tensor | None = None,
) -> Tensor:
    """Generate images by iterating guided prediction + DDIM over run.grid.

    Starts from z ~ N(0, I) seeded by run.seed (or z_init when supplied) and
    returns the final image clamped to [-1, 1]. Deterministic given
    (weights, cond, seed, grid, w).
    """
    cfg = model.config
    if z_init is None:
        gen = torch.Generator().manual_seed(run.seed)
        z = torch.randn(cond.batch_size, cfg.in_channels, cfg.resolution, cfg.resolution, generator=gen)
    else:
        z = z_init
    run.trace.clear()
    with torch.no_grad():
        for k in range(len(run.grid) - 1):
            t, s = run.grid[k], run.grid[k + 1]
            lam = log_snr(schedule, t)
            pred = guided_prediction(model, z, lam, cond, w)
            if run.keep_trace:
                run.trace.append(predicted_x0(schedule, z, pred, t, cfg.parameterization))
            z = ddim_step(schedule, z, pred, t, s, cfg.parameterization)
            if not torch.isfinite(z).all():
                raise SamplingError(f"non-finite latent after step {k} (t={t:.4f} -> s={s:.4f})")
    return z.clamp(-1.0, 1.0)


@dataclass
class CascadeStage:
    """One diffusion stage: base generator or super-resolution refiner."""

    resolution: int
    parameterization: str
    num_steps: int
    guidance_weight: float = 1.0
    cond_aug_level: float = 0.1
    checkpoint: str | None = None
    model: Denoiser | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.guidance_weight < 0:
            raise ValueError("guidance_weight must be >= 0")
        if not 0.0 <= self.cond_aug_level <= 1.0:
            raise ValueError("cond_aug_level must be in [0, 1]")


@dataclass
class CascadeSpec:
    """Ordered diffusion stages with strictly increasing, factor-aligned resolutions."""

    stages: list[CascadeStage]

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("cascade needs at least one stage")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.resolution <= prev.resolution or cur.resolution % prev.resolution:
                raise ValueError(
                    f"stage resolutions must strictly increase by integer factors, "
                    f"got {prev.resolution} -> {cur.resolution}"
                )

    @property
    def final_resolution(self) -> int:
        return self.stages[-1].resolution

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        base = path.parent
        payload = {
            "stages": [
                {
                    "resolution": s.resolution,
                    "parameterization": s.parameterization,
                    "num_steps": s.num_steps,
                    "guidance_weight": s.guidance_weight,
                    "cond_aug_level": s.cond_aug_level,
                    "checkpoint": None if s.checkpoint is None else _relativize(s.checkpoint, base),
                }
                for s in self.stages
            ]
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "CascadeSpec":
        path = Path(path)
        payload = json.loads(path.read_text())
        stages = []
        for entry in payload["stages"]:
            ckpt = entry.get("checkpoint")
            if ckpt is not None:
                ckpt = str((path.parent / ckpt).resolve())
            stages.append(
                CascadeStage(
                    resolution=entry["resolution"],
                    parameterization=entry["parameterization"],
                    num_steps=entry["num_steps"],
                    guidance_weight=entry.get("guidance_weight", 1.0),
                    cond_aug_level=entry.get("cond_aug_level", 0.1),
                    checkpoint=ckpt,
                )
            )
        return cls(stages=stages)


def _relativize(target: str | Path, base: Path) -> str:
    try:
        return str(Path(target).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(target).resolve())


def stage_model(stage: CascadeStage) -> Denoiser:
    """The stage's denoiser, loaded from its checkpoint on first use."""
    if stage.model is None:
        if stage.checkpoint is None:
            raise ValueError(f"stage at resolution {stage.resolution} has neither model nor checkpoint")
        ckpt = load_checkpoint(stage.checkpoint)
        if ckpt.kind != "denoiser":
            raise ValueError(f"{stage.checkpoint} is a {ckpt.kind} checkpoint, expected denoiser")
        model = Denoiser(DenoiserConfig(**ckpt.config))
        model.load_state_dict(ckpt.state_dict)
        model.eval()
        stage.model = model
    return stage.model


def _nearest_mask(mask: Tensor, resolution: int) -> Tensor:
    if mask.shape[-1] == resolution:
        return mask
    return F.interpolate(mask, size=(resolution, resolution), mode="nearest")


def cascade_sample(
    spec: CascadeSpec,
    cond: ConditioningBundle,
    seed: int,
    schedule: Schedule | None = None,
    trace_dir: str | Path | None = None,
) -> Tensor:
    """Run the full cascade: base stage from noise, then super-resolution stages.

    cond.mask must be at (or an integer multiple above) the final resolution;
    each stage sees it nearest-downsampled. Every stage after the first is
    conditioned on the bilinear upsampling of the previous output, noised by
    forward_marginal at t = cond_aug_level (conditioning augmentation).
    """
    schedule = schedule or Schedule()
    final_res = spec.final_resolution
    if cond.mask.shape[-1] < final_res or cond.mask.shape[-1] % final_res:
        raise ValueError(
            f"mask resolution {cond.mask.shape[-1]} must be the final stage resolution "
            f"{final_res} or an integer multiple of it"
        )
    mask_full = _nearest_mask(cond.mask, final_res)

    image: Tensor | None = None
    for idx, stage in enumerate(spec.stages):
        model = stage_model(stage)
        if model.config.resolution != stage.resolution:
            raise ValueError(
                f"stage {idx}: checkpoint resolution {model.config.resolution} "
                f"does not match spec resolution {stage.resolution}"
            )
        lowres = None
        if idx > 0:
            lowres = F.interpolate(image, size=(stage.resolution,) * 2, mode="bilinear", align_corners=False)
            if stage.cond_aug_level > 0:
                gen = torch.Generator().manual_seed(derive_seed(seed, "condaug", idx))
                noise = torch.randn(lowres.shape, generator=gen, dtype=lowres.dtype)
                lowres = forward_marginal(schedule, lowres, stage.cond_aug_level, noise)
        stage_cond = ConditioningBundle(
            mask=_nearest_mask(mask_full, stage.resolution),
            scalars=cond.scalars,
            lowres=lowres,
            is_null=cond.is_null,
        )
        run = SamplerRun(
            seed=derive_seed(seed, "stage", idx),
            grid=uniform_grid(stage.num_steps),
            keep_trace=trace_dir is not None,
        )
        image = sample(model, schedule, stage_cond, run, stage.guidance_weight)
        if trace_dir is not None:
            dump_trace(run, Path(trace_dir) / f"stage_{idx}")
    return image


def dump_trace(run: SamplerRun, out_dir: str | Path) -> list[Path]:
    """Write the run's x0_hat snapshots as numbered PNGs (debugging aid)."""
    from . import datapipe

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, snap in enumerate(run.trace):
        arr = snap[0].permute(1, 2, 0).numpy()
        p = out_dir / f"step_{i:04d}.png"
        datapipe.save_image(p, arr)
        paths.append(p)
    return paths
