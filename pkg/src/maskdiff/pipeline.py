"""End-to-end experiment pipeline.

Stage order: generate (or ingest) the real dataset, pretrain the
unconditional diffusion cascade on its images, fine-tune the cascade with
mask conditioning on the labelled subset, train the base segmentation model
on real pairs, synthesize d1 (unconditional samples + predicted masks) and
d2 (mask-conditioned resamples of d1), then train and evaluate the
segmentation variants:

    1   real only                      1a  real, 30% subset
    2   (1) fine-tuned on d2 + real    3   (1) fine-tuned on d2 only
    4   d2 only, from scratch          5   d2 from scratch, fine-tuned on real

Every stage is resumable: completion flags and artifact paths live in
state.json inside the run directory, keyed by a hash of the config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datapipe, metrics, segmenter
from .checkpoints import load_checkpoint, save_checkpoint
from .denoiser import ConditioningBundle, Denoiser, DenoiserConfig
from .sampler import CascadeSpec, CascadeStage, derive_seed, training_loss
from .schedules import Schedule, forward_marginal

log = logging.getLogger("maskdiff.pipeline")

VARIANT_ORDER = ("1", "1a", "2", "3", "4", "5")


@dataclass
class DiffusionStageConfig:
    resolution: int
    parameterization: str
    num_steps: int
    base_width: int = 32
    depth: int = 2
    pretrain_steps: int = 600
    finetune_steps: int = 500
    batch_size: int = 16
    lr: float = 2e-3
    guidance_weight: float = 1.0
    cond_aug_level: float = 0.1


@dataclass
class SegTrainConfig:
    base_width: int = 20
    depth: int = 3
    epochs: int = 48
    finetune_epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    lr_floor: float = 3e-6
    plateau_epochs: int = 15
    plateau_tol: float = 1e-4
    beta: float = 0.5
    augment: tuple[str, ...] = ("rotate90", "flip")


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    num_classes: int = 4
    toy_n: int = 64
    resolution: int = 32
    stages: list[DiffusionStageConfig] = field(default_factory=list)
    n1: int = 64
    k: int = 2
    variants: tuple[str, ...] = VARIANT_ORDER
    real_fraction: float = 0.30
    scalar_keys: tuple[str, ...] = ("blob_density",)
    cond_dropout_p: float = 0.1
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.n1 < 1 or self.k < 1:
            raise ValueError("n1 and k must be >= 1")
        if not 0.0 < self.real_fraction <= 1.0:
            raise ValueError("real_fraction must be in (0, 1]")
        for v in self.variants:
            if v not in VARIANT_ORDER:
                raise ValueError(f"unknown variant {v!r}")
        if not self.stages:
            self.stages = _default_stages(self.profile)
        if self.stages[-1].resolution != self.resolution:
            raise ValueError("final stage resolution must equal config.resolution")

    @property
    def scalar_dim(self) -> int:
        return 2 * len(self.scalar_keys)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variants"] = list(self.variants)
        d["scalar_keys"] = list(self.scalar_keys)
        d["seg"]["augment"] = list(self.seg.augment)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["stages"] = [DiffusionStageConfig(**s) for s in d.get("stages", [])]
        seg = dict(d.get("seg", {}))
        seg["augment"] = tuple(seg.get("augment", ()))
        d["seg"] = SegTrainConfig(**seg)
        d["variants"] = tuple(d.get("variants", VARIANT_ORDER))
        d["scalar_keys"] = tuple(d.get("scalar_keys", ()))
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _default_stages(profile: str) -> list[DiffusionStageConfig]:
    if profile == "desk":
        return [
            DiffusionStageConfig(resolution=16, parameterization="eps", num_steps=64,
                                 pretrain_steps=450, finetune_steps=300),
            DiffusionStageConfig(resolution=32, parameterization="v", num_steps=32,
                                 pretrain_steps=350, finetune_steps=250),
        ]
    if profile == "paper":
        return [
            DiffusionStageConfig(
                resolution=64, parameterization="eps", num_steps=1024,
                base_width=128, depth=3, pretrain_steps=120_000, finetune_steps=120_000,
                batch_size=64, lr=1e-4,
            ),
            DiffusionStageConfig(
                resolution=256, parameterization="v", num_steps=256,
                base_width=128, depth=4, pretrain_steps=120_000, finetune_steps=120_000,
                batch_size=32, lr=1e-4,
            ),
            DiffusionStageConfig(
                resolution=1024, parameterization="v", num_steps=256,
                base_width=96, depth=5, pretrain_steps=120_000, finetune_steps=120_000,
                batch_size=8, lr=1e-4,
            ),
        ]
    raise ValueError(f"unknown profile {profile!r}")


def desk_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig(profile="desk", **overrides)


def paper_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        profile="paper",
        toy_n=1654,
        resolution=1024,
        n1=5000,
        k=4,
        seg=SegTrainConfig(base_width=32, depth=5, epochs=200, finetune_epochs=25),
        **overrides,
    )
    return cfg


# ---------------------------------------------------------------------------
# Run directory and state


@dataclass
class RunPaths:
    root: Path

    @property
    def config(self) -> Path: return self.root / "config.json"
    @property
    def state(self) -> Path: return self.root / "state.json"
    @property
    def checkpoints(self) -> Path: return self.root / "checkpoints"
    @property
    def cascades(self) -> Path: return self.root / "cascades"
    @property
    def manifests(self) -> Path: return self.root / "manifests"
    @property
    def reports(self) -> Path: return self.root / "reports"
    @property
    def logs(self) -> Path: return self.root / "logs"


class PipelineState:
    """Stage-completion flags and artifact paths, persisted as JSON."""

    def __init__(self, path: Path, config_hash: str):
        self.path = path
        if path.exists():
            self.data = json.loads(path.read_text())
            if self.data.get("config_hash") != config_hash:
                raise ValueError(
                    f"run directory was initialized with a different config "
                    f"(hash {self.data.get('config_hash')} != {config_hash})"
                )
        else:
            self.data = {"config_hash": config_hash, "stages": {}}
            self._flush()

    def _flush(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2) + "\n")

    def complete(self, stage: str) -> bool:
        entry = self.data["stages"].get(stage)
        if not entry or not entry.get("complete"):
            return False
        return all(Path(p).exists() for p in entry.get("artifacts", {}).values() if isinstance(p, str))

    def mark(self, stage: str, artifacts: dict) -> None:
        self.data["stages"][stage] = {"complete": True, "artifacts": artifacts}
        self._flush()

    def artifact(self, stage: str, key: str) -> str:
        entry = self.data["stages"].get(stage)
        if not entry:
            raise FileNotFoundError(f"stage {stage!r} has not run; missing prerequisite artifact {key!r}")
        return entry["artifacts"][key]


def init_run(out_dir: str | Path, cfg: ExperimentConfig) -> tuple[RunPaths, PipelineState]:
    run = RunPaths(Path(out_dir))
    run.root.mkdir(parents=True, exist_ok=True)
    if run.config.exists():
        existing = ExperimentConfig.from_json_dict(json.loads(run.config.read_text()))
        if existing.config_hash() != cfg.config_hash():
            raise ValueError(f"{run.config} holds a different config; refusing to mix runs")
    else:
        run.config.write_text(json.dumps(cfg.to_json_dict(), indent=2) + "\n")
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    return run, PipelineState(run.state, cfg.config_hash())


def load_run(out_dir: str | Path) -> tuple[RunPaths, PipelineState, ExperimentConfig]:
    run = RunPaths(Path(out_dir))
    if not run.config.exists():
        raise FileNotFoundError(f"no config.json in {run.root}; initialize the run first")
    cfg = ExperimentConfig.from_json_dict(json.loads(run.config.read_text()))
    run2, state = init_run(out_dir, cfg)
    return run2, state, cfg


# ---------------------------------------------------------------------------
# Conditioning helpers


def record_scalars(record: datapipe.DatasetRecord, keys: tuple[str, ...]) -> np.ndarray:
    """Covariate vector: per key, (2*value - 1, presence flag); missing -> (0, -1)."""
    out = []
    for key in keys:
        v = record.metadata.get(key)
        if v is None:
            out.extend([0.0, -1.0])
        else:
            out.extend([2.0 * float(np.clip(v, 0.0, 1.0)) - 1.0, 1.0])
    return np.asarray(out, dtype=np.float32)


def _stage_tensors(
    manifest: datapipe.Manifest,
    cfg: ExperimentConfig,
    stage_res: int,
    prev_res: int | None,
    conditional: bool,
) -> dict[str, torch.Tensor | None]:
    """Images / one-hot masks / scalars / clean lowres for one cascade stage."""
    imgs, masks, scalars = [], [], []
    for rec in manifest.records:
        img = datapipe.load_image(rec.image)
        if img.shape[0] != stage_res:
            img = datapipe.resize(img, stage_res, "bilinear_image")
        imgs.append(img)
        if conditional:
            if rec.mask is None:
                raise ValueError(f"record {rec.image} is missing a mask")
            msk = datapipe.load_mask(rec.mask)
            if msk.shape[0] != stage_res:
                msk = datapipe.resize(msk, stage_res, "nearest_mask")
            masks.append(datapipe.mask_to_onehot(msk, cfg.num_classes))
            scalars.append(record_scalars(rec, cfg.scalar_keys))
    x = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).contiguous()
    n = len(imgs)
    if conditional:
        mask_t = torch.from_numpy(np.stack(masks))
        scalar_t = torch.from_numpy(np.stack(scalars))
    else:
        mask_t = torch.zeros(n, cfg.num_classes - 1, stage_res, stage_res)
        scalar_t = torch.zeros(n, cfg.scalar_dim)
    lowres = None
    if prev_res is not None:
        small = torch.nn.functional.interpolate(x, size=(prev_res,) * 2, mode="bilinear", align_corners=False)
        lowres = torch.nn.functional.interpolate(small, size=(stage_res,) * 2, mode="bilinear", align_corners=False)
    return {"images": x, "masks": mask_t, "scalars": scalar_t, "lowres": lowres}


def _train_diffusion_stage(
    model: Denoiser,
    schedule: Schedule,
    data: dict,
    steps: int,
    stage_cfg: DiffusionStageConfig,
    seed: int,
    log_path: Path | None,
) -> list[tuple[int, float]]:
    """Adam training loop over random minibatches; returns (step, loss) rows."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=stage_cfg.lr)
    n = data["images"].shape[0]
    history = []
    model.train()
    for step in range(steps):
        idx = torch.randint(0, n, (min(stage_cfg.batch_size, n),), generator=gen)
        lowres = None
        if data["lowres"] is not None:
            lowres = data["lowres"][idx]
            t_aug = float(torch.rand((), generator=gen)) * min(1.0, 2.0 * stage_cfg.cond_aug_level)
            if t_aug > 0:
                noise = torch.randn(lowres.shape, generator=gen, dtype=lowres.dtype)
                lowres = forward_marginal(schedule, lowres, t_aug, noise)
        bundle = ConditioningBundle(mask=data["masks"][idx], scalars=data["scalars"][idx], lowres=lowres)
        opt.zero_grad()
        loss = training_loss(model, schedule, data["images"][idx], bundle, gen)
        loss.backward()
        opt.step()
        history.append((step, float(loss.detach())))
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("step,loss\n" + "\n".join(f"{s},{v:.6f}" for s, v in history) + "\n")
    return history


def _stage_denoiser_config(cfg: ExperimentConfig, idx: int) -> DenoiserConfig:
    stage = cfg.stages[idx]
    return DenoiserConfig(
        resolution=stage.resolution,
        in_channels=3,
        num_classes=cfg.num_classes,
        parameterization=stage.parameterization,
        base_width=stage.base_width,
        depth=stage.depth,
        scalar_dim=cfg.scalar_dim,
        cond_dropout_p=cfg.cond_dropout_p,
        lowres_channels=0 if idx == 0 else 3,
    )


def _cascade_spec(cfg: ExperimentConfig, run: RunPaths, prefix: str, unconditional: bool) -> CascadeSpec:
    stages = []
    for i, s in enumerate(cfg.stages):
        stages.append(
            CascadeStage(
                resolution=s.resolution,
                parameterization=s.parameterization,
                num_steps=s.num_steps,
                guidance_weight=0.0 if unconditional else s.guidance_weight,
                cond_aug_level=s.cond_aug_level,
                checkpoint=str(run.checkpoints / f"{prefix}_s{i}.pt"),
            )
        )
    return CascadeSpec(stages=stages)


# ---------------------------------------------------------------------------
# Stages


def ensure_real(run: RunPaths, state: PipelineState, cfg: ExperimentConfig) -> datapipe.Manifest:
    """Generate the toy stand-in dataset and register it as the real manifest."""
    stage = "real"
    manifest_path = run.manifests / "real.json"
    if state.complete(stage):
        return datapipe.Manifest.load(manifest_path)
    manifest = datapipe.make_toy_dataset(cfg.toy_n, cfg.resolution, cfg.num_classes, cfg.seed, run.root / "toy")
    run.manifests.mkdir(parents=True, exist_ok=True)
    manifest.save(manifest_path)
    state.mark(stage, {"manifest": str(manifest_path)})
    return manifest


def pretrain_unconditional(run: RunPaths, state: PipelineState, cfg: ExperimentConfig) -> CascadeSpec:
    """Train each cascade stage with empty-mask bundles on all real images."""
    stage_name = "pretrain"
    spec_path = run.cascades / "uncond.json"
    if state.complete(stage_name):
        return CascadeSpec.from_json(spec_path)
    real = ensure_real(run, state, cfg)
    train_split = real.subset("train")
    schedule = Schedule()
    for i, stage_cfg in enumerate(cfg.stages):
        prev_res = None if i == 0 else cfg.stages[i - 1].resolution
        data = _stage_tensors(train_split, cfg, stage_cfg.resolution, prev_res, conditional=False)
        torch.manual_seed(derive_seed(cfg.seed, "init", "uncond", i))
        model = Denoiser(_stage_denoiser_config(cfg, i))
        log.info("pretraining stage %d (%dpx, %s) for %d steps", i, stage_cfg.resolution,
                 stage_cfg.parameterization, stage_cfg.pretrain_steps)
        _train_diffusion_stage(
            model, schedule, data, stage_cfg.pretrain_steps, stage_cfg,
            seed=derive_seed(cfg.seed, "pretrain", i), log_path=run.logs / f"pretrain_s{i}.csv",
        )
        save_checkpoint(run.checkpoints / f"uncond_s{i}.pt", kind="denoiser",
                        config=model.config, state_dict=model.state_dict(), step=stage_cfg.pretrain_steps)
    spec = _cascade_spec(cfg, run, "uncond", unconditional=True)
    spec.to_json(spec_path)
    state.mark(stage_name, {"spec": str(spec_path)})
    return spec


def finetune_conditional(run: RunPaths, state: PipelineState, cfg: ExperimentConfig) -> CascadeSpec:
    """Fine-tune the pretrained cascade on labelled pairs with mask conditioning."""
    stage_name = "finetune"
    spec_path = run.cascades / "cond.json"
    if state.complete(stage_name):
        return CascadeSpec.from_json(spec_path)
    pretrain_unconditional(run, state, cfg)
    real = datapipe.Manifest.load(state.artifact("real", "manifest"))
    labelled = real.subset("train")
    missing = [r.image for r in labelled.records if r.mask is None]
    if missing:
        raise ValueError(f"records missing masks: {missing}")
    schedule = Schedule()
    for i, stage_cfg in enumerate(cfg.stages):
        ckpt = load_checkpoint(run.checkpoints / f"uncond_s{i}.pt")
        model = Denoiser(DenoiserConfig(**ckpt.config))
        model.load_state_dict(ckpt.state_dict)
        if stage_cfg.finetune_steps > 0:
            prev_res = None if i == 0 else cfg.stages[i - 1].resolution
            data = _stage_tensors(labelled, cfg, stage_cfg.resolution, prev_res, conditional=True)
            log.info("fine-tuning stage %d conditionally for %d steps", i, stage_cfg.finetune_steps)
            _train_diffusion_stage(
                model, schedule, data, stage_cfg.finetune_steps, stage_cfg,
                seed=derive_seed(cfg.seed, "finetune", i), log_path=run.logs / f"finetune_s{i}.csv",
            )
        save_checkpoint(run.checkpoints / f"cond_s{i}.pt", kind="denoiser",
                        config=model.config, state_dict=model.state_dict(),
                        step=ckpt.step + stage_cfg.finetune_steps)
    spec = _cascade_spec(cfg, run, "cond", unconditional=False)
    spec.to_json(spec_path)
    state.mark(stage_name, {"spec": str(spec_path)})
    return spec


def _fraction_subset(manifest: datapipe.Manifest, fraction: float, seed: int) -> datapipe.Manifest:
    """Seeded shuffle, then prefix: the deterministic fine-tune subset."""
    if fraction >= 1.0:
        return manifest
    order = np.random.default_rng(derive_seed(seed, "subset", len(manifest.records))).permutation(len(manifest.records))
    take = max(1, int(round(fraction * len(manifest.records))))
    records = [manifest.records[i] for i in order[:take]]
    return datapipe.Manifest(num_classes=manifest.num_classes, class_names=list(manifest.class_names), records=records)


def _train_variant_model(
    cfg: ExperimentConfig,
    train_m: datapipe.Manifest,
    val_m: datapipe.Manifest,
    *,
    variant: str,
    epochs: int,
    init_from: str | None = None,
) -> segmenter.SegUNet:
    torch.manual_seed(derive_seed(cfg.seed, "seg-init", variant))
    model = segmenter.SegUNet(
        segmenter.SegConfig(
            resolution=cfg.resolution, num_classes=cfg.num_classes,
            base_width=cfg.seg.base_width, depth=cfg.seg.depth,
        )
    )
    if init_from is not None:
        ckpt = load_checkpoint(init_from)
        model.load_state_dict(ckpt.state_dict)
    segmenter.train(
        model, train_m, val_m, epochs,
        loss_cfg=segmenter.SegLossConfig(beta=cfg.seg.beta),
        lr=cfg.seg.lr, lr_floor=cfg.seg.lr_floor,
        plateau_epochs=cfg.seg.plateau_epochs, plateau_tol=cfg.seg.plateau_tol,
        batch_size=cfg.seg.batch_size, seed=derive_seed(cfg.seed, "seg-train", variant),
        augment_ops=cfg.seg.augment or None,
    )
    return model


def train_seg_real(run: RunPaths, state: PipelineState, cfg: ExperimentConfig) -> Path:
    """Variant 1: the segmentation model trained on all real pairs (M for d1)."""
    stage_name = "seg_real"
    ckpt_path = run.checkpoints / "seg_1.pt"
    if state.complete(stage_name):
        return ckpt_path
    real = ensure_real(run, state, cfg)
    model = _train_variant_model(cfg, real.subset("train"), real.subset("val"), variant="1", epochs=cfg.seg.epochs)
    segmenter.save_segmenter(ckpt_path, model)
    segmenter.save_history_csv(model, run.logs / "seg_1.csv")
    state.mark(stage_name, {"checkpoint": str(ckpt_path)})
    return ckpt_path


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sample_cascade_batched(
    spec: CascadeSpec,
    masks_onehot: torch.Tensor,
    scalars: torch.Tensor | None,
    seeds: list[int],
    chunk: int = 32,
) -> torch.Tensor:
    """Cascade-sample a list of conditions in chunks; one seed per chunk."""
    from .sampler import cascade_sample

    outs = []
    for start in range(0, masks_onehot.shape[0], chunk):
        sl = slice(start, start + chunk)
        bundle = ConditioningBundle(
            mask=masks_onehot[sl],
            scalars=None if scalars is None else scalars[sl],
        )
        outs.append(cascade_sample(spec, bundle, seeds[start // chunk]))
    return torch.cat(outs, dim=0)


def build_d1(run: RunPaths, state: PipelineState, cfg: ExperimentConfig) -> datapipe.Manifest:
    """Sample n1 images unconditionally and label them with the real-data model."""
    stage_name = "d1"
    manifest_path = run.manifests / "d1.json"
    if state.complete(stage_name):
        return datapipe.Manifest.load(manifest_path)
    spec = pretrain_unconditional(run, state, cfg)
    seg_ckpt = train_seg_real(run, state, cfg)
    real = datapipe.Manifest.load(state.artifact("real", "manifest"))
    seg_model = segmenter.load_segmenter(seg_ckpt)

    n = cfg.n1
    res = cfg.resolution
    empty = torch.zeros(n, cfg.num_classes - 1, res, res)
    seeds = [derive_seed(cfg.seed, "d1", c) for c in range((n + 31) // 32)]
    images = _sample_cascade_batched(spec, empty, None, seeds)

    records = []
    for i in range(n):
        arr = images[i].permute(1, 2, 0).numpy()
        pred = segmenter.predict_mask(seg_model, arr.astype(np.float32))
        img_path = datapipe.save_image(run.root / "d1" / "images" / f"d1_{i:04d}.png", arr)
        msk_path = datapipe.save_mask(run.root / "d1" / "masks" / f"d1_{i:04d}.png", pred)
        records.append(
            datapipe.DatasetRecord(
                image=str(img_path.resolve()),
                mask=str(msk_path.resolve()),
                split="train",
                metadata={"blob_density": round(float((pred > 0).mean()), 6)},
                provenance="d1",
            )
        )
    manifest = datapipe.Manifest(num_classes=cfg.num_classes, class_names=list(real.class_names), records=records)
    manifest.save(manifest_path)
    state.mark(stage_name, {"manifest": str(manifest_path)})
    return manifest


def build_d2(run: RunPaths, state: PipelineState, cfg: ExperimentConfig) -> datapipe.Manifest:
    """k fresh conditional samples per d1 mask; masks shared by reference."""
    stage_name = "d2"
    manifest_path = run.manifests / "d2.json"
    if state.complete(stage_name):
        return datapipe.Manifest.load(manifest_path)
    d1 = build_d1(run, state, cfg)
    spec = finetune_conditional(run, state, cfg)
    if any(r.mask is None for r in d1.records):
        raise ValueError("all d1 records must carry masks")

    res = cfg.resolution
    masks, scalars, sources = [], [], []
    for rec in d1.records:
        onehot = datapipe.mask_to_onehot(datapipe.load_mask(rec.mask), cfg.num_classes)
        for j in range(cfg.k):
            masks.append(onehot)
            scalars.append(record_scalars(rec, cfg.scalar_keys))
            sources.append(rec)
    mask_t = torch.from_numpy(np.stack(masks))
    scalar_t = torch.from_numpy(np.stack(scalars))
    seeds = [derive_seed(cfg.seed, "d2", c) for c in range((len(sources) + 15) // 16)]
    images = _sample_cascade_batched(spec, mask_t, scalar_t, seeds, chunk=16)

    records = []
    for i, src in enumerate(sources):
        arr = images[i].permute(1, 2, 0).numpy()
        img_path = datapipe.save_image(run.root / "d2" / "images" / f"d2_{i:04d}.png", arr)
        records.append(
            datapipe.DatasetRecord(
                image=str(img_path.resolve()),
                mask=src.mask,
                split="train",
                metadata=dict(src.metadata),
                provenance="d2",
            )
        )
    manifest = datapipe.Manifest(num_classes=cfg.num_classes, class_names=list(d1.class_names), records=records)
    manifest.save(manifest_path)
    state.mark(stage_name, {"manifest": str(manifest_path)})
    return manifest


def _check_no_leakage(test: datapipe.Manifest, *training: datapipe.Manifest) -> None:
    test_refs = {r.image for r in test.records}
    for m in training:
        joint = test_refs & {r.image for r in m.records}
        if joint:
            raise ValueError(f"test records leaked into training manifest: {sorted(joint)[:3]}")


def run_variants(run: RunPaths, state: PipelineState, cfg: ExperimentConfig) -> list[metrics.EvalReport]:
    """Train the requested segmentation variants and evaluate them on the shared test split."""
    stage_name = "variants"
    csv_path = run.reports / "table.csv"
    if state.complete(stage_name):
        return _reports_from_csv(csv_path)
    if any(v in cfg.variants for v in ("2", "3")) and "1" not in cfg.variants and not state.complete("seg_real"):
        raise FileNotFoundError("variants 2 and 3 require variant 1's checkpoint; train variant 1 first")

    real = ensure_real(run, state, cfg)
    train_m = real.subset("train")
    val_m = real.subset("val")
    test_m = real.subset("test")
    real_small = _fraction_subset(train_m, cfg.real_fraction, cfg.seed)

    needs_synth = any(v in cfg.variants for v in ("2", "3", "4", "5"))
    d2 = build_d2(run, state, cfg) if needs_synth else None
    if d2 is not None:
        _check_no_leakage(test_m, train_m, real_small, d2)
    else:
        _check_no_leakage(test_m, train_m, real_small)

    lineage: dict[str, dict] = {}

    def _save(variant: str, model: segmenter.SegUNet, init_from: Path | None) -> Path:
        path = run.checkpoints / f"seg_{variant}.pt"
        segmenter.save_segmenter(path, model)
        segmenter.save_history_csv(model, run.logs / f"seg_{variant}.csv")
        lineage[variant] = {"checkpoint": str(path)}
        if init_from is not None:
            lineage[variant]["init_from"] = str(init_from)
            lineage[variant]["init_hash"] = _sha256(init_from)
        return path

    evaluated: list[tuple[str, segmenter.SegUNet]] = []
    v1_ckpt: Path | None = None

    if any(v in cfg.variants for v in ("1", "2", "3")):
        v1_ckpt = train_seg_real(run, state, cfg)
        lineage["1"] = {"checkpoint": str(v1_ckpt)}
        if "1" in cfg.variants:
            evaluated.append(("1", segmenter.load_segmenter(v1_ckpt)))

    if "1a" in cfg.variants:
        model = _train_variant_model(cfg, real_small, val_m, variant="1a", epochs=cfg.seg.epochs)
        _save("1a", model, None)
        evaluated.append(("1a", model))

    if "2" in cfg.variants:
        mix = datapipe.concat_manifests(d2, real_small)
        model = _train_variant_model(cfg, mix, val_m, variant="2", epochs=cfg.seg.finetune_epochs, init_from=str(v1_ckpt))
        _save("2", model, v1_ckpt)
        evaluated.append(("2", model))

    if "3" in cfg.variants:
        model = _train_variant_model(cfg, d2, val_m, variant="3", epochs=cfg.seg.finetune_epochs, init_from=str(v1_ckpt))
        _save("3", model, v1_ckpt)
        evaluated.append(("3", model))

    v4_ckpt: Path | None = None
    if any(v in cfg.variants for v in ("4", "5")):
        model4 = _train_variant_model(cfg, d2, val_m, variant="4", epochs=cfg.seg.epochs)
        v4_ckpt = _save("4", model4, None)
        if "4" in cfg.variants:
            evaluated.append(("4", model4))

    if "5" in cfg.variants:
        model = _train_variant_model(
            cfg, real_small, val_m, variant="5", epochs=cfg.seg.finetune_epochs, init_from=str(v4_ckpt)
        )
        _save("5", model, v4_ckpt)
        evaluated.append(("5", model))

    reports = metrics.build_report(evaluated, test_m)
    run.reports.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(reports, csv_path)
    (run.reports / "table.txt").write_text(metrics.render_table(reports))
    state.mark(stage_name, {"csv": str(csv_path), "table": str(run.reports / "table.txt"), "lineage": lineage})
    return reports


def _reports_from_csv(path: Path) -> list[metrics.EvalReport]:
    reports = []
    for line in path.read_text().splitlines()[1:]:
        variant, split, dice, aji_v, n = line.split(",")
        reports.append(
            metrics.EvalReport(
                variant=variant, dice_per_class={}, dice_all=float(dice),
                aji_all=float(aji_v), split=split, n=int(n),
            )
        )
    return reports


def run_all(out_dir: str | Path, cfg: ExperimentConfig) -> list[metrics.EvalReport]:
    """Execute every stage in dependency order and return the variant reports."""
    run, state = init_run(out_dir, cfg)
    ensure_real(run, state, cfg)
    pretrain_unconditional(run, state, cfg)
    finetune_conditional(run, state, cfg)
    train_seg_real(run, state, cfg)
    build_d1(run, state, cfg)
    build_d2(run, state, cfg)
    return run_variants(run, state, cfg)
