"""Multi-class segmentation U-Net with a composite Dice + cross-entropy loss.

The model emits logits at full, half, and quarter resolution; the total loss
is  L = L_dice + L_ce + beta * (L_dice@1/2 + L_dice@1/4)  with the auxiliary
ground truth obtained by nearest-neighbor downsampling of the class indices
(no label mixing). The Dice term uses the squared-denominator soft form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import datapipe
from .checkpoints import load_checkpoint, save_checkpoint


@dataclass
class SegConfig:
    resolution: int
    num_classes: int
    base_width: int = 24
    depth: int = 3
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.depth < 2 or self.resolution % (2**self.depth):
            raise ValueError("depth must be >= 2 and divide the resolution")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class SegLossConfig:
    beta: float = 0.5
    class_weights: list[float] | None = None
    smooth: float = 1e-5

    def __post_init__(self) -> None:
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and >= 0")
        if self.smooth <= 0:
            raise ValueError("smooth must be > 0")


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1), _gn(c_out), nn.SiLU(),
        nn.Conv2d(c_out, c_out, 3, padding=1), _gn(c_out), nn.SiLU(),
    )


class SegUNet(nn.Module):
    """U-Net emitting (full, half, quarter)-resolution logits.

    The auxiliary heads are 1x1 convolution taps on the coarsest decoder (or
    bottleneck) features at exactly half and quarter of the output resolution.
    """

    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        cfg = config
        chans = [cfg.base_width * min(2**i, 8) for i in range(cfg.depth + 1)]
        self.stem = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.enc = nn.ModuleList(_conv_block(chans[i], chans[i]) for i in range(cfg.depth))
        self.down = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(cfg.depth))
        self.mid = _conv_block(chans[-1], chans[-1])
        self.up = nn.ModuleList(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1) for i in reversed(range(cfg.depth)))
        self.dec = nn.ModuleList(_conv_block(2 * chans[i], chans[i]) for i in reversed(range(cfg.depth)))
        self.head = nn.Conv2d(chans[0], cfg.num_classes, 1)
        self.head_half = nn.Conv2d(chans[1], cfg.num_classes, 1)
        quarter_ch = chans[2] if cfg.depth >= 3 else chans[cfg.depth]
        self.head_quarter = nn.Conv2d(quarter_ch, cfg.num_classes, 1)
        self.history: list[dict] = []
        self.epochs_trained = 0

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        cfg = self.config
        x = self.stem(x)
        skips = []
        for enc, down in zip(self.enc, self.down):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.mid(x)
        taps = {x.shape[-1]: x}
        for up, dec in zip(self.up, self.dec):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([x, skips.pop()], dim=1))
            taps[x.shape[-1]] = x
        full = self.head(x)
        half = self.head_half(taps[cfg.resolution // 2])
        quarter = self.head_quarter(taps[cfg.resolution // 4])
        return full, half, quarter


def dice_loss(probs: Tensor, onehot_gt: Tensor, smooth: float) -> Tensor:
    """Soft Dice loss 1 - (2*sum(g*s) + smooth) / (sum(g^2) + sum(s^2) + smooth).

    Summation runs jointly over pixels and classes (and batch, if present).
    """
    if probs.shape != onehot_gt.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(onehot_gt.shape)}")
    with torch.no_grad():
        if float(probs.min()) < -1e-4 or float(probs.max()) > 1 + 1e-4:
            raise ValueError("probs must lie in [0, 1]")
    inter = (probs * onehot_gt).sum()
    denom = (onehot_gt**2).sum() + (probs**2).sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def ce_loss(logits: Tensor, gt_indices: Tensor, class_weights: list[float] | None = None) -> Tensor:
    """Mean over pixels of -log softmax(logits)[gt_class]."""
    c = logits.shape[-3]
    if int(gt_indices.min()) < 0 or int(gt_indices.max()) >= c:
        raise ValueError(f"gt indices must lie in [0, {c}), got max {int(gt_indices.max())}")
    if logits.ndim == 3:
        logits, gt_indices = logits[None], gt_indices[None]
    weight = None if class_weights is None else torch.as_tensor(class_weights, dtype=logits.dtype)
    return F.cross_entropy(logits, gt_indices, weight=weight)


def _onehot(gt: Tensor, num_classes: int, dtype: torch.dtype) -> Tensor:
    oh = F.one_hot(gt.long(), num_classes).to(dtype)
    return oh.movedim(-1, -3)


def _nearest_down(gt: Tensor, factor: int) -> Tensor:
    off = factor // 2
    return gt[..., off::factor, off::factor]


def total_loss(
    outputs: tuple[Tensor, Tensor | None, Tensor | None], gt: Tensor, cfg: SegLossConfig
) -> Tensor:
    """Composite loss over the model's three heads for one batch."""
    full, half, quarter = outputs
    num_classes = full.shape[-3]
    probs = F.softmax(full, dim=-3)
    loss = dice_loss(probs, _onehot(gt, num_classes, full.dtype), cfg.smooth)
    loss = loss + ce_loss(full, gt, cfg.class_weights)
    if cfg.beta > 0:
        if half is None or quarter is None:
            raise ValueError("auxiliary heads required when beta > 0")
        for head_out, factor in ((half, 2), (quarter, 4)):
            gt_small = _nearest_down(gt, factor)
            probs_small = F.softmax(head_out, dim=-3)
            loss = loss + cfg.beta * dice_loss(probs_small, _onehot(gt_small, num_classes, full.dtype), cfg.smooth)
    return loss


def _load_split(manifest: datapipe.Manifest, resolution: int) -> tuple[Tensor, Tensor]:
    images, masks = [], []
    for rec in manifest.records:
        img = datapipe.load_image(rec.image)
        msk = datapipe.load_mask(rec.mask)
        if img.shape[0] != resolution or img.shape[1] != resolution:
            raise ValueError(f"record {rec.image} resolution {img.shape[:2]} != model {resolution}")
        images.append(img)
        masks.append(msk)
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.stack(masks)).long()
    return x, y


def train(
    model: SegUNet,
    train_manifest: datapipe.Manifest,
    val_manifest: datapipe.Manifest,
    epochs: int,
    loss_cfg: SegLossConfig | None = None,
    lr: float = 1e-3,
    lr_floor: float = 3e-6,
    plateau_epochs: int = 15,
    plateau_tol: float = 1e-4,
    batch_size: int = 16,
    seed: int = 0,
    augment_ops: tuple[str, ...] | None = None,
) -> SegUNet:
    """Adam training with a one-time LR drop to lr_floor on a validation plateau.

    Plateau = no val-loss improvement beyond plateau_tol for plateau_epochs
    consecutive epochs. Per-epoch (train_loss, val_loss, lr) rows are appended
    to model.history. epochs=0 returns the model unchanged.
    """
    if epochs == 0:
        return model
    if not train_manifest.records or not val_manifest.records:
        raise ValueError("train and val manifests must be non-empty")
    cfg = loss_cfg or SegLossConfig()
    res = model.config.resolution
    x_train, y_train = _load_split(train_manifest, res)
    x_val, y_val = _load_split(val_manifest, res)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    best_val = float("inf")
    stale = 0
    dropped = False

    for epoch in range(epochs):
        model.train()
        perm = rng.permutation(len(x_train))
        train_losses = []
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if augment_ops:
                xb, yb = _augment_batch(xb, yb, augment_ops, seed, epoch, idx)
            opt.zero_grad()
            loss = total_loss(model(xb), yb, cfg)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, batch {start // batch_size}")
            loss.backward()
            opt.step()
            train_losses.append(float(loss.detach()))
        model.eval()
        with torch.no_grad():
            val_loss = float(total_loss(model(x_val), y_val, cfg))
        lr_now = opt.param_groups[0]["lr"]
        model.history.append(
            {"epoch": model.epochs_trained, "train_loss": float(np.mean(train_losses)), "val_loss": val_loss, "lr": lr_now}
        )
        model.epochs_trained += 1
        if best_val - val_loss > plateau_tol:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= plateau_epochs and not dropped:
                for group in opt.param_groups:
                    group["lr"] = lr_floor
                dropped = True
    return model


def _augment_batch(xb: Tensor, yb: Tensor, ops: tuple[str, ...], seed: int, epoch: int, idx: np.ndarray):
    imgs, msks = [], []
    for j, record_idx in enumerate(idx):
        rng = np.random.default_rng([seed, epoch, int(record_idx)])
        img = xb[j].permute(1, 2, 0).numpy()
        msk = yb[j].numpy()
        img, msk = datapipe.augment(img, msk, list(ops), rng)
        imgs.append(torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1))
        msks.append(torch.from_numpy(np.ascontiguousarray(msk)).long())
    return torch.stack(imgs), torch.stack(msks)


def predict_mask(model: SegUNet, image: np.ndarray | Tensor) -> np.ndarray:
    """Argmax class-index mask; logit ties break toward the lowest class index."""
    res = model.config.resolution
    if isinstance(image, np.ndarray):
        if image.shape[:2] != (res, res):
            raise ValueError(f"image resolution {image.shape[:2]} != model {res}")
        x = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)[None]
    else:
        x = image[None] if image.ndim == 3 else image
        if x.shape[-1] != res:
            raise ValueError(f"image resolution {tuple(x.shape)} != model {res}")
    model.eval()
    with torch.no_grad():
        logits = model(x)[0][0]
    return np.argmax(logits.numpy(), axis=0).astype(np.int64)


def save_history_csv(model: SegUNet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,train_loss,val_loss,lr"]
    for row in model.history:
        lines.append(f"{row['epoch']},{row['train_loss']:.6f},{row['val_loss']:.6f},{row['lr']:.2e}")
    path.write_text("\n".join(lines) + "\n")
    return path


def save_segmenter(path: str | Path, model: SegUNet, step: int = 0) -> Path:
    return save_checkpoint(path, kind="segmenter", config=model.config, state_dict=model.state_dict(), step=step)


def load_segmenter(path: str | Path) -> SegUNet:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "segmenter":
        raise ValueError(f"{path} is a {ckpt.kind} checkpoint, expected segmenter")
    model = SegUNet(SegConfig(**ckpt.config))
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model
