"""Single-file weight checkpoints shared by the diffusion and segmentation models.

Layout: one archive holding a magic string, a model-kind tag, the config as a
plain dict, all named parameter tensors, and the training-step counter.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

MAGIC = "MASKDIFF-CKPT-1"
KINDS = ("denoiser", "segmenter")


@dataclass
class Checkpoint:
    kind: str
    config: dict[str, Any]
    state_dict: dict[str, torch.Tensor]
    step: int


def save_checkpoint(path: str | Path, *, kind: str, config: Any, state_dict: dict, step: int = 0) -> Path:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"magic": MAGIC, "kind": kind, "config": config, "state_dict": state_dict, "step": step}, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise ValueError(f"{path} is not a {MAGIC} checkpoint")
    return Checkpoint(
        kind=payload["kind"],
        config=payload["config"],
        state_dict=payload["state_dict"],
        step=int(payload["step"]),
    )
