"""Dataset records, manifests, image/mask I/O, tiling, augmentation, and the
procedural pseudo-histology toy generator.

File conventions: images are 8-bit RGB PNG, masks are 8-bit indexed PNG whose
pixel values are class indices (0 = background). Images map to the internal
[-1, 1] float range via x / 127.5 - 1, which round-trips bit-exactly.
Manifest JSON stores file paths relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

MANIFEST_VERSION = "maskdiff-manifest-1"
SPLITS = ("train", "val", "test")
PROVENANCES = ("real", "d1", "d2", "toy")
AUGMENT_OPS = ("rotate90", "flip", "color_shift", "random_crop", "elastic")

# Display palette for indexed mask PNGs; index 0 (background) is black.
_MASK_PALETTE = [
    (0, 0, 0),
    (220, 60, 60),
    (70, 90, 220),
    (70, 200, 90),
    (230, 200, 70),
    (180, 80, 200),
    (80, 200, 210),
    (240, 140, 60),
]


@dataclass
class DatasetRecord:
    image: str
    mask: str | None
    split: str
    metadata: dict[str, float] = field(default_factory=dict)
    provenance: str = "real"

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass
class Manifest:
    num_classes: int
    class_names: list[str]
    records: list[DatasetRecord]
    version: str = MANIFEST_VERSION

    def __post_init__(self) -> None:
        if self.version != MANIFEST_VERSION:
            raise ValueError(f"unrecognized manifest version {self.version!r}")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        refs = [r.image for r in self.records]
        if len(set(refs)) != len(refs):
            raise ValueError("record image refs must be unique")

    def subset(self, split: str) -> "Manifest":
        return Manifest(
            num_classes=self.num_classes,
            class_names=list(self.class_names),
            records=[r for r in self.records if r.split == split],
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        base = path.parent.resolve()
        payload = {
            "version": self.version,
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "records": [
                {
                    "image": _relpath(r.image, base),
                    **({"mask": _relpath(r.mask, base)} if r.mask is not None else {}),
                    "split": r.split,
                    "metadata": r.metadata,
                    "provenance": r.provenance,
                }
                for r in self.records
            ],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        base = path.parent.resolve()
        records = [
            DatasetRecord(
                image=str((base / e["image"]).resolve()),
                mask=str((base / e["mask"]).resolve()) if e.get("mask") else None,
                split=e["split"],
                metadata=e.get("metadata", {}),
                provenance=e.get("provenance", "real"),
            )
            for e in payload["records"]
        ]
        return cls(
            num_classes=payload["num_classes"],
            class_names=payload["class_names"],
            records=records,
            version=payload.get("version", ""),
        )


def _relpath(target: str, base: Path) -> str:
    try:
        return str(Path(target).resolve().relative_to(base))
    except ValueError:
        return str(Path(target).resolve())


def concat_manifests(*manifests: Manifest) -> Manifest:
    """Concatenate record lists; class metadata must agree."""
    first = manifests[0]
    records = []
    for m in manifests:
        if m.num_classes != first.num_classes:
            raise ValueError("cannot concatenate manifests with different num_classes")
        records.extend(m.records)
    return Manifest(num_classes=first.num_classes, class_names=list(first.class_names), records=records)


# ---------------------------------------------------------------------------
# PNG I/O


def save_image(path: str | Path, arr: np.ndarray) -> Path:
    """Write a float (H, W, 3) array in [-1, 1] as an 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.round((np.asarray(arr, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)
    return path


def load_image(path: str | Path) -> np.ndarray:
    """Read an RGB PNG into float32 (H, W, 3) in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 127.5 - 1.0


def save_mask(path: str | Path, mask: np.ndarray) -> Path:
    """Write an integer (H, W) class-index array as an 8-bit indexed PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask indices must fit in uint8")
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    palette = []
    for i in range(256):
        palette.extend(_MASK_PALETTE[i % len(_MASK_PALETTE)] if i < len(_MASK_PALETTE) else (i, i, i))
    im.putpalette(palette)
    im.save(path)
    return path


def load_mask(path: str | Path) -> np.ndarray:
    """Read an indexed (or grayscale) PNG into an int64 (H, W) class-index array."""
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"mask {path} must be indexed or grayscale PNG, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def decode_mask_bytes(data: bytes) -> np.ndarray:
    """Decode in-memory indexed/grayscale PNG bytes into a class-index array."""
    import io

    with Image.open(io.BytesIO(data)) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"mask must be indexed or grayscale PNG, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def mask_to_onehot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Foreground one-hot stack (num_classes - 1, H, W); background row omitted."""
    if mask.max(initial=0) >= num_classes:
        raise ValueError(f"mask contains class index {int(mask.max())} >= num_classes {num_classes}")
    chans = [(mask == c).astype(np.float32) for c in range(1, num_classes)]
    return np.stack(chans, axis=0)


# ---------------------------------------------------------------------------
# Tiling


def tile(image: np.ndarray, patch: int, overlap: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Raster-order overlapping tiles with stride = patch - overlap.

    The final row/column is shifted inward so every pixel is covered.
    """
    h, w = image.shape[:2]
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image dims {(h, w)}")
    if not 0 <= overlap < patch:
        raise ValueError("require 0 <= overlap < patch")
    stride = patch - overlap

    def origins(dim: int) -> list[int]:
        xs = list(range(0, dim - patch + 1, stride))
        if xs[-1] != dim - patch:
            xs.append(dim - patch)
        return xs

    out = []
    for r in origins(h):
        for c in origins(w):
            out.append((image[r : r + patch, c : c + patch].copy(), (r, c)))
    return out


def stitch(tiles: list[tuple[np.ndarray, tuple[int, int]]], out_shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of tile: place patches at their origins, averaging overlaps."""
    acc = np.zeros(out_shape, dtype=np.float64)
    cnt = np.zeros(out_shape[:2], dtype=np.float64)
    for patch, (r, c) in tiles:
        ph, pw = patch.shape[:2]
        acc[r : r + ph, c : c + pw] += patch
        cnt[r : r + ph, c : c + pw] += 1.0
    if np.any(cnt == 0):
        raise ValueError("tiles do not cover the output shape")
    return acc / (cnt[..., None] if acc.ndim == 3 else cnt)


# ---------------------------------------------------------------------------
# Augmentation

ImageMask = tuple[np.ndarray, np.ndarray]


@dataclass
class AugmentConfig:
    color_strength: float = 0.1
    crop_size: int | None = None
    elastic_sigma: float = 4.0
    elastic_magnitude: float = 2.0


def rotate90(image: np.ndarray, mask: np.ndarray, k: int) -> ImageMask:
    return np.rot90(image, k, axes=(0, 1)).copy(), np.rot90(mask, k, axes=(0, 1)).copy()


def flip(image: np.ndarray, mask: np.ndarray, axis: int) -> ImageMask:
    return np.flip(image, axis=axis).copy(), np.flip(mask, axis=axis).copy()


def color_shift(image: np.ndarray, mask: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> ImageMask:
    """Per-channel affine jitter on the image; the mask is untouched."""
    out = np.clip(image * scale[None, None, :] + shift[None, None, :], -1.0, 1.0)
    return out.astype(image.dtype), mask


def random_crop(image: np.ndarray, mask: np.ndarray, top: int, left: int, size: int) -> ImageMask:
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds input dims {(h, w)}")
    return (
        image[top : top + size, left : left + size].copy(),
        mask[top : top + size, left : left + size].copy(),
    )


def elastic(image: np.ndarray, mask: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> ImageMask:
    """Warp by a displacement field; bilinear for the image, nearest for the mask."""
    h, w = image.shape[:2]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = [yy + dy, xx + dx]
    warped = np.stack(
        [map_coordinates(image[..., c], coords, order=1, mode="reflect") for c in range(image.shape[2])],
        axis=-1,
    ).astype(image.dtype)
    warped_mask = map_coordinates(mask, coords, order=0, mode="reflect").astype(mask.dtype)
    return warped, warped_mask


def elastic_field(shape: tuple[int, int], rng: np.random.Generator, sigma: float, magnitude: float) -> tuple[np.ndarray, np.ndarray]:
    dy = gaussian_filter(rng.standard_normal(shape), sigma) * magnitude
    dx = gaussian_filter(rng.standard_normal(shape), sigma) * magnitude
    return dy, dx


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    ops: list[str],
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
) -> ImageMask:
    """Apply the listed ops in order, drawing parameters from rng.

    Geometric ops transform image and mask identically (mask via nearest);
    color_shift touches only the image.
    """
    cfg = config or AugmentConfig()
    for op in ops:
        if op == "rotate90":
            image, mask = rotate90(image, mask, int(rng.integers(4)))
        elif op == "flip":
            if rng.random() < 0.5:
                image, mask = flip(image, mask, axis=int(rng.integers(2)))
        elif op == "color_shift":
            s = cfg.color_strength
            scale = 1.0 + rng.uniform(-s, s, size=3)
            shift = rng.uniform(-s, s, size=3)
            image, mask = color_shift(image, mask, scale, shift)
        elif op == "random_crop":
            size = cfg.crop_size or image.shape[0]
            top = int(rng.integers(image.shape[0] - size + 1))
            left = int(rng.integers(image.shape[1] - size + 1))
            image, mask = random_crop(image, mask, top, left, size)
        elif op == "elastic":
            dy, dx = elastic_field(image.shape[:2], rng, cfg.elastic_sigma, cfg.elastic_magnitude)
            image, mask = elastic(image, mask, dy, dx)
        else:
            raise ValueError(f"unknown augmentation op {op!r}; expected one of {AUGMENT_OPS}")
    return image, mask


# ---------------------------------------------------------------------------
# Resizing


def resize(arr: np.ndarray, target: int, mode: str) -> np.ndarray:
    """Square resize: bilinear for images, nearest (index-exact) for masks."""
    if target < 1:
        raise ValueError(f"invalid target {target}")
    h, w = arr.shape[:2]
    if (h, w) == (target, target):
        return arr.copy()
    if mode == "bilinear_image":
        out = cv2.resize(arr.astype(np.float32), (target, target), interpolation=cv2.INTER_LINEAR)
        return out.astype(np.float32)
    if mode == "nearest_mask":
        rows = np.minimum(((np.arange(target) + 0.5) * h / target).astype(np.int64), h - 1)
        cols = np.minimum(((np.arange(target) + 0.5) * w / target).astype(np.int64), w - 1)
        return arr[rows][:, cols].copy()
    raise ValueError(f"unknown resize mode {mode!r}")


# ---------------------------------------------------------------------------
# Toy dataset

DEFAULT_CLASS_NAMES = ("background", "tubuli", "glomeruli", "vessels")


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    u = dy * math.cos(theta) + dx * math.sin(theta)
    v = -dy * math.sin(theta) + dx * math.cos(theta)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _shape_blob(rng: np.random.Generator, cls: int, res: int, cy: float, cx: float, fit: float) -> np.ndarray:
    """Rasterize one blob of the class's shape family, bounded by radius `fit`."""
    if cls % 3 == 1:  # small filled ellipses ("tubuli")
        r = min(fit, res * rng.uniform(0.05, 0.11))
        return _ellipse(res, res, cy, cx, r, r * rng.uniform(0.7, 1.0), rng.uniform(0, math.pi))
    if cls % 3 == 2:  # large rings ("glomeruli")
        r_out = min(fit, res * rng.uniform(0.10, 0.17))
        outer = _ellipse(res, res, cy, cx, r_out, r_out, 0.0)
        inner = _ellipse(res, res, cy, cx, r_out * 0.55, r_out * 0.55, 0.0)
        return outer & ~inner
    # elongated thin shapes ("vessels")
    half_len = min(fit, res * rng.uniform(0.12, 0.2))
    half_wid = max(1.2, res * rng.uniform(0.025, 0.05))
    return _ellipse(res, res, cy, cx, half_len, half_wid, rng.uniform(0, math.pi))


# tubuli and glomeruli share a purple hue family on purpose: telling them
# apart requires shape (filled vs ring), not just color
_CLASS_COLORS = {1: (0.68, 0.34, 0.50), 2: (0.58, 0.36, 0.60), 3: (0.35, 0.66, 0.42)}


def _class_color(cls: int, rng: np.random.Generator) -> np.ndarray:
    base = np.array(_CLASS_COLORS.get((cls - 1) % 3 + 1, (0.5, 0.5, 0.5)))
    return np.clip(base + rng.uniform(-0.09, 0.09, size=3), 0.0, 1.0)


def generate_toy_pair(resolution: int, num_classes: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    """One synthetic image/mask pair: textured background plus per-class blobs.

    Guarantees at least one surviving blob per foreground class (anchors are
    painted last into disjoint grid cells), so every class histogram has
    foreground pixels by construction at resolution >= 32.
    """
    res = resolution
    c_fg = num_classes - 1
    base = np.array([0.93, 0.80, 0.88]) + rng.uniform(-0.06, 0.06, size=3)
    img = np.ones((res, res, 3)) * base[None, None, :]
    img += gaussian_filter(rng.standard_normal((res, res, 3)), (2.5, 2.5, 0)) * 0.16
    img += rng.standard_normal((res, res, 3)) * 0.05
    mask = np.zeros((res, res), dtype=np.int64)

    def paint(cls: int, blob: np.ndarray) -> None:
        color = _class_color(cls, rng)
        speckle = gaussian_filter(rng.standard_normal((res, res, 3)), (0.7, 0.7, 0)) * 0.07
        img[blob] = (color[None, :] + speckle[blob]).clip(0.0, 1.0)
        mask[blob] = cls

    # extra blobs first: random positions, may be overwritten later
    for cls in range(1, num_classes):
        for _ in range(int(rng.integers(1, 3))):
            paint(cls, _shape_blob(rng, cls, res, rng.uniform(0, res), rng.uniform(0, res), fit=res * 0.2))

    # anchor blobs last, one per class, each confined to its own grid cell
    grid = math.ceil(math.sqrt(c_fg))
    cell = res / grid
    cells = rng.permutation(grid * grid)[:c_fg]
    for cls, cell_idx in zip(range(1, num_classes), cells):
        gy, gx = divmod(int(cell_idx), grid)
        margin = 0.18 * cell
        cy = gy * cell + rng.uniform(cell / 2 - margin, cell / 2 + margin)
        cx = gx * cell + rng.uniform(cell / 2 - margin, cell / 2 + margin)
        paint(cls, _shape_blob(rng, cls, res, cy, cx, fit=cell * 0.30))

    # per-image global jitter: forces models to generalize across staining
    gain = 1.0 + rng.uniform(-0.15, 0.15, size=3)
    bias = rng.uniform(-0.10, 0.10, size=3)
    img = np.clip(img * gain[None, None, :] + bias[None, None, :], 0.0, 1.0)

    density = float((mask > 0).mean())
    meta = {
        "blob_density": round(density, 6),
        "severity": round(float(np.clip(density * 3.0 + rng.normal(0, 0.05), 0.0, 1.0)), 6),
    }
    return img * 2.0 - 1.0, mask, meta


def make_toy_dataset(
    n: int,
    resolution: int,
    num_classes: int,
    seed: int,
    out_dir: str | Path,
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> Manifest:
    """Generate n image/mask pairs under out_dir and return the saved manifest.

    Deterministic given the seed (per-record substreams); splits assigned by a
    seeded shuffle with the given train/val/test fractions.
    """
    if num_classes < 2:
        raise ValueError("need background plus at least one foreground class")
    out_dir = Path(out_dir)
    names = list(DEFAULT_CLASS_NAMES[:num_classes])
    names += [f"class{i}" for i in range(len(names), num_classes)]

    order = np.random.default_rng([seed, 0xD5]).permutation(n)
    n_train = int(round(split_fractions[0] * n))
    n_val = int(round(split_fractions[1] * n))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, mask, meta = generate_toy_pair(resolution, num_classes, rng)
        img_path = save_image(out_dir / "images" / f"toy_{i:04d}.png", img)
        mask_path = save_mask(out_dir / "masks" / f"toy_{i:04d}.png", mask)
        records.append(
            DatasetRecord(
                image=str(img_path.resolve()),
                mask=str(mask_path.resolve()),
                split=split_of.get(i, "train"),
                metadata=meta,
                provenance="toy",
            )
        )
    manifest = Manifest(num_classes=num_classes, class_names=names, records=records)
    manifest.save(out_dir / "manifest.json")
    return manifest
