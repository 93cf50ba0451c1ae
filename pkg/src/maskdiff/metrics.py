"""Evaluation metrics: Dice coefficient, Aggregated Jaccard Index, and the
variant-comparison report table.

AJI works on instance maps. Each ground-truth instance (ascending label
order) is greedily matched to the unused predicted instance with the highest
IoU (ties: lower predicted label; zero-overlap never matches); the score is

    sum(matched intersections) /
    (sum(matched unions) + pixels of unmatched preds + pixels of unmatched gts)

Note the asymmetry: matching is ground-truth-driven.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datapipe, segmenter

VARIANT_LABELS = {
    "1": "(1) trained on real",
    "1a": "(1a) trained on real (30%)",
    "2": "(2) fine-tuned by synthetic+real",
    "3": "(3) fine-tuned by synthetic",
    "4": "(4) trained on synthetic",
    "5": "(5) trained on synthetic, fine-tuned on real",
}


def dice_metric(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """Dice 2|P∩G| / (|P|+|G|) for class c; 1.0 when both maps lack the class."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == c
    g = gt == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def extract_instances(mask: np.ndarray, c: int) -> np.ndarray:
    """4-connected components of class c, labeled 1..K in raster discovery order."""
    binary = mask == c
    labeled, _ = ndimage.label(binary)  # default structure = 4-connectivity in 2D
    out = np.zeros_like(labeled)
    next_label = 1
    remap: dict[int, int] = {}
    flat = labeled.ravel()
    for v in flat:
        if v and v not in remap:
            remap[v] = next_label
            next_label += 1
    for old, new in remap.items():
        out[labeled == old] = new
    return out


def aji(pred_instances: np.ndarray, gt_instances: np.ndarray) -> float:
    """Aggregated Jaccard Index over two instance maps (0 = background)."""
    if pred_instances.shape != gt_instances.shape:
        raise ValueError(f"shape mismatch {pred_instances.shape} vs {gt_instances.shape}")
    gt_ids = [int(v) for v in np.unique(gt_instances) if v != 0]
    pred_ids = [int(v) for v in np.unique(pred_instances) if v != 0]
    pred_area = {p: int((pred_instances == p).sum()) for p in pred_ids}
    gt_area = {g: int((gt_instances == g).sum()) for g in gt_ids}

    # contingency: intersection pixel counts per (gt, pred) pair
    inter: dict[tuple[int, int], int] = {}
    both = (gt_instances != 0) & (pred_instances != 0)
    pairs, counts = np.unique(
        np.stack([gt_instances[both], pred_instances[both]], axis=0), axis=1, return_counts=True
    )
    for (g, p), n in zip(pairs.T, counts):
        inter[(int(g), int(p))] = int(n)

    used: set[int] = set()
    total_inter = 0
    total_union = 0
    for g in sorted(gt_ids):
        best_p, best_iou = None, 0.0
        for p in sorted(pred_ids):
            if p in used:
                continue
            i = inter.get((g, p), 0)
            if i == 0:
                continue
            iou = i / (gt_area[g] + pred_area[p] - i)
            if iou > best_iou:
                best_p, best_iou = p, iou
        if best_p is None:
            total_union += gt_area[g]  # unmatched ground truth
        else:
            used.add(best_p)
            i = inter[(g, best_p)]
            total_inter += i
            total_union += gt_area[g] + pred_area[best_p] - i
    for p in pred_ids:
        if p not in used:
            total_union += pred_area[p]  # unmatched prediction
    if total_union == 0:
        return 1.0  # both maps empty
    return total_inter / total_union


def pooled_instance_maps(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Instance maps pooled over foreground classes, labels offset per class."""
    pred_inst = np.zeros(pred.shape, dtype=np.int64)
    gt_inst = np.zeros(gt.shape, dtype=np.int64)
    offset_p = offset_g = 0
    for c in range(1, num_classes):
        pi = extract_instances(pred, c)
        gi = extract_instances(gt, c)
        pred_inst[pi > 0] = pi[pi > 0] + offset_p
        gt_inst[gi > 0] = gi[gi > 0] + offset_g
        offset_p += int(pi.max(initial=0))
        offset_g += int(gi.max(initial=0))
    return pred_inst, gt_inst


@dataclass
class EvalReport:
    """Per-variant metrics on one test split."""

    variant: str
    dice_per_class: dict[int, float]
    dice_all: float
    aji_all: float
    split: str = "all"
    n: int = 0

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValueError("record count must be > 0")
        for v in (self.dice_all, self.aji_all, *self.dice_per_class.values()):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric value {v} outside [0, 1]")


def evaluate_model(model, test: datapipe.Manifest, variant: str, split: str = "all") -> EvalReport:
    """Run predict_mask over the test manifest and aggregate Dice + AJI.

    dice_all: mean over foreground classes of the per-class dice averaged over
    records. aji_all: mean over records of the per-record class-pooled AJI.
    """
    if not test.records:
        raise ValueError("empty test set")
    num_classes = test.num_classes
    per_class: dict[int, list[float]] = {c: [] for c in range(1, num_classes)}
    ajis = []
    for rec in test.records:
        image = datapipe.load_image(rec.image)
        gt = datapipe.load_mask(rec.mask)
        pred = segmenter.predict_mask(model, image)
        for c in range(1, num_classes):
            per_class[c].append(dice_metric(pred, gt, c))
        ajis.append(aji(*pooled_instance_maps(pred, gt, num_classes)))
    dice_per_class = {c: float(np.mean(v)) for c, v in per_class.items()}
    return EvalReport(
        variant=variant,
        dice_per_class=dice_per_class,
        dice_all=float(np.mean(list(dice_per_class.values()))),
        aji_all=float(np.mean(ajis)),
        split=split,
        n=len(test.records),
    )


def build_report(models: list[tuple[str, object]], test: datapipe.Manifest, split: str = "all") -> list[EvalReport]:
    """Evaluate each (variant_id, model) pair on the shared test manifest."""
    return [evaluate_model(model, test, variant, split) for variant, model in models]


def render_table(reports: list[EvalReport]) -> str:
    """Aligned text table (percentages) in canonical variant order."""
    order = {v: i for i, v in enumerate(VARIANT_LABELS)}
    rows = sorted(reports, key=lambda r: order.get(r.variant, 99))
    label_w = max(len(VARIANT_LABELS.get(r.variant, r.variant)) for r in rows)
    lines = [f"{'Method':<{label_w}}  {'Dice (%)':>9}  {'AJI (%)':>9}  {'n':>4}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        label = VARIANT_LABELS.get(r.variant, r.variant)
        lines.append(f"{label:<{label_w}}  {100 * r.dice_all:>9.2f}  {100 * r.aji_all:>9.2f}  {r.n:>4}")
    return "\n".join(lines) + "\n"


def write_report_csv(reports: list[EvalReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["variant,split,dice,aji,n"]
    for r in reports:
        lines.append(f"{r.variant},{r.split},{r.dice_all:.6f},{r.aji_all:.6f},{r.n}")
    path.write_text("\n".join(lines) + "\n")
    return path
