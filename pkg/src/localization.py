"""
Mask to bounding box extraction and the weakly supervised localization metrics.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5
BOX_COLUMNS = ("x_min", "y_min", "x_max", "y_max")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with inclusive pixel coordinates."""
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def within(self, height: int, width: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max < width and self.y_max < height


@dataclass
class EvalRecord:
    """Prediction and ground truth for one test image."""
    pred_box: Optional[BBox]
    class_ranks: List[int]
    gt_box: BBox
    gt_class: int
    index: int = -1

    def __post_init__(self):
        self.class_ranks = [int(c) for c in self.class_ranks]
        if len(set(self.class_ranks)) != len(self.class_ranks):
            raise ValueError(f"class_ranks contains duplicates: {self.class_ranks}")


def binarize(mask, tau: float = 0.5) -> np.ndarray:
    """Values >= tau become 1, everything else 0. Accepts a ProbMask or a plain array."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    values = getattr(mask, "values", mask)
    return (np.asarray(values) >= tau).astype(np.uint8)


def extract_bbox(plane: np.ndarray) -> Optional[BBox]:
    """
    Tight box around the largest 4-connected foreground component.

    Args:
        plane (np.ndarray): Binary (H, W) plane

    Returns:
        BBox or None: None when the plane has no foreground pixel
    """
    labeled, count = ndimage.label(np.asarray(plane) > 0)
    if count == 0:
        return None
    areas = np.bincount(labeled.ravel())[1:]
    # ties resolve to the component met first in raster order
    largest = int(np.argmax(areas)) + 1
    rows, cols = np.nonzero(labeled == largest)
    return BBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union counting inclusive pixels."""
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def evaluate(records: Sequence[EvalRecord]) -> Dict[str, float]:
    """
    Top-1, Top-5 and GT-known localization accuracy.

    A record counts as localized when IoU with the ground truth is strictly
    greater than 0.5; records without a predicted box always fail.

    Args:
        records (list): EvalRecord per test image

    Returns:
        dict: top1_loc, top5_loc, gt_known_loc and n_images
    """
    if not records:
        raise ValueError("evaluate needs at least one record")
    top1 = top5 = known = 0
    for r in records:
        localized = r.pred_box is not None and iou(r.pred_box, r.gt_box) > IOU_THRESHOLD
        if not localized:
            continue
        known += 1
        if r.class_ranks[:1] == [r.gt_class]:
            top1 += 1
        if r.gt_class in r.class_ranks[:5]:
            top5 += 1
    n = len(records)
    metrics = {
        "top1_loc": top1 / n,
        "top5_loc": top5 / n,
        "gt_known_loc": known / n,
        "n_images": n,
    }
    logger.info(f"Evaluated {n} images: top1={metrics['top1_loc']:.4f} "
                f"top5={metrics['top5_loc']:.4f} gt_known={metrics['gt_known_loc']:.4f}")
    return metrics


def report_json(metrics: Dict[str, float]) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True) + "\n"


def report_text(metrics: Dict[str, float]) -> str:
    return "".join(f"{key} = {metrics[key]}\n" for key in sorted(metrics))


def records_to_frame(records: Sequence[EvalRecord]) -> pd.DataFrame:
    """Flatten records; missing predicted boxes become empty cells."""
    rows = []
    for r in records:
        row = {"index": r.index, "gt_class": r.gt_class,
               "class_ranks": " ".join(str(c) for c in r.class_ranks)}
        for col in BOX_COLUMNS:
            row[f"pred_{col}"] = getattr(r.pred_box, col) if r.pred_box else None
            row[f"gt_{col}"] = getattr(r.gt_box, col)
        rows.append(row)
    return pd.DataFrame(rows)


def records_from_frame(frame: pd.DataFrame) -> List[EvalRecord]:
    records = []
    for row in frame.to_dict(orient="records"):
        pred = [row.get(f"pred_{c}") for c in BOX_COLUMNS]
        has_pred = all(v is not None and not (isinstance(v, float) and math.isnan(v)) for v in pred)
        ranks = str(row["class_ranks"]).split()
        records.append(EvalRecord(
            pred_box=BBox(*(int(v) for v in pred)) if has_pred else None,
            class_ranks=[int(c) for c in ranks],
            gt_box=BBox(*(int(row[f"gt_{c}"]) for c in BOX_COLUMNS)),
            gt_class=int(row["gt_class"]),
            index=int(row.get("index", -1)),
        ))
    return records
