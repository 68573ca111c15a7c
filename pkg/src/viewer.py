"""
Overlay and summary helpers behind the Streamlit artifact browser.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from .gppl import PseudoLabel
from .localization import BBox, records_from_frame
from .storage import ArtifactStore, MissingArtifactError

logger = logging.getLogger(__name__)

PRED_COLOR = (255, 64, 64)
GT_COLOR = (64, 255, 64)
PSEUDO_COLORS = {
    PseudoLabel.BG: (0, 0, 0),
    PseudoLabel.CONFLICT: (128, 128, 128),
    PseudoLabel.FG: (255, 255, 255),
}


def to_rgb(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image in [0, 1] to (H, W, 3) uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    return np.round(np.clip(image.transpose(1, 2, 0), 0.0, 1.0) * 255).astype(np.uint8)


def heatmap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to a blue-to-red (H, W, 3) uint8 image."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([v, 1.0 - np.abs(2.0 * v - 1.0), 1.0 - v], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def blend(base: np.ndarray, overlay: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    if base.shape != overlay.shape:
        raise ValueError(f"cannot blend {base.shape} with {overlay.shape}")
    mixed = (1.0 - alpha) * base.astype(np.float64) + alpha * overlay.astype(np.float64)
    return np.round(mixed).astype(np.uint8)


def pseudo_label_rgb(plane: np.ndarray) -> np.ndarray:
    """Colorize a pseudo-label plane; unknown codes render red."""
    plane = np.asarray(plane)
    out = np.zeros(plane.shape + (3,), dtype=np.uint8)
    out[...] = (255, 0, 0)
    for code, color in PSEUDO_COLORS.items():
        out[plane == code] = color
    return out


def draw_boxes(rgb: np.ndarray, pred: Optional[BBox], gt: Optional[BBox]) -> np.ndarray:
    """Outline the predicted box in red and the ground truth in green."""
    img = Image.fromarray(np.asarray(rgb, dtype=np.uint8))
    draw = ImageDraw.Draw(img)
    for box, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        if box is not None:
            draw.rectangle(box.as_tuple(), outline=color)
    return np.array(img)


@dataclass
class ImagePanel:
    index: int
    image: np.ndarray
    boxes: np.ndarray
    mask: Optional[np.ndarray] = None
    cam: Optional[np.ndarray] = None
    pseudo: Optional[np.ndarray] = None


class RunSummary:
    """Read-only view over one pipeline output directory."""

    def __init__(self, root):
        self.store = ArtifactStore(root)

    def metrics(self) -> Optional[Dict]:
        path = self.store.path("report.json")
        return self.store.load_json("report.json") if path.exists() else None

    def loss_curves(self) -> pd.DataFrame:
        """Wide frame indexed by step with one column per trained model."""
        curves = {}
        for path in self.store.list_files("logs", "*_loss.csv"):
            frame = pd.read_csv(path)
            curves[path.stem.replace("_loss", "")] = frame.set_index("step")["loss"]
        return pd.DataFrame(curves)

    def test_indices(self) -> List[int]:
        if not self.store.path("records.csv").exists():
            return []
        return [int(i) for i in self.store.load_table("records.csv")["index"]]

    def _optional_array(self, relpath: str) -> Optional[np.ndarray]:
        return self.store.load_array(relpath) if self.store.path(relpath).exists() else None

    def panel(self, index: int) -> ImagePanel:
        """Image with predicted and ground-truth boxes plus whatever maps exist for it."""
        self.store.require([self.store.path("records.csv"), self.store.path("data", "test_images.arr")])
        records = {r.index: r for r in records_from_frame(self.store.load_table("records.csv"))}
        if index not in records:
            raise MissingArtifactError([self.store.path("records.csv")])
        test_manifest = self.store.load_table("data/test_manifest.csv")
        row = int(np.flatnonzero(test_manifest["index"].to_numpy() == index)[0])
        image = to_rgb(self.store.load_array("data/test_images.arr")[row])
        record = records[index]
        mask = self._optional_array(f"masks/{index:05d}.arr")
        return ImagePanel(index=index, image=image, boxes=draw_boxes(image, record.pred_box, record.gt_box),
                          mask=None if mask is None else heatmap(mask))

    def train_panel(self, index: int) -> ImagePanel:
        """Training image with its enhanced CAM and pseudo label."""
        self.store.require([self.store.path("data", "train_images.arr")])
        train_manifest = self.store.load_table("data/train_manifest.csv")
        row = int(np.flatnonzero(train_manifest["index"].to_numpy() == index)[0])
        image = to_rgb(self.store.load_array("data/train_images.arr")[row])
        gt = BBox(*(int(train_manifest.loc[row, c]) for c in ("x_min", "y_min", "x_max", "y_max")))
        cam = self._optional_array(f"cams/{index:05d}.arr")
        pseudo_path = self.store.path("pseudo", f"{index:05d}.png")
        return ImagePanel(
            index=index,
            image=image,
            boxes=draw_boxes(image, None, gt),
            cam=None if cam is None else blend(image, heatmap(cam)),
            pseudo=pseudo_label_rgb(self.store.load_png(f"pseudo/{index:05d}.png")) if pseudo_path.exists() else None,
        )
