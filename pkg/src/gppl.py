"""
Gaussian prior pseudo labels.
Fits a response-weighted bivariate Gaussian to a CAM, ensembles it with the CAM
and splits the result into foreground, background and conflict pixels.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
RHO_LIMIT = 1.0 - 1e-6
PSEUDO_MODES = ("full", "no-gauss", "no-threshold")


class EmptyCamError(ValueError):
    """Raised when a CAM has no positive response to fit."""


@dataclass
class CamMap:
    """Single-channel activation map in [0, 1]."""
    values: np.ndarray
    source_class: Optional[int] = None

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class GaussianParams:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float


@dataclass
class PseudoLabel:
    """Per-pixel trichotomy stored with its 8-bit plane codes."""
    BG = 0
    CONFLICT = 128
    FG = 255

    classes: np.ndarray  # (H, W) uint8 with codes above

    @property
    def g(self) -> np.ndarray:
        return (self.classes == self.FG).astype(np.float32)

    @property
    def w(self) -> np.ndarray:
        return (self.classes != self.CONFLICT).astype(np.float32)

    @property
    def shape(self):
        return self.classes.shape

    def counts(self) -> Dict[str, int]:
        return {
            "fg": int((self.classes == self.FG).sum()),
            "bg": int((self.classes == self.BG).sum()),
            "conflict": int((self.classes == self.CONFLICT).sum()),
        }

    @classmethod
    def from_plane(cls, plane: np.ndarray) -> "PseudoLabel":
        plane = np.asarray(plane, dtype=np.uint8)
        unknown = set(np.unique(plane).tolist()) - {cls.BG, cls.CONFLICT, cls.FG}
        if unknown:
            raise ValueError(f"pseudo label plane holds unknown codes {sorted(unknown)}")
        return cls(plane)


def _values(cam) -> np.ndarray:
    return np.asarray(cam.values if isinstance(cam, CamMap) else cam, dtype=np.float64)


def fit_weighted_gaussian(cam) -> GaussianParams:
    """
    Weighted moments of pixel coordinates, with CAM responses as sample weights.

    x is the column index and y the row index. Variances are plain weighted
    second central moments; sigma is floored at 1e-6 and rho clamped to
    +/-(1 - 1e-6).

    Args:
        cam (CamMap): Activation map, or a bare (H, W) array

    Returns:
        GaussianParams: mu_x, mu_y, sigma_x, sigma_y, rho
    """
    weights = np.clip(_values(cam), 0.0, None)
    total = weights.sum()
    if not total > 0:
        raise EmptyCamError("empty CAM: no positive response to fit a Gaussian to")
    ys, xs = np.indices(weights.shape, dtype=np.float64)
    mu_x = (weights * xs).sum() / total
    mu_y = (weights * ys).sum() / total
    dx, dy = xs - mu_x, ys - mu_y
    var_x = (weights * dx * dx).sum() / total
    var_y = (weights * dy * dy).sum() / total
    cov = (weights * dx * dy).sum() / total
    std_x, std_y = np.sqrt(var_x), np.sqrt(var_y)
    rho = cov / (std_x * std_y) if min(std_x, std_y) >= SIGMA_FLOOR else 0.0
    return GaussianParams(
        mu_x=float(mu_x),
        mu_y=float(mu_y),
        sigma_x=float(max(std_x, SIGMA_FLOOR)),
        sigma_y=float(max(std_y, SIGMA_FLOOR)),
        rho=float(np.clip(rho, -RHO_LIMIT, RHO_LIMIT)),
    )


def gaussian_density(params: GaussianParams, h: int, w: int) -> np.ndarray:
    """Unnormalized bivariate normal density evaluated at every pixel center."""
    ys, xs = np.indices((h, w), dtype=np.float64)
    zx = (xs - params.mu_x) / params.sigma_x
    zy = (ys - params.mu_y) / params.sigma_y
    one_minus = 1.0 - params.rho ** 2
    theta = zx * zx - 2.0 * params.rho * zx * zy + zy * zy
    norm = 2.0 * np.pi * params.sigma_x * params.sigma_y * np.sqrt(one_minus)
    return np.exp(-theta / (2.0 * one_minus)) / norm


def render_gaussian(params: GaussianParams, h: int, w: int) -> CamMap:
    """Density divided by its maximum over the grid, so the peak is exactly 1."""
    density = gaussian_density(params, h, w)
    peak = density.max()
    if peak > 0:
        density = density / peak
    else:
        # mean so far outside the grid that every pixel underflows
        logger.warning(f"Gaussian at ({params.mu_x:.1f}, {params.mu_y:.1f}) underflows on a {h}x{w} grid")
    return CamMap(density)


def enhance_cam(cam, gmap, t_gauss: float = 0.7) -> CamMap:
    """
    Element-wise maximum of the CAM and the gated Gaussian map.

    Gaussian values <= t_gauss are zeroed before the maximum is taken.
    """
    cam_values, gauss_values = _values(cam), _values(gmap)
    if cam_values.shape != gauss_values.shape:
        raise ValueError(f"enhance_cam shape mismatch: cam {cam_values.shape} vs gaussian {gauss_values.shape}")
    gated = np.where(gauss_values > t_gauss, gauss_values, 0.0)
    source = cam.source_class if isinstance(cam, CamMap) else None
    return CamMap(np.maximum(cam_values, gated), source_class=source)


def _check_thresholds(t_fg: float, t_bg: float):
    if not 0.0 <= t_bg < t_fg <= 1.0:
        raise ValueError(f"thresholds must satisfy 0 <= t_bg < t_fg <= 1, got t_bg={t_bg} t_fg={t_fg}")


def trichotomize(enhanced, t_fg: float = 0.5, t_bg: float = 0.004) -> PseudoLabel:
    """
    Split a map into foreground (> t_fg), background (< t_bg) and conflict.

    Args:
        enhanced (CamMap): Gaussian-enhanced CAM
        t_fg (float): Foreground threshold
        t_bg (float): Background threshold

    Returns:
        PseudoLabel: Trichotomy plane with derived g/w planes
    """
    _check_thresholds(t_fg, t_bg)
    values = _values(enhanced)
    classes = np.full(values.shape, PseudoLabel.CONFLICT, dtype=np.uint8)
    classes[values > t_fg] = PseudoLabel.FG
    classes[values < t_bg] = PseudoLabel.BG
    return PseudoLabel(classes)


def binary_split(enhanced, t_fg: float = 0.5) -> PseudoLabel:
    """Single-threshold variant: foreground above t_fg, background elsewhere, no conflict."""
    values = _values(enhanced)
    classes = np.where(values > t_fg, PseudoLabel.FG, PseudoLabel.BG).astype(np.uint8)
    return PseudoLabel(classes)


def make_pseudo_label(cam: CamMap, mode: str = "full", t_gauss: float = 0.7,
                      t_fg: float = 0.5, t_bg: float = 0.004):
    """
    Run the whole pseudo-label recipe on one CAM.

    Args:
        cam (CamMap): CAM at image resolution
        mode (str): full, no-gauss (thresholds on the raw CAM) or
            no-threshold (Gaussian enhancement split by t_fg alone)
        t_gauss (float): Gaussian foreground gate
        t_fg (float): Foreground threshold
        t_bg (float): Background threshold

    Returns:
        tuple: (PseudoLabel, enhanced CamMap)
    """
    if mode not in PSEUDO_MODES:
        raise ValueError(f"unknown pseudo label mode '{mode}', expected one of {PSEUDO_MODES}")
    h, w = cam.shape
    if mode == "no-gauss":
        if not _values(cam).max() > 0:
            raise EmptyCamError("empty CAM: nothing to threshold")
        return trichotomize(cam, t_fg, t_bg), cam
    params = fit_weighted_gaussian(cam)
    enhanced = enhance_cam(cam, render_gaussian(params, h, w), t_gauss)
    if mode == "no-threshold":
        return binary_split(enhanced, t_fg), enhanced
    return trichotomize(enhanced, t_fg, t_bg), enhanced
