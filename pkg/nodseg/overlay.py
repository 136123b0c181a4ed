import logging
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from PIL import Image, ImageOps

from .errors import MissingPrototypeError
from .losskernels import correlation_map, prototypes
from .utils import PathLike, as_mask, check_same_shape, pool_factor, upsample_nearest

logger = logging.getLogger(__name__)

# true positive, false negative (under-segmentation), false positive (over-segmentation)
TP_COLOR = (255, 0, 0)
FN_COLOR = (0, 255, 0)
FP_COLOR = (0, 0, 255)

FEATURE_PANELS = ("r_f", "r_b", "m_c", "norm", "m")
HEATMAP_RAMP = ("#00007f", "#7fff7f", "#7f0000")


def confusion_layers(pred, gt) -> Dict[str, np.ndarray]:
    pred = as_mask(pred, "prediction")
    gt = as_mask(gt, "ground truth")
    check_same_shape(pred, gt, names=("prediction", "ground truth"))
    return {"tp": pred & gt, "fn": ~pred & gt, "fp": pred & ~gt}


def _to_gray(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def overlay_rgb(image: np.ndarray, pred, gt) -> np.ndarray:
    """Grayscale image in RGB with TP red, FN green and FP blue painted over it."""
    layers = confusion_layers(pred, gt)
    gray = _to_gray(image)
    check_same_shape(gray, layers["tp"], names=("image", "prediction"))
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    for key, color in (("tp", TP_COLOR), ("fn", FN_COLOR), ("fp", FP_COLOR)):
        rgb[layers[key]] = color
    return rgb


def render_overlay(image: np.ndarray, pred, gt, out_path: PathLike) -> Path:
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_rgb(image, pred, gt)).save(path)
    logger.debug("Overlay saved: %s", path)
    return path


def feature_maps(F: np.ndarray, m: np.ndarray, threshold: float = 0.5) -> Dict[str, np.ndarray]:
    """
    Correlation maps of the features against prototypes pooled under the
    thresholded prediction, so no label is needed. All maps are brought to
    the prediction's resolution and lie in [0, 1]; `norm` is the feature
    magnitude scaled by its maximum. When the prediction leaves one side
    empty, r_f and r_b are zero and m_c is 0.5.
    """
    m = np.asarray(m, dtype=np.float64)
    fg = m >= threshold
    factor = pool_factor(m.shape, F.shape)
    norm = np.linalg.norm(F, axis=0)
    maps = {"norm": norm / norm.max() if norm.max() > 0 else norm}
    try:
        P_f, P_b = prototypes(F, fg, ~fg)
        maps["r_f"] = correlation_map(F, P_f)
        maps["r_b"] = correlation_map(F, P_b)
    except MissingPrototypeError as e:
        logger.debug("No prototype for the feature panels: %s", e)
        maps["r_f"] = np.zeros(F.shape[1:])
        maps["r_b"] = np.zeros(F.shape[1:])
    maps["m_c"] = 0.5 * (maps["r_f"] + (1.0 - maps["r_b"]))
    out = {name: upsample_nearest(value, factor) for name, value in maps.items()}
    out["m"] = m
    return out


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values onto a blue-green-red ramp."""
    gray = Image.fromarray(_to_gray(values))
    black, mid, white = HEATMAP_RAMP
    return np.asarray(ImageOps.colorize(gray, black=black, white=white, mid=mid))


def feature_strip(image: np.ndarray, F: np.ndarray, m: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """The image followed by one heatmap per entry of FEATURE_PANELS, side by side."""
    gray = _to_gray(image)
    check_same_shape(gray, np.asarray(m), names=("image", "prediction"))
    maps = feature_maps(F, m, threshold)
    panels = [np.repeat(gray[:, :, None], 3, axis=2)] + [heatmap_rgb(maps[name]) for name in FEATURE_PANELS]
    return np.concatenate(panels, axis=1)


class OverlayRenderer:
    """Writes prediction-vs-ground-truth overlays and feature heatmaps as PNG files."""

    def __init__(self, out_dir: PathLike = "overlays", threshold: float = 0.5):
        self.out_dir = Path(out_dir)
        self.threshold = threshold

    def render(self, image: np.ndarray, pred: np.ndarray, gt, name: str,
               out_path: Optional[PathLike] = None) -> Dict[str, Any]:
        """Render one overlay; pred may be a probability map, it is binarized at the threshold."""
        binary = np.asarray(pred, dtype=np.float64) >= self.threshold
        layers = confusion_layers(binary, gt)
        path = render_overlay(image, binary, gt,
                              out_path or self.out_dir / f"{name}_overlay.png")
        return {
            'name': name,
            'filepath': str(path),
            'tp': int(layers["tp"].sum()),
            'fn': int(layers["fn"].sum()),
            'fp': int(layers["fp"].sum()),
        }

    def render_features(self, image: np.ndarray, F: np.ndarray, m: np.ndarray, name: str) -> Dict[str, Any]:
        path = self.out_dir / f"{name}_features.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(feature_strip(image, F, m, self.threshold)).save(path)
        logger.debug("Feature panels saved: %s", path)
        return {'name': name, 'filepath': str(path), 'panels': ['image', *FEATURE_PANELS]}
