"""Segmentation metrics: IoU, Dice, precision and HD95, per image and over a corpus."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, UndefinedMetricError
from .utils import PathLike, as_mask, check_same_shape

logger = logging.getLogger(__name__)

METRIC_NAMES = ("iou", "dsc", "precision", "hd95")

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = as_mask(a, "prediction")
    b = as_mask(b, "ground truth")
    check_same_shape(a, b, names=("prediction", "ground truth"))
    return a, b


def iou(a, b) -> float:
    """Intersection over union; two empty masks agree perfectly."""
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def dsc(a, b) -> float:
    """Dice coefficient, derived from IoU so dsc = 2 iou / (1 + iou) holds exactly."""
    j = iou(a, b)
    return 2.0 * j / (1.0 + j)


def prediction_precision(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    size = int(pred.sum())
    if size == 0:
        raise UndefinedMetricError("precision of an empty prediction is undefined")
    return int((pred & gt).sum()) / size


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask; outside the image counts as background."""
    mask = as_mask(mask)
    return mask & ~ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)


def hd95(a, b, q: float = 95.0) -> float:
    """
    Larger of the two directed q-th percentile boundary distances (q=100 is
    the plain Hausdorff distance). One empty mask gives the image diagonal, two give 0.
    """
    a, b = _pair(a, b)
    if not 0 <= q <= 100:
        raise InvalidInputError(f"percentile must lie in [0, 100], got {q}")
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if not has_a or not has_b:
        return float(np.hypot(*a.shape))

    edge_a, edge_b = boundary(a), boundary(b)
    to_b = ndimage.distance_transform_edt(~edge_b)
    to_a = ndimage.distance_transform_edt(~edge_a)
    return float(max(np.percentile(to_b[edge_a], q), np.percentile(to_a[edge_b], q)))


@dataclass
class MetricsReport:
    """Per-image metric rows with their corpus summary."""

    rows: List[Dict[str, Any]] = field(default_factory=list)
    undefined_precision: int = 0
    threshold: float = 0.5

    def summary(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for name in METRIC_NAMES:
            values = np.array([row[name] for row in self.rows], dtype=np.float64)
            out[name] = {"mean": float(values.mean()), "std": float(values.std())} if len(values) else \
                {"mean": float("nan"), "std": float("nan")}
        return out

    def mean(self, name: str) -> float:
        return self.summary()[name]["mean"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "summary": self.summary(),
            "count": len(self.rows),
            "undefined_precision": self.undefined_precision,
            "threshold": self.threshold,
            "rows": self.rows,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        return cls(rows=[dict(r) for r in data.get("rows", [])],
                   undefined_precision=int(data.get("undefined_precision", 0)),
                   threshold=float(data.get("threshold", 0.5)))

    def to_csv(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("image_id",) + METRIC_NAMES)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in writer.fieldnames})
        return path

    def to_json(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def from_json(cls, path: PathLike) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, out_dir: PathLike, stem: str = "metrics") -> Dict[str, Path]:
        out = Path(out_dir)
        return {"csv": self.to_csv(out / f"{stem}.csv"), "json": self.to_json(out / f"{stem}.json")}


def image_metrics(pred, gt) -> Tuple[Dict[str, float], bool]:
    """Metrics of one binary prediction; the flag marks an undefined precision."""
    pred, gt = _pair(pred, gt)
    undefined = False
    try:
        precision = prediction_precision(pred, gt)
    except UndefinedMetricError:
        precision = 1.0 if not gt.any() else 0.0
        undefined = bool(gt.any())
    return {"iou": iou(pred, gt), "dsc": dsc(pred, gt), "precision": precision, "hd95": hd95(pred, gt)}, undefined


def corpus_report(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], threshold: float = 0.5,
                  ids: Optional[Sequence[str]] = None) -> MetricsReport:
    """Binarize predictions at threshold (>=) and aggregate the four metrics."""
    if len(preds) != len(gts):
        raise InvalidInputError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise InvalidInputError("cannot report on an empty corpus")
    ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(preds))]

    report = MetricsReport(threshold=threshold)
    for image_id, pred, gt in zip(ids, preds, gts):
        binary = np.asarray(pred, dtype=np.float64) >= threshold
        values, undefined = image_metrics(binary, gt)
        report.rows.append({"image_id": image_id, **values})
        if undefined:
            report.undefined_precision += 1
    if report.undefined_precision:
        logger.warning("%d of %d predictions were empty; their precision is recorded as 0",
                       report.undefined_precision, len(preds))
    return report
