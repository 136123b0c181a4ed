"""
High-confidence label generation.

Extreme-point annotations are turned into three geometric masks (ex-rectangle
g_b, in-quadrilateral g_i, out-rectangle g_o) and fused with a prompted-model
mask into the location / foreground / background triple used for training.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, NodsegError, UndefinedMetricError
from .utils import PathLike, as_mask, check_same_shape, write_mask

logger = logging.getLogger(__name__)

Point = Tuple[int, int]

LABEL_MODES = ("T", "M", "H")


@dataclass(frozen=True)
class NodulePoints:
    """Leftmost / rightmost / topmost / bottommost points of one nodule, as (x, y)."""

    left: Point
    right: Point
    top: Point
    bottom: Point

    def vertices(self) -> List[Point]:
        """Quadrilateral vertex order: top -> right -> bottom -> left."""
        return [self.top, self.right, self.bottom, self.left]

    def validate(self, h: int, w: int) -> None:
        for name in ("left", "right", "top", "bottom"):
            x, y = getattr(self, name)
            if not (0 <= x < w and 0 <= y < h):
                raise InvalidInputError(f"{name} point ({x}, {y}) outside {h}x{w} image")
        if self.left[0] > self.right[0]:
            raise InvalidInputError(f"left.x {self.left[0]} > right.x {self.right[0]}")
        if self.top[1] > self.bottom[1]:
            raise InvalidInputError(f"top.y {self.top[1]} > bottom.y {self.bottom[1]}")

    def to_dict(self) -> Dict[str, List[int]]:
        return {k: [int(v) for v in getattr(self, k)] for k in ("left", "right", "top", "bottom")}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[int]]) -> "NodulePoints":
        try:
            return cls(**{k: (int(data[k][0]), int(data[k][1])) for k in ("left", "right", "top", "bottom")})
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise InvalidInputError(f"malformed nodule points {data!r}") from e


@dataclass
class PointAnnotation:
    """Clinical aspect-ratio annotation of one image."""

    image_id: str
    nodules: List[NodulePoints]

    def validate(self, h: int, w: int) -> None:
        if not self.nodules:
            raise InvalidInputError(f"annotation {self.image_id!r} has no nodules")
        for nodule in self.nodules:
            nodule.validate(h, w)

    def to_dict(self) -> Dict[str, Any]:
        return {"image_id": self.image_id, "nodules": [n.to_dict() for n in self.nodules]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PointAnnotation":
        if "image_id" not in data:
            raise InvalidInputError(f"annotation without image_id: {data!r}")
        return cls(image_id=str(data["image_id"]),
                   nodules=[NodulePoints.from_dict(n) for n in data.get("nodules", [])])


@dataclass
class LabelBundle:
    """Location label G_l, high-confidence foreground X_f and background X_b."""

    location: np.ndarray
    foreground: np.ndarray
    background: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.location.shape

    def violations(self) -> List[str]:
        """Names of the bundle invariants that fail; empty when the bundle is consistent."""
        found = []
        if (self.foreground & self.background).any():
            found.append("foreground and background overlap")
        if (self.foreground & ~self.location).any():
            found.append("foreground outside location")
        if not np.array_equal(self.background, ~self.location):
            found.append("background is not the complement of location")
        return found

    def equals(self, other: "LabelBundle") -> bool:
        return (np.array_equal(self.location, other.location)
                and np.array_equal(self.foreground, other.foreground)
                and np.array_equal(self.background, other.background))


def bounding_box_mask(ann: NodulePoints, h: int, w: int) -> np.ndarray:
    """Ex-rectangle g_b: the inclusive min/max box of the four points."""
    ann.validate(h, w)
    pts = ann.vertices()
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    mask = np.zeros((h, w), dtype=bool)
    mask[min(ys):max(ys) + 1, min(xs):max(xs) + 1] = True
    return mask


def quadrilateral_mask(ann: NodulePoints, h: int, w: int) -> np.ndarray:
    """In-quadrilateral g_i: pixels inside or on the polygon top -> right -> bottom -> left."""
    ann.validate(h, w)
    verts = ann.vertices()
    ys, xs = np.mgrid[0:h, 0:w]
    inside = np.zeros((h, w), dtype=bool)
    on_edge = np.zeros((h, w), dtype=bool)
    for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
        cross = (x1 - x0) * (ys - y0) - (xs - x0) * (y1 - y0)
        in_span = ((xs >= min(x0, x1)) & (xs <= max(x0, x1))
                   & (ys >= min(y0, y1)) & (ys <= max(y0, y1)))
        on_edge |= (cross == 0) & in_span
        if y0 == y1:
            continue
        # crossing-number test, half-open in y
        straddles = ((y0 <= ys) & (y1 > ys)) | ((y0 > ys) & (y1 <= ys))
        x_hit = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= straddles & (xs < x_hit)
    return inside | on_edge


def complement_mask(mask: np.ndarray) -> np.ndarray:
    """Out-rectangle g_o when given g_b; an involution."""
    return ~as_mask(mask)


def fuse_labels(g_b: np.ndarray, g_i: np.ndarray, g_o: np.ndarray, y_medsam: np.ndarray,
                image_id: Optional[str] = None) -> LabelBundle:
    """G_l = g_b OR y, X_f = g_i AND y, X_b = g_o AND NOT y."""
    g_b, g_i, g_o, y = (as_mask(m, n) for m, n in ((g_b, "g_b"), (g_i, "g_i"), (g_o, "g_o"), (y_medsam, "y_medsam")))
    check_same_shape(g_b, g_i, g_o, y, names=("g_b", "g_i", "g_o", "y_medsam"))
    bundle = LabelBundle(location=g_b | y, foreground=g_i & y, background=g_o & ~y)
    if not bundle.foreground.any():
        logger.warning("Empty high-confidence foreground%s: prompted mask misses the quadrilateral",
                       f" for {image_id}" if image_id else "")
    return bundle


def geometric_masks(ann: PointAnnotation, h: int, w: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Union of per-nodule boxes and quadrilaterals, and the complement of the box union."""
    ann.validate(h, w)
    g_b = np.zeros((h, w), dtype=bool)
    g_i = np.zeros((h, w), dtype=bool)
    for nodule in ann.nodules:
        g_b |= bounding_box_mask(nodule, h, w)
        g_i |= quadrilateral_mask(nodule, h, w)
    return g_b, g_i, complement_mask(g_b)


def multi_nodule_fuse(ann: PointAnnotation, y_medsam: np.ndarray, h: int, w: int) -> LabelBundle:
    """Fuse every nodule of an annotation with one prompted mask."""
    g_b, g_i, g_o = geometric_masks(ann, h, w)
    return fuse_labels(g_b, g_i, g_o, y_medsam, image_id=ann.image_id)


def label_bundle(mode: str, ann: PointAnnotation, y_medsam: Optional[np.ndarray], h: int, w: int) -> LabelBundle:
    """Bundle for a label mode: T (geometry only), M (prompted mask only), H (fusion)."""
    if mode not in LABEL_MODES:
        raise InvalidInputError(f"unknown label mode {mode!r}, expected one of {LABEL_MODES}")
    if mode == "T":
        g_b, g_i, g_o = geometric_masks(ann, h, w)
        return LabelBundle(location=g_b, foreground=g_i, background=g_o)
    if y_medsam is None:
        raise InvalidInputError(f"label mode {mode} needs a prompt mask for {ann.image_id!r}")
    y = as_mask(y_medsam, "y_medsam")
    if y.shape != (h, w):
        raise InvalidInputError(f"prompt mask {y.shape} does not match image {(h, w)}")
    if mode == "M":
        return LabelBundle(location=y.copy(), foreground=y.copy(), background=~y)
    return multi_nodule_fuse(ann, y, h, w)


def label_precision(label: np.ndarray, gt: np.ndarray, as_background: bool = False) -> float:
    """Fraction of label pixels that agree with ground truth (foreground or background sense)."""
    label = as_mask(label, "label")
    gt = as_mask(gt, "gt")
    check_same_shape(label, gt, names=("label", "gt"))
    size = int(label.sum())
    if size == 0:
        raise UndefinedMetricError("precision of an empty label is undefined")
    agree = label & ~gt if as_background else label & gt
    return int(agree.sum()) / size


@dataclass
class LabelRecord:
    """Everything derived from one annotated image."""

    image_id: str
    gt: np.ndarray
    g_b: np.ndarray
    g_i: np.ndarray
    g_o: np.ndarray
    prompt_mask: Optional[np.ndarray]
    bundle: LabelBundle


# (strategy, pseudo label, foreground accessor, background accessor)
PRECISION_ROWS = (
    ("Topological-based", "Ex-/Out-rectangle", lambda r: r.g_b, lambda r: r.g_o),
    ("Topological-based", "In-quadrilateral", lambda r: r.g_i, lambda r: ~r.g_i),
    ("Prompted model", "Prompted mask",
     lambda r: r.prompt_mask, lambda r: None if r.prompt_mask is None else ~r.prompt_mask),
    ("Fused", "High-confidence f/b", lambda r: r.bundle.foreground, lambda r: r.bundle.background),
)


def _mean_std(values: List[float]) -> Dict[str, Any]:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(values)}


def precision_table(records: Iterable[LabelRecord]) -> List[Dict[str, Any]]:
    """Per pseudo-label foreground/background precision, mean and std over images."""
    records = list(records)
    table = []
    for strategy, name, fg_of, bg_of in PRECISION_ROWS:
        cells: Dict[str, List[float]] = {"foreground": [], "background": []}
        undefined = {"foreground": 0, "background": 0}
        for record in records:
            for side, getter in (("foreground", fg_of), ("background", bg_of)):
                label = getter(record)
                if label is None:
                    continue
                try:
                    cells[side].append(label_precision(label, record.gt, as_background=side == "background"))
                except UndefinedMetricError:
                    undefined[side] += 1
        table.append({
            "strategy": strategy,
            "label": name,
            "foreground": {**_mean_std(cells["foreground"]), "undefined": undefined["foreground"]},
            "background": {**_mean_std(cells["background"]), "undefined": undefined["background"]},
        })
    return table


def write_bundles(records: Iterable[LabelRecord], out_dir: PathLike) -> int:
    """Write <id>_location/_foreground/_background PNG masks; returns the number of bundles."""
    out = Path(out_dir)
    count = 0
    for record in records:
        write_mask(out / f"{record.image_id}_location.png", record.bundle.location)
        write_mask(out / f"{record.image_id}_foreground.png", record.bundle.foreground)
        write_mask(out / f"{record.image_id}_background.png", record.bundle.background)
        count += 1
    return count


class LabelGenerator:
    """Builds label bundles for a corpus of annotated samples."""

    def __init__(self, mode: str = "H", workers: int = 8):
        if mode not in LABEL_MODES:
            raise InvalidInputError(f"unknown label mode {mode!r}")
        self.mode = mode
        self.workers = workers

    def generate(self, sample: Any) -> Dict[str, Any]:
        """Build the record of one sample; failures are reported, not raised."""
        ann = sample.annotation
        result = {
            'image_id': ann.image_id if ann is not None else None,
            'record': None,
            'error': None,
        }
        try:
            if ann is None:
                raise InvalidInputError("sample has no point annotation")
            gt = as_mask(sample.gt, "gt")
            h, w = gt.shape
            g_b, g_i, g_o = geometric_masks(ann, h, w)
            bundle = label_bundle(self.mode, ann, sample.prompt_mask, h, w)
            result['record'] = LabelRecord(
                image_id=ann.image_id, gt=gt, g_b=g_b, g_i=g_i, g_o=g_o,
                prompt_mask=None if sample.prompt_mask is None else as_mask(sample.prompt_mask),
                bundle=bundle,
            )
        except NodsegError as e:
            result['error'] = f"{result['image_id']}: {e}"
            logger.warning("Label generation failed for %s: %s", result['image_id'], e)
        return result

    def run(self, samples: Sequence[Any]) -> Dict[str, Any]:
        """Generate all records concurrently; records keep the sample order."""
        results: Dict[int, Dict[str, Any]] = {}
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            future_to_index = {executor.submit(self.generate, s): i for i, s in enumerate(samples)}
            for future in as_completed(future_to_index):
                results[future_to_index[future]] = future.result()

        ordered = [results[i] for i in range(len(samples))]
        records = [r['record'] for r in ordered if r['record'] is not None]
        return {
            'mode': self.mode,
            'records': records,
            'precision': precision_table(records),
            'errors': [r['error'] for r in ordered if r['error']],
        }
