"""
Synthetic ultrasound-like corpus with simulated point annotations and
prompted-model masks, plus reading and writing of corpus directories.

Corpus layout:
    images/<id>.png  masks/<id>.png  promptmasks/<id>.png (optional)
    annotations.json  manifest.json
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, IngestionError, InvalidInputError
from .labelgen import NodulePoints, PointAnnotation
from .utils import PathLike, as_mask, read_image, read_mask, rng_stream, write_image, write_mask

logger = logging.getLogger(__name__)

SHAPES = ("ellipse", "blob")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".pgm", ".bmp")
MANIFEST_VERSION = 1
HARMONICS = (2, 3, 4)


@dataclass
class SynthConfig:
    """Generator settings for the synthetic corpus."""

    size: int = 64
    nodules_min: int = 1
    nodules_max: int = 1
    shape: str = "blob"
    harmonic_amplitude: float = 0.15
    radius_min: float = 8.0
    radius_max: float = 16.0
    bg_mean: float = 0.6
    contrast: float = 0.25
    blur_sigma: float = 1.0
    speckle: float = 0.3
    oracle_precision: float = 0.96
    oracle_recall: float = 0.95
    oracle_spread: float = 0.02
    morph_radius: int = 3
    jitter: int = 1
    seed: int = 0
    n_train: int = 200
    n_test: int = 50

    def __post_init__(self):
        if self.size < 32 or self.size % 4:
            raise ConfigError(f"size must be a multiple of 4 and at least 32, got {self.size}")
        if self.contrast <= 0:
            raise ConfigError("contrast must be positive")
        for name in ("oracle_precision", "oracle_recall"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.shape not in SHAPES:
            raise ConfigError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if not 1 <= self.nodules_min <= self.nodules_max:
            raise ConfigError("need 1 <= nodules_min <= nodules_max")
        if not 2 <= self.radius_min <= self.radius_max < self.size / 2 - 2:
            raise ConfigError("radius range must fit inside the image")
        if not 0 <= self.speckle <= 1:
            raise ConfigError("speckle must lie in [0, 1]")
        if not (0 <= self.bg_mean - self.contrast and self.bg_mean <= 1):
            raise ConfigError("background and nodule intensities must lie in [0, 1]")
        if self.morph_radius < 1:
            raise ConfigError("morph_radius must be at least 1")
        if self.jitter < 0 or self.oracle_spread < 0 or self.blur_sigma < 0:
            raise ConfigError("jitter, spreads and noise scales must be non-negative")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("split sizes must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SynthConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class NoduleShape:
    """Rotated ellipse whose radius is modulated by a few angular harmonics."""

    cy: float
    cx: float
    a: float
    b: float
    theta: float
    amplitudes: Tuple[float, ...] = ()
    phases: Tuple[float, ...] = ()

    def radius(self, phi: np.ndarray) -> np.ndarray:
        r = np.ones_like(phi)
        for k, amp, phase in zip(HARMONICS, self.amplitudes, self.phases):
            r = r + amp * np.cos(k * phi + phase)
        return r

    def rasterize(self, h: int, w: int) -> np.ndarray:
        """Pixels whose centre lies inside the shape."""
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        u = (dx * np.cos(self.theta) + dy * np.sin(self.theta)) / self.a
        v = (-dx * np.sin(self.theta) + dy * np.cos(self.theta)) / self.b
        return np.hypot(u, v) <= self.radius(np.arctan2(v, u))


@dataclass
class Sample:
    """One image with its ground truth, point annotation and prompted mask."""

    image_id: str
    image: np.ndarray
    gt: np.ndarray
    annotation: Optional[PointAnnotation] = None
    prompt_mask: Optional[np.ndarray] = None
    shapes: List[NoduleShape] = field(default_factory=list)

    def equals(self, other: "Sample") -> bool:
        def same(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
        ann_a = self.annotation.to_dict() if self.annotation else None
        ann_b = other.annotation.to_dict() if other.annotation else None
        return (self.image_id == other.image_id and np.array_equal(self.image, other.image)
                and np.array_equal(self.gt, other.gt) and ann_a == ann_b
                and same(self.prompt_mask, other.prompt_mask))


@dataclass
class Corpus:
    """Train and test splits, with the generator config when synthetic."""

    train: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)
    config: Optional[SynthConfig] = None

    def split(self, name: str) -> List[Sample]:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        if name == "all":
            return self.train + self.test
        raise InvalidInputError(f"unknown split {name!r}")


# --- generation ------------------------------------------------------------

def _draw_shape(cfg: SynthConfig, rng: np.random.Generator) -> NoduleShape:
    a, b = rng.uniform(cfg.radius_min, cfg.radius_max, size=2)
    reach = max(a, b) * (1.0 + cfg.harmonic_amplitude * len(HARMONICS)) if cfg.shape == "blob" else max(a, b)
    margin = min(reach + 1.0, cfg.size / 2 - 1.0)
    cy, cx = (float(np.round(v)) for v in rng.uniform(margin, cfg.size - 1 - margin, size=2))
    theta = rng.uniform(0.0, np.pi)
    if cfg.shape == "ellipse":
        return NoduleShape(cy, cx, a, b, theta)
    amplitudes = tuple(rng.uniform(-1.0, 1.0, size=len(HARMONICS)) * cfg.harmonic_amplitude)
    phases = tuple(rng.uniform(0.0, 2 * np.pi, size=len(HARMONICS)))
    return NoduleShape(cy, cx, a, b, theta, amplitudes, phases)


def speckle_field(shape: Tuple[int, int], strength: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-mean multiplicative noise: a blend of 1 and a squared-Gaussian (exponential) field."""
    g1 = rng.standard_normal(shape)
    g2 = rng.standard_normal(shape)
    return (1.0 - strength) + strength * 0.5 * (g1 ** 2 + g2 ** 2)


def render_image(gt: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Darker nodule on a brighter background, blurred, speckled and quantized to 8 bits."""
    clean = cfg.bg_mean - cfg.contrast * gt.astype(np.float64)
    if cfg.blur_sigma > 0:
        clean = ndimage.gaussian_filter(clean, cfg.blur_sigma, mode="nearest")
    noisy = clean * speckle_field(gt.shape, cfg.speckle, rng) if cfg.speckle > 0 else clean
    return np.round(np.clip(noisy, 0.0, 1.0) * 255.0) / 255.0


def _extreme(ys: np.ndarray, xs: np.ndarray, primary: np.ndarray, secondary: np.ndarray) -> Tuple[int, int]:
    i = np.lexsort((secondary, primary))[0]
    return int(xs[i]), int(ys[i])


def extreme_points(gt, jitter: int = 0, rng: Optional[np.random.Generator] = None,
                   image_id: str = "") -> PointAnnotation:
    """
    Left/right/top/bottom pixels of every 8-connected component of gt.
    Ties go to the smallest other coordinate. Each coordinate is moved by at
    most `jitter` pixels, clamped to the image, and swapped back if the pair
    ordering would break.
    """
    gt = as_mask(gt, "gt")
    h, w = gt.shape
    labels, count = ndimage.label(gt, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        raise InvalidInputError(f"ground truth of {image_id or 'image'} is empty")
    if jitter and rng is None:
        raise InvalidInputError("jitter needs a random generator")

    nodules = []
    for component in range(1, count + 1):
        ys, xs = np.nonzero(labels == component)
        left = _extreme(ys, xs, xs, ys)
        right = _extreme(ys, xs, -xs, ys)
        top = _extreme(ys, xs, ys, xs)
        bottom = _extreme(ys, xs, -ys, xs)
        if jitter:
            moved = []
            for x, y in (left, right, top, bottom):
                dx, dy = rng.integers(-jitter, jitter + 1, size=2)
                moved.append((int(np.clip(x + dx, 0, w - 1)), int(np.clip(y + dy, 0, h - 1))))
            left, right, top, bottom = moved
            if left[0] > right[0]:
                left, right = (right[0], left[1]), (left[0], right[1])
            if top[1] > bottom[1]:
                top, bottom = (top[0], bottom[1]), (bottom[0], top[1])
        nodules.append(NodulePoints(left=left, right=right, top=top, bottom=bottom))
    return PointAnnotation(image_id=image_id, nodules=nodules)


_CROSS = ndimage.generate_binary_structure(2, 1)


def _morph_band(gt: np.ndarray, radius: int, grow: bool) -> np.ndarray:
    """Pixels a dilation (grow) or erosion of gt by the given radius would flip."""
    if grow:
        return ndimage.binary_dilation(gt, structure=_CROSS, iterations=radius) & ~gt
    return gt & ~ndimage.binary_erosion(gt, structure=_CROSS, iterations=radius, border_value=1)


def _flip_in_band(gt: np.ndarray, count: int, grow: bool, radius: int, rng: np.random.Generator) -> np.ndarray:
    """Flat indices of `count` random pixels from the thinnest band of at least `radius` that holds them."""
    limit = max(gt.shape)
    band = _morph_band(gt, radius, grow)
    while band.sum() < count and radius < limit:
        radius += 1
        band = _morph_band(gt, radius, grow)
    candidates = np.flatnonzero(band)
    return rng.choice(candidates, size=min(count, candidates.size), replace=False)


def simulate_prompt_mask(gt, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Perturb gt into a prompted-model-like mask. Per-image precision and recall
    are drawn around the oracle targets; the missed pixels are flipped at
    random inside an erosion band of gt and the extra pixels inside a
    dilation band, each band with a random radius in 1..morph_radius (widened
    only when too thin to hold the flips).
    """
    gt = as_mask(gt, "gt")
    size = int(gt.sum())
    mask = gt.copy()
    if size == 0:
        return mask

    precision = float(np.clip(cfg.oracle_precision + cfg.oracle_spread * rng.standard_normal(), 0.5, 1.0))
    recall = float(np.clip(cfg.oracle_recall + cfg.oracle_spread * rng.standard_normal(), 0.5, 1.0))
    r_erode, r_dilate = (int(r) for r in rng.integers(1, cfg.morph_radius + 1, size=2))

    drop = int(round((1.0 - recall) * size))
    if drop:
        mask.flat[_flip_in_band(gt, drop, False, r_erode, rng)] = False

    kept = size - drop
    add = int(round(kept * (1.0 - precision) / precision))
    if add:
        mask.flat[_flip_in_band(gt, add, True, r_dilate, rng)] = True
    return mask


def gen_sample(cfg: SynthConfig, index: int) -> Sample:
    """Deterministic sample for (cfg.seed, index)."""
    rng = rng_stream(cfg.seed, index)
    image_id = f"{index:05d}"
    count = int(rng.integers(cfg.nodules_min, cfg.nodules_max + 1))
    shapes = [_draw_shape(cfg, rng) for _ in range(count)]
    gt = np.zeros((cfg.size, cfg.size), dtype=bool)
    for shape in shapes:
        gt |= shape.rasterize(cfg.size, cfg.size)

    image = render_image(gt, cfg, rng)
    annotation = extreme_points(gt, cfg.jitter, rng, image_id)
    prompt_mask = simulate_prompt_mask(gt, cfg, rng)
    return Sample(image_id=image_id, image=image, gt=gt, annotation=annotation,
                  prompt_mask=prompt_mask, shapes=shapes)


def generate_corpus(cfg: SynthConfig, workers: int = 4) -> Corpus:
    """Samples 0..n_train-1 form the train split, the next n_test the test split."""
    total = cfg.n_train + cfg.n_test
    samples: Dict[int, Sample] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_index = {executor.submit(gen_sample, cfg, i): i for i in range(total)}
        for future in as_completed(future_to_index):
            samples[future_to_index[future]] = future.result()
    ordered = [samples[i] for i in range(total)]
    logger.info("Generated %d synthetic samples (%d train / %d test)", total, cfg.n_train, cfg.n_test)
    return Corpus(train=ordered[:cfg.n_train], test=ordered[cfg.n_train:], config=cfg)


# --- corpus directories ----------------------------------------------------

def write_corpus(corpus: Corpus, out_dir: PathLike) -> Path:
    """Write images, masks, prompt masks, annotations and the split manifest."""
    root = Path(out_dir)
    annotations = []
    for sample in corpus.train + corpus.test:
        write_image(root / "images" / f"{sample.image_id}.png", sample.image)
        write_mask(root / "masks" / f"{sample.image_id}.png", sample.gt)
        if sample.prompt_mask is not None:
            write_mask(root / "promptmasks" / f"{sample.image_id}.png", sample.prompt_mask)
        if sample.annotation is not None:
            annotations.append(sample.annotation.to_dict())

    (root / "annotations.json").write_text(json.dumps(annotations, indent=1))
    manifest = {
        "version": MANIFEST_VERSION,
        "config": corpus.config.to_dict() if corpus.config else None,
        "splits": {"train": [s.image_id for s in corpus.train], "test": [s.image_id for s in corpus.test]},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info("Wrote %d samples to %s", len(corpus.train) + len(corpus.test), root)
    return root


def _find(directory: Path, stem: str) -> Optional[Path]:
    for suffix in IMAGE_SUFFIXES:
        candidate = directory / f"{stem}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def _load_annotations(path: Path) -> Dict[str, PointAnnotation]:
    if not path.is_file():
        return {}
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"unreadable annotations ({e})", str(path)) from e
    if isinstance(data, dict):
        data = [{"image_id": k, **v} for k, v in data.items()]
    try:
        return {a.image_id: a for a in (PointAnnotation.from_dict(d) for d in data)}
    except InvalidInputError as e:
        raise IngestionError(f"malformed annotations ({e})", str(path)) from e


def load_real_dataset(root: PathLike) -> List[Sample]:
    """
    Read images/, masks/, annotations.json and optional promptmasks/.

    Images without a mask are skipped with a warning. Samples without a prompt
    mask are kept; only topological labels can be built for them.
    """
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        logger.warning("No images/ directory under %s", root)
        return []
    annotations = _load_annotations(root / "annotations.json")

    samples = []
    missing_prompts = 0
    for path in sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        stem = path.stem
        mask_path = _find(root / "masks", stem)
        if mask_path is None:
            logger.warning("Skipping %s: no mask in %s", path.name, root / "masks")
            continue
        image = read_image(path)
        gt = read_mask(mask_path)
        if image.shape != gt.shape:
            raise IngestionError(f"mask shape {gt.shape} differs from image shape {image.shape}", str(mask_path))

        prompt_path = _find(root / "promptmasks", stem)
        prompt = read_mask(prompt_path) if prompt_path is not None else None
        if prompt is None:
            missing_prompts += 1
        annotation = annotations.get(stem)
        if annotation is None:
            logger.warning("No point annotation for %s", stem)
        samples.append(Sample(image_id=stem, image=image, gt=gt, annotation=annotation, prompt_mask=prompt))

    if missing_prompts:
        logger.warning("%d of %d images have no prompt mask; only label mode T can use them",
                       missing_prompts, len(samples))
    logger.info("Loaded %d samples from %s", len(samples), root)
    return samples


def load_corpus(root: PathLike) -> Corpus:
    """Load a corpus directory; without a manifest every sample lands in the test split."""
    root = Path(root)
    samples = load_real_dataset(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        return Corpus(train=[], test=samples)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"unreadable manifest ({e})", str(manifest_path)) from e

    by_id = {s.image_id: s for s in samples}
    splits = manifest.get("splits", {})
    config = SynthConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    return Corpus(
        train=[by_id[i] for i in splits.get("train", []) if i in by_id],
        test=[by_id[i] for i in splits.get("test", []) if i in by_id],
        config=config,
    )


def images_only(samples: Sequence[Sample]) -> Tuple[List[np.ndarray], List[np.ndarray], List[str]]:
    """Strip annotations and prompt masks: what inference is allowed to see."""
    return [s.image for s in samples], [s.gt for s in samples], [s.image_id for s in samples]
