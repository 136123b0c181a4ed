import logging
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import IngestionError, InvalidInputError

try:
    from rich.logging import RichHandler
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

PathLike = Union[str, Path]

# Masks are stored 0/255 and thresholded here on read.
MASK_THRESHOLD = 128


def as_mask(arr, name: str = "mask") -> np.ndarray:
    """Validate a 2-D binary raster and return it as a bool array."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise InvalidInputError(f"{name} must contain only 0 and 1")
        a = a.astype(bool)
    return a


def check_same_shape(*arrays: np.ndarray, names: Sequence[str] = ()) -> None:
    """Raise InvalidInputError unless all arrays share their trailing 2-D shape."""
    shapes = [tuple(a.shape[-2:]) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(f"{n}={s}" for n, s in zip(names, shapes)) if names else str(shapes)
        raise InvalidInputError(f"dimension mismatch: {label}")


def pool_factor(fine_shape: Sequence[int], coarse_shape: Sequence[int]) -> int:
    """Integer scale between an image grid and a feature grid."""
    fh, fw = fine_shape[-2:]
    ch, cw = coarse_shape[-2:]
    if ch == 0 or cw == 0 or fh % ch or fw % cw or fh // ch != fw // cw:
        raise InvalidInputError(f"grid {tuple(fine_shape[-2:])} is not an integer multiple of {tuple(coarse_shape[-2:])}")
    return fh // ch


def downsample_mask(mask: np.ndarray, factor: int, mode: str = "min") -> np.ndarray:
    """Block-pool a binary mask: 'min' keeps cells fully inside, 'max' keeps any overlap."""
    mask = as_mask(mask)
    if factor == 1:
        return mask.copy()
    h, w = mask.shape
    if h % factor or w % factor:
        raise InvalidInputError(f"mask {mask.shape} not divisible by {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    if mode == "min":
        return blocks.all(axis=(1, 3))
    if mode == "max":
        return blocks.any(axis=(1, 3))
    raise InvalidInputError(f"unknown pooling mode {mode!r}")


def upsample_nearest(arr: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling along the last two axes."""
    if factor == 1:
        return arr
    return np.repeat(np.repeat(arr, factor, axis=-2), factor, axis=-1)


def sum_pool(arr: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of upsample_nearest: sum over factor x factor blocks."""
    if factor == 1:
        return arr
    *lead, h, w = arr.shape
    return arr.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, *keys), stable across runs and thread schedules."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def read_mask(path: PathLike) -> np.ndarray:
    """Read an 8-bit single-channel PNG/PGM mask; foreground where value >= 128."""
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("L"))
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"unreadable mask ({e})", str(path)) from e
    return data >= MASK_THRESHOLD


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    """Write a mask as 0/255 8-bit; the format follows the suffix (.png or .pgm)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_mask(mask).astype(np.uint8) * 255).save(path)


def read_image(path: PathLike) -> np.ndarray:
    """Read any PIL-supported image as grayscale float64 in [0, 1]."""
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("L"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"unreadable image ({e})", str(path)) from e
    return data / 255.0


def write_image(path: PathLike, image: np.ndarray) -> None:
    """Write a [0, 1] grayscale image as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def setup_logging(verbose: bool = False, use_rich: bool = True) -> None:
    """Attach one handler to the package logger."""
    logger = logging.getLogger("nodseg")
    logger.handlers.clear()
    if use_rich and RICH_AVAILABLE:
        handler: logging.Handler = RichHandler(show_path=verbose, markup=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
    else:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
