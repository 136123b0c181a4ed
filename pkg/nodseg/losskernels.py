"""
Training losses with hand-written gradients.

Predictions m are H x W probability maps, features F are C x H' x W' with
H = s * H' for an integer s. Label masks may be given at either resolution;
foreground/background labels are min-pooled onto the feature grid so a feature
cell counts only when every pixel it covers does.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp, softmax

from .errors import ConfigError, DegenerateLabelError, InvalidInputError, MissingPrototypeError
from .utils import as_mask, check_same_shape, downsample_mask, pool_factor, sum_pool, upsample_nearest

logger = logging.getLogger(__name__)

EPS_PROB = 1e-7
EPS_NORM = 1e-8

LOSS_TERMS = ("alignment", "contrastive", "correlation")
TOPO_FORMS = ("bce", "literal")


@dataclass
class LossWeights:
    """Weights of the overall loss and contrastive sampling parameters."""

    lam: float = 0.8
    beta: float = 0.8
    tau: float = 0.07
    scales: Tuple[int, ...] = (1, 3)
    samples_per_class: int = 64

    def __post_init__(self):
        self.scales = tuple(int(k) for k in self.scales)
        if not self.scales:
            raise ConfigError("at least one patch scale is required")
        if any(k < 1 or k % 2 == 0 for k in self.scales):
            raise ConfigError(f"patch scales must be odd and positive, got {self.scales}")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return {"lambda": self.lam, "beta": self.beta, "tau": self.tau,
                "scales": list(self.scales), "samples_per_class": self.samples_per_class}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossWeights":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {"lam", "beta", "tau", "scales", "samples_per_class"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossResult:
    """Loss value, gradients for its differentiable inputs, and bookkeeping."""

    value: float
    grad_prediction: Optional[np.ndarray] = None
    grad_features: Optional[np.ndarray] = None
    skipped: Set[str] = field(default_factory=set)
    terms: Dict[str, float] = field(default_factory=dict)
    partials: Dict[str, np.ndarray] = field(default_factory=dict)


def _as_prediction(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"prediction must be H x W, got shape {m.shape}")
    return m


def _as_features(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.shape[0] < 1:
        raise InvalidInputError(f"features must be C x H x W, got shape {F.shape}")
    return F


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, EPS_PROB, 1.0 - EPS_PROB)


def _clamp_passes(p: np.ndarray) -> np.ndarray:
    """Where the clamp is the identity (its derivative is 1)."""
    return (p > EPS_PROB) & (p < 1.0 - EPS_PROB)


def to_feature_grid(mask: np.ndarray, grid: Sequence[int], mode: str = "min") -> np.ndarray:
    """Bring a label mask onto the feature grid, pooling when it is finer."""
    mask = as_mask(mask)
    if mask.shape == tuple(grid[-2:]):
        return mask
    return downsample_mask(mask, pool_factor(mask.shape, grid), mode)


# --- alignment -------------------------------------------------------------

def project_axes(a) -> Tuple[np.ndarray, np.ndarray]:
    """Column maxima p_x (length W) and row maxima p_y (length H)."""
    a = np.asarray(a, dtype=np.float64)
    return a.max(axis=0), a.max(axis=1)


def _projection_dice(pred: np.ndarray, label: np.ndarray) -> Tuple[float, np.ndarray]:
    inter = np.minimum(pred, label).sum()
    total = pred.sum() + label.sum()
    value = 1.0 - 2.0 * inter / total
    d_inter = (pred < label).astype(np.float64)
    return float(value), -2.0 * (d_inter * total - inter) / total ** 2


def projection_loss(m, G_l) -> LossResult:
    """Dice between the axis projections of the prediction and of the location label."""
    m = _as_prediction(m)
    loc = as_mask(G_l, "G_l")
    check_same_shape(m, loc, names=("m", "G_l"))
    if not loc.any():
        raise DegenerateLabelError("location label is empty")

    px_pred, py_pred = project_axes(m)
    px, py = project_axes(loc.astype(np.float64))
    vx, gx = _projection_dice(px_pred, px)
    vy, gy = _projection_dice(py_pred, py)

    # max routes its gradient to the first arg-max cell
    grad = np.zeros_like(m)
    h, w = m.shape
    grad[np.argmax(m, axis=0), np.arange(w)] += gx
    grad[np.arange(h), np.argmax(m, axis=1)] += gy
    return LossResult(vx + vy, grad_prediction=grad, terms={"proj_x": vx, "proj_y": vy})


def topo_loss(m, X_f, form: str = "bce") -> LossResult:
    """Foreground continuity term on the high-confidence foreground."""
    m = _as_prediction(m)
    fg = as_mask(X_f, "X_f")
    check_same_shape(m, fg, names=("m", "X_f"))
    if form not in TOPO_FORMS:
        raise ConfigError(f"unknown topo form {form!r}")

    count = int(fg.sum())
    if count == 0:
        return LossResult(0.0, grad_prediction=np.zeros_like(m), skipped={"topo"})

    if form == "bce":
        mc = _clamp(m)
        value = -np.log(mc[fg]).sum() / count
        grad = np.where(fg & _clamp_passes(m), -1.0 / (mc * count), 0.0)
        return LossResult(float(value), grad_prediction=grad)

    # printed form, label clamped inside the logarithms
    target = _clamp(fg.astype(np.float64))
    covered = m * fg
    per_pixel = -(covered * np.log(target) + (1.0 - covered) * np.log(1.0 - target))
    grad = fg * (np.log(1.0 - target) - np.log(target)) / m.size
    return LossResult(float(per_pixel.mean()), grad_prediction=grad)


def alignment_loss(m, G_l, X_f, topo_form: str = "bce") -> LossResult:
    """Projection loss plus topological continuity loss."""
    proj = projection_loss(m, G_l)
    topo = topo_loss(m, X_f, topo_form)
    return LossResult(
        proj.value + topo.value,
        grad_prediction=proj.grad_prediction + topo.grad_prediction,
        skipped=set(topo.skipped),
        terms={"projection": proj.value, "topo": topo.value},
    )


def dense_bce_loss(m, target) -> LossResult:
    """Pixel-mean binary cross-entropy against a dense pseudo-label."""
    m = _as_prediction(m)
    t = as_mask(target, "target").astype(np.float64)
    check_same_shape(m, t, names=("m", "target"))
    mc = _clamp(m)
    value = -(t * np.log(mc) + (1.0 - t) * np.log(1.0 - mc)).mean()
    grad = -(t / mc - (1.0 - t) / (1.0 - mc)) / m.size * _clamp_passes(m)
    return LossResult(float(value), grad_prediction=grad)


# --- contrastive -----------------------------------------------------------

def _eligible_centres(region: np.ndarray, k: int) -> np.ndarray:
    """Cells whose whole k x k window lies inside the region (and the image)."""
    if k < 1 or k % 2 == 0:
        raise InvalidInputError(f"patch size must be odd and positive, got {k}")
    if k == 1:
        return region
    return ndimage.binary_erosion(region, structure=np.ones((k, k), dtype=bool), border_value=0)


def _sample_centres(region: np.ndarray, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    flat = np.flatnonzero(_eligible_centres(region, k))
    if flat.size == 0:
        return np.empty((0, 2), dtype=np.intp)
    chosen = rng.choice(flat, size=min(n, flat.size), replace=False)
    return np.stack(np.unravel_index(chosen, region.shape), axis=1)


def _patch_means(F: np.ndarray, centres: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    if len(centres) == 0:
        return np.empty((0, F.shape[0]))
    return np.stack([F[:, y - r:y + r + 1, x - r:x + r + 1].mean(axis=(1, 2)) for y, x in centres])


def _scatter_patches(grad: np.ndarray, centres: np.ndarray, g_v: np.ndarray, k: int) -> None:
    r = k // 2
    for (y, x), g in zip(centres, g_v):
        grad[:, y - r:y + r + 1, x - r:x + r + 1] += g[:, None, None] / (k * k)


def _normalize(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / (norms + EPS_NORM), norms


def _normalize_backward(v: np.ndarray, norms: np.ndarray, g_q: np.ndarray) -> np.ndarray:
    denom = norms + EPS_NORM
    safe = np.where(norms > 0, norms, 1.0)
    dot = (v * g_q).sum(axis=-1, keepdims=True)
    return g_q / denom - v * dot / (denom ** 2 * safe)


def sample_patch_embeddings(F, region, k: int, n: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Up to n L2-normalized k x k patch means centred inside the region."""
    F = _as_features(F)
    if n < 1:
        raise InvalidInputError("sample count must be at least 1")
    centres = _sample_centres(to_feature_grid(region, F.shape[1:]), k, n, rng)
    q, _ = _normalize(_patch_means(F, centres, k))
    return list(q)


def contrastive_loss(F, X_f, X_b, w: LossWeights, rng: np.random.Generator) -> LossResult:
    """Multi-scale InfoNCE: foreground anchors/positives against background negatives."""
    F = _as_features(F)
    fg = to_feature_grid(X_f, F.shape[1:])
    bg = to_feature_grid(X_b, F.shape[1:])
    n = w.samples_per_class

    # sampling order is fixed so a re-seeded rng reproduces it exactly
    drawn = []
    skipped = set()
    for k in w.scales:
        anchors = _sample_centres(fg, k, n, rng)
        positives = _sample_centres(fg, k, n, rng)
        negatives = _sample_centres(bg, k, n, rng)
        if len(anchors) == 0 or len(negatives) == 0:
            skipped.add(f"contrastive@k{k}")
            continue
        drawn.append((k, anchors, positives, negatives))
    if not drawn:
        return LossResult(0.0, skipped=skipped | {"contrastive"})

    grad = np.zeros_like(F)
    value = 0.0
    terms = {}
    for k, anchors, positives, negatives in drawn:
        v_a, v_p, v_n = (_patch_means(F, c, k) for c in (anchors, positives, negatives))
        (q_a, n_a), (q_p, n_p), (q_n, n_n) = _normalize(v_a), _normalize(v_p), _normalize(v_n)

        logits = np.concatenate([(q_a * q_p).sum(axis=1, keepdims=True), q_a @ q_n.T], axis=1) / w.tau
        per_anchor = logsumexp(logits, axis=1) - logits[:, 0]
        terms[f"k{k}"] = float(per_anchor.mean())
        value += per_anchor.mean() / len(drawn)

        probs = softmax(logits, axis=1)
        coef = 1.0 / (len(anchors) * len(drawn) * w.tau)
        pull = probs[:, :1] - 1.0
        g_a = coef * (pull * q_p + probs[:, 1:] @ q_n)
        g_p = coef * pull * q_a
        g_n = coef * probs[:, 1:].T @ q_a
        for centres, v, norms, g_q in ((anchors, v_a, n_a, g_a), (positives, v_p, n_p, g_p), (negatives, v_n, n_n, g_n)):
            _scatter_patches(grad, centres, _normalize_backward(v, norms, g_q), k)

    return LossResult(float(value), grad_features=grad, skipped=skipped, terms=terms)


# --- prototype correlation -------------------------------------------------

def _region_mean(F: np.ndarray, region: np.ndarray, kind: str) -> Tuple[np.ndarray, int]:
    count = int(region.sum())
    if count == 0:
        raise MissingPrototypeError(f"{kind} region is empty at feature resolution")
    return (F * region).sum(axis=(1, 2)) / count, count


def prototypes(F, X_f, X_b) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized masked average of the features over foreground and background."""
    F = _as_features(F)
    u_f, _ = _region_mean(F, to_feature_grid(X_f, F.shape[1:]), "foreground")
    u_b, _ = _region_mean(F, to_feature_grid(X_b, F.shape[1:]), "background")
    return _normalize(u_f)[0], _normalize(u_b)[0]


def correlation_map(F, P) -> np.ndarray:
    """Rectified cosine similarity of every feature vector to a prototype."""
    F = _as_features(F)
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (F.shape[0],):
        raise InvalidInputError(f"prototype has {P.shape} entries, features have {F.shape[0]} channels")
    dots = np.einsum("c,chw->hw", P, F)
    denom = np.linalg.norm(F, axis=0) * np.linalg.norm(P) + EPS_NORM
    return np.maximum(0.0, dots / denom)


def _correlation_backward(F: np.ndarray, P: np.ndarray, g_r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dots = np.einsum("c,chw->hw", P, F)
    f_norm = np.linalg.norm(F, axis=0)
    p_norm = np.linalg.norm(P)
    denom = f_norm * p_norm + EPS_NORM
    g = np.where(dots > 0, g_r, 0.0)

    along_p = g / denom
    along_f = g * dots * p_norm / (np.where(f_norm > 0, f_norm, 1.0) * denom ** 2)
    g_F = P[:, None, None] * along_p - F * along_f
    shrink = (g * dots * f_norm / denom ** 2).sum() / (p_norm if p_norm > 0 else 1.0)
    g_P = np.einsum("chw,hw->c", F, along_p) - P * shrink
    return g_F, g_P


def _symmetric_bce(a_raw: np.ndarray, b_raw: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    a, b = _clamp(a_raw), _clamp(b_raw)
    n = a.size
    per_pixel = (-0.5 * (a * np.log(b) + (1 - a) * np.log(1 - b))
                 - 0.5 * (b * np.log(a) + (1 - b) * np.log(1 - a)))
    d_a = -0.5 * (np.log(b) - np.log(1 - b) + b / a - (1 - b) / (1 - a)) / n
    d_b = -0.5 * (a / b - (1 - a) / (1 - b) + np.log(a) - np.log(1 - a)) / n
    return float(per_pixel.mean()), d_a * _clamp_passes(a_raw), d_b * _clamp_passes(b_raw)


def correlation_consistency_loss(r_f, r_b) -> LossResult:
    """Symmetric cross-entropy between r_f and the complement of r_b."""
    r_f = np.asarray(r_f, dtype=np.float64)
    r_b = np.asarray(r_b, dtype=np.float64)
    check_same_shape(r_f, r_b, names=("r_f", "r_b"))
    value, d_a, d_b = _symmetric_bce(r_f, 1.0 - r_b)
    return LossResult(value, partials={"r_f": d_a, "r_b": -d_b})


def correlation_seg_loss(m, m_c) -> LossResult:
    """Soft dice between the prediction and the nearest-upsampled fused correlation map."""
    m = _as_prediction(m)
    m_c = np.asarray(m_c, dtype=np.float64)
    s = pool_factor(m.shape, m_c.shape)
    up = upsample_nearest(m_c, s)

    total = m.sum() + up.sum()
    if total == 0:
        return LossResult(0.0, grad_prediction=np.zeros_like(m), partials={"m_c": np.zeros_like(m_c)})
    inter = (m * up).sum()
    value = 1.0 - 2.0 * inter / total
    g_m = -2.0 * (up * total - inter) / total ** 2
    g_up = -2.0 * (m * total - inter) / total ** 2
    return LossResult(float(value), grad_prediction=g_m, partials={"m_c": sum_pool(g_up, s)})


def prototype_correlation_loss(F, m, X_f, X_b) -> LossResult:
    """Complementary-consistency term plus correlation-to-prediction dice, through the prototypes."""
    F = _as_features(F)
    m = _as_prediction(m)
    pool_factor(m.shape, F.shape)
    fg = to_feature_grid(X_f, F.shape[1:])
    bg = to_feature_grid(X_b, F.shape[1:])
    try:
        u_f, count_f = _region_mean(F, fg, "foreground")
        u_b, count_b = _region_mean(F, bg, "background")
    except MissingPrototypeError as e:
        logger.debug("Correlation loss skipped: %s", e)
        return LossResult(0.0, skipped={"correlation"})

    P_f, norm_f = _normalize(u_f)
    P_b, norm_b = _normalize(u_b)
    r_f = correlation_map(F, P_f)
    r_b = correlation_map(F, P_b)
    fe = correlation_consistency_loss(r_f, r_b)
    m_c = 0.5 * (r_f + (1.0 - r_b))
    seg = correlation_seg_loss(m, m_c)

    g_rf = fe.partials["r_f"] + 0.5 * seg.partials["m_c"]
    g_rb = fe.partials["r_b"] - 0.5 * seg.partials["m_c"]
    g_F_f, g_P_f = _correlation_backward(F, P_f, g_rf)
    g_F_b, g_P_b = _correlation_backward(F, P_b, g_rb)
    g_u_f = _normalize_backward(u_f, norm_f, g_P_f)
    g_u_b = _normalize_backward(u_b, norm_b, g_P_b)
    grad_F = (g_F_f + g_F_b
              + g_u_f[:, None, None] * fg / count_f
              + g_u_b[:, None, None] * bg / count_b)

    return LossResult(
        fe.value + seg.value,
        grad_prediction=seg.grad_prediction,
        grad_features=grad_F,
        terms={"corr_fe": fe.value, "corr_seg": seg.value},
        partials={"r_f": r_f, "r_b": r_b, "m_c": m_c},
    )


# --- overall ---------------------------------------------------------------

def _accumulate(acc: Optional[np.ndarray], grad: Optional[np.ndarray], scale: float) -> Optional[np.ndarray]:
    if grad is None:
        return acc
    return scale * grad if acc is None else acc + scale * grad


def total_loss(m, F, bundle, w: LossWeights, rng: np.random.Generator,
               terms: Iterable[str] = LOSS_TERMS, topo_form: str = "bce") -> LossResult:
    """alignment + lambda * contrastive + beta * correlation over the enabled terms."""
    enabled = set(terms)
    unknown = enabled - set(LOSS_TERMS)
    if unknown:
        raise ConfigError(f"unknown loss terms: {sorted(unknown)}")

    components = {name: 0.0 for name in LOSS_TERMS}
    grad_m: Optional[np.ndarray] = None
    grad_F: Optional[np.ndarray] = None
    skipped: Set[str] = set()

    if "alignment" in enabled:
        part = alignment_loss(m, bundle.location, bundle.foreground, topo_form)
        components["alignment"] = part.value
        grad_m = _accumulate(grad_m, part.grad_prediction, 1.0)
        skipped |= part.skipped
    if "contrastive" in enabled:
        part = contrastive_loss(F, bundle.foreground, bundle.background, w, rng)
        components["contrastive"] = part.value
        grad_F = _accumulate(grad_F, part.grad_features, w.lam)
        skipped |= part.skipped
    if "correlation" in enabled:
        part = prototype_correlation_loss(F, m, bundle.foreground, bundle.background)
        components["correlation"] = part.value
        grad_m = _accumulate(grad_m, part.grad_prediction, w.beta)
        grad_F = _accumulate(grad_F, part.grad_features, w.beta)
        skipped |= part.skipped

    value = components["alignment"] + w.lam * components["contrastive"] + w.beta * components["correlation"]
    return LossResult(value, grad_prediction=grad_m, grad_features=grad_F, skipped=skipped, terms=components)
