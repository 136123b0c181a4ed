"""Central finite-difference verification of the analytic loss and network gradients."""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import losskernels as lk
from . import tinynet
from .errors import GradientCheckError, InvalidInputError
from .labelgen import LabelBundle

logger = logging.getLogger(__name__)

KERNEL_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
NETWORK_COORDS = 20

CHECK_WEIGHTS = lk.LossWeights(samples_per_class=8)

Index = Tuple[int, ...]


def finite_diff_check(fn: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                      h: float = 1e-5, atol: float = 1e-8,
                      coords: Optional[Iterable[Index]] = None) -> float:
    """
    Max relative error |a - n| / max(1e-12, |a| + |n|) between analytic and
    central-difference gradients. x is perturbed in place and restored, so fn
    may read it through a closure. Differences below atol count as agreement.
    """
    if x.dtype != np.float64:
        raise InvalidInputError("finite differences need a float64 array")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise InvalidInputError(f"gradient shape {analytic.shape} does not match input {x.shape}")

    worst = 0.0
    for idx in (coords if coords is not None else np.ndindex(x.shape)):
        original = x[idx]
        x[idx] = original + h
        up = fn(x)
        x[idx] = original - h
        down = fn(x)
        x[idx] = original
        if not (np.isfinite(up) and np.isfinite(down)):
            raise GradientCheckError(f"non-finite loss at coordinate {idx}")
        numeric = (up - down) / (2.0 * h)
        diff = abs(analytic[idx] - numeric)
        if diff < atol:
            continue
        worst = max(worst, diff / max(1e-12, abs(analytic[idx]) + abs(numeric)))
    return worst


# --- random instances ------------------------------------------------------

def _distinct_prediction(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    """Probabilities in (0.05, 0.95) with well separated values, so no max is near a tie."""
    n = shape[0] * shape[1]
    levels = rng.permutation(n) + rng.uniform(0.25, 0.75, size=n)
    return (0.05 + 0.9 * levels / n).reshape(shape)


def _box_bundle(rng: np.random.Generator, size: int = 8, side: int = 4) -> LabelBundle:
    """A box location label in one corner band; foreground = box, background = complement."""
    r, c = (int(v) for v in rng.integers(0, 2, size=2))
    loc = np.zeros((size, size), dtype=bool)
    loc[r:r + side, c:c + side] = True
    return LabelBundle(location=loc, foreground=loc.copy(), background=~loc)


def _check_projection(rng, h, atol) -> float:
    m = _distinct_prediction(rng, (8, 8))
    loc = _box_bundle(rng).location
    res = lk.projection_loss(m, loc)
    return finite_diff_check(lambda x: lk.projection_loss(x, loc).value, m, res.grad_prediction, h, atol)


def _check_topo(rng, h, atol) -> float:
    m = rng.uniform(0.05, 0.95, size=(8, 8))
    fg = rng.random((8, 8)) < 0.5
    fg[rng.integers(8), rng.integers(8)] = True
    res = lk.topo_loss(m, fg)
    return finite_diff_check(lambda x: lk.topo_loss(x, fg).value, m, res.grad_prediction, h, atol)


def _check_alignment(rng, h, atol) -> float:
    m = _distinct_prediction(rng, (8, 8))
    b = _box_bundle(rng)
    fg = b.foreground & (rng.random((8, 8)) < 0.7)
    res = lk.alignment_loss(m, b.location, fg)
    return finite_diff_check(lambda x: lk.alignment_loss(x, b.location, fg).value, m, res.grad_prediction, h, atol)


def _check_contrastive(rng, h, atol) -> float:
    F = rng.normal(size=(4, 8, 8))
    b = _box_bundle(rng)
    seed = int(rng.integers(2 ** 31))
    res = lk.contrastive_loss(F, b.foreground, b.background, CHECK_WEIGHTS, np.random.default_rng(seed))
    fn = lambda x: lk.contrastive_loss(x, b.foreground, b.background, CHECK_WEIGHTS,
                                       np.random.default_rng(seed)).value
    return finite_diff_check(fn, F, res.grad_features, h, atol)


def _check_correlation_consistency(rng, h, atol) -> float:
    r_f = rng.uniform(0.05, 0.95, size=(8, 8))
    r_b = rng.uniform(0.05, 0.95, size=(8, 8))
    res = lk.correlation_consistency_loss(r_f, r_b)
    e_f = finite_diff_check(lambda x: lk.correlation_consistency_loss(x, r_b).value, r_f, res.partials["r_f"], h, atol)
    e_b = finite_diff_check(lambda x: lk.correlation_consistency_loss(r_f, x).value, r_b, res.partials["r_b"], h, atol)
    return max(e_f, e_b)


def _check_correlation_seg(rng, h, atol) -> float:
    m = rng.uniform(0.05, 0.95, size=(8, 8))
    m_c = rng.uniform(0.0, 1.0, size=(4, 4))
    res = lk.correlation_seg_loss(m, m_c)
    e_m = finite_diff_check(lambda x: lk.correlation_seg_loss(x, m_c).value, m, res.grad_prediction, h, atol)
    e_c = finite_diff_check(lambda x: lk.correlation_seg_loss(m, x).value, m_c, res.partials["m_c"], h, atol)
    return max(e_m, e_c)


def _check_prototype_correlation(rng, h, atol) -> float:
    F = rng.normal(size=(4, 8, 8))
    b = _box_bundle(rng)
    m = rng.uniform(0.05, 0.95, size=(8, 8))
    res = lk.prototype_correlation_loss(F, m, b.foreground, b.background)
    e_F = finite_diff_check(lambda x: lk.prototype_correlation_loss(x, m, b.foreground, b.background).value,
                            F, res.grad_features, h, atol)
    e_m = finite_diff_check(lambda x: lk.prototype_correlation_loss(F, x, b.foreground, b.background).value,
                            m, res.grad_prediction, h, atol)
    return max(e_F, e_m)


def _check_total(rng, h, atol) -> float:
    F = rng.normal(size=(4, 8, 8))
    m = _distinct_prediction(rng, (8, 8))
    b = _box_bundle(rng)
    seed = int(rng.integers(2 ** 31))

    def value(m_, F_):
        return lk.total_loss(m_, F_, b, CHECK_WEIGHTS, np.random.default_rng(seed)).value

    res = lk.total_loss(m, F, b, CHECK_WEIGHTS, np.random.default_rng(seed))
    e_F = finite_diff_check(lambda x: value(m, x), F, res.grad_features, h, atol)
    e_m = finite_diff_check(lambda x: value(x, F), m, res.grad_prediction, h, atol)
    return max(e_F, e_m)


def _check_network(rng, h, atol, coords_checked: int = NETWORK_COORDS) -> float:
    """d(total loss)/d(parameter) through the network on randomly chosen parameters."""
    params = tinynet.init_params(int(rng.integers(2 ** 31)))
    image = rng.uniform(0.0, 1.0, size=(8, 8))
    loc = np.zeros((8, 8), dtype=bool)
    loc[:4, :4] = True
    bundle = LabelBundle(location=loc, foreground=loc.copy(), background=~loc)
    seed = int(rng.integers(2 ** 31))

    def value(_x=None) -> float:
        F, m = tinynet.forward(image, params)
        return lk.total_loss(m, F, bundle, CHECK_WEIGHTS, np.random.default_rng(seed)).value

    cache = tinynet.ForwardCache(image=image)
    F, m = tinynet.forward(image, params, cache)
    res = lk.total_loss(m, F, bundle, CHECK_WEIGHTS, np.random.default_rng(seed))
    grads = tinynet.backward(cache, params, res.grad_prediction, res.grad_features)

    coords = tinynet.flat_index(params)
    chosen = rng.choice(len(coords), size=min(coords_checked, len(coords)), replace=False)
    by_tensor: Dict[str, List[Index]] = {}
    for i in sorted(chosen):
        name, idx = coords[i]
        by_tensor.setdefault(name, []).append(idx)

    worst = 0.0
    for name, idxs in by_tensor.items():
        worst = max(worst, finite_diff_check(value, params[name], grads[name], h, atol, coords=idxs))
    return worst


KERNEL_CHECKS: Dict[str, Callable[..., float]] = {
    "projection": _check_projection,
    "topo": _check_topo,
    "alignment": _check_alignment,
    "contrastive": _check_contrastive,
    "correlation_consistency": _check_correlation_consistency,
    "correlation_seg": _check_correlation_seg,
    "prototype_correlation": _check_prototype_correlation,
    "total": _check_total,
}
CHECK_NAMES = tuple(KERNEL_CHECKS) + ("network",)


@dataclass
class CheckResult:
    """Outcome of one named check over all its random instances."""

    name: str
    max_error: float
    tolerance: float
    instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["passed"] = self.passed
        return data


class GradientChecker:
    """Runs the named finite-difference checks."""

    def __init__(self, seed: int = 0, instances: int = 10, h: float = 1e-5, atol: float = 1e-8):
        if instances < 1:
            raise InvalidInputError("instances must be at least 1")
        self.seed = seed
        self.instances = instances
        self.h = h
        self.atol = atol

    def check(self, name: str) -> CheckResult:
        if name not in CHECK_NAMES:
            raise InvalidInputError(f"unknown gradient check {name!r}; expected one of {CHECK_NAMES}")
        fn = KERNEL_CHECKS.get(name, _check_network)
        tolerance = NETWORK_TOLERANCE if name == "network" else KERNEL_TOLERANCE
        instances = 1 if name == "network" else self.instances

        start = time.perf_counter()
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([self.seed, CHECK_NAMES.index(name), i])
            worst = max(worst, fn(rng, self.h, self.atol))
        result = CheckResult(name, worst, tolerance, instances, time.perf_counter() - start)
        logger.debug("gradcheck %s: max rel error %.3e (%s)", name, worst, "ok" if result.passed else "FAIL")
        return result

    def run(self, names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """Run the selected checks; failures to evaluate are collected, not raised."""
        results: Dict[str, Any] = {"checks": [], "errors": [], "passed": True}
        for name in names or CHECK_NAMES:
            try:
                result = self.check(name)
            except GradientCheckError as e:
                results["errors"].append(f"{name}: {e}")
                results["passed"] = False
                continue
            results["checks"].append(result)
            results["passed"] = results["passed"] and result.passed
        return results
