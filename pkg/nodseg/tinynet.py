"""
Small encoder-decoder segmentation network with a hand-written backward pass.

Layout (input H x W, H and W divisible by 4):

    enc1  3x3  1 -> 8          H
    enc2  3x3  8 -> 16  /2     H/2
    enc3  3x3 16 -> 32  /2     H/4
    dec2  3x3 48 -> 16         H/2   (up(enc3) ++ enc2)
    feat  1x1 16 -> 16         H/2   feature map F
    dec1  3x3 24 -> 16         H     (up(dec2) ++ enc1)
    seg   1x1 16 -> 1          H     bounded logistic -> m

Blocks compute silu(scale * (conv(x) + bias)); heads are plain convolutions.
The segmentation logit z is squashed as sigmoid(B * tanh(z / B)), so m stays
within [sigmoid(-B), sigmoid(B)] and its derivative never underflows to zero.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import IngestionError, InvalidInputError
from .utils import PathLike, sum_pool, upsample_nearest

logger = logging.getLogger(__name__)

NetParams = Dict[str, np.ndarray]

CHECKPOINT_VERSION = 1
FEATURE_STRIDE = 2
LOGIT_BOUND = 10.0


class LayerSpec(NamedTuple):
    name: str
    cin: int
    cout: int
    k: int
    stride: int
    block: bool


ARCHITECTURE: Tuple[LayerSpec, ...] = (
    LayerSpec("enc1", 1, 8, 3, 1, True),
    LayerSpec("enc2", 8, 16, 3, 2, True),
    LayerSpec("enc3", 16, 32, 3, 2, True),
    LayerSpec("dec2", 48, 16, 3, 1, True),
    LayerSpec("feat", 16, 16, 1, 1, False),
    LayerSpec("dec1", 24, 16, 3, 1, True),
    LayerSpec("seg", 16, 1, 1, 1, False),
)
LAYERS = {spec.name: spec for spec in ARCHITECTURE}
FEATURE_CHANNELS = LAYERS["feat"].cout


def parameter_count(arch: Tuple[LayerSpec, ...] = ARCHITECTURE) -> int:
    """Closed-form count: kernel + bias, plus a per-channel scale for blocks."""
    return sum(s.cout * s.cin * s.k * s.k + s.cout * (2 if s.block else 1) for s in arch)


def parameter_shapes(arch: Tuple[LayerSpec, ...] = ARCHITECTURE) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for s in arch:
        shapes[f"{s.name}.w"] = (s.cout, s.cin, s.k, s.k)
        shapes[f"{s.name}.b"] = (s.cout,)
        if s.block:
            shapes[f"{s.name}.g"] = (s.cout,)
    return shapes


def init_params(seed: int) -> NetParams:
    """He fan-in initialization; zero biases and unit scales."""
    rng = np.random.default_rng(seed)
    params: NetParams = {}
    for name, shape in parameter_shapes().items():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


# --- primitives ------------------------------------------------------------

def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    return sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Same-padded cross-correlation: x is Cin x H x W, w is Cout x Cin x k x k."""
    return np.tensordot(w, _windows(x, w.shape[-1], stride), axes=([1, 2, 3], [0, 3, 4]))


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d with respect to its input and its kernel."""
    k = w.shape[-1]
    pad = k // 2
    grad_w = np.tensordot(grad, _windows(x, k, stride), axes=([1, 2], [1, 2]))
    dwin = np.tensordot(w, grad, axes=([0], [0]))
    _, ho, wo = grad.shape
    dxp = np.zeros((x.shape[0], x.shape[1] + 2 * pad, x.shape[2] + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[:, i, j]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad]
    return dxp, grad_w


def silu(a: np.ndarray) -> np.ndarray:
    return a * expit(a)


def silu_grad(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


# --- network ---------------------------------------------------------------

@dataclass
class ForwardCache:
    """Intermediates kept by a training forward pass."""

    image: np.ndarray
    inputs: Dict[str, np.ndarray] = field(default_factory=dict)
    pre: Dict[str, np.ndarray] = field(default_factory=dict)
    scaled: Dict[str, np.ndarray] = field(default_factory=dict)
    squash: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None


def _layer(params: NetParams, name: str, x: np.ndarray, cache: Optional[ForwardCache]) -> np.ndarray:
    spec = LAYERS[name]
    z = conv2d(x, params[f"{name}.w"], spec.stride) + params[f"{name}.b"][:, None, None]
    if cache is not None:
        cache.inputs[name] = x
    if not spec.block:
        return z
    a = params[f"{name}.g"][:, None, None] * z
    if cache is not None:
        cache.pre[name] = z
    out = silu(a)
    if cache is not None:
        cache.scaled[name] = a
    return out


def _layer_backward(params: NetParams, name: str, grad: np.ndarray, cache: ForwardCache,
                    grads: NetParams) -> np.ndarray:
    spec = LAYERS[name]
    if spec.block:
        z = cache.pre[name]
        da = grad * silu_grad(cache.scaled[name])
        grads[f"{name}.g"] += (da * z).sum(axis=(1, 2))
        grad = da * params[f"{name}.g"][:, None, None]
    grads[f"{name}.b"] += grad.sum(axis=(1, 2))
    dx, dw = conv2d_backward(grad, cache.inputs[name], params[f"{name}.w"], spec.stride)
    grads[f"{name}.w"] += dw
    return dx


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvalidInputError(f"image must be H x W, got shape {image.shape}")
    if image.shape[0] % 4 or image.shape[1] % 4 or min(image.shape) < 4:
        raise InvalidInputError(f"image sides must be positive multiples of 4, got {image.shape}")
    return image


def forward(image, params: NetParams, cache: Optional[ForwardCache] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Return (F, m): C x H/2 x W/2 features and the H x W foreground probability."""
    x = _check_image(image)[None]
    e1 = _layer(params, "enc1", x, cache)
    e2 = _layer(params, "enc2", e1, cache)
    e3 = _layer(params, "enc3", e2, cache)
    d2 = _layer(params, "dec2", np.concatenate([upsample_nearest(e3, 2), e2]), cache)
    F = _layer(params, "feat", d2, cache)
    d1 = _layer(params, "dec1", np.concatenate([upsample_nearest(d2, 2), e1]), cache)
    squash = np.tanh(_layer(params, "seg", d1, cache)[0] / LOGIT_BOUND)
    m = expit(LOGIT_BOUND * squash)
    if cache is not None:
        cache.squash = squash
        cache.m = m
    return F, m


def backward(cache: ForwardCache, params: NetParams, grad_m: Optional[np.ndarray] = None,
             grad_F: Optional[np.ndarray] = None) -> NetParams:
    """Parameter gradients for upstream gradients on m and F (None means zero)."""
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    m = cache.m
    c_e1 = LAYERS["enc1"].cout
    c_e2 = LAYERS["enc2"].cout

    g_m = np.zeros_like(m) if grad_m is None else np.asarray(grad_m, dtype=np.float64)
    g_z = g_m * m * (1.0 - m) * (1.0 - cache.squash ** 2)
    g_d1 = _layer_backward(params, "seg", g_z[None], cache, grads)
    g_c1 = _layer_backward(params, "dec1", g_d1, cache, grads)
    g_d2 = sum_pool(g_c1[:-c_e1], 2)
    g_e1 = g_c1[-c_e1:]

    if grad_F is not None:
        g_d2 = g_d2 + _layer_backward(params, "feat", np.asarray(grad_F, dtype=np.float64), cache, grads)
    g_c2 = _layer_backward(params, "dec2", g_d2, cache, grads)
    g_e3 = sum_pool(g_c2[:-c_e2], 2)
    g_e2 = g_c2[-c_e2:]

    g_e2 = g_e2 + _layer_backward(params, "enc3", g_e3, cache, grads)
    g_e1 = g_e1 + _layer_backward(params, "enc2", g_e2, cache, grads)
    _layer_backward(params, "enc1", g_e1, cache, grads)
    return grads


class TinySegNet:
    """Segmentation network producing the feature map and the prediction."""

    def __init__(self, params: Optional[NetParams] = None, seed: int = 0):
        self.params = params if params is not None else init_params(seed)

    def forward(self, image) -> Tuple[np.ndarray, np.ndarray]:
        return forward(image, self.params)

    def forward_train(self, image) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
        cache = ForwardCache(image=np.asarray(image, dtype=np.float64))
        F, m = forward(image, self.params, cache)
        return F, m, cache

    def backward(self, cache: ForwardCache, grad_m=None, grad_F=None) -> NetParams:
        return backward(cache, self.params, grad_m, grad_F)

    def predict(self, image) -> np.ndarray:
        return self.forward(image)[1]


# --- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments, step counter and hyperparameters."""

    m: NetParams
    v: NetParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetParams, lr: float = 1e-3) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, lr=lr)

    def hyper(self) -> Dict[str, Any]:
        return {"step": self.step, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: NetParams, grads: NetParams, state: OptimizerState) -> Tuple[NetParams, OptimizerState]:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    """Parameters, optimizer state and run metadata stored as a single .npz."""

    params: NetParams
    optimizer: Optional[OptimizerState] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        header: Dict[str, Any] = {"version": CHECKPOINT_VERSION, "meta": self.meta}
        if self.optimizer is not None:
            arrays.update({f"adam_m/{k}": v for k, v in self.optimizer.m.items()})
            arrays.update({f"adam_v/{k}": v for k, v in self.optimizer.v.items()})
            header["optimizer"] = self.optimizer.hyper()
        arrays["header"] = np.array(json.dumps(header))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        logger.debug("Checkpoint written to %s", path)
        return path

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        try:
            with np.load(path, allow_pickle=False) as data:
                header = json.loads(str(data["header"]))
                groups: Dict[str, NetParams] = {"param": {}, "adam_m": {}, "adam_v": {}}
                for key in data.files:
                    if "/" in key:
                        group, name = key.split("/", 1)
                        groups[group][name] = data[key]
        except (OSError, KeyError, ValueError) as e:
            raise IngestionError(f"unreadable checkpoint ({e})", str(path)) from e
        if header.get("version") != CHECKPOINT_VERSION:
            raise IngestionError(f"unsupported checkpoint version {header.get('version')}", str(path))

        expected = parameter_shapes()
        if {k: v.shape for k, v in groups["param"].items()} != expected:
            raise IngestionError("checkpoint does not match the network layout", str(path))
        optimizer = None
        if "optimizer" in header:
            optimizer = OptimizerState(m=groups["adam_m"], v=groups["adam_v"], **header["optimizer"])
        return cls(params=groups["param"], optimizer=optimizer, meta=header.get("meta", {}))


def params_equal(a: NetParams, b: NetParams) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def flat_index(params: NetParams) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every (tensor name, index) coordinate in a stable order."""
    return [(name, idx) for name in sorted(params) for idx in np.ndindex(params[name].shape)]
