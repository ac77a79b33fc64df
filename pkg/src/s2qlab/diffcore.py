"""Reverse-mode differentiable dense approximators with Adam.

Networks are feedforward stacks described by an ApproximatorSpec and held
as one flat float64 vector inside a ParamStore, which keeps optimizer
state and checkpointing trivial.  Layers may route their weights through
an absolute-value transform; with a nondecreasing activation that makes
the realized map monotone nondecreasing in every input coordinate, which
is how the monotonic mixers are built.  Gradients are exact reverse-mode
and are checked against central finite differences in the tests.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from s2qlab.backend import ACTIVATION_IDS, kernels
from s2qlab.errors import ConfigError, NumericalError

ACTIVATIONS = tuple(ACTIVATION_IDS)
WEIGHT_TRANSFORMS = ("none", "absolute")


@dataclass(frozen=True)
class ApproximatorSpec:
    """Shape of a dense net: widths[0] inputs through widths[-1] outputs.

    ``activation`` applies to hidden layers; the last layer is linear.
    ``weight_transform`` is one mode for all layers or a per-layer tuple.
    """

    layer_widths: tuple
    activation: str = "relu"
    weight_transform: object = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigError(f"layer_widths must be >=2 positive ints, got {widths}")
        object.__setattr__(self, "layer_widths", widths)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        wt = self.weight_transform
        if isinstance(wt, str):
            wt = (wt,) * self.n_layers
        else:
            wt = tuple(wt)
        if len(wt) != self.n_layers or any(t not in WEIGHT_TRANSFORMS for t in wt):
            raise ConfigError(f"bad weight_transform {self.weight_transform!r}")
        object.__setattr__(self, "weight_transform", wt)

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]


@lru_cache(maxsize=None)
def layout(spec: ApproximatorSpec):
    """Per-layer (weight_slice, bias_slice, (fan_in, fan_out)) into the flat vector."""
    slices = []
    off = 0
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        w = slice(off, off + fan_in * fan_out)
        off += fan_in * fan_out
        b = slice(off, off + fan_out)
        off += fan_out
        slices.append((w, b, (fan_in, fan_out)))
    return tuple(slices)


def n_params(spec: ApproximatorSpec) -> int:
    last = layout(spec)[-1]
    return last[1].stop


@dataclass
class ParamStore:
    """Flat parameter vector plus Adam moments; moments start at zero."""

    values: np.ndarray
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.values)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.values)
        if not (len(self.values) == len(self.adam_m) == len(self.adam_v)):
            raise ConfigError("values/adam_m/adam_v length mismatch")

    def copy(self) -> "ParamStore":
        return ParamStore(self.values.copy(), self.adam_m.copy(),
                          self.adam_v.copy(), self.step_count)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-5
    grad_clip_norm: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("beta1/beta2 must lie in (0, 1)")
        if self.epsilon <= 0.0 or self.grad_clip_norm <= 0.0:
            raise ConfigError("epsilon and grad_clip_norm must be positive")


def init_params(spec: ApproximatorSpec, rng: np.random.Generator) -> ParamStore:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer for weights and biases."""
    values = np.empty(n_params(spec))
    for wsl, bsl, (fan_in, _) in layout(spec):
        bound = 1.0 / np.sqrt(fan_in)
        values[wsl] = rng.uniform(-bound, bound, wsl.stop - wsl.start)
        values[bsl] = rng.uniform(-bound, bound, bsl.stop - bsl.start)
    return ParamStore(values)


def zeros_params(spec: ApproximatorSpec) -> ParamStore:
    return ParamStore(np.zeros(n_params(spec)))


def _check_input(spec, X):
    if X.shape[-1] != spec.in_dim:
        raise ConfigError(
            f"input width {X.shape[-1]} does not match spec input {spec.in_dim}")


@lru_cache(maxsize=None)
def _absw_flags(spec: ApproximatorSpec):
    return tuple(t == "absolute" for t in spec.weight_transform)


def _layer_views(spec: ApproximatorSpec, params: ParamStore):
    """(W view, b view) per layer; views stay valid under in-place updates."""
    cached = getattr(params, "_views", None)
    if cached is not None and params._views_spec is spec:
        return cached
    views = [(params.values[wsl].reshape(shape), params.values[bsl])
             for wsl, bsl, shape in layout(spec)]
    params._views = views
    params._views_spec = spec
    return views


def forward_batch(spec: ApproximatorSpec, params: ParamStore, X: np.ndarray):
    """Batched forward pass; returns (Y, cache) with cache feeding backward_batch."""
    K = kernels()
    X = np.ascontiguousarray(X, dtype=np.float64)
    _check_input(spec, X)
    act = ACTIVATION_IDS[spec.activation]
    absw = _absw_flags(spec)
    views = _layer_views(spec, params)
    n = len(views)
    cache = []
    A = X
    for i, (W, b) in enumerate(views):
        Z = K.dense_forward(A, W, b, absw[i])
        cache.append((A, Z))
        A = K.act_forward(Z, act) if i < n - 1 else Z
    return A, cache


def backward_batch(spec: ApproximatorSpec, params: ParamStore, cache, dY: np.ndarray):
    """Gradient of sum(Y * dY) w.r.t. the flat params; also returns dX.

    Gradients are summed over the batch; any averaging is the caller's.
    """
    K = kernels()
    act = ACTIVATION_IDS[spec.activation]
    absw = _absw_flags(spec)
    views = _layer_views(spec, params)
    grad = np.empty_like(params.values)
    lay = layout(spec)
    dA = np.ascontiguousarray(dY, dtype=np.float64)
    for i in range(len(lay) - 1, -1, -1):
        wsl, bsl, _ = lay[i]
        A_in, Z = cache[i]
        dZ = dA if i == len(lay) - 1 else K.act_backward(Z, act, dA)
        dA, dW, db = K.dense_backward(A_in, views[i][0], absw[i], dZ)
        grad[wsl] = dW.ravel()
        grad[bsl] = db
    return grad, dA


def forward(spec: ApproximatorSpec, params: ParamStore, x: np.ndarray) -> np.ndarray:
    """Single-vector forward; deterministic for fixed params and input."""
    Y, _ = forward_batch(spec, params, np.asarray(x, dtype=np.float64)[None, :])
    return Y[0]


def backward(spec: ApproximatorSpec, params: ParamStore, x: np.ndarray,
             upstream_grad: np.ndarray) -> np.ndarray:
    """Parameter gradient of upstream_grad . f(x) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)[None, :]
    up = np.asarray(upstream_grad, dtype=np.float64)[None, :]
    _, cache = forward_batch(spec, params, x)
    grad, _ = backward_batch(spec, params, cache, up)
    return grad


def adam_step(params: ParamStore, grad: np.ndarray, cfg: AdamConfig) -> ParamStore:
    """One clipped, bias-corrected Adam update in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ConfigError("gradient length does not match parameter vector")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient; update aborted")
    params.step_count += 1
    kernels().adam_update(params.values, params.adam_m, params.adam_v,
                          np.ascontiguousarray(grad), params.step_count,
                          cfg.learning_rate, cfg.beta1, cfg.beta2,
                          cfg.epsilon, cfg.grad_clip_norm)
    return params
