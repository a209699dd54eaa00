"""Trainable building blocks: linear layers, MLPs, invertible activations, Adam."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from penn import autodiff as ad

LEAKY_SLOPE = 0.5
ACTIVATIONS = ("identity", "leaky_relu", "tanh")
INVERTIBLE = ("identity", "leaky_relu")

_uids = itertools.count(1)


def leaky_relu(x, a: float = LEAKY_SLOPE):
    if a <= 0:
        raise ValueError(f"negative slope must be positive for an invertible LeakyReLU, got {a}")
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, x, a * x)


def leaky_relu_inverse(y, a: float = LEAKY_SLOPE):
    if a <= 0:
        raise ValueError(f"negative slope must be positive for an invertible LeakyReLU, got {a}")
    y = np.asarray(y, dtype=float)
    return np.where(y >= 0, y, y / a)


def pseudoinverse(W, rtol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``rtol * sigma_max`` are treated as zero.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.size == 0:
        return np.zeros(W.shape[::-1])
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    keep = s > rtol * s[0] if s.size else s > 0
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def column_rank(W, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(np.atleast_2d(W), compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0


class Parameter(ad.Var):
    """A trainable leaf. ``version`` increments on every in-place update."""

    __slots__ = ("version",)

    def __init__(self, value, name=None):
        super().__init__(np.array(value, dtype=float), requires_grad=True, name=name)
        self.version = 0

    def assign(self, new_value):
        new_value = np.asarray(new_value, dtype=float)
        if new_value.shape != self.value.shape:
            raise ValueError(f"shape mismatch for {self.name}: {new_value.shape} vs {self.value.shape}")
        self.value = new_value.copy()
        self.version += 1


class LinearLayer:
    """``y = W x + b`` with a cached pseudoinverse of ``W``."""

    def __init__(self, weight, bias=None, name="linear"):
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        self.weight = Parameter(weight, name=f"{name}.weight")
        self.bias = None if bias is None else Parameter(np.asarray(bias, float).reshape(weight.shape[0]), name=f"{name}.bias")
        self.name = name
        self._pinv = None
        self._pinv_version = -1

    @classmethod
    def init(cls, rng, n_in, n_out, bias=True, name="linear"):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out) if bias else None
        return cls(w, b, name)

    @classmethod
    def identity(cls, n, bias=False, name="linear"):
        return cls(np.eye(n), np.zeros(n) if bias else None, name)

    @property
    def n_in(self):
        return self.weight.value.shape[1]

    @property
    def n_out(self):
        return self.weight.value.shape[0]

    @property
    def stale(self) -> bool:
        return self._pinv is None or self._pinv_version != self.weight.version

    def pinv(self) -> np.ndarray:
        if self.stale:
            self._pinv = pseudoinverse(self.weight.value)
            self._pinv_version = self.weight.version
        return self._pinv

    def parameters(self):
        return [p for p in (self.weight, self.bias) if p is not None]

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


def _activate(x, kind, a):
    if kind == "identity":
        return ad.as_var(x)
    if kind == "leaky_relu":
        return ad.leaky_relu(x, a)
    if kind == "tanh":
        return ad.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def _activation_slope(z, kind, a):
    if kind == "identity":
        return np.ones_like(z)
    if kind == "leaky_relu":
        return np.where(z >= 0, 1.0, a)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    raise ValueError(f"unknown activation {kind!r}")


class Mlp:
    """A chain of linear layers, each followed by its activation."""

    def __init__(self, layers, activations, slope=LEAKY_SLOPE, decodable=False):
        layers = list(layers)
        activations = list(activations)
        if len(layers) != len(activations):
            raise ValueError("need one activation per layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ValueError(f"layer widths do not chain: {prev.n_out} -> {nxt.n_in}")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if decodable:
            bad = [act for act in activations if act not in INVERTIBLE]
            if bad:
                raise ValueError(f"activation {bad[0]!r} is not invertible on the reals; cannot decode")
            if "leaky_relu" in activations and slope <= 0:
                raise ValueError("LeakyReLU slope must be positive for a decodable MLP")
        self.layers = layers
        self.activations = activations
        self.slope = float(slope)
        self.decodable = decodable
        self.tag = next(_uids)

    @classmethod
    def build(cls, rng, widths, activation="leaky_relu", last_activation=None, bias=True,
              decodable=False, name="mlp"):
        layers = [
            LinearLayer.init(rng, a, b, bias=bias, name=f"{name}.{k}")
            for k, (a, b) in enumerate(zip(widths, widths[1:]))
        ]
        acts = [activation] * len(layers)
        if last_activation is not None:
            acts[-1] = last_activation
        return cls(layers, acts, decodable=decodable)

    @classmethod
    def identity(cls, n):
        return cls([LinearLayer.identity(n)], ["identity"], decodable=True)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    @property
    def has_bias(self):
        return any(layer.bias is not None for layer in self.layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x):
        return mlp_forward(self, x)

    def jvp(self, x, t):
        """Directional derivative ``J_f(x) t`` along the last axis."""
        z = ad.value(x)
        for layer, act in zip(self.layers, self.activations):
            pre = z @ layer.weight.value.T
            if layer.bias is not None:
                pre = pre + layer.bias.value
            t = ad.mul(ad.linear(t, layer.weight), _activation_slope(pre, act, self.slope))
            z = ad.value(_activate(pre, act, self.slope))
        return t


def mlp_forward(m: Mlp, x):
    x = ad.as_var(x)
    if x.shape[-1] != m.n_in:
        raise ValueError(f"input width {x.shape[-1]} does not match MLP input {m.n_in}")
    for layer, act in zip(m.layers, m.activations):
        x = _activate(layer(x), act, m.slope)
    return x


def mlp_backward(m: Mlp, x, upstream=None) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(upstream * f(x))`` (``upstream`` defaults to ones)."""
    params = m.parameters()
    for p in params:
        p.grad = None
    out = mlp_forward(m, x)
    seed = np.ones_like(out.value) if upstream is None else np.asarray(upstream, float)
    ad.backward(out, seed)
    return {p.name: (np.zeros_like(p.value) if p.grad is None else p.grad) for p in params}


@dataclass
class AdamState:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in self.params]
            self.v = [np.zeros_like(p.value) for p in self.params]
        for p, m in zip(self.params, self.m):
            if m.shape != p.value.shape:
                raise ValueError(f"accumulator shape {m.shape} does not match parameter {p.value.shape}")

    def reset(self, lr=None):
        if lr is not None:
            self.lr = lr
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]


def adam_step(state: AdamState, grads) -> None:
    """One bias-corrected Adam update applied in place to ``state.params``."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, (p, g) in enumerate(zip(state.params, grads)):
        g = np.zeros_like(p.value) if g is None else np.asarray(g, float)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        if state.lr == 0.0 or not np.any(g) and not np.any(state.m[k]):
            continue
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p.assign(p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


def mlp_to_dict(m: Mlp) -> dict:
    return {
        "activations": list(m.activations),
        "slope": m.slope,
        "decodable": m.decodable,
        "layers": [
            {
                "name": layer.name,
                "weight_shape": list(layer.weight.value.shape),
                "weight": layer.weight.value.ravel().tolist(),
                "bias": None if layer.bias is None else layer.bias.value.tolist(),
            }
            for layer in m.layers
        ],
    }


def mlp_from_dict(d) -> Mlp:
    layers = [
        LinearLayer(
            np.asarray(ld["weight"], float).reshape(ld["weight_shape"]),
            None if ld["bias"] is None else np.asarray(ld["bias"], float),
            ld.get("name", "linear"),
        )
        for ld in d["layers"]
    ]
    return Mlp(layers, d["activations"], slope=d.get("slope", LEAKY_SLOPE), decodable=d.get("decodable", False))


def linear_to_dict(layer: LinearLayer) -> dict:
    return mlp_to_dict(Mlp([layer], ["identity"]))["layers"][0]


def linear_from_dict(d) -> LinearLayer:
    return LinearLayer(
        np.asarray(d["weight"], float).reshape(d["weight_shape"]),
        None if d["bias"] is None else np.asarray(d["bias"], float),
        d.get("name", "linear"),
    )


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
