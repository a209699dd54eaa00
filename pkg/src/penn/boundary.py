"""Boundary encoder, Dirichlet layer and pseudoinverse decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from penn import autodiff as ad
from penn.mesh import BoundarySpec, TensorField
from penn.nn import Mlp, column_rank, mlp_forward


class EncoderMismatch(ValueError):
    pass


class NotDecodable(ValueError):
    pass


@dataclass(frozen=True)
class EncodedState:
    """Encoded field ``h`` ``(n, K, C)`` and encoded Dirichlet rows ``h_hat``."""

    h: ad.Var
    h_hat: ad.Var
    dirichlet_idx: np.ndarray
    tag: int
    h_hat_tag: int = None

    def __post_init__(self):
        if self.h_hat_tag is None:
            object.__setattr__(self, "h_hat_tag", self.tag)

    def replace(self, h) -> "EncodedState":
        return EncodedState(ad.as_var(h), self.h_hat, self.dirichlet_idx, self.tag, self.h_hat_tag)

    @property
    def values(self) -> np.ndarray:
        return self.h.value


def _field_values(u):
    if isinstance(u, TensorField):
        return u.values
    return u


def boundary_encode(encoder: Mlp, u, bc: BoundarySpec) -> EncodedState:
    """Encode a field and its Dirichlet values with the same encoder."""
    u = ad.as_var(_field_values(u))
    if u.shape[-1] != encoder.n_in:
        raise ValueError(f"encoder expects {encoder.n_in} channels, field has {u.shape[-1]}")
    h = mlp_forward(encoder, u)
    h_hat = mlp_forward(encoder, bc.dirichlet_values) if len(bc.dirichlet_idx) else ad.as_var(
        np.zeros((0,) + h.shape[1:])
    )
    return EncodedState(h, h_hat, bc.dirichlet_idx, encoder.tag)


def dirichlet_apply(state: EncodedState) -> EncodedState:
    """Overwrite Dirichlet rows of ``h`` with ``h_hat``."""
    if state.tag != state.h_hat_tag:
        raise EncoderMismatch("encoded Dirichlet values come from a different encoder")
    if len(state.dirichlet_idx) == 0:
        return state
    return state.replace(ad.overwrite_rows(state.h, state.dirichlet_idx, state.h_hat))


def _inverse_activation(y, kind, a):
    if kind == "identity":
        return y
    if kind == "leaky_relu":
        return ad.leaky_relu_inv(y, a)
    raise NotDecodable(f"activation {kind!r} has no inverse on the reals")


def check_decodable(encoder: Mlp):
    for k, (layer, act) in enumerate(zip(encoder.layers, encoder.activations)):
        if act not in ("identity", "leaky_relu"):
            raise NotDecodable(f"layer {k} ({layer.name}) uses non-invertible activation {act!r}")
        if column_rank(layer.weight.value) < layer.n_in:
            raise NotDecodable(f"layer {k} ({layer.name}) weight is not full column rank")


def pseudoinverse_decode(encoder: Mlp, h, check=True):
    """Apply the encoder's layers backwards: invert activation, subtract bias, apply W+.

    Differentiable with respect to the encoder's parameters; there are no
    decoder parameters of its own.
    """
    if check:
        check_decodable(encoder)
    y = ad.as_var(_field_values(h.h if isinstance(h, EncodedState) else h))
    for layer, act in reversed(list(zip(encoder.layers, encoder.activations))):
        y = _inverse_activation(y, act, encoder.slope)
        if layer.bias is not None:
            y = ad.add(y, ad.neg(layer.bias))
        y = ad.linear(y, _pinv_var(layer))
    return y


def _pinv_var(layer):
    return ad.pinv(layer.weight, P=layer.pinv())
