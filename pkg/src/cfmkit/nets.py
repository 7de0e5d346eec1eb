"""Learnable networks: conditional vector field, condition embedder, discriminator."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .rng import DropoutMask, RngStream, make_dropout_mask
from .tensor import Tensor


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, stream: RngStream | None, zero: bool = False):
        if zero or stream is None:
            w = np.zeros((n_in, n_out))
        else:
            w = stream.normal((n_in, n_out)) * np.sqrt(1.0 / n_in)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x, detach: bool = False) -> Tensor:
        if detach:
            return T.affine(x, self.weight.detach(), self.bias.detach())
        return T.affine(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def sinusoidal_features(t, width: int, max_frequency: float = 64.0) -> np.ndarray:
    """[sin(w_k t), cos(w_k t)] with w_k geometric from 1 to ``max_frequency``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = width // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_frequency), half))
    args = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if width % 2:
        feats = np.concatenate([feats, t[:, None]], axis=1)
    return feats


class ConditionEmbedder:
    """Lookup table mapping condition labels to embedding vectors (the mu input)."""

    def __init__(self, n_conditions: int, dim: int, stream: RngStream | None):
        table = stream.normal((n_conditions, dim)) if stream is not None else np.zeros((n_conditions, dim))
        self.table = Tensor(table, requires_grad=True, name="embedder.table")
        self.n_conditions = n_conditions
        self.dim = dim
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.table.requires_grad = not self._frozen

    def __call__(self, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_conditions):
            raise DimensionError(f"condition label outside [0, {self.n_conditions})")
        onehot = np.zeros((labels.size, self.n_conditions))
        onehot[np.arange(labels.size), labels] = 1.0
        return T.matmul(onehot, self.table)

    def parameters(self) -> list[Tensor]:
        return [self.table]


class VectorFieldNet:
    """MLP v(t, x, mu) over [x, sinusoidal(t), mu] with optional per-layer dropout.

    Dropout is only active when a ``masks`` list is passed to :meth:`velocity`;
    build one with :meth:`make_masks` and pass the same list to every pass that
    must share a random state.
    """

    def __init__(
        self,
        data_dim: int,
        cond_dim: int,
        stream: RngStream | None,
        hidden: Sequence[int] = (128, 128, 128),
        time_features: int = 16,
        activation: str = "gelu",
        dropout_rate: float = 0.0,
        zero_head: bool = False,
    ):
        if activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        self.time_features = time_features
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.dropout_rate = dropout_rate
        widths = (data_dim + time_features + cond_dim,) + self.hidden
        self.layers = [Linear(f"field.layer{k}", widths[k], widths[k + 1], stream) for k in range(len(self.hidden))]
        self.head = Linear("field.head", widths[-1], data_dim, stream, zero=zero_head)

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer.parameters()]
        return params + self.head.parameters()

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def make_masks(self, stream: RngStream, batch: int, rate: float | None = None) -> list[DropoutMask]:
        rate = self.dropout_rate if rate is None else rate
        return [make_dropout_mask(stream, (batch, h), rate) for h in self.hidden]

    def velocity(
        self,
        t,
        x,
        cond,
        masks: list[DropoutMask] | None = None,
        track_gradients: bool = True,
    ) -> Tensor:
        if not track_gradients:
            with T.no_grad():
                return self.velocity(t, x, cond, masks, True)
        x = T.as_tensor(x)
        cond = T.as_tensor(cond)
        if x.data.ndim != 2 or x.shape[1] != self.data_dim:
            raise DimensionError(f"expected x of shape (B, {self.data_dim}), got {x.shape}")
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
        if cond.shape != (batch, self.cond_dim):
            raise DimensionError(f"expected condition of shape ({batch}, {self.cond_dim}), got {cond.shape}")
        if masks is not None and len(masks) != len(self.layers):
            raise DimensionError(f"expected {len(self.layers)} dropout masks, got {len(masks)}")
        act = T.ACTIVATIONS[self.activation]
        h = T.concatenate([x, Tensor._wrap(sinusoidal_features(t, self.time_features), False), cond], axis=1)
        for k, layer in enumerate(self.layers):
            h = act(layer(h))
            if masks is not None:
                h = masks[k].apply(h)
        return self.head(h)

    __call__ = velocity


def eval_velocity(net: VectorFieldNet, t, x, cond, mask_set=None, track_gradients: bool = True) -> Tensor:
    return net.velocity(t, x, cond, mask_set, track_gradients)


class Discriminator:
    """Dense least-squares discriminator; returns an unbounded score and every hidden feature map."""

    def __init__(
        self,
        data_dim: int,
        stream: RngStream | None,
        hidden: Sequence[int] = (64, 64, 64),
        slope: float = 0.2,
        zero_head: bool = False,
        cond_dim: int = 0,
    ):
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.slope = slope
        widths = (data_dim + cond_dim,) + self.hidden
        self.layers = [Linear(f"disc.layer{k}", widths[k], widths[k + 1], stream) for k in range(len(self.hidden))]
        self.head = Linear("disc.head", widths[-1], 1, stream, zero=zero_head)

    @property
    def num_feature_maps(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer.parameters()]
        return params + self.head.parameters()

    def __call__(self, x, cond=None, detach_params: bool = False) -> tuple[Tensor, list[Tensor]]:
        """Score of shape (B,) plus L feature maps.

        ``cond`` (B, cond_dim) is a constant side input concatenated to ``x``.
        ``detach_params`` evaluates with the weights as constants so gradients
        reach only the input.
        """
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.data_dim:
            raise DimensionError(f"expected x of shape (B, {self.data_dim}), got {x.shape}")
        if self.cond_dim:
            cond = np.asarray(getattr(cond, "data", cond), dtype=np.float64)
            if cond.shape != (x.shape[0], self.cond_dim):
                raise DimensionError(f"expected discriminator condition ({x.shape[0]}, {self.cond_dim})")
            x = T.concatenate([x, Tensor._wrap(cond, False)], axis=1)
        elif cond is not None:
            raise DimensionError("this discriminator takes no condition input")
        features = []
        h = x
        for layer in self.layers:
            h = T.leaky_relu(layer(h, detach=detach_params), self.slope)
            features.append(h)
        score = self.head(h, detach=detach_params)
        return T.sum(score, axis=1), features


def eval_discriminator(disc: Discriminator, x, cond=None) -> tuple[Tensor, list[Tensor]]:
    return disc(x, cond)
