"""Small MLP classifiers over the autodiff tape.

Desk-scale stand-ins for large vision backbones: dense layers, relu or
tanh activations, one shared softmax head over all classes ever seen.
Besides the taped loss graph the model exposes pure-numpy forward and
per-example-gradient fast paths used by evaluation and the influence
engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .errors import ConfigError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes_total: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes_total < 1:
            raise ConfigError("model dims must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")


class MLPClassifier:
    """Fully-connected classifier parameterized by a flat ParamVector."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        dims = (spec.input_dim, *spec.hidden_dims, spec.num_classes_total)
        self._layer_dims = list(zip(dims[:-1], dims[1:]))
        segments = []
        offset = 0
        for i, (fan_in, fan_out) in enumerate(self._layer_dims, start=1):
            segments.append((f"w{i}", (fan_in, fan_out), offset))
            offset += fan_in * fan_out
            segments.append((f"b{i}", (fan_out,), offset))
            offset += fan_out
        self.segments = tuple(segments)
        self.num_params = offset
        self._act = spec.activation
        self._eye = np.eye(spec.num_classes_total, dtype=np.float64)

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> ParamVector:
        """He (relu) or Xavier (tanh) initialization, deterministic per seed."""
        rng = np.random.default_rng(seed)
        flat = np.zeros(self.num_params, dtype=np.float64)
        pv = ParamVector(self.segments, flat)
        for (name, shape, off), (fan_in, fan_out) in zip(
            self.segments[0::2], self._layer_dims
        ):
            scale = np.sqrt(2.0 / fan_in) if self._act == "relu" else np.sqrt(1.0 / fan_in)
            size = fan_in * fan_out
            flat[off : off + size] = rng.normal(0.0, scale, size=size)
        return pv

    def zero_params(self) -> ParamVector:
        return ParamVector(self.segments, np.zeros(self.num_params, dtype=np.float64))

    def params_from_flat(self, flat: np.ndarray) -> ParamVector:
        return ParamVector(self.segments, flat)

    # -- taped graph --------------------------------------------------------

    def logits_graph(self, leaves, x: np.ndarray) -> Tensor:
        a = ad.constant(x)
        n_layers = len(self._layer_dims)
        for i in range(n_layers):
            z = ad.add(ad.matmul(a, leaves[2 * i]), leaves[2 * i + 1])
            if i < n_layers - 1:
                a = ad.relu(z) if self._act == "relu" else ad.tanh(z)
            else:
                a = z
        return a

    def loss_graph(self, leaves, x: np.ndarray, y_idx: np.ndarray) -> Tensor:
        """Per-example cross-entropy losses, shape (n,)."""
        logits = self.logits_graph(leaves, x)
        shifted = ad.sub(logits, ad.max_detached(logits, axis=1, keepdims=True))
        lse = ad.log(ad.tsum(ad.exp(shifted), axis=1))
        onehot = ad.constant(self._eye[np.asarray(y_idx, dtype=np.int64)])
        picked = ad.tsum(ad.mul(shifted, onehot), axis=1)
        return ad.sub(lse, picked)

    # -- pure numpy fast paths ----------------------------------------------

    def _forward_np(self, params: ParamVector, x: np.ndarray):
        arrs = params.arrays()
        pre, post = [], [x]
        a = x
        n_layers = len(self._layer_dims)
        for i in range(n_layers):
            z = a @ arrs[2 * i] + arrs[2 * i + 1]
            pre.append(z)
            if i < n_layers - 1:
                a = np.maximum(z, 0.0) if self._act == "relu" else np.tanh(z)
            else:
                a = z
            post.append(a)
        return pre, post

    def logits_np(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        return self._forward_np(params, x)[1][-1]

    def per_example_losses_np(
        self, params: ParamVector, x: np.ndarray, y_idx: np.ndarray
    ) -> np.ndarray:
        logits = self.logits_np(params, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        return lse - shifted[np.arange(len(y_idx)), np.asarray(y_idx, dtype=np.int64)]

    def per_example_grads_np(
        self, params: ParamVector, x: np.ndarray, y_idx: np.ndarray
    ) -> np.ndarray:
        """Batched per-example gradient rows, shape (n, q).

        Exploits the feedforward structure: example i's loss touches only
        row i of each activation, so one backward sweep that keeps the
        batch axis yields all Jacobian rows at once.
        """
        y_idx = np.asarray(y_idx, dtype=np.int64)
        n = x.shape[0]
        arrs = params.arrays()
        pre, post = self._forward_np(params, x)
        logits = post[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        softmax = e / e.sum(axis=1, keepdims=True)
        delta = softmax - self._eye[y_idx]

        out = np.empty((n, self.num_params), dtype=np.float64)
        n_layers = len(self._layer_dims)
        for i in range(n_layers - 1, -1, -1):
            w_name, w_shape, w_off = self.segments[2 * i]
            _, b_shape, b_off = self.segments[2 * i + 1]
            a_in = post[i]
            w_size = w_shape[0] * w_shape[1]
            gw = np.empty((n, w_shape[0], w_shape[1]), dtype=np.float64)
            np.multiply(a_in[:, :, None], delta[:, None, :], out=gw)
            out[:, w_off : w_off + w_size] = gw.reshape(n, w_size)
            out[:, b_off : b_off + b_shape[0]] = delta
            if i > 0:
                da = delta @ arrs[2 * i].T
                z_prev = pre[i - 1]
                if self._act == "relu":
                    delta = da * (z_prev > 0.0)
                else:
                    t = np.tanh(z_prev)
                    delta = da * (1.0 - t * t)
        return out
