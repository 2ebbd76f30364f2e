"""Loss, gradient, per-example Jacobian rows, and oracle-scale Hessians.

All functions are pure in (model, params, batch) and deterministic;
per-example rows may be computed by a thread pool with results placed by
index, so parallel execution is bit-identical to sequential.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, flatten_tensors
from .data import Batch
from .errors import ConfigError, NumericError

HESSIAN_CAP = 2000


def _check(model, params: ParamVector, batch: Batch):
    if len(batch) == 0:
        raise ConfigError("batch must be non-empty")
    if params.q != model.num_params:
        raise ConfigError(
            f"params have q={params.q} but model expects q={model.num_params}"
        )
    if batch.x.shape[1] != model.spec.input_dim:
        raise ConfigError(
            f"batch features have dim {batch.x.shape[1]}, model expects {model.spec.input_dim}"
        )
    if batch.y.min() < 0 or batch.y.max() >= model.spec.num_classes_total:
        raise ConfigError("label index out of range for model head")


def loss_vector_graph(model, params: ParamVector, batch: Batch):
    """Build the taped per-example loss vector; returns (losses, leaves)."""
    _check(model, params, batch)
    leaves = params.leaves()
    losses = model.loss_graph(leaves, batch.x, batch.y)
    return losses, leaves


def forward(model, params: ParamVector, batch: Batch):
    """Per-example losses and their mean. Raises on any non-finite loss,
    naming the offending example index."""
    losses, _ = loss_vector_graph(model, params, batch)
    values = losses.data
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericError(f"non-finite loss at example index {int(bad[0])}")
    return values.copy(), float(values.mean())


def grad(model, params: ParamVector, batch: Batch, weights=None) -> ParamVector:
    """Gradient of sum_i w_i * loss_i; weights default to uniform 1/n."""
    losses, leaves = loss_vector_graph(model, params, batch)
    n = len(batch)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ConfigError(f"weights must have shape ({n},), got {weights.shape}")
    if not np.isfinite(weights).all():
        raise NumericError("non-finite loss weights")
    grads = ad.backward(losses, seed=weights, wrt=leaves)
    flat = flatten_tensors(grads, params)
    if not np.isfinite(flat).all():
        raise NumericError("non-finite gradient")
    return params.with_flat(flat)


def per_example_grad_matrix(
    model, params: ParamVector, batch: Batch, method: str = "auto", workers: int = 0
) -> np.ndarray:
    """Jacobian of per-example losses wrt params, shape (n, q).

    ``method``: "batched" uses the model's fused fast path, "replay"
    re-runs the backward pass with an indicator seed per example, "auto"
    prefers batched when the model provides one. Both paths agree to
    1e-10 and are covered by tests.
    """
    _check(model, params, batch)
    if method not in ("auto", "batched", "replay"):
        raise ConfigError(f"unknown per-example-grad method {method!r}")
    if method in ("auto", "batched") and hasattr(model, "per_example_grads_np"):
        rows = model.per_example_grads_np(params, batch.x, batch.y)
    elif method == "batched":
        raise ConfigError("model does not provide a batched per-example-grad path")
    else:
        rows = _replay_rows(model, params, batch, workers)
    if not np.isfinite(rows).all():
        raise NumericError("non-finite per-example gradient")
    return rows


def _replay_rows(model, params, batch, workers):
    losses, leaves = loss_vector_graph(model, params, batch)
    n = len(batch)
    rows = np.empty((n, params.q), dtype=np.float64)
    eye = np.eye(n, dtype=np.float64)

    def fill(i):
        grads = ad.backward(losses, seed=eye[i], wrt=leaves)
        rows[i] = flatten_tensors(grads, params)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n)))
    else:
        for i in range(n):
            fill(i)
    return rows


def per_example_grads(
    model, params: ParamVector, batch: Batch, method: str = "auto", workers: int = 0
) -> list[ParamVector]:
    rows = per_example_grad_matrix(model, params, batch, method=method, workers=workers)
    return [params.with_flat(row) for row in rows]


def hvp(model, params: ParamVector, batch: Batch, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product of the mean batch loss via double backward."""
    losses, leaves = loss_vector_graph(model, params, batch)
    mean_loss = ad.tmean(losses)
    grads = ad.backward(mean_loss, wrt=leaves, create_graph=True)
    pv = params.with_flat(np.asarray(v, dtype=np.float64))
    s = None
    for g, seg in zip(grads, pv.arrays()):
        term = ad.dot(g, ad.constant(seg))
        s = term if s is None else ad.add(s, term)
    hv = ad.backward(s, wrt=leaves)
    return flatten_tensors(hv, params)


def hessian(model, params: ParamVector, batch: Batch, cap: int = HESSIAN_CAP) -> np.ndarray:
    """Dense Hessian of the mean batch loss. Oracle-scale only: refuses
    q beyond ``cap``. Columns are exact HVPs against unit vectors."""
    _check(model, params, batch)
    q = params.q
    if q > cap:
        raise ConfigError(
            f"dense hessian is oracle-scale only: q={q} exceeds cap={cap}"
        )
    losses, leaves = loss_vector_graph(model, params, batch)
    mean_loss = ad.tmean(losses)
    grads = ad.backward(mean_loss, wrt=leaves, create_graph=True)
    h = np.empty((q, q), dtype=np.float64)
    col = 0
    for g, (_, shape, off) in zip(grads, params.segments):
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        for k in range(size):
            seed = np.zeros(size, dtype=np.float64)
            seed[k] = 1.0
            hv = ad.backward(g, seed=seed.reshape(shape), wrt=leaves)
            h[:, col] = flatten_tensors(hv, params)
            col += 1
    if not np.isfinite(h).all():
        raise NumericError("non-finite hessian")
    return h
