"""Per-example influence on old-task and new-task validation losses.

One trial SGD step is taken with a zero-initialized per-example loss
perturbation; the gradient of a validation loss with respect to that
perturbation, evaluated at zero, is the example's influence. Positive
values hurt the validation objective, negative values help. The two
influence vectors (old side, new side) are fused by the closed-form
min-norm weighting, giving an update direction that degrades neither
validation loss to first order.

For a single trial step the perturbation gradient has the closed form

    influence[j] = -lr * <grad_j(params), grad_val(params_after_step)>

which needs only per-example gradients and one validation gradient
(cost linear in the parameter count). Multi-step trials are handled by
unrolling the steps on the tape and differentiating through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .data import Batch, make_batch
from .errors import ConfigError, NumericError
from .gradients import grad, per_example_grad_matrix

GAMMA_DEGENERATE_EPS = 1e-24


@dataclass
class PerturbationVector:
    """Per-example loss weights; influence is always evaluated at zero."""

    values: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "PerturbationVector":
        return cls(np.zeros(n, dtype=np.float64))


@dataclass(frozen=True)
class ValidationBatches:
    v_old: Batch | None
    v_new: Batch


@dataclass
class InfluenceRecord:
    i_s: np.ndarray
    i_p: np.ndarray
    i_fused: np.ndarray
    gamma_star: float
    batch_example_ids: np.ndarray
    batch_task_ids: np.ndarray = field(default=None)
    gamma_degenerate: bool = False


def pseudo_update(model, params: ParamVector, batch: Batch, lr: float, iterations: int = 1):
    """Trial SGD step(s) on the mean batch loss; the input is untouched."""
    if iterations < 1:
        raise ConfigError("pseudo update needs iterations >= 1")
    current = params
    for _ in range(iterations):
        g = grad(model, current, batch)
        current = current.with_flat(current.flat - lr * g.flat)
    return current


def pseudo_update_perturbed(
    model, params: ParamVector, batch: Batch, lr: float, iterations: int, eps: np.ndarray
):
    """Trial step(s) on the perturbed objective mean_loss + eps . losses;
    the finite-difference oracle for the influence vectors."""
    n = len(batch)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n,):
        raise ConfigError(f"perturbation must have shape ({n},)")
    weights = np.full(n, 1.0 / n) + eps
    current = params
    for _ in range(iterations):
        g = grad(model, current, batch, weights=weights)
        current = current.with_flat(current.flat - lr * g.flat)
    return current


def _influence_closed_form(model, params, batch, v, lr, pseudo_params, jac):
    g_val = grad(model, pseudo_params, v)
    return -lr * (jac @ g_val.flat)


def _influence_unrolled(model, params, batch, v_old, v_new, lr, iterations):
    """Differentiate validation losses through the unrolled trial steps."""
    n = len(batch)
    eps = ad.leaf(PerturbationVector.zeros(n).values)
    leaves = params.leaves()
    base_w = ad.constant(np.full(n, 1.0 / n))
    current = leaves
    lr_t = ad.constant(float(lr))
    for _ in range(iterations):
        losses = model.loss_graph(current, batch.x, batch.y)
        objective = ad.tsum(ad.mul(losses, ad.add(base_w, eps)))
        grads = ad.backward(objective, wrt=current, create_graph=True)
        current = [ad.sub(w, ad.mul(lr_t, g)) for w, g in zip(current, grads)]

    out = []
    for v in (v_old, v_new):
        val_loss = ad.tmean(model.loss_graph(current, v.x, v.y))
        out.append(ad.backward(val_loss, wrt=[eps])[0].data.copy())
    return out[0], out[1]


def influence_vectors(
    model,
    params: ParamVector,
    batch: Batch,
    v_old: Batch,
    v_new: Batch,
    lr: float,
    iterations: int = 1,
    pseudo_params: ParamVector | None = None,
    jac: np.ndarray | None = None,
):
    """Influence of every batch example on the two validation losses.

    Returns ``(i_s, i_p)``: stability-side (old validation) and
    plasticity-side (new validation) vectors. Per-example gradients are
    taken at the incoming params, validation gradients after the trial
    step. ``pseudo_params`` and ``jac`` may be passed to reuse work.
    """
    if v_old is None or len(v_old) == 0 or v_new is None or len(v_new) == 0:
        raise ConfigError("both validation batches must be non-empty")
    if iterations < 1:
        raise ConfigError("influence needs iterations >= 1")
    if iterations == 1:
        if pseudo_params is None:
            pseudo_params = pseudo_update(model, params, batch, lr, 1)
        if jac is None:
            jac = per_example_grad_matrix(model, params, batch)
        i_s = _influence_closed_form(model, params, batch, v_old, lr, pseudo_params, jac)
        i_p = _influence_closed_form(model, params, batch, v_new, lr, pseudo_params, jac)
    else:
        i_s, i_p = _influence_unrolled(model, params, batch, v_old, v_new, lr, iterations)
    if not (np.isfinite(i_s).all() and np.isfinite(i_p).all()):
        raise NumericError("non-finite influence vector")
    return i_s, i_p


def influence_single(model, params, batch, v: Batch, lr: float, iterations: int = 1):
    """One-sided influence against a single validation set (both fusion
    inputs coincide, so the fused vector equals this one)."""
    i, _ = influence_vectors(model, params, batch, v, v, lr, iterations=iterations)
    return i


def _gamma_with_flag(i_s: np.ndarray, i_p: np.ndarray):
    g_old = np.asarray(i_s, dtype=np.float64).ravel()
    g_new = np.asarray(i_p, dtype=np.float64).ravel()
    if g_old.shape != g_new.shape:
        raise ConfigError("influence vectors must have equal length")
    diff = g_new - g_old
    denom = float(diff @ diff)
    if denom < GAMMA_DEGENERATE_EPS:
        # coincident gradients: every weighting gives the same norm
        return 0.5, True
    gamma = float(diff @ g_new) / denom
    return min(max(gamma, 0.0), 1.0), False


def pareto_gamma(i_s: np.ndarray, i_p: np.ndarray) -> float:
    """Closed-form weight of the min-norm convex combination
    ``gamma * i_s + (1 - gamma) * i_p`` (KKT solution, clamped to [0, 1])."""
    return _gamma_with_flag(i_s, i_p)[0]


def fuse(i_s: np.ndarray, i_p: np.ndarray, gamma_star: float) -> np.ndarray:
    if not 0.0 <= gamma_star <= 1.0:
        raise ConfigError(f"gamma_star must be in [0, 1], got {gamma_star}")
    return gamma_star * np.asarray(i_s) + (1.0 - gamma_star) * np.asarray(i_p)


def compute_influence(
    model,
    params: ParamVector,
    batch: Batch,
    batches: ValidationBatches,
    lr: float,
    iterations: int = 1,
    batch_task_ids=None,
) -> InfluenceRecord:
    """Full per-step pipeline: trial step, both influence vectors,
    min-norm fusion."""
    i_s, i_p = influence_vectors(
        model, params, batch, batches.v_old, batches.v_new, lr, iterations=iterations
    )
    gamma, degenerate = _gamma_with_flag(i_s, i_p)
    fused = fuse(i_s, i_p, gamma)
    return InfluenceRecord(
        i_s=i_s,
        i_p=i_p,
        i_fused=fused,
        gamma_star=gamma,
        batch_example_ids=batch.uids.copy(),
        batch_task_ids=None if batch_task_ids is None else np.asarray(batch_task_ids),
        gamma_degenerate=degenerate,
    )


def draw_pool(x: np.ndarray, y: np.ndarray, uids: np.ndarray, fraction: float, rng):
    """Uniform subset of ceil(fraction * n) examples, without replacement."""
    n = len(x)
    size = max(1, int(np.ceil(fraction * n)))
    rows = np.sort(rng.choice(n, size=size, replace=False))
    return x[rows], y[rows], uids[rows]


def sample_validation(old_pool, new_pool, sizes, seed) -> ValidationBatches:
    """Draw the two validation mini-batches from their pools.

    Each pool is an (x, y, uids) triple; requests larger than a pool are
    truncated to the whole pool. ``old_pool`` may be None for the first
    task, where no old-task objective exists yet.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    size_old, size_new = sizes

    def draw(pool, size):
        x, y, uids = pool
        n = len(x)
        if n == 0:
            raise ConfigError("validation pool is empty")
        take = min(size, n)
        rows = np.sort(rng.choice(n, size=take, replace=False))
        return make_batch(x[rows], y[rows], uids[rows])

    v_old = draw(old_pool, size_old) if old_pool is not None else None
    v_new = draw(new_pool, size_new)
    return ValidationBatches(v_old=v_old, v_new=v_new)
