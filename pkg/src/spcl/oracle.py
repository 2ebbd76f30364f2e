"""Ground-truth influence at tiny scale.

Two oracles validate the trial-step estimator: the classical inverse
Hessian influence of a training example on a validation loss, and
leave-one-out retraining. Both assume a model trained to
near-stationarity and are restricted to small parameter counts.

Sign bridge used throughout: inverse-Hessian influence > 0 means
upweighting the example raises the validation loss (harmful), which
corresponds to a negative leave-one-out delta under this module's
convention delta = loss(retrained without x) - loss(trained with x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .autodiff import ParamVector
from .data import Batch, make_batch
from .errors import ConfigError, OracleError
from .gradients import HESSIAN_CAP, forward, grad, hessian, per_example_grad_matrix

DAMPING_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_ZERO_BAND = 1e-12
STATIONARITY_TOL = 1e-4


@dataclass
class IFResult:
    influence: np.ndarray
    hessian_condition: float
    damping_used: float


@dataclass
class SignAgreement:
    true_positive: int
    true_negative: int
    false_positive: int
    false_negative: int
    excluded: int = 0

    @property
    def counted(self) -> int:
        return self.true_positive + self.true_negative + self.false_positive + self.false_negative

    @property
    def agreement_rate(self) -> float:
        if self.counted == 0:
            return float("nan")
        return (self.true_positive + self.true_negative) / self.counted


@dataclass
class SPQuantities:
    s_value: float
    p_value: float


# ---------------------------------------------------------------------------
# training to stationarity


def train_to_stationarity(
    model,
    params0: ParamVector,
    x: np.ndarray,
    y_idx: np.ndarray,
    grad_tol: float = 1e-8,
    max_iter: int = 20000,
) -> ParamVector:
    """Deterministic full-batch training (L-BFGS on the mean loss) until
    the gradient norm drops below ``grad_tol``."""
    batch = make_batch(x, y_idx)

    def fun(flat):
        pv = params0.with_flat(flat)
        _, mean_loss = forward(model, pv, batch)
        g = grad(model, pv, batch)
        return mean_loss, g.flat

    x = params0.flat.copy()
    gnorm = np.inf
    # restarts break L-BFGS line-search stalls on plateaus
    for _ in range(3):
        res = scipy.optimize.minimize(
            fun,
            x,
            jac=True,
            method="L-BFGS-B",
            options={
                "maxiter": max_iter,
                "maxfun": 4 * max_iter,
                "ftol": 0.0,
                "gtol": grad_tol * 1e-3,
            },
        )
        x = res.x
        gnorm = float(np.linalg.norm(fun(x)[1]))
        if gnorm <= grad_tol:
            break
    if gnorm > grad_tol and params0.q <= HESSIAN_CAP:
        x, gnorm = _newton_polish(model, params0, batch, fun, x, grad_tol)
    trained = params0.with_flat(x)
    if gnorm > grad_tol:
        raise OracleError(
            f"training failed to reach stationarity: |grad|={gnorm:.3e} > {grad_tol:.1e}"
        )
    return trained


def _newton_polish(model, params0, batch, fun, x, grad_tol, max_steps=40):
    """Damped-Newton cleanup when L-BFGS stalls just above the tolerance."""
    loss, g = fun(x)
    gnorm = float(np.linalg.norm(g))
    eye = np.eye(params0.q)
    for _ in range(max_steps):
        if gnorm <= 0.2 * grad_tol:
            break
        h = hessian(model, params0.with_flat(x), batch)
        mu = 1e-10
        while mu <= 1e2:
            try:
                step = np.linalg.solve(h + mu * eye, -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            new_loss, new_g = fun(x + step)
            if np.isfinite(new_loss) and new_loss <= loss + 1e-15:
                x = x + step
                loss, g = new_loss, new_g
                gnorm = float(np.linalg.norm(g))
                break
            mu *= 10.0
        else:
            break
    return x, gnorm


# ---------------------------------------------------------------------------
# inverse-Hessian influence


def exact_influence(
    model,
    params: ParamVector,
    train_batch: Batch,
    val_batch: Batch,
    damping: float = 0.0,
    cap: int = HESSIAN_CAP,
    grad_tol: float = STATIONARITY_TOL,
) -> IFResult:
    """Inverse-Hessian influence of each training example on the mean
    validation loss: -grad_val^T (H + damping I)^{-1} J^T.

    ``damping`` is the starting point of a x10 escalation ladder; it rises
    until the damped Hessian admits a Cholesky factorization. Requires the
    params to be near-stationary on the training batch.
    """
    if params.q > cap:
        raise ConfigError(
            f"exact influence is oracle-scale only: q={params.q} exceeds cap={cap}"
        )
    gnorm = float(np.linalg.norm(grad(model, params, train_batch).flat))
    if grad_tol is not None and gnorm > grad_tol:
        raise OracleError(
            f"exact influence assumes a trained optimum: |grad|={gnorm:.3e} > {grad_tol:.1e}"
        )

    h = hessian(model, params, train_batch, cap=cap)
    jac = per_example_grad_matrix(model, params, train_batch)
    g_val = grad(model, params, val_batch).flat

    ladder = [d for d in DAMPING_LADDER if d >= damping]
    if not ladder:
        ladder = [damping]
    eye = np.eye(params.q)
    chol = None
    damping_used = None
    for d in ladder:
        try:
            chol = np.linalg.cholesky(h + d * eye)
            damping_used = d
            break
        except np.linalg.LinAlgError:
            continue
    if chol is None:
        raise OracleError(
            f"hessian not positive definite at damping cap {ladder[-1]:.1e}"
        )
    solve = np.linalg.solve
    x = solve(chol.T, solve(chol, g_val))
    influence = -(jac @ x)
    eigs = np.linalg.eigvalsh(h + damping_used * eye)
    condition = float(eigs.max() / max(eigs.min(), np.finfo(float).tiny))
    return IFResult(influence=influence, hessian_condition=condition, damping_used=damping_used)


# ---------------------------------------------------------------------------
# leave-one-out retraining


def loo_influence(
    model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    index: int,
    val_batch: Batch,
    params0: ParamVector,
    grad_tol: float = 1e-8,
    max_iter: int = 20000,
    trained_full: ParamVector | None = None,
) -> float:
    """Validation-loss delta from deleting one training example and
    retraining from the shared initialization.

    Positive delta means the example was helping (its removal hurt). With
    a single training example the deleted model is the initialization.
    """
    n = len(train_x)
    if not 0 <= index < n:
        raise ConfigError(f"leave-one-out index {index} out of range for n={n}")
    if trained_full is None:
        trained_full = train_to_stationarity(
            model, params0, train_x, train_y, grad_tol=grad_tol, max_iter=max_iter
        )
    keep = np.arange(n) != index
    if keep.sum() == 0:
        trained_without = params0
    else:
        trained_without = train_to_stationarity(
            model, params0, train_x[keep], train_y[keep], grad_tol=grad_tol, max_iter=max_iter
        )
    _, loss_without = forward(model, trained_without, val_batch)
    _, loss_with = forward(model, trained_full, val_batch)
    return float(loss_without - loss_with)


def loo_influence_all(
    model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_batch: Batch,
    params0: ParamVector,
    grad_tol: float = 1e-8,
    max_iter: int = 20000,
) -> np.ndarray:
    """Leave-one-out deltas for every training example (shares the
    full-data training run)."""
    trained_full = train_to_stationarity(
        model, params0, train_x, train_y, grad_tol=grad_tol, max_iter=max_iter
    )
    return np.asarray(
        [
            loo_influence(
                model,
                train_x,
                train_y,
                j,
                val_batch,
                params0,
                grad_tol=grad_tol,
                max_iter=max_iter,
                trained_full=trained_full,
            )
            for j in range(len(train_x))
        ]
    )


# ---------------------------------------------------------------------------
# agreement counting and stability/plasticity readouts


def sign_agreement(
    meta_influence: np.ndarray,
    exact: np.ndarray,
    zero_band: float = DEFAULT_ZERO_BAND,
) -> SignAgreement:
    """Confusion counts of estimated vs ground-truth influence signs.

    The exact sign is the ground truth; examples whose exact influence
    lies within ``zero_band`` of zero are excluded from the counts and
    reported separately. Estimates > 0 count as predicted positive.
    """
    meta = np.asarray(meta_influence, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    if meta.shape != exact.shape:
        raise ConfigError("sign agreement inputs must have equal length")
    counted = np.abs(exact) > zero_band
    mp = meta[counted] > 0
    ep = exact[counted] > 0
    return SignAgreement(
        true_positive=int(np.sum(mp & ep)),
        true_negative=int(np.sum(~mp & ~ep)),
        false_positive=int(np.sum(mp & ~ep)),
        false_negative=int(np.sum(~mp & ep)),
        excluded=int(np.sum(~counted)),
    )


def sp_quantities(acc_matrix, t: int, k: int) -> SPQuantities:
    """Stability of task k after training task t (accuracy drop relative
    to when k finished) and plasticity of task t (gain over its pre-task
    accuracy)."""
    r = acc_matrix.r
    if not 1 <= t <= r.shape[0]:
        raise ConfigError(f"task index t={t} out of range")
    if not 1 <= k < t:
        raise ConfigError(f"stability needs k < t, got k={k}, t={t}")
    s_value = float(r[t - 1][k - 1] - r[k - 1][k - 1])
    p_value = float(r[t - 1][t - 1] - acc_matrix.pre[t - 1])
    return SPQuantities(s_value=s_value, p_value=p_value)
