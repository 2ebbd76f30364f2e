"""Experiment orchestration, oracle suites, and finite-difference checks.

``run_experiment`` executes every (method, seed) cell of a spec and
leaves per-seed artifacts plus aggregates on disk; a failed cell leaves
the completed ones intact. The oracle and gradcheck suites back the
``oracle`` and ``gradcheck`` CLI verbs and the verification tests.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.stats

from . import reporting
from .config import ExperimentSpec
from .data import make_batch, make_blob_digits, make_split_gaussians
from .errors import ConfigError
from .gradients import grad, hessian, hvp
from .influence import influence_single, influence_vectors, pseudo_update_perturbed
from .models import MLPClassifier, ModelSpec
from .oracle import (
    exact_influence,
    loo_influence_all,
    sign_agreement,
    train_to_stationarity,
)
from .trainer import run_stream


# ---------------------------------------------------------------------------
# experiment runner


def run_experiment(spec: ExperimentSpec):
    """Run all (method, seed) cells; returns {method: [MetricsReport]}."""
    out = Path(spec.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        with open(out / "config_resolved.json", "w") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc

    stream = spec.stream.build()
    comparison_rows = []
    pairs = []
    results: dict[str, list] = {}
    for method in spec.methods:
        per_seed = []
        for seed in spec.seeds:
            cfg = spec.train_config(method, seed)
            result = run_stream(stream, cfg)
            seed_dir = out / method / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            reporting.write_metrics_csv(seed_dir / "metrics.csv", result.metrics, method, seed)
            reporting.write_metrics_json(seed_dir / "metrics.json", result.metrics, method, seed)
            reporting.write_acc_matrix_csv(seed_dir / "acc_matrix.csv", result.acc)
            reporting.write_influence_log_csv(
                seed_dir / "influence_log.csv", result.influence_steps
            )
            hist = reporting.influence_stats(result.influence_steps)
            reporting.write_influence_hist_csv(seed_dir / "influence_hist.csv", hist)
            for t, rows in result.memory_snapshots.items():
                reporting.write_memory_snapshot_csv(
                    seed_dir / f"memory_snapshot_task{t}.csv", rows
                )
            if result.warnings:
                with open(seed_dir / "warnings.txt", "w") as fh:
                    fh.write("\n".join(result.warnings) + "\n")
            per_seed.append(result.metrics)
            pairs.append((method, seed, result.metrics.a1, result.metrics.a_inf))
        reporting.write_aggregate_csv(out / method / "aggregate.csv", method, per_seed)
        comparison_rows.append(reporting.aggregate_row(method, per_seed))
        results[method] = per_seed

    reporting.write_comparison_csv(out / "comparison.csv", comparison_rows)
    reporting.write_comparison_pairs_csv(out / "comparison_pairs.csv", pairs)
    with open(out / "metadata.json", "w") as fh:
        json.dump(
            {"started_unix": started, "finished_unix": time.time()}, fh, indent=2
        )
        fh.write("\n")
    return results


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def regenerate_report(out_dir, figures: bool = True):
    """Re-aggregate per-seed artifacts; optionally render figures next to
    the CSV output."""
    out = Path(out_dir)
    cfg_path = out / "config_resolved.json"
    if not cfg_path.exists():
        raise ConfigError(f"{out}: no config_resolved.json; not an experiment directory")
    with open(cfg_path) as fh:
        doc = json.load(fh)
    methods = doc["methods"]
    seeds = doc["seeds"]

    comparison_rows = []
    pairs = []
    curves_by_method = {}
    from .trainer import MetricsReport

    for method in methods:
        per_seed = []
        curves = []
        for seed in seeds:
            seed_dir = out / method / f"seed_{seed}"
            with open(seed_dir / "metrics.json") as fh:
                payload = json.load(fh)
            metrics = MetricsReport(
                a1=payload["a1"],
                a_inf=payload["a_inf"],
                a_m=payload["a_m"],
                bwt=payload["bwt"],
                bwt_defined=payload["bwt_defined"],
                full_matrix=payload["full_matrix"],
                stability_final=payload["stability_final"],
                plasticity=payload["plasticity"],
            )
            per_seed.append(metrics)
            pairs.append((method, seed, metrics.a1, metrics.a_inf))
            header, rows = _read_csv(seed_dir / "acc_matrix.csv")
            curve = []
            for t, row in enumerate(rows):
                accs = [float(v) for v in row[2 : 2 + t + 1] if v != ""]
                curve.append(float(np.mean(accs)) if len(accs) == t + 1 else float("nan"))
            curves.append(curve)
        reporting.write_aggregate_csv(out / method / "aggregate.csv", method, per_seed)
        comparison_rows.append(reporting.aggregate_row(method, per_seed))
        curves_by_method[method] = list(np.mean(np.asarray(curves), axis=0))

    reporting.write_comparison_csv(out / "comparison.csv", comparison_rows)
    reporting.write_comparison_pairs_csv(out / "comparison_pairs.csv", pairs)
    if figures:
        reporting.render_comparison_figure(out / "comparison_metrics.png", comparison_rows)
        reporting.render_accuracy_curves(out / "accuracy_curves.png", curves_by_method)
        for method in methods:
            seed_dir = out / method / f"seed_{seeds[0]}"
            log_path = seed_dir / "influence_log.csv"
            if log_path.exists():
                hist = _hist_from_log(log_path)
                if hist is not None and hist.per_task:
                    reporting.render_influence_hist_figure(
                        out / f"influence_hist_{method}.png", hist, method
                    )
    return comparison_rows


def _hist_from_log(path):
    from .influence import InfluenceRecord
    from .trainer import StepInfluence

    header, rows = _read_csv(path)
    if not rows:
        return None
    by_step: dict[int, list] = {}
    for row in rows:
        by_step.setdefault(int(row[0]), []).append(row)
    steps = []
    for step, entries in sorted(by_step.items()):
        rec = InfluenceRecord(
            i_s=np.asarray([float(r[3]) for r in entries]),
            i_p=np.asarray([float(r[4]) for r in entries]),
            i_fused=np.asarray([float(r[5]) for r in entries]),
            gamma_star=float(entries[0][6]),
            batch_example_ids=np.asarray([int(r[1]) for r in entries]),
            batch_task_ids=np.asarray([int(r[2]) for r in entries]),
        )
        steps.append(StepInfluence(step=step, record=rec))
    return reporting.influence_stats(steps)


# ---------------------------------------------------------------------------
# oracle suites


@dataclass
class SignAgreementSuiteResult:
    agreement: object
    meta: np.ndarray
    exact: np.ndarray
    damping_used: float
    lam_max: float = 0.0
    lr: float = 0.0
    iterations: int = 0
    rows: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.agreement.agreement_rate


def top_curvature(model, params, batch, iters: int = 30, seed: int = 0) -> float:
    """Largest Hessian eigenvalue magnitude by power iteration on HVPs."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=params.q)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = hvp(model, params, batch, v)
        lam = float(np.linalg.norm(hv))
        if lam < 1e-12:
            return 0.0
        v = hv / lam
    return lam


def run_sign_agreement_suite(
    n_train: int = 1000,
    n_val: int = 500,
    dim: int = 64,
    hidden: int = 4,
    num_classes: int = 10,
    noise: float = 0.5,
    label_noise: float = 0.2,
    seed: int = 1231,
    damping: float = 1e-2,
    grad_tol: float = 1e-4,
    activation: str = "tanh",
) -> SignAgreementSuiteResult:
    """Train a single-hidden-layer net to near-stationarity on a
    digits-style task, then compare trial-step influence signs against
    the inverse-Hessian influence of every training example.

    Setup notes. The defaults keep the parameter count well below the
    training-set size and the labels ambiguous, so the optimum is
    interior and the Hessian carries real curvature; an interpolating
    fit would turn every influence into numerical noise. The trial-step
    count K and rate are matched to the oracle: K steps at rate
    lr < 1/lam_max accumulate the truncated geometric series of
    (I - lr H), a spectral filter that approaches 1/lambda on curved
    directions and caps at K*lr ~ 1/damping on flat ones, which is the
    same regularized inverse the damped oracle applies.
    """
    tr_x, tr_y, te_x, te_y = make_blob_digits(
        n_train,
        n_val,
        num_classes=num_classes,
        dim=dim,
        noise=noise,
        label_noise=label_noise,
        seed=seed,
    )
    model = MLPClassifier(ModelSpec(dim, (hidden,), num_classes, activation))
    params0 = model.init_params(seed)
    trained = train_to_stationarity(model, params0, tr_x, tr_y, grad_tol=grad_tol)

    train_batch = make_batch(tr_x, tr_y)
    val_batch = make_batch(te_x, te_y)
    lam = top_curvature(model, trained, train_batch)
    lr = 0.9 / lam if lam > 0 else 1.0
    iterations = max(1, int(np.ceil(1.0 / (lr * damping))))
    meta = influence_single(
        model, trained, train_batch, val_batch, lr, iterations=iterations
    )
    exact = exact_influence(
        model, trained, train_batch, val_batch, damping=damping, grad_tol=grad_tol
    )
    agreement = sign_agreement(meta, exact.influence)
    rows = [
        (
            i,
            meta[i],
            exact.influence[i],
            float("nan"),
            bool((meta[i] > 0) == (exact.influence[i] > 0)),
        )
        for i in range(n_train)
    ]
    return SignAgreementSuiteResult(
        agreement=agreement,
        meta=meta,
        exact=exact.influence,
        damping_used=exact.damping_used,
        lam_max=lam,
        lr=lr,
        iterations=iterations,
        rows=rows,
    )


@dataclass
class LooSuiteResult:
    spearman: float
    agreement: object
    exact: np.ndarray
    loo_deltas: np.ndarray
    rows: list = field(default_factory=list)


def run_loo_suite(
    n_train: int = 50,
    dim: int = 8,
    separation: float = 1.2,
    seed: int = 1231,
    grad_tol: float = 1e-8,
) -> LooSuiteResult:
    """Convex check: logistic regression on overlapping blobs, exact
    inverse-Hessian influence against leave-one-out retraining deltas.

    The sign bridge maps a leave-one-out delta d to the influence
    convention as -d before counting agreement.
    """
    stream = make_split_gaussians(
        num_tasks=1,
        classes_per_task=2,
        dim=dim,
        n_train=n_train,
        n_test=40,
        separation=separation,
        seed=seed,
    )
    task = stream.tasks[0]
    tr_x = task.train_x
    tr_y = stream.labels_to_indices(task.train_y)
    val_batch = make_batch(task.test_x, stream.labels_to_indices(task.test_y))
    model = MLPClassifier(ModelSpec(dim, (), 2, "tanh"))
    params0 = model.init_params(seed)
    trained = train_to_stationarity(model, params0, tr_x, tr_y, grad_tol=grad_tol)

    train_batch = make_batch(tr_x, tr_y)
    exact = exact_influence(model, trained, train_batch, val_batch, grad_tol=1e-6)
    deltas = loo_influence_all(model, tr_x, tr_y, val_batch, params0, grad_tol=grad_tol)
    bridged = -deltas
    spearman = float(scipy.stats.spearmanr(exact.influence, bridged).statistic)
    agreement = sign_agreement(exact.influence, bridged)
    rows = [
        (
            i,
            float("nan"),
            exact.influence[i],
            deltas[i],
            bool((exact.influence[i] > 0) == (bridged[i] > 0)),
        )
        for i in range(n_train)
    ]
    return LooSuiteResult(
        spearman=spearman,
        agreement=agreement,
        exact=exact.influence,
        loo_deltas=deltas,
        rows=rows,
    )


# ---------------------------------------------------------------------------
# finite-difference checks


def _random_instance(rng, q_max=500, batch=6):
    """Random small model and batch for derivative checking.

    Always tanh: central differences straddling a relu kink disagree with
    the (exact almost everywhere) subgradient, so finite-difference suites
    need a smooth activation. Relu paths are covered by the exact
    replay-vs-batched agreement tests instead."""
    for _ in range(100):
        dim = int(rng.integers(2, 9))
        hidden = tuple(int(h) for h in rng.integers(2, 13, size=int(rng.integers(1, 3))))
        classes = int(rng.integers(2, 6))
        spec = ModelSpec(dim, hidden, classes, activation="tanh")
        model = MLPClassifier(spec)
        if model.num_params <= q_max:
            break
    params = model.init_params(int(rng.integers(2**31)))
    x = rng.normal(size=(batch, dim))
    y = rng.integers(0, classes, size=batch)
    return model, params, make_batch(x, y)


def _rel_err(a, b, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / scale


@dataclass
class CheckResult:
    name: str
    max_err: float
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tolerance


def gradient_fd_check(pairs: int = 100, seed: int = 0, h: float = 1e-5, tol: float = 1e-5):
    """Central finite differences of the mean loss over every parameter
    coordinate vs the reverse-mode gradient."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        model, params, batch = _random_instance(rng)
        g = grad(model, params, batch).flat
        fd = np.empty_like(g)
        flat = params.flat
        for k in range(params.q):
            bump = np.zeros_like(flat)
            bump[k] = h
            up = model.per_example_losses_np(params.with_flat(flat + bump), batch.x, batch.y).mean()
            dn = model.per_example_losses_np(params.with_flat(flat - bump), batch.x, batch.y).mean()
            fd[k] = (up - dn) / (2 * h)
        worst = max(worst, float(_rel_err(g, fd).max()))
    return CheckResult("gradient_vs_fd", worst, tol, pairs)


def hessian_fd_check(seed: int = 0, h: float = 1e-5, tol: float = 1e-4):
    """Finite differences of the gradient vs the dense Hessian on a
    small smooth (tanh) model."""
    rng = np.random.default_rng(seed)
    model = MLPClassifier(ModelSpec(3, (4,), 3, "tanh"))  # q = 31
    params = model.init_params(int(rng.integers(2**31)))
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, size=6)
    batch = make_batch(x, y)
    hess = hessian(model, params, batch)
    fd = np.empty_like(hess)
    for k in range(params.q):
        bump = np.zeros(params.q)
        bump[k] = h
        gp = grad(model, params.with_flat(params.flat + bump), batch).flat
        gm = grad(model, params.with_flat(params.flat - bump), batch).flat
        fd[:, k] = (gp - gm) / (2 * h)
    return CheckResult("hessian_vs_fd", float(np.abs(hess - fd).max()), tol, 1)


def influence_fd_check(
    instances: int = 20,
    seed: int = 0,
    h: float = 1e-5,
    rel_tol: float = 1e-5,
    abs_floor: float = 1e-10,
    iterations: int = 1,
    lr: float = 0.1,
):
    """Central finite differences over each example's loss perturbation
    vs the influence vectors (both validation sides)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        model, params, _ = _random_instance(rng, q_max=500, batch=16)
        dim = model.spec.input_dim
        classes = model.spec.num_classes_total
        batch = make_batch(
            rng.normal(size=(16, dim)), rng.integers(0, classes, size=16)
        )
        v_old = make_batch(rng.normal(size=(8, dim)), rng.integers(0, classes, size=8))
        v_new = make_batch(rng.normal(size=(8, dim)), rng.integers(0, classes, size=8))
        i_s, i_p = influence_vectors(
            model, params, batch, v_old, v_new, lr, iterations=iterations
        )
        for side, vec in ((v_old, i_s), (v_new, i_p)):
            for j in range(len(batch)):
                eps = np.zeros(len(batch))
                eps[j] = h
                up = pseudo_update_perturbed(model, params, batch, lr, iterations, eps)
                dn = pseudo_update_perturbed(model, params, batch, lr, iterations, -eps)
                lu = model.per_example_losses_np(up, side.x, side.y).mean()
                ld = model.per_example_losses_np(dn, side.x, side.y).mean()
                fd = (lu - ld) / (2 * h)
                err = abs(vec[j] - fd)
                allowed = max(abs_floor, rel_tol * max(abs(vec[j]), abs(fd)))
                worst = max(worst, err / allowed)
    # worst is normalized: <= 1 means within tolerance everywhere
    return CheckResult("influence_vs_fd", worst, 1.0, instances)
