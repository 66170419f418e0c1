"""Optimizers for the fixed-draw objective and the stochastic-gradient baseline.

``dadvi_fit`` runs a trust-region Newton method whose subproblem is solved
by Steihaug's truncated conjugate gradient, touching the Hessian only
through Hessian-vector products.  ``sg_fit`` is plain stochastic gradient
descent with fresh draws every step.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidConfiguration, NonFiniteObjective
from .saa import ObjectiveBundle, DrawSet
from .variational import FullRankParams, MeanFieldParams

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    gtol: float = 1e-8
    max_iter: int = 1000
    initial_radius: float = 1.0
    max_radius: float = 100.0
    # Relative residual for the Steihaug subproblem; None uses min(0.5, sqrt(|g|)).
    cg_tol: float = None
    accept_ratio: float = 0.15
    divergence_floor: float = -1e9
    # Full-rank runs: a log-diagonal entry of R above this counts as divergence.
    divergence_log_scale: float = 300.0
    # Mean-field runs: scale the subproblem by (exp(xi), 1), i.e. an ellipsoidal trust region.
    scaled: bool = True

    def __post_init__(self):
        if self.gtol <= 0 or self.initial_radius <= 0 or self.max_radius <= 0:
            raise InvalidConfiguration("optimizer tolerances and radii must be positive")
        if self.cg_tol is not None and self.cg_tol <= 0:
            raise InvalidConfiguration("cg_tol must be positive")
        if self.max_iter < 0:
            raise InvalidConfiguration("max_iter must be non-negative")


@dataclass
class FitResult:
    eta_hat: object
    objective: float
    grad_norm: float
    converged: bool
    iterations: int
    eval_counts: dict
    status: str = "converged"
    message: str = ""

    def to_dict(self):
        eta = self.eta_hat
        if isinstance(eta, MeanFieldParams):
            eta_d = {"mu": eta.mu.tolist(), "xi": eta.xi.tolist()}
        else:
            eta_d = {"mu": eta.mu.tolist(), "R": eta.R.tolist()}
        return {
            "eta_hat": eta_d,
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "eval_counts": dict(self.eval_counts),
        }


@dataclass
class OptimizationTrace:
    """Recorded optimizer states.

    Each record holds the step index, cumulative model evaluations, the
    objective value the optimizer saw, the gradient norm, the evaluation
    counts spent since the previous record, and a copy of ``eta``.
    """

    method: str
    records: list = field(default_factory=list)

    def add(self, step, cumulative, objective, grad_norm, counts, eta):
        self.records.append(
            {
                "step": int(step),
                "cumulative_evaluations": int(cumulative),
                "objective": float(objective),
                "grad_norm": float(grad_norm),
                "counts": dict(counts),
                "eta": np.array(eta, dtype=float),
            }
        )

    def __len__(self):
        return len(self.records)

    @property
    def evaluations(self):
        return np.array([r["cumulative_evaluations"] for r in self.records])

    @property
    def objectives(self):
        return np.array([r["objective"] for r in self.records])

    @property
    def etas(self):
        return [r["eta"] for r in self.records]

    def rows(self):
        for r in self.records:
            yield [self.method, r["step"], r["cumulative_evaluations"], r["objective"], r["grad_norm"]]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            write_trace_rows(fh, [self])


TRACE_COLUMNS = ["method", "step", "cumulative_evaluations", "objective", "grad_norm"]


def write_trace_rows(fh, traces):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for trace in traces:
        for row in trace.rows():
            writer.writerow([row[0], row[1], row[2], f"{row[3]:.17g}", f"{row[4]:.17g}"])


def _diff_counts(now, before):
    return {k: now[k] - before.get(k, 0) for k in now}


def steihaug_cg(hvp, g, radius, rtol, max_iter):
    """Approximately minimize ``g'p + p'Hp/2`` subject to ``|p| <= radius``.

    Returns ``(p, model_decrease, hit_boundary, iterations)``.
    """
    n = g.shape[0]
    p = np.zeros(n)
    r = g.copy()
    d = -r
    rr = r @ r
    m = 0.0
    tol = rtol * np.sqrt(rr)
    if np.sqrt(rr) <= tol:
        return p, 0.0, False, 0

    def to_boundary(p, d):
        a = d @ d
        b = 2.0 * (p @ d)
        c = p @ p - radius**2
        disc = np.sqrt(max(b * b - 4 * a * c, 0.0))
        return (-b - disc) / (2 * a), (-b + disc) / (2 * a)

    for j in range(1, max_iter + 1):
        Hd = hvp(d)
        dHd = d @ Hd
        rd = r @ d
        if dHd <= 0:
            taus = to_boundary(p, d)
            vals = [rd * t + 0.5 * dHd * t * t for t in taus]
            k = int(np.argmin(vals))
            return p + taus[k] * d, -(m + vals[k]), True, j
        alpha = rr / dHd
        p_next = p + alpha * d
        if np.linalg.norm(p_next) >= radius:
            tau = to_boundary(p, d)[1]
            return p + tau * d, -(m + rd * tau + 0.5 * dHd * tau * tau), True, j
        m += rd * alpha + 0.5 * dHd * alpha * alpha
        p = p_next
        r = r + alpha * Hd
        rr_next = r @ r
        if np.sqrt(rr_next) <= tol:
            return p, -m, False, j
        d = -r + (rr_next / rr) * d
        rr = rr_next
    return p, -m, False, max_iter


def _subproblem_scale(x, D):
    """``(exp(xi), 1)``: square root of the mean-field preconditioner, clipped for safety."""
    return np.concatenate([np.exp(np.clip(x[D:], -30.0, 30.0)), np.ones(D)])


def trust_region_newton(bundle, x0, config, method="dadvi", to_params=None):
    """Minimize ``bundle.value`` from the flat vector ``x0``."""
    config = config or OptimizerConfig()
    to_params = to_params or MeanFieldParams.from_vector
    start = bundle.snapshot_counts()
    trace = OptimizationTrace(method)
    x = np.asarray(x0, dtype=float).copy()
    f = bundle.value(x)
    if not np.isfinite(f):
        raise NonFiniteObjective("objective is not finite at the initial point")
    g = bundle.gradient(x)
    gnorm = float(np.linalg.norm(g))
    last = bundle.snapshot_counts()
    trace.add(0, last["model_evals"] - start["model_evals"], f, gnorm, _diff_counts(last, start), x)

    radius = config.initial_radius
    status, message = "max_iter", "iteration limit reached"
    it = 0
    full_rank = bundle.family == "full-rank"
    D = bundle.dim
    scaled = config.scaled and not full_rank
    while True:
        if gnorm <= config.gtol:
            status, message = "converged", "gradient norm below tolerance"
            break
        if it >= config.max_iter:
            break
        it += 1
        rtol = config.cg_tol if config.cg_tol is not None else min(0.5, np.sqrt(gnorm))
        S = _subproblem_scale(x, D) if scaled else np.ones_like(x)
        p_hat, pred, hit, _ = steihaug_cg(lambda v: S * bundle.hvp(x, S * v), S * g, radius, rtol, 2 * x.shape[0] + 10)
        p = S * p_hat
        x_new = x + p
        try:
            # Overflow on a wild trial step just means rejection.
            with np.errstate(over="ignore", invalid="ignore"):
                f_new = bundle.value(x_new)
        except NonFiniteObjective:
            f_new = np.inf
        g_new = None
        if pred <= 1e-14 * max(1.0, abs(f)) and np.isfinite(f_new):
            # Model decrease is at rounding level; judge the step by the gradient instead.
            g_new = bundle.gradient(x_new)
            accept = np.linalg.norm(g_new) < gnorm
            rho = 1.0 if accept else 0.0
        else:
            rho = (f - f_new) / pred if pred > 0 else -np.inf
            accept = rho > config.accept_ratio
        pnorm = np.linalg.norm(p_hat)
        if rho < 0.25:
            radius = 0.25 * pnorm if np.isfinite(pnorm) and pnorm > 0 else 0.25 * radius
        elif rho > 0.75 and hit:
            radius = min(2.0 * radius, config.max_radius)
        if accept:
            x, f = x_new, f_new
            g = g_new if g_new is not None else bundle.gradient(x)
            gnorm = float(np.linalg.norm(g))
            now = bundle.snapshot_counts()
            trace.add(it, now["model_evals"] - start["model_evals"], f, gnorm, _diff_counts(now, last), x)
            last = now
            if f < config.divergence_floor:
                status, message = "diverged", f"objective fell below {config.divergence_floor:g}"
                break
            if full_rank:
                L = np.zeros((D, D))
                L[np.tril_indices(D)] = x[D:]
                if np.max(np.abs(np.diag(L))) > config.divergence_log_scale:
                    status, message = "diverged", "covariance scale grew without bound"
                    break
        if radius < 1e-14 * max(1.0, np.linalg.norm(x)):
            status, message = "stalled", "trust radius collapsed"
            break

    now = bundle.snapshot_counts()
    if now != last:
        # Evaluations spent on rejected trailing steps still belong to the trace.
        trace.records[-1]["counts"] = {k: trace.records[-1]["counts"][k] + now[k] - last[k] for k in now}
    counts = _diff_counts(now, start)
    result = FitResult(
        eta_hat=to_params(x),
        objective=float(f),
        grad_norm=gnorm,
        converged=status == "converged",
        iterations=it,
        eval_counts=counts,
        status=status,
        message=message,
    )
    log.debug("%s finished: %s after %d iterations, |g|=%.3g", method, status, it, gnorm)
    return result, trace


def dadvi_fit(bundle, eta0=None, config=None):
    """Fit the mean-field family by minimizing the fixed-draw objective.

    Returns ``(FitResult, OptimizationTrace)``.  ``eta0`` defaults to the
    standard normal ``(mu, xi) = (0, 0)``.
    """
    if bundle.family != "mean-field":
        raise ContractViolation("dadvi_fit needs a mean-field bundle")
    eta0 = eta0 if eta0 is not None else MeanFieldParams.standard(bundle.dim)
    return trust_region_newton(bundle, eta0.to_vector(), config, "dadvi")


def dadvi_fit_fullrank(bundle, eta0=None, config=None, diagonal=False):
    """Full-rank counterpart of :func:`dadvi_fit`; returns ``(FitResult, OptimizationTrace)``.

    With fewer draws than dimensions the objective is unbounded below and
    the result carries ``status == "diverged"``: either the objective
    crossed ``config.divergence_floor``, a log-scale of ``R`` passed
    ``config.divergence_log_scale``, or the iteration budget ran out while
    the objective was still strictly decreasing.  ``diagonal=True`` fixes the
    off-diagonal entries of ``R`` at zero.
    """
    if bundle.family != "full-rank":
        raise ContractViolation("dadvi_fit_fullrank needs a full-rank bundle")
    D = bundle.dim
    eta0 = eta0 if eta0 is not None else FullRankParams(np.zeros(D), np.eye(D))
    if diagonal:
        restricted = _DiagonalRestriction(bundle)
        x0 = np.concatenate([eta0.mu, np.log(np.diag(eta0.R))])
        return trust_region_newton(
            restricted,
            x0,
            config,
            "dadvi-fullrank-diagonal",
            lambda x: FullRankParams(x[:D], np.diag(np.exp(x[D:]))),
        )
    result, trace = trust_region_newton(
        bundle, eta0.to_vector(), config, "dadvi-fullrank", lambda x: FullRankParams.from_vector(x, D)
    )
    if not result.converged and result.status != "diverged" and bundle.N < D and _still_descending(trace):
        result.status = "diverged"
        result.message = f"objective still decreasing after {result.iterations} iterations with N={bundle.N} < D={D}"
    return result, trace


def _still_descending(trace, fraction=0.25):
    obj = trace.objectives
    if len(obj) < 8:
        return False
    tail = obj[int(len(obj) * (1 - fraction)) :]
    return bool(np.all(np.diff(tail) <= 0) and tail[-1] < tail[0] and obj[-1] < obj[0])


class _DiagonalRestriction:
    """Full-rank objective restricted to diagonal ``R``, on ``(mu, log diag R)``."""

    family = "mean-field"

    def __init__(self, bundle):
        self.bundle = bundle
        D = bundle.dim
        rows, cols = np.tril_indices(D)
        self._diag_pos = D + np.flatnonzero(rows == cols)
        self._keep = np.concatenate([np.arange(D), self._diag_pos])
        self.dim = D
        self.N = bundle.N

    def _embed(self, x):
        full = np.zeros(self.bundle.eta_size)
        full[self._keep] = x
        return full

    def snapshot_counts(self):
        return self.bundle.snapshot_counts()

    def value(self, x):
        return self.bundle.value(self._embed(x))

    def gradient(self, x):
        return self.bundle.gradient(self._embed(x))[self._keep]

    def hvp(self, x, v):
        return self.bundle.hvp(self._embed(x), self._embed(v))[self._keep]


@dataclass
class SGConfig:
    step_size: float = 0.01
    decay: float = 0.5
    draws_per_step: int = 1
    window: int = 100
    rel_tol: float = 1e-3
    max_iter: int = 100000
    average_window: int = 1
    record_every: int = 50

    def __post_init__(self):
        if self.rel_tol <= 0 or self.step_size <= 0:
            raise InvalidConfiguration("SG step size and threshold must be positive")
        if self.window < 1 or self.average_window < 1 or self.draws_per_step < 1 or self.record_every < 1:
            raise InvalidConfiguration("SG windows and draw counts must be >= 1")


def window_relative_change(current, previous):
    """Largest per-parameter change between two window averages, relative to ``max(|previous|, 1)``."""
    return float(np.max(np.abs(current - previous) / np.maximum(np.abs(previous), 1.0)))


def sg_fit(model, eta0=None, config=None, seed=0):
    """Stochastic-gradient fit with fresh draws at every step.

    The step size is ``step_size / (1 + t) ** decay``.  Iterates are averaged
    over consecutive blocks of ``window`` steps; the run stops once the
    relative change between two consecutive block averages (see
    :func:`window_relative_change`) is below ``rel_tol``.  The returned
    point is the last iterate, or the mean of the last ``average_window``
    iterates.
    """
    config = config or SGConfig()
    D = model.dim
    eta0 = eta0 if eta0 is not None else MeanFieldParams.standard(D)
    rng = np.random.default_rng(seed)
    x = eta0.to_vector()
    trace = OptimizationTrace("sg")
    evals = 0
    tail = []
    block_sum = np.zeros_like(x)
    prev_block = None
    status = "max_iter"
    last_counts = {"value": 0, "gradient": 0, "hvp": 0, "model_evals": 0}
    counts = dict(last_counts)
    f = np.nan
    gnorm = np.nan
    t = 0
    for t in range(1, config.max_iter + 1):
        bundle = ObjectiveBundle(model, DrawSet(rng.standard_normal((config.draws_per_step, D))))
        try:
            g = bundle.gradient(x)
            record = t % config.record_every == 0 or t == 1
            if record:
                f = bundle.value(x)
        except NonFiniteObjective as exc:
            exc.trace = trace
            raise
        for k, v in bundle.counts.items():
            counts[k] += v
        evals = counts["model_evals"]
        gnorm = float(np.linalg.norm(g))
        if record:
            trace.add(t, evals, f, gnorm, _diff_counts(counts, last_counts), x)
            last_counts = dict(counts)
        x = x - config.step_size / (1.0 + t) ** config.decay * g
        if not np.all(np.isfinite(x)):
            exc = NonFiniteObjective(f"SG iterate became non-finite at step {t}")
            exc.trace = trace
            raise exc
        tail.append(x.copy())
        if len(tail) > config.average_window:
            tail.pop(0)
        block_sum += x
        if t % config.window == 0:
            block = block_sum / config.window
            block_sum = np.zeros_like(x)
            if prev_block is not None and window_relative_change(block, prev_block) < config.rel_tol:
                status = "converged"
                break
            prev_block = block
    if trace.records[-1]["step"] != t:
        trace.add(t, evals, f, gnorm, _diff_counts(counts, last_counts), x)
    x_out = np.mean(tail, axis=0) if config.average_window > 1 else x
    result = FitResult(
        eta_hat=MeanFieldParams.from_vector(x_out),
        objective=float(f),
        grad_norm=gnorm,
        converged=status == "converged",
        iterations=t,
        eval_counts=counts,
        status=status,
        message="relative change below threshold" if status == "converged" else "iteration limit reached",
    )
    return result, trace
