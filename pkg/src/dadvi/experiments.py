"""Diagnostic experiments: normalized traces, sampling-error coverage,
full-rank degeneracy and the global/local scaling study."""
import csv
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sopt
from scipy.stats import norm

from .errors import ContractViolation, DegenerateNormalization, InvalidConfiguration, NotAtOptimum
from .model import QuadraticModel, instantiate_hierarchical
from .optimize import OptimizerConfig, dadvi_fit
from .posterior import CGConfig, mc_error
from .saa import DrawSet, ObjectiveBundle, sample_draws, saa_objective_fullrank
from .variational import FullRankParams, MeanFieldParams, QuantityOfInterest


def substream_seed(seed, *keys):
    """Derive an independent 63-bit seed from ``seed`` and a path of keys.

    String keys are hashed with CRC-32; the result is the first word of a
    ``numpy.random.SeedSequence`` over ``[seed, *keys]``.
    """
    words = [int(seed)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def _fmt(x):
    return f"{x:.17g}" if isinstance(x, float) else x


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# normalized optimization traces
# ---------------------------------------------------------------------------


@dataclass
class TraceComparison:
    z_indep: DrawSet
    reference: float
    scale: float
    methods: dict = field(default_factory=dict)

    header = ["method", "step", "cumulative_evaluations", "kappa", "z_indep"]

    def rows(self):
        for name, (steps, evals, kappa) in self.methods.items():
            for s, e, k in zip(steps, evals, kappa):
                yield [name, int(s), int(e), float(k), self.z_indep.identifier]


def normalized_trace(traces, eta_dadvi, z_indep, model):
    """Center and scale each trace by the DADVI optimum on independent draws.

    ``kappa = (K(eta_i | Z_indep) - K(eta_dadvi | Z_indep)) / s`` where ``s``
    is the sample SD over ``Z_indep`` of the single-draw objective at
    ``eta_dadvi``.  ``model`` may also be an ``ObjectiveBundle``.
    """
    model = getattr(model, "model", model)
    bundle = ObjectiveBundle(model, z_indep)
    ref_draws = bundle.per_draw_values(eta_dadvi.to_vector())
    scale = float(np.std(ref_draws, ddof=1)) if z_indep.N > 1 else 0.0
    if not scale > 0:
        raise DegenerateNormalization("single-draw objective has zero sample SD at the DADVI optimum")
    reference = float(np.mean(ref_draws))
    out = TraceComparison(z_indep, reference, scale)
    for trace in traces:
        vals = np.array([bundle.value(eta) for eta in trace.etas])
        steps = [r["step"] for r in trace.records]
        out.methods[trace.method] = (steps, trace.evaluations, (vals - reference) / scale)
    return out


# ---------------------------------------------------------------------------
# coverage of the sampling standard error
# ---------------------------------------------------------------------------


@dataclass
class CoverageExperiment:
    """Replicated DADVI fits for checking the MC standard error.

    ``indices`` are the coordinates whose variational means are tracked.
    The reference ``mu_inf`` is the average over ``reference_replications``
    fits at ``reference_N``; when ``reference_N`` is in the grid those fits
    are reused rather than drawn again.
    """

    model: object
    indices: tuple = (0,)
    N_values: tuple = (8, 16, 32, 64)
    replications: int = 100
    reference_N: int = 64
    reference_replications: int = 100
    seed: int = 0
    gtol: float = 1e-8

    def __post_init__(self):
        if self.replications < 2 or self.reference_replications < 1:
            raise InvalidConfiguration("coverage needs at least two replications")
        if min(self.N_values) < 2:
            raise InvalidConfiguration("coverage needs N >= 2")


@dataclass
class CoverageResult:
    rows: list
    mu_inf: dict
    summary: dict
    excluded: int

    header = ["N", "replication", "quantity", "estimate", "se", "eps", "phi_eps"]


def _coverage_fits(exp, N, reps, tag):
    """Returns a list indexed by replication: ``(estimates, ses)`` or ``None`` when the fit failed."""
    out = []
    cfg = OptimizerConfig(gtol=exp.gtol)
    qs = [QuantityOfInterest.coordinate(i) for i in exp.indices]
    for r in range(reps):
        z = sample_draws(substream_seed(exp.seed, tag, N, r), N, exp.model.dim)
        bundle = ObjectiveBundle(exp.model, z)
        fit, _ = dadvi_fit(bundle, config=cfg)
        if not fit.converged:
            out.append(None)
            continue
        try:
            ses = [mc_error(q, fit.eta_hat, bundle, CGConfig()) for q in qs]
        except (NotAtOptimum, ArithmeticError, RuntimeError):
            out.append(None)
            continue
        out.append((fit.eta_hat.mu[list(exp.indices)], np.array(ses)))
    return out


def run_coverage(exp):
    """Fit every (N, replication), compute ``eps = (mu_hat - mu_inf) / se`` and ``Phi(eps)``."""
    fits = {N: _coverage_fits(exp, N, exp.replications, "coverage") for N in exp.N_values}
    if exp.reference_N in fits and exp.reference_replications == exp.replications:
        ref = fits[exp.reference_N]
    else:
        ref = _coverage_fits(exp, exp.reference_N, exp.reference_replications, "reference")
    ref_ok = [f[0] for f in ref if f is not None]
    if not ref_ok:
        raise NotAtOptimum("no reference fit converged")
    mu_inf = np.mean(ref_ok, axis=0)
    rows = []
    excluded = 0
    summary = {}
    for N in exp.N_values:
        eps_all = []
        for r, f in enumerate(fits[N]):
            if f is None:
                excluded += 1
                continue
            est, se = f
            eps = (est - mu_inf) / se
            eps_all.append(eps)
            for k, idx in enumerate(exp.indices):
                rows.append([N, r, f"theta[{idx}]", float(est[k]), float(se[k]), float(eps[k]), float(norm.cdf(eps[k]))])
        eps_all = np.array(eps_all)
        summary[N] = {
            "count": int(eps_all.shape[0]),
            "eps_mean": eps_all.mean(axis=0).tolist(),
            "eps_sd": eps_all.std(axis=0, ddof=1).tolist(),
        }
    return CoverageResult(rows, {f"theta[{i}]": float(m) for i, m in zip(exp.indices, mu_inf)}, summary, excluded)


# ---------------------------------------------------------------------------
# full-rank degeneracy
# ---------------------------------------------------------------------------


@dataclass
class DegeneracyPath:
    log_M: np.ndarray
    objective: np.ndarray
    log_det: np.ndarray
    likelihood_term: np.ndarray
    span_rank: int
    direct: np.ndarray

    header = ["log_M", "objective", "log_det", "likelihood_term", "direct_objective"]

    def rows(self):
        for row in zip(self.log_M, self.objective, self.log_det, self.likelihood_term, self.direct):
            yield [float(v) for v in row]


def span_projection(Z):
    """Orthogonal projector onto the span of the draws, and its rank."""
    z = np.asarray(getattr(Z, "draws", Z), dtype=float)
    u, s, _ = np.linalg.svd(z.T, full_matrices=False)
    rank = int(np.sum(s > s.max() * max(z.shape) * np.finfo(float).eps))
    Q = u[:, :rank]
    return Q @ Q.T, rank


def degeneracy_path(D, N, Z=None, log_M_values=None, eps=1.0, model=None, mu=None, M_values=None, direct_limit=10.0):
    """Full-rank objective along ``R = eps * P_Z + M * (I - P_Z)``.

    ``P_Z`` projects onto the span of the draws, so ``R z_n = eps z_n`` and
    the likelihood term is constant along the path, while
    ``log|R| = r log(eps) + (D - r) log(M)``.  The path is parameterized by
    ``log M`` so it can run far past where ``M`` itself would overflow.
    Where ``log M <= direct_limit`` the objective is also evaluated directly
    with :func:`saa_objective_fullrank` (``direct``; NaN elsewhere).
    """
    if N >= D:
        raise ContractViolation("degeneracy needs fewer draws than dimensions")
    if Z is None:
        Z = sample_draws(0, N, D)
    z = np.asarray(getattr(Z, "draws", Z), dtype=float)
    if z.shape != (N, D):
        raise ContractViolation(f"draws must have shape ({N}, {D})")
    if log_M_values is None:
        log_M_values = np.log(np.asarray(M_values, dtype=float))
    log_M = np.asarray(log_M_values, dtype=float)
    model = model or QuadraticModel(np.eye(D))
    mu = np.zeros(D) if mu is None else np.asarray(mu, dtype=float)
    P, rank = span_projection(z)
    theta = mu + eps * (z @ P.T)
    lik = float(model.log_density_batch(theta).mean())
    log_det = rank * np.log(eps) + (D - rank) * log_M
    objective = -log_det - lik
    bundle = ObjectiveBundle(model, DrawSet(z), family="full-rank")
    direct = np.full_like(log_M, np.nan)
    for i, lm in enumerate(log_M):
        if lm <= direct_limit:
            R = eps * P + np.exp(lm) * (np.eye(D) - P)
            direct[i] = saa_objective_fullrank(FullRankParams(mu, R), bundle)
    return DegeneracyPath(log_M, objective, log_det, np.full_like(log_M, lik), rank, direct)


def degeneracy_matrix(Z, M, eps=1.0):
    """Explicit ``R`` for moderate ``M``, for cross-checking the path."""
    z = np.asarray(getattr(Z, "draws", Z), dtype=float)
    P, _ = span_projection(z)
    D = z.shape[1]
    return eps * P + M * (np.eye(D) - P)


# ---------------------------------------------------------------------------
# global/local scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalingResult:
    rows: list
    summary: dict
    references: dict

    header = ["P", "replication", "global_error"]


def global_parameter_error(eta, reference, global_dim=2):
    a = np.concatenate([eta.mu[:global_dim], eta.xi[:global_dim]])
    b = np.concatenate([reference.mu[:global_dim], reference.xi[:global_dim]])
    return float(np.linalg.norm(a - b))


def global_local_scaling(P_values, N=30, replications=20, seed=0, reference_N=4096, data_seed=0, gtol=1e-8):
    """DADVI global-parameter error against a large-N reference fit, per number of groups ``P``.

    Every instance is drawn from the same global truth; data for each ``P``
    come from ``data_seed``.  The error is the Euclidean distance between
    the global blocks ``(mu_gamma, xi_gamma)``.
    """
    rows = []
    summary = {}
    references = {}
    cfg = OptimizerConfig(gtol=gtol)
    for P in P_values:
        model = instantiate_hierarchical(P, data_seed)
        ref_bundle = ObjectiveBundle(model, sample_draws(substream_seed(seed, "reference", P), reference_N, model.dim))
        ref_fit, _ = dadvi_fit(ref_bundle, config=cfg)
        if not ref_fit.converged:
            raise NotAtOptimum(f"reference fit for P={P} did not converge ({ref_fit.status})", ref_fit.grad_norm)
        references[P] = ref_fit.eta_hat
        errs = []
        for r in range(replications):
            bundle = ObjectiveBundle(model, sample_draws(substream_seed(seed, "scaling", P, r), N, model.dim))
            fit, _ = dadvi_fit(bundle, config=cfg)
            err = global_parameter_error(fit.eta_hat, ref_fit.eta_hat)
            errs.append(err)
            rows.append([P, r, err])
        summary[P] = {"mean": float(np.mean(errs)), "sd": float(np.std(errs, ddof=1)) if len(errs) > 1 else 0.0}
    return ScalingResult(rows, summary, references)


def gauss_hermite_optimum(model, nodes=20):
    """Exact mean-field optimum by tensor Gauss-Hermite quadrature (small ``dim`` only).

    Minimizes ``-sum(xi) - E_q[log p]`` with the expectation taken on a
    ``nodes ** dim`` grid, using scipy's BFGS; independent of the package's
    own optimizer and draws.
    """
    D = model.dim
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / np.sqrt(2.0 * np.pi)
    grids = np.meshgrid(*([x] * D), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.meshgrid(*([w] * D), indexing="ij"), axis=0).ravel()

    def objective(eta):
        p = MeanFieldParams.from_vector(eta)
        theta = p.mu + z * p.sigma
        lp = model.log_density_batch(theta)
        g = model.gradient_batch(theta)
        val = -np.sum(p.xi) - weights @ lp
        grad = np.concatenate([-(weights @ g), -1.0 - (weights @ (g * z)) * p.sigma])
        return val, grad

    res = sopt.minimize(objective, np.zeros(2 * D), jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    return MeanFieldParams.from_vector(res.x)
