"""Linear-response covariances and Monte-Carlo standard errors at a fitted optimum.

Both quantities need ``H^{-1} g`` where ``H`` is the Hessian of the
fixed-draw objective at ``eta_hat`` and ``g`` the gradient of a posterior
expectation.  ``H`` is only ever applied to vectors; solves go through a
diagonally preconditioned conjugate gradient.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CGNotConverged, ContractViolation, NotAtOptimum
from .model import Model
from .optimize import OptimizerConfig, dadvi_fit
from .saa import ObjectiveBundle
from .variational import MeanFieldParams, QuantityOfInterest, reparameterize, saa_moment_gradient

__all__ = [
    "CGConfig",
    "CGResult",
    "HessianOperator",
    "QoIReport",
    "QoIRow",
    "QuantityOfInterest",
    "TiltedModel",
    "build_qoi_report",
    "cg_solve",
    "dadvi_preconditioner",
    "lr_covariance",
    "lr_covariance_by_tilting",
    "lr_covariance_matrix",
    "mc_error",
    "verify_optimum",
]


class HessianOperator:
    """Matrix-free ``v -> H v`` for the fixed-draw objective at ``eta_hat``."""

    def __init__(self, bundle, eta_hat):
        self.bundle = bundle
        self.eta_hat = eta_hat
        self._x = eta_hat.to_vector()
        self.shape = (self._x.shape[0], self._x.shape[0])

    def matvec(self, v):
        return self.bundle.hvp(self._x, v)

    __call__ = matvec

    def dense(self):
        """Materialize ``H`` column by column; meant for small test problems."""
        n = self.shape[0]
        H = np.column_stack([self.matvec(e) for e in np.eye(n)])
        return H


class DenseOperator:
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.shape = self.matrix.shape

    def matvec(self, v):
        return self.matrix @ v

    __call__ = matvec


@dataclass
class CGConfig:
    tol: float = 1e-10
    max_iter: int = None
    preconditioned: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ContractViolation("CG tolerance must be positive")


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


def cg_solve(H, b, config=None, precond=None):
    """Solve ``H x = b`` by (preconditioned) conjugate gradient.

    ``H`` is anything with a ``matvec`` method or a callable; ``precond`` is
    the diagonal of an approximation to ``H^{-1}``.  Converged means the
    true residual satisfies ``|Hx - b| <= tol |b|``; after the recursive
    residual passes the test the true residual is recomputed and CG restarts
    from the current iterate if needed.
    """
    config = config or CGConfig()
    apply = H.matvec if hasattr(H, "matvec") else H
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    max_iter = config.max_iter if config.max_iter is not None else 10 * n
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0:
        return CGResult(x, 0, 0.0)
    if precond is None or not config.preconditioned:
        M = np.ones(n)
    else:
        M = np.asarray(precond, dtype=float)
        if M.shape != (n,):
            raise ContractViolation("preconditioner length must match the system")
    target = config.tol * bnorm
    iterations = 0
    r = b.copy()
    best = (np.inf, x.copy())
    for _restart in range(5):
        z = M * r
        p = z.copy()
        rz = r @ z
        while iterations < max_iter:
            Hp = apply(p)
            pHp = p @ Hp
            if pHp <= 0:
                raise ContractViolation("operator is not positive definite along a CG direction")
            alpha = rz / pHp
            x = x + alpha * p
            r = r - alpha * Hp
            iterations += 1
            rnorm = np.linalg.norm(r)
            if rnorm < best[0]:
                best = (rnorm, x.copy())
            if rnorm <= target:
                break
            z = M * r
            rz_next = r @ z
            p = z + (rz_next / rz) * p
            rz = rz_next
        r = b - apply(x)
        true_res = np.linalg.norm(r)
        if true_res <= target:
            return CGResult(x, iterations, true_res / bnorm)
        if iterations >= max_iter:
            break
    raise CGNotConverged(
        f"CG did not reach relative residual {config.tol:g} in {iterations} iterations",
        best[1],
        np.linalg.norm(b - apply(best[1])) / bnorm,
        iterations,
    )


def dadvi_preconditioner(eta_hat):
    """Diagonal ``(exp(2 xi), 1)``: mean-field variances on the mean block, identity on the log-scale block."""
    return np.concatenate([np.exp(2.0 * eta_hat.xi), np.ones(eta_hat.dim)])


def verify_optimum(bundle, eta_hat, grad_tol=1e-6, probes=5, seed=0):
    """Refuse points that are not a verified local minimum of the fixed-draw objective."""
    x = eta_hat.to_vector()
    gnorm = float(np.linalg.norm(bundle.gradient(x)))
    if gnorm > grad_tol:
        raise NotAtOptimum(f"gradient norm {gnorm:.3g} exceeds {grad_tol:g}; not a first-order point", grad_norm=gnorm)
    rng = np.random.default_rng(seed)
    curv = []
    for _ in range(probes):
        v = rng.standard_normal(x.shape[0])
        v /= np.linalg.norm(v)
        curv.append(float(v @ bundle.hvp(x, v)))
    if min(curv) <= 0:
        raise NotAtOptimum("non-positive curvature along a probe direction", gnorm, min(curv))
    return gnorm, min(curv)


def _solve(bundle, eta_hat, g, config):
    config = config or CGConfig()
    H = HessianOperator(bundle, eta_hat)
    precond = dadvi_preconditioner(eta_hat) if config.preconditioned else None
    return cg_solve(H, g, config, precond)


def lr_covariance(phi1, phi2, eta_hat, bundle, config=None, verify=True):
    """Linear-response covariance ``g1' H^{-1} g2`` of two quantities."""
    if verify:
        verify_optimum(bundle, eta_hat)
    g1 = saa_moment_gradient(phi1, eta_hat, bundle.Z)
    g2 = saa_moment_gradient(phi2, eta_hat, bundle.Z)
    return float(g1 @ _solve(bundle, eta_hat, g2, config).x)


def lr_covariance_matrix(quantities, eta_hat, bundle, config=None, verify=True):
    """Linear-response covariance matrix over a list of quantities (one CG solve each)."""
    if verify:
        verify_optimum(bundle, eta_hat)
    G = np.array([saa_moment_gradient(q, eta_hat, bundle.Z) for q in quantities])
    X = np.array([_solve(bundle, eta_hat, g, config).x for g in G])
    return G @ X.T


def mc_error(phi, eta_hat, bundle, config=None, verify=True):
    """Sampling standard error of a fitted expectation under redrawing of ``Z``.

    Sandwich estimate ``sqrt(f' H^-1 Gamma H^-1 f / N)`` with ``f`` the
    moment gradient and ``Gamma`` the mean outer product of single-draw
    objective gradients.  ``H`` is symmetric, so one solve ``x = H^-1 f``
    suffices and ``x' Gamma x = |G x|^2 / N`` with ``G`` the per-draw
    gradient rows.
    """
    if verify:
        verify_optimum(bundle, eta_hat)
    se, _ = _mc_se(phi, eta_hat, bundle, config)
    return se


def _mc_se(phi, eta_hat, bundle, config, grads=None, solved=None):
    f = saa_moment_gradient(phi, eta_hat, bundle.Z)
    if not np.any(f):
        return 0.0, 0
    res = solved or _solve(bundle, eta_hat, f, config)
    G = grads if grads is not None else bundle.per_draw_gradients(eta_hat.to_vector())
    Gx = G @ res.x
    N = bundle.N
    return float(np.sqrt(Gx @ Gx / N) / np.sqrt(N)), res.iterations


@dataclass
class QoIRow:
    name: str
    mean: float
    mf_sd: float
    lr_sd: float
    mc_se: float
    cg_iters: int
    se_flag: bool
    error: str = None


@dataclass
class QoIReport:
    rows: list = field(default_factory=list)
    flag_fraction: float = 0.5

    def __getitem__(self, name):
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self):
        out = []
        for row in self.rows:
            d = asdict(row)
            if d["error"] is None:
                del d["error"]
            out.append(d)
        return {"quantities": out, "se_flag_fraction": self.flag_fraction}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def build_qoi_report(quantities, eta_hat, bundle, Z=None, config=None, flag_fraction=0.5):
    """Posterior mean, mean-field SD, LR SD and MC standard error per quantity.

    The mean averages the quantity over the fixed draws; the mean-field SD is
    the delta-method SD under the diagonal Gaussian.  A row is flagged when
    its MC standard error exceeds ``flag_fraction`` times its LR SD.  Errors
    in one row are recorded on that row and do not stop the others.
    """
    if Z is not None and not np.array_equal(np.asarray(getattr(Z, "draws", Z)), bundle.Z):
        bundle = ObjectiveBundle(bundle.model, Z, workers=bundle.workers)
    verify_optimum(bundle, eta_hat)
    theta = reparameterize(eta_hat, bundle.Z)
    grads = bundle.per_draw_gradients(eta_hat.to_vector())
    report = QoIReport(flag_fraction=flag_fraction)
    for q in quantities:
        try:
            mean = float(q.values(theta).mean())
            dphi = q.gradients(eta_hat.mu[None, :])[0]
            mf_sd = float(np.sqrt(np.sum((dphi * eta_hat.sigma) ** 2)))
            g = saa_moment_gradient(q, eta_hat, bundle.Z)
            if np.any(g):
                res = _solve(bundle, eta_hat, g, config)
                lr_var = float(g @ res.x)
                se, iters = _mc_se(q, eta_hat, bundle, config, grads=grads, solved=res)
            else:
                lr_var, se, iters = 0.0, 0.0, 0
            lr_sd = float(np.sqrt(max(lr_var, 0.0)))
            report.rows.append(QoIRow(q.name, mean, mf_sd, lr_sd, se, iters, bool(se > flag_fraction * lr_sd)))
        except Exception as exc:  # noqa: BLE001 - recorded per row
            nan = float("nan")
            report.rows.append(QoIRow(q.name, nan, nan, nan, nan, 0, False, f"{type(exc).__name__}: {exc}"))
    return report


class TiltedModel(Model):
    """``log p(theta) + t * phi(theta)``; ``phi`` must supply ``hvp``."""

    def __init__(self, base, phi, t):
        if phi.gradient is None or phi.hvp is None:
            raise ContractViolation(f"tilting by {phi.name!r} needs its gradient and hvp")
        self.base = base
        self.phi = phi
        self.t = float(t)
        self.dim = base.dim
        self.name = f"{base.name}+tilt"

    def log_density_batch(self, theta):
        return self.base.log_density_batch(theta) + self.t * self.phi.values(theta)

    def gradient_batch(self, theta):
        return self.base.gradient_batch(theta) + self.t * self.phi.gradients(theta)

    def hvp_batch(self, theta, v):
        extra = np.array([self.phi.hvp(a, b) for a, b in zip(theta, v)])
        return self.base.hvp_batch(theta, v) + self.t * extra


def lr_covariance_by_tilting(phi1, phi2, eta_hat, bundle, t=1e-4, gtol=1e-10):
    """Finite-difference covariance: re-fit with ``log p + t phi2`` at ``+-t`` and
    difference the fixed-draw mean of ``phi1``.
    """
    means = []
    cfg = OptimizerConfig(gtol=gtol)
    for sign in (1.0, -1.0):
        tilted = ObjectiveBundle(TiltedModel(bundle.model, phi2, sign * t), bundle.drawset)
        fit, _ = dadvi_fit(tilted, eta_hat, cfg)
        if not fit.converged:
            raise NotAtOptimum(f"tilted re-fit did not converge ({fit.status})", fit.grad_norm)
        means.append(phi1.values(reparameterize(fit.eta_hat, bundle.Z)).mean())
    return float((means[0] - means[1]) / (2.0 * t))
