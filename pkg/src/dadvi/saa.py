"""Fixed draw sets and the deterministic sample-average objective.

For a fixed ``N x D`` matrix ``Z`` of standard-normal draws the mean-field
objective is ::

    K(eta | Z) = -sum(xi) - mean_n log p(mu + z_n * exp(xi))

and the full-rank objective replaces ``-sum(xi)`` by ``-log|det R|`` and the
draw map by ``mu + R z_n``.  Value, gradient and Hessian-vector product are
assembled from the model's per-draw derivatives by the chain rule.
"""
import hashlib
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DegenerateDraws, InvalidConfiguration, NonFiniteObjective
from .variational import FullRankParams, MeanFieldParams, fullrank_vector_size, reparameterize


@dataclass(frozen=True, eq=False)
class DrawSet:
    """Immutable ``N x D`` matrix of standard-normal draws."""

    draws: np.ndarray
    seed: int = -1

    def __post_init__(self):
        draws = np.array(self.draws, dtype=float)
        if draws.ndim != 2 or draws.shape[0] < 1 or draws.shape[1] < 1:
            raise InvalidConfiguration(f"draws must be a nonempty 2-d array, got shape {draws.shape}")
        draws.setflags(write=False)
        object.__setattr__(self, "draws", draws)

    @property
    def N(self):
        return self.draws.shape[0]

    @property
    def D(self):
        return self.draws.shape[1]

    @property
    def identifier(self):
        digest = hashlib.sha256(self.draws.tobytes()).hexdigest()[:16]
        return f"seed={self.seed};N={self.N};D={self.D};sha={digest}"

    def __eq__(self, other):
        return isinstance(other, DrawSet) and self.seed == other.seed and np.array_equal(self.draws, other.draws)

    def __hash__(self):
        return hash(self.identifier)

    def save(self, path):
        """Write ``seed, N, D`` then row-major values; ``.csv`` or raw little-endian binary."""
        path = Path(path)
        if path.suffix == ".csv":
            lines = ["seed,N,D", f"{self.seed},{self.N},{self.D}"]
            lines += [",".join(f"{x:.17g}" for x in row) for row in self.draws]
            path.write_text("\n".join(lines) + "\n")
        else:
            with open(path, "wb") as fh:
                fh.write(struct.pack("<qqq", self.seed, self.N, self.D))
                fh.write(self.draws.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.suffix == ".csv":
            lines = path.read_text().strip().splitlines()
            seed, N, D = (int(x) for x in lines[1].split(","))
            draws = np.array([[float(x) for x in ln.split(",")] for ln in lines[2:]])
            if draws.shape != (N, D):
                raise InvalidConfiguration("draw file header does not match its contents")
            return cls(draws, seed)
        raw = path.read_bytes()
        seed, N, D = struct.unpack("<qqq", raw[:24])
        draws = np.frombuffer(raw[24:], dtype="<f8").reshape(N, D)
        return cls(draws.copy(), seed)


def sample_draws(seed, N, D):
    """Draw ``N x D`` standard normals from numpy's PCG64 stream seeded with ``seed``."""
    if N < 1:
        raise InvalidConfiguration("invalid draw count: N must be >= 1")
    if D < 1:
        raise InvalidConfiguration("invalid dimension: D must be >= 1")
    rng = np.random.default_rng(seed)
    return DrawSet(rng.standard_normal((N, D)), int(seed))


def whiten_draws(drawset):
    """Affinely map draws to zero sample mean and identity sample covariance (``1/N`` convention)."""
    z = drawset.draws
    if z.shape[0] <= z.shape[1]:
        raise DegenerateDraws("whitening needs N > D")
    c = z - z.mean(axis=0)
    cov = c.T @ c / z.shape[0]
    L = np.linalg.cholesky(cov)
    return DrawSet(np.linalg.solve(L, c.T).T, drawset.seed)


class ObjectiveBundle:
    """A model and a fixed draw set, with evaluation counters.

    Per-draw model evaluations are split into ``workers`` contiguous chunks
    and run on a thread pool; results are concatenated in draw order before
    any reduction, so values do not depend on scheduling.
    """

    def __init__(self, model, drawset, family="mean-field", workers=1):
        if family not in ("mean-field", "full-rank"):
            raise InvalidConfiguration(f"unknown family {family!r}")
        if drawset.D != model.dim:
            raise ContractViolation(f"draw dimension {drawset.D} does not match model dimension {model.dim}")
        self.model = model
        self.drawset = drawset
        self.family = family
        self.workers = max(1, int(workers))
        self._lock = threading.Lock()
        self.counts = {"value": 0, "gradient": 0, "hvp": 0, "model_evals": 0}

    @property
    def Z(self):
        return self.drawset.draws

    @property
    def N(self):
        return self.drawset.N

    @property
    def dim(self):
        return self.model.dim

    @property
    def eta_size(self):
        return 2 * self.dim if self.family == "mean-field" else fullrank_vector_size(self.dim)

    def _count(self, kind):
        with self._lock:
            self.counts[kind] += 1
            self.counts["model_evals"] += self.N

    def snapshot_counts(self):
        with self._lock:
            return dict(self.counts)

    def map_draws(self, fn, *arrays):
        """Apply a batch function to row chunks of ``arrays``, preserving draw order."""
        n = arrays[0].shape[0]
        if self.workers == 1 or n < 2:
            return fn(*arrays)
        bounds = np.linspace(0, n, min(self.workers, n) + 1).astype(int)
        chunks = [tuple(a[lo:hi] for a in arrays) for lo, hi in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: fn(*c), chunks))
        return np.concatenate(parts, axis=0)

    # -- per-draw pieces -------------------------------------------------

    def _theta(self, eta):
        if self.family == "mean-field":
            p = MeanFieldParams.from_vector(eta)
            return p, reparameterize(p, self.Z)
        p = FullRankParams.from_vector(eta, self.dim)
        return p, p.mu + self.Z @ p.R.T

    def _logp(self, theta):
        lp = self.map_draws(self.model.log_density_batch, theta)
        bad = ~np.isfinite(lp)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise NonFiniteObjective(f"{self.model.name}: non-finite log density at draw {idx}", idx)
        return lp

    def _grad(self, theta):
        g = self.map_draws(self.model.gradient_batch, theta)
        if not np.all(np.isfinite(g)):
            idx = int(np.flatnonzero(~np.isfinite(g).all(axis=1))[0])
            raise NonFiniteObjective(f"{self.model.name}: non-finite gradient at draw {idx}", idx)
        return g

    # -- objective, gradient, HVP on flat vectors -------------------------

    def value(self, eta):
        eta = self._check(eta)
        params, theta = self._theta(eta)
        lp = self._logp(theta)
        self._count("value")
        if self.family == "mean-field":
            return -float(np.sum(params.xi)) - float(lp.mean())
        return -float(np.sum(np.log(np.diag(params.R)))) - float(lp.mean())

    def gradient(self, eta):
        eta = self._check(eta)
        params, theta = self._theta(eta)
        g = self._grad(theta)
        self._count("gradient")
        z = self.Z
        if self.family == "mean-field":
            g_mu = -g.mean(axis=0)
            g_xi = -1.0 - (g * z).mean(axis=0) * params.sigma
            return np.concatenate([g_mu, g_xi])
        G = -(g.T @ z) / self.N
        diag = np.diag(params.R)
        G[np.diag_indices(self.dim)] = G[np.diag_indices(self.dim)] * diag - 1.0
        return np.concatenate([-g.mean(axis=0), G[np.tril_indices(self.dim)]])

    def hvp(self, eta, v):
        eta = self._check(eta)
        v = self._check(v)
        params, theta = self._theta(eta)
        z = self.Z
        D = self.dim
        if self.family == "mean-field":
            v_mu, v_xi = v[:D], v[D:]
            sigma = params.sigma
            u = v_mu + z * (sigma * v_xi)
            g = self._grad(theta)
            h = self.map_draws(self.model.hvp_batch, theta, np.broadcast_to(u, theta.shape).copy())
            self._count("hvp")
            out_mu = -h.mean(axis=0)
            out_xi = -((h * z).mean(axis=0) * sigma + (g * z).mean(axis=0) * sigma * v_xi)
            return np.concatenate([out_mu, out_xi])
        v_mu = v[:D]
        V = np.zeros((D, D))
        V[np.tril_indices(D)] = v[D:]
        diag = np.diag(params.R)
        dR = V.copy()
        dR[np.diag_indices(D)] = diag * np.diag(V)
        u = v_mu + z @ dR.T
        g = self._grad(theta)
        h = self.map_draws(self.model.hvp_batch, theta, u)
        self._count("hvp")
        H2 = -(h.T @ z) / self.N
        G = -(g.T @ z) / self.N
        idx = np.diag_indices(D)
        H2[idx] = H2[idx] * diag + G[idx] * diag * np.diag(V)
        return np.concatenate([-h.mean(axis=0), H2[np.tril_indices(D)]])

    def per_draw_values(self, eta):
        """Single-draw objectives ``K(eta | z_n)`` for every draw (mean-field)."""
        eta = self._check(eta)
        params, theta = self._theta(eta)
        lp = self._logp(theta)
        self._count("value")
        return -float(np.sum(params.xi)) - lp

    def per_draw_gradients(self, eta):
        """Rows ``grad_eta K(eta | z_n)``, shape ``(N, 2D)`` (mean-field)."""
        eta = self._check(eta)
        params, theta = self._theta(eta)
        g = self._grad(theta)
        self._count("gradient")
        return np.hstack([-g, -1.0 - g * self.Z * params.sigma])

    def _check(self, eta):
        eta = np.asarray(eta, dtype=float).ravel()
        if eta.shape[0] != self.eta_size:
            raise ContractViolation(f"expected a vector of length {self.eta_size}, got {eta.shape[0]}")
        return eta


def _require(bundle, family):
    if bundle.family != family:
        raise ContractViolation(f"operation needs a {family} bundle, got {bundle.family}")


def saa_objective(eta, bundle):
    _require(bundle, "mean-field")
    return bundle.value(eta.to_vector())


def saa_gradient(eta, bundle):
    _require(bundle, "mean-field")
    return bundle.gradient(eta.to_vector())


def saa_hvp(eta, v, bundle):
    _require(bundle, "mean-field")
    return bundle.hvp(eta.to_vector(), v)


def saa_objective_fullrank(eta, bundle):
    """Full-rank objective for any square ``R`` (not only lower triangular)."""
    _require(bundle, "full-rank")
    sign, logdet = np.linalg.slogdet(eta.R)
    if sign == 0 or not np.isfinite(logdet):
        raise NonFiniteObjective("R is singular")
    theta = eta.mu + bundle.Z @ eta.R.T
    lp = bundle._logp(theta)
    bundle._count("value")
    return -float(logdet) - float(lp.mean())


# -- quadratic-model oracles ----------------------------------------------


def quadratic_exact_objective(model, eta):
    """Exact mean-field objective for the quadratic model (constants dropped)."""
    A, B = model.A, model.B
    mu, sigma = eta.mu, eta.sigma
    return float(0.5 * mu @ A @ mu + 0.5 * np.sum(np.diag(A) * sigma**2) - B @ mu - np.sum(eta.xi))


def quadratic_saa_closed_objective(model, eta, Z):
    """Fixed-draw objective for the quadratic model written through draw moments."""
    A, B = model.A, model.B
    z = np.asarray(getattr(Z, "draws", Z), dtype=float)
    zbar = z.mean(axis=0)
    zz = z.T @ z / z.shape[0]
    mu, s = eta.mu, eta.sigma
    S_zz_S = s[:, None] * zz * s[None, :]
    return float(
        0.5 * mu @ A @ (mu + 2.0 * s * zbar) + 0.5 * np.sum(A * S_zz_S) - B @ (mu + s * zbar) - np.sum(np.log(s))
    )


def quadratic_exact_optimum(model):
    """``mu* = A^{-1} B`` and ``sigma*_d = A_dd^{-1/2}``."""
    mu = np.linalg.solve(model.A, model.B)
    return MeanFieldParams(mu, -0.5 * np.log(np.diag(model.A)))


def quadratic_saa_optimum(model, Z, tol=1e-13, max_iter=200):
    """Minimizer of the fixed-draw objective on the quadratic model.

    Profiling out ``mu`` leaves ``sigma' (A * C) sigma / 2 - sum(log sigma)``
    with ``C`` the ``1/N`` sample covariance of the draws, so ``sigma``
    solves ``(A * C) sigma = 1 / sigma``.  When ``A * C`` is diagonal this is
    ``sigma_d^-2 = A_dd C_dd``; otherwise the strictly convex problem is
    solved by a damped Newton iteration.  Then ``mu = A^{-1} B - sigma * zbar``.
    """
    z = np.asarray(getattr(Z, "draws", Z), dtype=float)
    if z.shape[0] < 2:
        raise DegenerateDraws("need at least two draws")
    zbar = z.mean(axis=0)
    c = z - zbar
    C = c.T @ c / z.shape[0]
    if np.any(np.diag(C) <= 0):
        raise DegenerateDraws("a coordinate has zero sample variance")
    M = model.A * C
    sigma = 1.0 / np.sqrt(np.diag(M))

    def profile(s):
        return 0.5 * s @ M @ s - np.sum(np.log(s))

    for _ in range(max_iter):
        g = M @ sigma - 1.0 / sigma
        if np.linalg.norm(g) <= tol * np.linalg.norm(1.0 / sigma):
            break
        H = M + np.diag(1.0 / sigma**2)
        step = np.linalg.solve(H, g)
        t = 1.0
        f0 = profile(sigma)
        while True:
            trial = sigma - t * step
            if np.all(trial > 0) and profile(trial) <= f0 - 1e-4 * t * (g @ step):
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            break
        sigma = trial
    mu = np.linalg.solve(model.A, model.B) - sigma * zbar
    return MeanFieldParams(mu, np.log(sigma))
