"""Differentiable log densities over unconstrained parameters.

Every model exposes ``log_density``, ``gradient`` and ``hvp`` at a single
point plus ``*_batch`` variants that evaluate one row per draw.  Derivatives
are written out by hand; tests check them against finite differences.
Additive constants that do not depend on the parameters are dropped.
"""
import numpy as np

from . import _kernels
from .errors import ContractViolation, InvalidConfiguration


def _as_batch(theta, dim):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 2 or theta.shape[1] != dim:
        raise ContractViolation(f"expected a batch of shape (n, {dim}), got {theta.shape}")
    return theta


class Model:
    """Base class for log densities ``log p(theta, y)`` on R^dim.

    Subclasses implement the three ``*_batch`` methods; the single-point
    methods are derived from them.
    """

    name = "model"
    dim = 0

    def log_density_batch(self, theta):
        raise NotImplementedError

    def gradient_batch(self, theta):
        raise NotImplementedError

    def hvp_batch(self, theta, v):
        raise NotImplementedError

    def _point(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ContractViolation(f"{self.name}: expected theta of length {self.dim}, got shape {theta.shape}")
        return theta[None, :]

    def log_density(self, theta):
        return float(self.log_density_batch(self._point(theta))[0])

    def gradient(self, theta):
        return self.gradient_batch(self._point(theta))[0]

    def hvp(self, theta, v):
        return self.hvp_batch(self._point(theta), self._point(v))[0]

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, dim={self.dim})"


class FunctionModel(Model):
    """Wrap single-point callables as a model; batches loop over rows."""

    def __init__(self, dim, log_density, gradient, hvp, name="function"):
        if dim < 1:
            raise InvalidConfiguration("model dimension must be positive")
        self.dim = int(dim)
        self.name = name
        self._f = log_density
        self._g = gradient
        self._h = hvp

    def log_density_batch(self, theta):
        theta = _as_batch(theta, self.dim)
        return np.array([float(self._f(t)) for t in theta])

    def gradient_batch(self, theta):
        theta = _as_batch(theta, self.dim)
        return np.array([np.asarray(self._g(t), dtype=float) for t in theta]).reshape(theta.shape)

    def hvp_batch(self, theta, v):
        theta = _as_batch(theta, self.dim)
        v = _as_batch(v, self.dim)
        return np.array([np.asarray(self._h(t, u), dtype=float) for t, u in zip(theta, v)]).reshape(theta.shape)


class QuadraticModel(Model):
    """``log p(theta) = -theta' A theta / 2 + B' theta`` with A symmetric positive definite."""

    name = "quadratic"

    def __init__(self, A, B=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise InvalidConfiguration(f"A must be square, got shape {A.shape}")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12):
            raise InvalidConfiguration("A must be symmetric")
        A = 0.5 * (A + A.T)
        if np.linalg.eigvalsh(A).min() <= 0:
            raise InvalidConfiguration("A must be positive definite")
        D = A.shape[0]
        B = np.zeros(D) if B is None else np.atleast_1d(np.asarray(B, dtype=float))
        if B.shape != (D,):
            raise InvalidConfiguration(f"B must have length {D}")
        self.A = A
        self.B = B
        self.dim = D

    @property
    def posterior_mean(self):
        return np.linalg.solve(self.A, self.B)

    @property
    def posterior_cov(self):
        return np.linalg.inv(self.A)

    def log_density_batch(self, theta):
        theta = _as_batch(theta, self.dim)
        return -0.5 * np.einsum("nd,nd->n", theta @ self.A, theta) + theta @ self.B

    def gradient_batch(self, theta):
        theta = _as_batch(theta, self.dim)
        return self.B - theta @ self.A

    def hvp_batch(self, theta, v):
        _as_batch(theta, self.dim)
        return -_as_batch(v, self.dim) @ self.A


def random_spd(dim, condition=100.0, seed=0):
    """Random SPD matrix with eigenvalues log-spaced on ``[1, condition]``."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    eig = np.geomspace(1.0, condition, dim) if dim > 1 else np.ones(1)
    A = (q * eig) @ q.T
    return 0.5 * (A + A.T)


class GlobalLocalModel(Model):
    """Log density of the form ``sum_p l_p(gamma, lambda_p) + l_gamma(gamma)``.

    ``theta`` is laid out as ``(gamma, lambda_1, ..., lambda_P)``.  Subclasses
    provide ``local_logdens`` and ``global_logdens``; the generic batch
    evaluation sums them block by block.
    """

    def __init__(self, global_dim, local_dim, num_local):
        if num_local < 1:
            raise InvalidConfiguration("need at least one local block")
        self.global_dim = int(global_dim)
        self.local_dim = int(local_dim)
        self.num_local = int(num_local)
        self.dim = self.global_dim + self.num_local * self.local_dim

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        gamma = theta[: self.global_dim]
        lam = theta[self.global_dim :].reshape(self.num_local, self.local_dim)
        return gamma, lam

    def local_logdens(self, gamma, lam, p):
        raise NotImplementedError

    def global_logdens(self, gamma):
        raise NotImplementedError

    def block_terms(self, theta):
        """Return ``(local_terms, global_term)`` at a single point."""
        gamma, lam = self.split(self._point(theta)[0])
        local = np.array([self.local_logdens(gamma, lam[p], p) for p in range(self.num_local)])
        return local, float(self.global_logdens(gamma))

    def log_density_batch(self, theta):
        theta = _as_batch(theta, self.dim)
        out = np.empty(theta.shape[0])
        for i, t in enumerate(theta):
            local, glob = self.block_terms(t)
            out[i] = local.sum() + glob
        return out


class HierarchicalNormalModel(GlobalLocalModel):
    """Random-effects normal model.

    ``y_p ~ N(lambda_p, 1)``, ``lambda_p ~ N(m, tau^2)``, ``m ~ N(0, 1)``,
    ``tau ~ HalfNormal(1)``; the sampler sees ``gamma = (m, log tau)``.
    """

    name = "hierarchical"

    def __init__(self, y, truth=None):
        y = np.asarray(y, dtype=float).ravel()
        super().__init__(global_dim=2, local_dim=1, num_local=y.shape[0])
        self.y = y
        self.truth = truth or {}

    def local_logdens(self, gamma, lam, p):
        m, s = gamma
        lam = float(np.asarray(lam).ravel()[0])
        return -0.5 * (self.y[p] - lam) ** 2 - 0.5 * np.exp(-2.0 * s) * (lam - m) ** 2 - s

    def global_logdens(self, gamma):
        m, s = gamma
        return -0.5 * m**2 - 0.5 * np.exp(2.0 * s) + s

    def log_density_batch(self, theta):
        return _kernels.hier_logp(_as_batch(theta, self.dim), self.y)

    def gradient_batch(self, theta):
        return _kernels.hier_grad(_as_batch(theta, self.dim), self.y)

    def hvp_batch(self, theta, v):
        return _kernels.hier_hvp(_as_batch(theta, self.dim), _as_batch(v, self.dim), self.y)


def instantiate_hierarchical(P, seed, mean=1.0, scale=1.0):
    """Synthesize a :class:`HierarchicalNormalModel` with ``P`` groups.

    The global truth ``(mean, scale)`` is fixed by the arguments, so
    instances with different ``P`` share it.
    """
    if P < 1:
        raise InvalidConfiguration("hierarchical model needs P >= 1")
    rng = np.random.default_rng(seed)
    lam = mean + scale * rng.standard_normal(P)
    y = lam + rng.standard_normal(P)
    return HierarchicalNormalModel(y, truth={"mean": mean, "scale": scale, "local": lam})


class BradleyTerryModel(Model):
    """Paired-comparison model with a shared rating scale.

    ``theta_i ~ N(0, sigma^2)``, ``sigma ~ HalfNormal(1)`` and
    ``P(i beats j) = logistic(theta_i - theta_j)``.  The last coordinate is
    ``log sigma``; the log-Jacobian of ``exp`` is included.
    """

    name = "bradley-terry"

    def __init__(self, num_players, winners, losers):
        winners = np.asarray(winners, dtype=np.int64)
        losers = np.asarray(losers, dtype=np.int64)
        if winners.shape != losers.shape or winners.ndim != 1:
            raise InvalidConfiguration("winners and losers must be equal-length 1-d arrays")
        for arr in (winners, losers):
            if arr.size and (arr.min() < 0 or arr.max() >= num_players):
                raise InvalidConfiguration("match references an unknown player")
        if np.any(winners == losers):
            raise InvalidConfiguration("a player cannot play themselves")
        self.num_players = int(num_players)
        self.winners = winners
        self.losers = losers
        self.dim = self.num_players + 1

    @property
    def matches(self):
        return list(zip(self.winners.tolist(), self.losers.tolist()))

    def log_density_batch(self, theta):
        theta = _as_batch(theta, self.dim)
        r = theta[:, :-1]
        s = theta[:, -1]
        M = self.num_players
        prior = -0.5 * np.exp(-2.0 * s) * (r**2).sum(axis=1) - M * s
        scale = -0.5 * np.exp(2.0 * s) + s
        return prior + scale + _kernels.bt_loglik(theta, self.winners, self.losers)

    def gradient_batch(self, theta):
        theta = _as_batch(theta, self.dim)
        r = theta[:, :-1]
        s = theta[:, -1]
        w = np.exp(-2.0 * s)
        out = _kernels.bt_grad(theta, self.winners, self.losers)
        out[:, :-1] -= w[:, None] * r
        out[:, -1] = w * (r**2).sum(axis=1) - self.num_players - np.exp(2.0 * s) + 1.0
        return out

    def hvp_batch(self, theta, v):
        theta = _as_batch(theta, self.dim)
        v = _as_batch(v, self.dim)
        r = theta[:, :-1]
        s = theta[:, -1]
        vr = v[:, :-1]
        vs = v[:, -1]
        w = np.exp(-2.0 * s)
        out = _kernels.bt_hvp(theta, v, self.winners, self.losers)
        out[:, :-1] += -w[:, None] * vr + 2.0 * (w * vs)[:, None] * r
        out[:, -1] = 2.0 * w * (r * vr).sum(axis=1) + (-2.0 * w * (r**2).sum(axis=1) - 2.0 * np.exp(2.0 * s)) * vs
        return out


def bradley_terry_synthetic(num_players, num_matches, seed, scale=1.0):
    """Simulate a round of random pairings and their outcomes."""
    if num_players < 2:
        raise InvalidConfiguration("need at least two players")
    rng = np.random.default_rng(seed)
    ratings = scale * rng.standard_normal(num_players)
    i = rng.integers(0, num_players, size=num_matches)
    j = (i + rng.integers(1, num_players, size=num_matches)) % num_players
    p_i = 1.0 / (1.0 + np.exp(-(ratings[i] - ratings[j])))
    i_won = rng.random(num_matches) < p_i
    winners = np.where(i_won, i, j)
    losers = np.where(i_won, j, i)
    return BradleyTerryModel(num_players, winners, losers)


class ParameterTransform:
    """Per-coordinate log transform for strictly positive parameters."""

    def __init__(self, positive):
        self.positive = np.asarray(positive, dtype=bool).ravel()

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim, dtype=bool))

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(self.positive, np.log(np.where(self.positive, x, 1.0)), x)

    def inverse(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(self.positive, np.exp(np.where(self.positive, u, 0.0)), u)

    def log_jacobian(self, u):
        u = np.asarray(u, dtype=float)
        return (u * self.positive).sum(axis=-1)


class TransformedModel(Model):
    """A model re-expressed on unconstrained coordinates."""

    def __init__(self, base, transform):
        if transform.positive.shape != (base.dim,):
            raise ContractViolation("transform length must match model dimension")
        self.base = base
        self.transform = transform
        self.dim = base.dim
        self.name = f"{base.name}|log"

    def log_density_batch(self, u):
        u = _as_batch(u, self.dim)
        return self.base.log_density_batch(self.transform.inverse(u)) + self.transform.log_jacobian(u)

    def gradient_batch(self, u):
        u = _as_batch(u, self.dim)
        x = self.transform.inverse(u)
        jac = np.where(self.transform.positive, x, 1.0)
        return self.base.gradient_batch(x) * jac + self.transform.positive

    def hvp_batch(self, u, v):
        u = _as_batch(u, self.dim)
        v = _as_batch(v, self.dim)
        x = self.transform.inverse(u)
        pos = self.transform.positive
        jac = np.where(pos, x, 1.0)
        # Hessian in u: J H J + diag(grad * d2x/du2), and d2x/du2 = x on positive coordinates.
        out = jac * self.base.hvp_batch(x, jac * v)
        out += np.where(pos, self.base.gradient_batch(x) * x, 0.0) * v
        return out


def transform_model(model, transform):
    return TransformedModel(model, transform)


def build_model(name, params=None):
    """Construct a built-in model from a name and a parameter mapping."""
    params = dict(params or {})
    if name == "quadratic":
        if "A" in params:
            return QuadraticModel(params.pop("A"), params.pop("B", None))
        dim = int(params.get("dim", 2))
        A = random_spd(dim, float(params.get("condition", 10.0)), int(params.get("seed", 0)))
        B = params.get("B")
        if B is None:
            B = np.random.default_rng(int(params.get("seed", 0)) + 1).standard_normal(dim)
        return QuadraticModel(A, B)
    if name == "quadratic-1d":
        return QuadraticModel([[float(params.get("A", 1.0))]], [float(params.get("B", 0.0))])
    if name == "hierarchical":
        return instantiate_hierarchical(
            int(params.get("P", 100)),
            int(params.get("seed", 0)),
            float(params.get("mean", 1.0)),
            float(params.get("scale", 1.0)),
        )
    if name == "bradley-terry":
        return bradley_terry_synthetic(
            int(params.get("num_players", 5)),
            int(params.get("num_matches", 10)),
            int(params.get("seed", 0)),
        )
    raise InvalidConfiguration(f"unknown model {name!r}")


MODEL_PARAMS = {
    "quadratic": {"A", "B", "dim", "condition", "seed"},
    "quadratic-1d": {"A", "B"},
    "hierarchical": {"P", "seed", "mean", "scale"},
    "bradley-terry": {"num_players", "num_matches", "seed"},
}
