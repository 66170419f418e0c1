"""Mean-field and full-rank Gaussian variational families."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, UnsupportedQuantity


@dataclass(frozen=True, eq=False)
class MeanFieldParams:
    """Means ``mu`` and log standard deviations ``xi`` of a diagonal Gaussian.

    As a flat vector the layout is ``(mu, xi)``, length ``2 * dim``.
    """

    mu: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).ravel()
        xi = np.array(self.xi, dtype=float).ravel()
        if mu.shape != xi.shape:
            raise ContractViolation(f"mu and xi lengths differ: {mu.shape} vs {xi.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(xi))):
            raise ContractViolation("variational parameters must be finite")
        mu.setflags(write=False)
        xi.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "xi", xi)

    def __eq__(self, other):
        return isinstance(other, MeanFieldParams) and np.array_equal(self.mu, other.mu) and np.array_equal(self.xi, other.xi)

    __hash__ = None

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def sigma(self):
        return np.exp(self.xi)

    def to_vector(self):
        return np.concatenate([self.mu, self.xi])

    @classmethod
    def from_vector(cls, eta):
        eta = np.asarray(eta, dtype=float).ravel()
        if eta.shape[0] % 2:
            raise ContractViolation("mean-field vector must have even length")
        d = eta.shape[0] // 2
        return cls(eta[:d], eta[d:])

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim))


@dataclass(frozen=True)
class FullRankParams:
    """Mean ``mu`` and covariance square root ``R`` (``Cov = R R'``).

    As an optimization vector ``R`` is lower triangular and its diagonal is
    stored on the log scale: ``(mu, tril entries row by row)``.
    """

    mu: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).ravel()
        R = np.array(self.R, dtype=float)
        if R.shape != (mu.shape[0], mu.shape[0]):
            raise ContractViolation(f"R must be {mu.shape[0]}x{mu.shape[0]}, got {R.shape}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "R", R)

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def cov(self):
        return self.R @ self.R.T

    def to_vector(self):
        if np.any(np.triu(self.R, 1)):
            raise ContractViolation("only lower-triangular R has a vector form")
        diag = np.diag(self.R)
        if np.any(diag <= 0):
            raise ContractViolation("R needs a positive diagonal as an optimization state")
        L = self.R.copy()
        np.fill_diagonal(L, np.log(diag))
        return np.concatenate([self.mu, L[np.tril_indices(self.dim)]])

    @classmethod
    def from_vector(cls, eta, dim):
        eta = np.asarray(eta, dtype=float).ravel()
        if eta.shape[0] != dim + dim * (dim + 1) // 2:
            raise ContractViolation("full-rank vector has the wrong length")
        L = np.zeros((dim, dim))
        L[np.tril_indices(dim)] = eta[dim:]
        np.fill_diagonal(L, np.exp(np.diag(L)))
        return cls(eta[:dim], L)

    @classmethod
    def from_mean_field(cls, params):
        return cls(params.mu, np.diag(params.sigma))


def fullrank_vector_size(dim):
    return dim + dim * (dim + 1) // 2


def reparameterize(params, z):
    """``theta = mu + z * exp(xi)``; ``z`` may be one draw or a stack of rows."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.dim:
        raise ContractViolation(f"draw length {z.shape[-1]} does not match dimension {params.dim}")
    return params.mu + z * params.sigma


def reparameterize_fullrank(params, z):
    """``theta = mu + R z`` for one draw or a stack of rows."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.dim:
        raise ContractViolation(f"draw length {z.shape[-1]} does not match dimension {params.dim}")
    return params.mu + z @ params.R.T


def negative_entropy_term(params):
    """Entropy contribution ``-sum(xi)``, additive constants dropped."""
    return -float(np.sum(params.xi))


@dataclass(frozen=True)
class QuantityOfInterest:
    """A scalar function of ``theta`` with its gradient.

    ``hvp`` is optional and only needed when the quantity is used to tilt a
    model.  ``gradient=None`` marks a quantity that cannot be differentiated.
    """

    name: str
    value: object
    gradient: object = None
    hvp: object = None
    spec: dict = field(default_factory=dict, compare=False)

    @classmethod
    def coordinate(cls, index, name=None):
        def value(t):
            return t[..., index]

        def gradient(t):
            g = np.zeros_like(np.asarray(t, dtype=float))
            g[..., index] = 1.0
            return g

        def hvp(t, v):
            return np.zeros_like(np.asarray(v, dtype=float))

        return cls(name or f"theta[{index}]", value, gradient, hvp, {"kind": "coordinate", "index": index})

    @classmethod
    def coordinate_square(cls, index, name=None):
        def value(t):
            return t[..., index] ** 2

        def gradient(t):
            t = np.asarray(t, dtype=float)
            g = np.zeros_like(t)
            g[..., index] = 2.0 * t[..., index]
            return g

        def hvp(t, v):
            v = np.asarray(v, dtype=float)
            out = np.zeros_like(v)
            out[..., index] = 2.0 * v[..., index]
            return out

        return cls(name or f"theta[{index}]^2", value, gradient, hvp, {"kind": "coordinate_square", "index": index})

    @classmethod
    def linear(cls, coefficients, name=None):
        c = np.asarray(coefficients, dtype=float)

        def value(t):
            return np.asarray(t, dtype=float) @ c

        def gradient(t):
            return np.broadcast_to(c, np.shape(t)).copy()

        def hvp(t, v):
            return np.zeros_like(np.asarray(v, dtype=float))

        return cls(name or "linear", value, gradient, hvp, {"kind": "linear", "coefficients": c.tolist()})

    @classmethod
    def constant(cls, c=0.0, name=None):
        def value(t):
            return np.full(np.shape(t)[:-1], float(c))

        def gradient(t):
            return np.zeros_like(np.asarray(t, dtype=float))

        def hvp(t, v):
            return np.zeros_like(np.asarray(v, dtype=float))

        return cls(name or "constant", value, gradient, hvp, {"kind": "constant", "value": float(c)})

    def values(self, theta):
        """Evaluate on a stack of rows."""
        theta = np.asarray(theta, dtype=float)
        try:
            out = np.asarray(self.value(theta), dtype=float)
            if out.shape == theta.shape[:-1]:
                return out
        except (TypeError, ValueError, IndexError):
            pass
        return np.array([float(self.value(t)) for t in theta])

    def gradients(self, theta):
        if self.gradient is None:
            raise UnsupportedQuantity(f"quantity {self.name!r} has no gradient")
        theta = np.asarray(theta, dtype=float)
        try:
            out = np.asarray(self.gradient(theta), dtype=float)
            if out.shape == theta.shape:
                return out
        except (TypeError, ValueError, IndexError):
            pass
        return np.array([np.asarray(self.gradient(t), dtype=float) for t in theta])


def _draws(Z):
    return np.asarray(getattr(Z, "draws", Z), dtype=float)


def saa_moment_gradient(phi, params, Z):
    """Gradient in ``eta`` of the fixed-draw average ``mean_n phi(theta(eta, z_n))``.

    Returns the flat ``(mu-block, xi-block)`` vector.
    """
    z = _draws(Z)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractViolation("need a nonempty (N, D) draw matrix")
    theta = reparameterize(params, z)
    g = phi.gradients(theta)
    g_mu = g.mean(axis=0)
    g_xi = (g * z).mean(axis=0) * params.sigma
    return np.concatenate([g_mu, g_xi])
