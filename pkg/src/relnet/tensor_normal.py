"""Tensor normal distribution with Kronecker-factored covariance.

A tensor-variate normal over arrays of dims ``(d1, ..., dK)`` whose
vectorization is Gaussian with covariance ``Sigma_1 kron ... kron
Sigma_K``.  The factored form is never materialized: densities,
Mahalanobis distances and sampling work through per-mode Cholesky
factors, which keeps the cost at a handful of small matrix products
instead of anything cubic in ``prod(dims)``.

Density and sampling accept any order ``K >= 1`` (one factor per mode).
The maximum-likelihood machinery (:func:`flip_flop_mle`) is order-3
only, matching the rest of the package.

Vectorization follows :mod:`relnet.tensor`: row-major flattening, under
which the factors appear in mode order in the Kronecker product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "EstimationError",
    "SpdFactor",
    "KronCovariance",
    "TensorNormal",
    "FlipFlopResult",
    "mahalanobis",
    "log_pdf",
    "sample",
    "mle_mean",
    "flip_flop_mle",
    "normalize_identifiable",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

# Symmetry check tolerance, relative to the largest entry.
_SYMMETRY_TOL = 1e-10


class EstimationError(RuntimeError):
    """Raised when a covariance estimate cannot be formed or is degenerate."""


class SpdFactor:
    """A symmetric positive definite matrix with cached Cholesky data.

    Parameters
    ----------
    matrix : array_like
        Square matrix, symmetric to a relative tolerance of ``1e-10``.
        It is symmetrized exactly on construction and must admit a
        Cholesky factorization.

    Attributes
    ----------
    matrix : numpy.ndarray
        The (symmetrized) matrix.
    chol : numpy.ndarray
        Lower-triangular Cholesky factor ``L`` with ``L @ L.T == matrix``.
    logdet : float
        ``log det(matrix)``, computed from the Cholesky diagonal.
    """

    __slots__ = ("matrix", "chol", "logdet")

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        scale = max(1.0, float(np.abs(m).max()) if m.size else 1.0)
        if not np.allclose(m, m.T, rtol=0.0, atol=_SYMMETRY_TOL * scale):
            raise ValueError("matrix is not symmetric")
        m = 0.5 * (m + m.T)
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise ValueError("matrix is not positive definite") from None
        self.matrix = m
        self.chol = chol
        self.logdet = float(2.0 * np.sum(np.log(np.diag(chol))))

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "SpdFactor":
        """Scaled identity factor of the given dimension."""
        return cls(np.eye(int(dim)) * float(scale))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, b) -> np.ndarray:
        """Return ``matrix^{-1} b`` via the cached Cholesky factor."""
        return cho_solve((self.chol, True), np.asarray(b, dtype=float))

    def __repr__(self) -> str:  # pragma: no cover
        return f"SpdFactor(dim={self.dim})"


class KronCovariance:
    """Covariance ``Sigma_1 kron ... kron Sigma_K`` stored by its factors.

    The dense matrix is never formed; every operation that needs it
    works mode by mode through the factors' Cholesky data.

    Parameters
    ----------
    factors : sequence
        One :class:`SpdFactor` (or raw SPD matrix) per mode, in mode
        order.
    """

    __slots__ = ("factors",)

    def __init__(self, factors: Sequence):
        if len(factors) == 0:
            raise ValueError("need at least one covariance factor")
        self.factors = tuple(
            f if isinstance(f, SpdFactor) else SpdFactor(f) for f in factors
        )

    @property
    def dims(self) -> tuple:
        return tuple(f.dim for f in self.factors)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def order(self) -> int:
        return len(self.factors)

    def logdet(self) -> float:
        """``log det`` of the full Kronecker product."""
        d = self.total_dim
        return float(sum((d / f.dim) * f.logdet for f in self.factors))

    def whiten(self, arr) -> np.ndarray:
        """Apply ``L_k^{-1}`` along every mode of ``arr``.

        The result ``z`` satisfies ``||z||^2 == vec(arr)^T Sigma^{-1}
        vec(arr)``.
        """
        arr = np.asarray(arr, dtype=float)
        if arr.shape != self.dims:
            raise ValueError(f"shape {arr.shape} does not match dims {self.dims}")
        return _whiten(arr, self.factors, batched=False)

    def apply_inverse(self, arr) -> np.ndarray:
        """Apply the full inverse mode by mode.

        Returns the tensor reshaping of ``(Sigma_1 kron ... kron
        Sigma_K)^{-1} vec(arr)`` without materializing the product.
        """
        arr = np.asarray(arr, dtype=float)
        if arr.shape != self.dims:
            raise ValueError(f"shape {arr.shape} does not match dims {self.dims}")
        out = arr
        for k, f in enumerate(self.factors):
            moved = np.moveaxis(out, k, 0)
            flat = moved.reshape(moved.shape[0], -1)
            sol = cho_solve((f.chol, True), flat)
            out = np.moveaxis(sol.reshape(moved.shape), 0, k)
        return out

    def __repr__(self) -> str:  # pragma: no cover
        return f"KronCovariance(dims={self.dims})"


@dataclass(frozen=True)
class TensorNormal:
    """Tensor normal distribution with mean ``mean`` and covariance ``cov``.

    ``mean`` is an array whose shape equals ``cov.dims``; the
    distribution of the vectorized tensor is Gaussian with mean
    ``vec(mean)`` and covariance ``Sigma_1 kron ... kron Sigma_K``.
    """

    mean: np.ndarray
    cov: KronCovariance

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        object.__setattr__(self, "mean", mean)
        if mean.shape != self.cov.dims:
            raise ValueError(
                f"mean shape {mean.shape} does not match covariance dims "
                f"{self.cov.dims}"
            )

    @property
    def dims(self) -> tuple:
        return self.cov.dims

    @property
    def total_dim(self) -> int:
        return self.cov.total_dim


def _apply_along_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    """Contract ``mat`` with ``arr`` along ``axis`` (dense matrix)."""
    out = np.tensordot(mat, arr, axes=(1, axis))
    return np.moveaxis(out, 0, axis)


def _solve_along_axis(
    chol: np.ndarray, arr: np.ndarray, axis: int, transposed: bool = False
) -> np.ndarray:
    """Apply ``L^{-1}`` (or ``L^{-T}``) along one axis of ``arr``."""
    moved = np.moveaxis(arr, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    sol = solve_triangular(chol, flat, lower=True, trans="T" if transposed else "N")
    return np.moveaxis(sol.reshape(moved.shape), 0, axis)


def _whiten(centered: np.ndarray, factors, batched: bool) -> np.ndarray:
    """Solve every mode's Cholesky factor against ``centered``.

    With ``batched`` the leading axis indexes samples and modes start at
    axis 1.  The result has identity covariance under the model.
    """
    offset = 1 if batched else 0
    z = centered
    for k, f in enumerate(factors):
        z = _solve_along_axis(f.chol, z, k + offset)
    return z


def _check_point(dist: TensorNormal, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != dist.dims:
        raise ValueError(f"point shape {arr.shape} does not match dims {dist.dims}")
    return arr


def mahalanobis(dist: TensorNormal, x) -> float:
    """Squared Mahalanobis distance of ``x`` under ``dist``.

    Computed as ``||z||^2`` where ``z`` whitens ``x - mean`` by one
    triangular solve per mode; no Kronecker product is formed.
    """
    arr = _check_point(dist, x)
    z = _whiten(arr - dist.mean, dist.cov.factors, batched=False)
    return float(np.sum(z * z))


def log_pdf(dist: TensorNormal, x) -> float:
    """Log density of ``x`` under the tensor normal ``dist``."""
    maha = mahalanobis(dist, x)
    d = dist.total_dim
    return -0.5 * (d * _LOG_2PI + dist.cov.logdet() + maha)


def sample(dist: TensorNormal, rng: np.random.Generator, size: int | None = None):
    """Draw from ``dist`` using ``rng``.

    A standard normal array is colored mode by mode with the Cholesky
    factors and shifted by the mean.  With ``size=None`` a single tensor
    of shape ``dist.dims`` is returned, otherwise an array of shape
    ``(size, *dist.dims)`` whose leading axis indexes draws.
    """
    dims = dist.dims
    batched = size is not None
    shape = (int(size),) + dims if batched else dims
    z = rng.standard_normal(shape)
    offset = 1 if batched else 0
    for k, f in enumerate(dist.cov.factors):
        z = _apply_along_axis(f.chol, z, k + offset)
    return dist.mean + z


def mle_mean(samples) -> np.ndarray:
    """Maximum-likelihood mean: the elementwise average of the samples."""
    stacked = _stack_samples(samples)
    return stacked.mean(axis=0)


def _stack_samples(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        stacked = np.asarray(samples, dtype=float)
        if stacked.ndim < 2:
            raise ValueError("expected a batch of tensors")
    else:
        seq = list(samples)
        if not seq:
            raise ValueError("need at least one sample")
        try:
            stacked = np.stack([np.asarray(s, dtype=float) for s in seq])
        except ValueError:
            raise ValueError("samples do not share a common shape") from None
    if stacked.shape[0] == 0:
        raise ValueError("need at least one sample")
    return stacked


def _total_log_likelihood(centered: np.ndarray, factors) -> float:
    """Sum of log densities for pre-centered stacked samples."""
    n = centered.shape[0]
    d = int(np.prod(centered.shape[1:]))
    z = _whiten(centered, factors, batched=True)
    maha = float(np.sum(z * z))
    logdet = sum((d / f.dim) * f.logdet for f in factors)
    return -0.5 * (n * d * _LOG_2PI + n * logdet + maha)


class FlipFlopResult(NamedTuple):
    """Outcome of :func:`flip_flop_mle`.

    ``history`` holds the total log-likelihood at initialization and
    after each completed sweep, so consecutive differences expose the
    ascent property.  ``converged`` is False when ``max_iter`` sweeps
    ran without the stopping rule firing.
    """

    cov: KronCovariance
    iterations: int
    log_likelihood: float
    converged: bool
    history: tuple


def flip_flop_mle(
    samples,
    mean,
    init: KronCovariance | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> FlipFlopResult:
    """Estimate the three covariance factors by cyclic maximization.

    With the mean held fixed, each factor in turn is replaced by the
    exact maximizer of the likelihood given the other two:

        Sigma_k  <-  (1/(n * d/d_k)) * sum_i  Z_(k) Z_(k)^T

    where ``Z`` is the centered sample whitened along the other two
    modes, so the update is symmetric PSD by construction.  Each such
    step cannot decrease the likelihood, hence the per-sweep
    log-likelihood history is non-decreasing up to rounding.

    Only the Kronecker product of the factors is identifiable; the
    returned factors carry an arbitrary scale split (pass the result to
    :func:`normalize_identifiable` for the canonical one).

    Parameters
    ----------
    samples : sequence of array_like or ndarray
        Order-3 tensors of a common shape (or one stacked array with a
        leading sample axis).
    mean : array_like
        Fixed mean tensor; typically :func:`mle_mean` of the samples.
    init : KronCovariance, optional
        Starting factors; identity per mode when omitted.
    tol : float
        Stop when the relative log-likelihood change over a sweep,
        ``|new - old| / max(1, |old|)``, drops to ``tol`` or below.
    max_iter : int
        Maximum number of sweeps.

    Returns
    -------
    FlipFlopResult

    Raises
    ------
    EstimationError
        If an update is not positive definite (for example when every
        sample equals the mean), naming the offending mode.
    """
    stacked = _stack_samples(samples)
    if stacked.ndim != 4:
        raise ValueError(
            f"expected order-3 samples, got tensors of ndim {stacked.ndim - 1}"
        )
    mean_arr = np.asarray(mean, dtype=float)
    if mean_arr.shape != stacked.shape[1:]:
        raise ValueError(
            f"mean shape {mean_arr.shape} does not match samples "
            f"{stacked.shape[1:]}"
        )
    if tol < 0:
        raise ValueError("tol must be non-negative")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    dims = stacked.shape[1:]
    n = stacked.shape[0]
    d = int(np.prod(dims))
    centered = stacked - mean_arr

    if init is None:
        factors = [SpdFactor.identity(dk) for dk in dims]
    else:
        if init.dims != dims:
            raise ValueError(
                f"init dims {init.dims} do not match samples {dims}"
            )
        factors = list(init.factors)

    ll = _total_log_likelihood(centered, factors)
    history = [ll]
    converged = False
    sweeps = 0
    for sweep in range(1, max_iter + 1):
        for k in range(3):
            z = centered
            for j in range(3):
                if j != k:
                    z = _solve_along_axis(factors[j].chol, z, j + 1)
            rows = np.moveaxis(z, k + 1, 1).reshape(n, dims[k], -1)
            gram = np.einsum("nap,nbp->ab", rows, rows)
            try:
                factors[k] = SpdFactor(gram / (n * (d / dims[k])))
            except ValueError:
                raise EstimationError(
                    f"mode {k + 1} covariance update is not positive definite"
                ) from None
        new_ll = _total_log_likelihood(centered, factors)
        history.append(new_ll)
        sweeps = sweep
        if abs(new_ll - ll) <= tol * max(1.0, abs(ll)):
            converged = True
            ll = new_ll
            break
        ll = new_ll

    return FlipFlopResult(
        cov=KronCovariance(factors),
        iterations=sweeps,
        log_likelihood=ll,
        converged=converged,
        history=tuple(history),
    )


def normalize_identifiable(cov: KronCovariance) -> tuple:
    """Rescale every factor to unit trace, returning the residual scale.

    The Kronecker product only identifies the factors up to scale
    splits.  This picks the canonical representative with
    ``trace(Sigma_k) == 1`` for all ``k`` and returns ``(normalized,
    scale)`` where ``scale`` is the product of the original traces, so

        scale * kron(normalized factors) == kron(original factors).

    Factors already at unit trace come back unchanged with scale 1.
    """
    traces = [float(np.trace(f.matrix)) for f in cov.factors]
    scale = float(np.prod(traces))
    normalized = KronCovariance(
        [SpdFactor(f.matrix / tr) for f, tr in zip(cov.factors, traces)]
    )
    return normalized, scale
