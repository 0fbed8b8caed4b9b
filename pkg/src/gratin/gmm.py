"""Full-covariance Gaussian mixtures: EM fitting, density evaluation, sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .datasets import ContractError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class GmmInvariantError(RuntimeError):
    """A covariance matrix lost positive definiteness."""


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood_history: list[float] = field(default_factory=list)
    floor: float = 0.0
    reseed_iterations: list[int] = field(default_factory=list)
    converged: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(
            self.n_components, self.dim, self.dim
        )

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum(
            "k,ki,kj->ij", self.weights, diff, diff
        )

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihood_history": list(self.log_likelihood_history),
            "floor": self.floor,
            "reseed_iterations": list(self.reseed_iterations),
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        return cls(
            weights=np.array(d["weights"]),
            means=np.array(d["means"]),
            covariances=np.array(d["covariances"]),
            log_likelihood_history=list(d.get("log_likelihood_history", [])),
            floor=float(d.get("floor", 0.0)),
            reseed_iterations=list(d.get("reseed_iterations", [])),
            converged=bool(d.get("converged", False)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GmmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of one covariance or a stack of them."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise GmmInvariantError("covariance is not positive definite") from None


def _inverse_factors(covariances: np.ndarray):
    """``L_k^-1`` for every component together with ``log det Sigma_k``."""
    chol = _cholesky(covariances)
    inv = np.tril(np.linalg.inv(chol))
    log_det = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return inv, log_det


def component_log_densities(
    x: np.ndarray, means: np.ndarray, covariances: np.ndarray, factors=None
) -> np.ndarray:
    """``log N(x_n | mu_k, Sigma_k)`` as an ``N x K`` array."""
    x = np.atleast_2d(x)
    d = x.shape[1]
    inv, log_det = _inverse_factors(covariances) if factors is None else factors
    z = np.matmul(x[None, :, :] - means[:, None, :], inv.transpose(0, 2, 1))
    maha = np.einsum("kni,kni->nk", z, z)
    return -0.5 * (d * LOG_2PI + log_det[None, :] + maha)


def gmm_logpdf_many(model: GmmModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ContractError(f"expected dimension {model.dim}, got {x.shape[1]}")
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return logsumexp(component_log_densities(x, model.means, model.covariances) + log_w, axis=1)


def gmm_logpdf(model: GmmModel, x: np.ndarray) -> float:
    """``log sum_k pi_k N(x | mu_k, Sigma_k)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("gmm_logpdf takes a single vector")
    return float(gmm_logpdf_many(model, x[None, :])[0])


def responsibilities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    joint = component_log_densities(x, model.means, model.covariances) + log_w
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def covariance_floor(data: np.ndarray) -> float:
    n, d = data.shape
    cov = np.cov(data, rowvar=False, bias=True).reshape(d, d) if n > 1 else np.zeros((d, d))
    tr = float(np.trace(cov))
    return 1e-6 * tr / d if tr > 0 else 1e-6


def _kmeanspp_means(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # rows are taken from a canonical (sorted) copy so the result does not
    # depend on the input row order
    canon = data[np.lexsort(data.T[::-1])]
    n = canon.shape[0]
    centers = [canon[rng.integers(n)]]
    dist2 = ((canon - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = dist2.sum()
        idx = rng.choice(n, p=dist2 / total) if total > 0 else rng.integers(n)
        centers.append(canon[idx])
        dist2 = np.minimum(dist2, ((canon - canon[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _penalized_joint(data, weights, means, covs, floor):
    # log pi_k + log N(x | mu_k, Sigma_k) - floor/2 * tr(Sigma_k^-1).
    # With this term in the E-step the floored M-step (Sigma = S + floor I)
    # maximises the expected complete-data objective exactly, so EM stays
    # monotone in the objective below.
    factors = _inverse_factors(covs)
    # tr(Sigma^-1) = ||L^-1||_F^2
    penalty = 0.5 * floor * np.einsum("kij,kij->k", factors[0], factors[0])
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return component_log_densities(data, means, covs, factors) + log_w - penalty


def fit_em(
    data: np.ndarray,
    n_components: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-3,
    floor: float | None = None,
) -> GmmModel:
    """Fit a ``K``-component full-covariance mixture by expectation-maximisation.

    Iterates until ``max_iter`` M-steps are done or the mean per-sample
    objective gains less than ``tol``. The objective is the log-likelihood
    with a ``-floor/2 tr(Sigma_k^-1)`` term per component, the quantity for
    which adding ``floor * I`` to every covariance is the exact M-step.

    A component whose responsibility mass falls below one sample is re-seeded
    at a random data row; the iteration is recorded in ``reseed_iterations``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 1:
        raise ContractError("data must be an N x d matrix with d >= 1")
    n, d = data.shape
    k = int(n_components)
    if k < 1:
        raise ContractError("need at least one component")
    if k > n:
        raise ContractError(f"K={k} exceeds the number of samples N={n}")
    rng = np.random.default_rng(seed)
    if floor is None:
        floor = covariance_floor(data)
    global_cov = (
        np.cov(data, rowvar=False, bias=True).reshape(d, d) if n > 1 else np.zeros((d, d))
    )
    base_cov = global_cov + floor * np.eye(d)
    canon = data[np.lexsort(data.T[::-1])]

    weights = np.full(k, 1.0 / k)
    means = _kmeanspp_means(data, k, rng)
    covs = np.repeat(base_cov[None], k, axis=0)
    history: list[float] = []
    reseeds: list[int] = []
    converged = False

    for it in range(max_iter + 1):
        joint = _penalized_joint(data, weights, means, covs, floor)
        # plain max-shifted log-sum-exp; the scipy wrapper's overhead dominates small fits
        top = joint.max(axis=1, keepdims=True)
        norm = top + np.log(np.exp(joint - top).sum(axis=1, keepdims=True))
        objective = float(norm.mean())
        history.append(objective)
        if it > 0 and (not reseeds or reseeds[-1] != it - 1):
            if objective - history[-2] < tol:
                converged = True
                break
        if it == max_iter:
            break
        resp = np.exp(joint - norm)

        mass = resp.sum(axis=0)
        collapsed = set(np.flatnonzero(mass < 1.0).tolist()) if k > 1 else set()
        if collapsed:
            reseeds.append(it)
        weights, means, covs = _m_step(data, resp, floor)
        for j in sorted(collapsed):
            logger.info("EM iteration %d: component %d collapsed, re-seeding", it, j)
            means[j] = canon[rng.integers(n)]
            covs[j] = base_cov
            weights[j] = 1.0 / k
        weights /= weights.sum()

    return GmmModel(weights, means, covs, history, floor, reseeds, converged)


def _m_step(data: np.ndarray, resp: np.ndarray, floor: float):
    n, d = data.shape
    mass = resp.sum(axis=0)
    safe = np.maximum(mass, np.finfo(float).tiny)
    means = resp.T @ data / safe[:, None]
    diff = data[None, :, :] - means[:, None, :]
    covs = np.matmul((diff * resp.T[:, :, None]).transpose(0, 2, 1), diff) / safe[:, None, None]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1)) + floor * np.eye(d)
    return mass / n, means, covs


def sample_with_components(model: GmmModel, count: int, seed: int = 0):
    """Ancestral sampling: component ~ Categorical(pi), then x = mu + L z.

    Returns the component index of every draw together with the draws.
    """
    rng = np.random.default_rng(seed)
    comp = rng.choice(model.n_components, size=count, p=model.weights)
    z = rng.standard_normal((count, model.dim))
    out = np.empty((count, model.dim))
    for k in range(model.n_components):
        idx = comp == k
        if idx.any():
            chol = _cholesky(model.covariances[k])
            out[idx] = model.means[k] + z[idx] @ chol.T
    return comp, out


def sample(model: GmmModel, count: int, seed: int = 0) -> np.ndarray:
    return sample_with_components(model, count, seed)[1]
