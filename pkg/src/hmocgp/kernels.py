"""Stationary kernels and linear-model-of-coregionalization covariances.

All builders accept either plain arrays or tape variables for the
hyper-parameters, so the same code assembles priors for the objective and
for prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .exceptions import InputShapeError


@dataclass(frozen=True)
class RbfKernelParams:
    """Squared-exponential kernel hyper-parameters, stored as logs."""

    log_variance: float = 0.0
    log_lengthscale: float = 0.0

    def __post_init__(self):
        for name in ("log_variance", "log_lengthscale"):
            v = float(getattr(self, name))
            with np.errstate(over="ignore"):
                bad = not np.isfinite(v) or not np.isfinite(np.exp(v)) or np.exp(v) <= 0
            if bad:
                raise ValueError(f"{name} must map to a positive finite value, got {v}")

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputShapeError(f"inputs must be 1-D or 2-D, got shape {X.shape}")
    return X


def squared_distances(X, X2) -> np.ndarray:
    X, X2 = _as_2d(X), _as_2d(X2)
    if X.shape[1] != X2.shape[1]:
        raise InputShapeError(f"input dimension mismatch: {X.shape[1]} vs {X2.shape[1]}")
    diff = X[:, None, :] - X2[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def rbf_eval(x, x_prime, params: RbfKernelParams) -> float:
    """``sigma^2 exp(-|x - x'|^2 / (2 l^2))`` for two single inputs."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != xp.shape:
        raise InputShapeError(f"input shapes differ: {x.shape} vs {xp.shape}")
    d = x - xp
    r2 = float(d @ d)
    return float(np.exp(params.log_variance - 0.5 * r2 * np.exp(-2.0 * params.log_lengthscale)))


def rbf_matrix(sqdist: np.ndarray, log_variance, log_lengthscale):
    """Gram matrix from precomputed squared distances (tape-aware)."""
    return ad.exp(log_variance - 0.5 * sqdist * ad.exp(-2.0 * log_lengthscale))


# name -> gram builder taking (sqdist, log_variance, log_lengthscale)
STATIONARY_KERNELS: dict[str, Callable] = {"rbf": rbf_matrix}


@dataclass
class LmcSpec:
    """Coregionalization weights and one kernel per latent process.

    ``weights[q]`` is the ``D x R_q`` mixing matrix ``A_q``; the implied
    coregionalization matrix is ``B_q = A_q A_q^T``.
    """

    weights: list
    kernels: list
    kernel_type: str = "rbf"

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.weights]
        if len(self.weights) != len(self.kernels) or not self.weights:
            raise InputShapeError("need one weight matrix per kernel and at least one latent process")
        D = self.weights[0].shape[0]
        for a in self.weights:
            if a.shape[0] != D:
                raise InputShapeError("all mixing matrices need the same number of rows")
        if self.kernel_type not in STATIONARY_KERNELS:
            raise ValueError(f"unknown kernel {self.kernel_type!r}")

    @property
    def Q(self) -> int:
        return len(self.kernels)

    @property
    def D(self) -> int:
        return self.weights[0].shape[0]

    @property
    def ranks(self) -> tuple:
        return tuple(a.shape[1] for a in self.weights)

    def coregionalization(self, q: int) -> np.ndarray:
        a = self.weights[q]
        return a @ a.T

    def to_dict(self) -> dict:
        return {
            "kernel_type": self.kernel_type,
            "weights": [a.tolist() for a in self.weights],
            "kernels": [[k.log_variance, k.log_lengthscale] for k in self.kernels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmcSpec":
        return cls(
            weights=[np.asarray(a, float) for a in d["weights"]],
            kernels=[RbfKernelParams(float(a), float(b)) for a, b in d["kernels"]],
            kernel_type=d.get("kernel_type", "rbf"),
        )


def lmc_covariance_graph(sqdist, weights, log_variances, log_lengthscales, kernel_type="rbf"):
    """``sum_q (A_q A_q^T) kron K_q`` from tape variables or arrays."""
    gram = STATIONARY_KERNELS[kernel_type]
    total = None
    for q, A in enumerate(weights):
        B = A @ ad.transpose(A) if isinstance(A, ad.Var) else np.asarray(A) @ np.asarray(A).T
        Kq = gram(sqdist, log_variances[q], log_lengthscales[q])
        term = ad.kron(B, Kq)
        total = term if total is None else total + term
    return total


def lmc_covariance(X, X_prime, spec: LmcSpec, D: int | None = None) -> np.ndarray:
    """Cross-covariance of the ``D`` outputs between two input sets.

    Rows and columns are output-major: entry ``(d*N + n, e*M + m)`` equals
    ``sum_q b^q_{de} k_q(x_n, x'_m)``.
    """
    if D is not None and D != spec.D:
        raise InputShapeError(f"LMC weights describe {spec.D} outputs, not {D}")
    sq = squared_distances(X, X_prime)
    return np.asarray(lmc_covariance_graph(
        sq,
        spec.weights,
        [k.log_variance for k in spec.kernels],
        [k.log_lengthscale for k in spec.kernels],
        spec.kernel_type,
    ))


def median_pairwise_distance(X) -> float:
    X = _as_2d(X)
    if len(X) < 2:
        return 1.0
    sq = squared_distances(X, X)
    iu = np.triu_indices(len(X), 1)
    d = np.sqrt(sq[iu])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0
