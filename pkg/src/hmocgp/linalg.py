"""Dense factorization helpers: jittered Cholesky and Gaussian conditionals."""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from . import autodiff as ad
from .exceptions import InputShapeError, NumericalDegeneracyError

BASE_JITTER = 1e-6
MAX_ESCALATIONS = 6


def _jitter_schedule(base_jitter, start_with_zero):
    factors = [0.0] if start_with_zero else []
    factors += [base_jitter * 10.0 ** k for k in range(MAX_ESCALATIONS + 1)]
    return factors


def cholesky_with_jitter(M, base_jitter: float = BASE_JITTER, name: str = "matrix",
                         start_with_zero: bool = True):
    """Lower Cholesky factor of ``M + j I``.

    ``j`` is zero when ``M`` factorizes as is; otherwise it starts at
    ``base_jitter`` times the mean diagonal and grows tenfold, at most six
    times.  Returns ``(L, j)``.  Tape variables are supported; the jitter then
    tracks the mean diagonal so the result stays differentiable.

    Raises
    ------
    NumericalDegeneracyError
        If the last escalation still fails.
    """
    Mv = M.value if isinstance(M, ad.Var) else np.asarray(M, dtype=float)
    if Mv.ndim != 2 or Mv.shape[0] != Mv.shape[1]:
        raise InputShapeError(f"{name} must be square, got {Mv.shape}")
    n = Mv.shape[0]
    scale = float(np.mean(np.diag(Mv))) if n else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    eye = np.eye(n)
    for factor in _jitter_schedule(base_jitter, start_with_zero):
        try:
            L = np.linalg.cholesky(Mv + factor * scale * eye)
        except np.linalg.LinAlgError:
            continue
        if isinstance(M, ad.Var):
            if factor == 0.0:
                return ad.cholesky(M, factor=L), 0.0
            jit = factor * ad.mean(ad.diag(M))
            return ad.cholesky(M + jit * eye, factor=L), factor * scale
        return L, factor * scale
    raise NumericalDegeneracyError(
        f"{name} is not positive definite even with jitter {base_jitter * 10.0 ** MAX_ESCALATIONS:g} x mean diagonal"
    )


def gaussian_conditional(K_nn, K_sn, K_ss, q_mean, q_cov, full_cov: bool = True,
                         base_jitter: float = BASE_JITTER):
    """Moments of ``int p(f_* | f) N(f | q_mean, q_cov) df``.

    Mean ``K_sn K_nn^-1 q_mean``; covariance
    ``K_ss - K_sn K_nn^-1 K_ns + K_sn K_nn^-1 q_cov K_nn^-1 K_ns``.  Every
    inverse is applied through triangular solves with the Cholesky factor of
    ``K_nn``.  With ``full_cov=False`` ``K_ss`` may be just its diagonal and
    only marginal variances are returned.
    """
    K_nn = np.asarray(K_nn, dtype=float)
    K_sn = np.atleast_2d(np.asarray(K_sn, dtype=float))
    K_ss = np.asarray(K_ss, dtype=float)
    q_mean = np.asarray(q_mean, dtype=float)
    q_cov = np.asarray(q_cov, dtype=float)
    n = K_nn.shape[0]
    if K_sn.shape[1] != n or q_mean.shape != (n,) or q_cov.shape != (n, n):
        raise InputShapeError("inconsistent shapes in gaussian_conditional")
    L, _ = cholesky_with_jitter(K_nn, base_jitter, name="K_nn")
    A = sla.solve_triangular(L, K_sn.T, lower=True)          # L^-1 K_ns
    W = sla.solve_triangular(L, A, lower=True, trans="T")     # K_nn^-1 K_ns
    mean = W.T @ q_mean
    if full_cov:
        cov = K_ss - A.T @ A + W.T @ q_cov @ W
        cov = 0.5 * (cov + cov.T)
        return mean, cov
    k_diag = np.diag(K_ss) if K_ss.ndim == 2 else K_ss
    var = k_diag - np.einsum("ij,ij->j", A, A) + np.einsum("ij,ij->j", W, q_cov @ W)
    return mean, np.maximum(var, 0.0)
