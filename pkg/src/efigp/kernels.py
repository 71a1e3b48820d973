"""Matérn covariance, its derivative cross-covariances, and GP utilities.

The covariance is the general-smoothness Matérn

    k(r) = s2 * 2^(1-nu)/Gamma(nu) * (x)^nu * K_nu(x),   x = sqrt(2 nu) r / ell

with nu > 2 (default 2.01) so the process is twice mean-square
differentiable. The three derivative blocks follow from the Bessel
recurrences via d/dx [x^nu K_nu(x)] = -x^nu K_{nu-1}(x):

    d/ds k(|s-t|)      = -sign(s-t) * s2 c u *  x^nu K_{nu-1}(x)
    d2/(ds dt) k       =  s2 c u^2 * ((2nu-1) x^(nu-1) K_{nu-1}(x) - x^nu K_nu(x))

where c = 2^(1-nu)/Gamma(nu) and u = sqrt(2 nu)/ell. At r = 0 these reduce
to 0 and s2 * nu / (ell^2 (nu-1)).

A closed-form nu = 5/2 path exists purely as a test oracle; the library
itself never special-cases nu.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import gamma, kv

from .ode_models import TimeGrid

__all__ = [
    "KernelHyperparams",
    "GpConditionals",
    "IllConditionedKernelError",
    "kernel_block",
    "fit_hyperparameters",
    "gp_smooth_posterior",
    "marginal_log_likelihood",
    "hyperparams_to_dict",
    "hyperparams_from_dict",
]

_TINY_X = 1e-12


class IllConditionedKernelError(RuntimeError):
    """Cholesky failed even at the maximum jitter level."""

    def __init__(self, what: str, cond_estimate: float):
        self.cond_estimate = cond_estimate
        super().__init__(
            f"{what}: factorization failed at maximum jitter "
            f"(condition estimate {cond_estimate:.3e})"
        )


@dataclass(frozen=True)
class KernelHyperparams:
    amplitude_sq: float
    lengthscale: float
    nu: float = 2.01
    noise_sd: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        if not (self.amplitude_sq > 0 and self.lengthscale > 0):
            raise ValueError("amplitude_sq and lengthscale must be positive")
        if not self.nu > 2:
            raise ValueError("nu must exceed 2 for twice-differentiable paths")
        if self.noise_sd < 0 or not np.isfinite(
            self.amplitude_sq + self.lengthscale + self.nu + self.noise_sd
        ):
            raise ValueError("hyperparameters must be finite, noise_sd >= 0")


def hyperparams_to_dict(hp: KernelHyperparams, component: int) -> dict:
    return {
        "component": component,
        "amplitude_sq": hp.amplitude_sq,
        "lengthscale": hp.lengthscale,
        "nu": hp.nu,
        "noise_sd": hp.noise_sd,
        "degenerate": hp.degenerate,
    }


def hyperparams_from_dict(d: dict) -> KernelHyperparams:
    return KernelHyperparams(
        amplitude_sq=d["amplitude_sq"], lengthscale=d["lengthscale"],
        nu=d["nu"], noise_sd=d["noise_sd"], degenerate=d.get("degenerate", False),
    )


def _matern_tables(hp: KernelHyperparams, r):
    """Evaluate k, dk/ds factor and d2k/dsdt on an array of lags |r| >= 0.

    Returns (value, ds_mag, dsdt): ``ds_mag`` is d/ds k at s-t = r > 0;
    multiply by sign(s-t) for the full antisymmetric block.
    """
    r = np.asarray(r, dtype=float)
    s2, ell, nu = hp.amplitude_sq, hp.lengthscale, hp.nu
    u = math.sqrt(2.0 * nu) / ell
    c = 2.0 ** (1.0 - nu) / gamma(nu)
    x = u * r
    small = x < _TINY_X
    xs = np.where(small, 1.0, x)  # placeholder to avoid 0*inf
    kv_nu = kv(nu, xs)
    kv_nm1 = kv(nu - 1.0, xs)
    pow_nu = xs ** nu
    pow_nm1 = xs ** (nu - 1.0)

    val = s2 * c * pow_nu * kv_nu
    ds = -s2 * c * u * pow_nu * kv_nm1
    dsdt = s2 * c * u * u * ((2.0 * nu - 1.0) * pow_nm1 * kv_nm1 - pow_nu * kv_nu)

    val = np.where(small, s2, val)
    ds = np.where(small, 0.0, ds)
    dsdt = np.where(small, s2 * nu / (ell ** 2 * (nu - 1.0)), dsdt)
    return val, ds, dsdt


def matern_value(hp: KernelHyperparams, s, t):
    """k(s, t) for arbitrary (broadcastable) time arrays."""
    r = np.abs(np.asarray(s, dtype=float) - np.asarray(t, dtype=float))
    return _matern_tables(hp, r)[0]


def matern_ds(hp: KernelHyperparams, s, t):
    """d/ds k(s, t)."""
    d = np.asarray(s, dtype=float) - np.asarray(t, dtype=float)
    return np.sign(d) * _matern_tables(hp, np.abs(d))[1]


def matern_dsdt(hp: KernelHyperparams, s, t):
    """d2/(ds dt) k(s, t)."""
    r = np.abs(np.asarray(s, dtype=float) - np.asarray(t, dtype=float))
    return _matern_tables(hp, r)[2]


def _chol_with_jitter(mat: np.ndarray, base_scale: float, what: str):
    """Cholesky of mat + eps*I, escalating eps from 1e-8 to 1e-4 (relative)."""
    for mult in (1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        eps = mult * base_scale
        try:
            factor = cho_factor(mat + eps * np.eye(mat.shape[0]), lower=True)
            return factor, eps
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedKernelError(what, float(np.linalg.cond(mat)))


@dataclass(frozen=True)
class GpConditionals:
    """Kernel blocks on a grid plus the derivative-conditioning matrices.

    K and C carry their stabilizing diagonal jitter already (jitter_K,
    jitter_C); every downstream consumer must use these exact matrices so
    that time-domain and Fourier-domain quadratic forms stay consistent.
    """

    grid: TimeGrid
    hp: KernelHyperparams
    K: np.ndarray       # (n, n), jittered, SPD
    dK_s: np.ndarray    # (n, n), d/ds block
    dK_t: np.ndarray    # (n, n), d/dt block == dK_s.T
    dK_st: np.ndarray   # (n, n), mixed block
    m: np.ndarray       # dK_s @ K^{-1}
    C: np.ndarray       # dK_st - m @ dK_t, symmetrized, jittered, SPD
    mean: np.ndarray    # constant prior mean vector
    chol_K: tuple
    jitter_K: float
    jitter_C: float


def kernel_block(grid: TimeGrid, hp: KernelHyperparams,
                 mean_value: float = 0.0) -> GpConditionals:
    """Assemble all kernel blocks and conditioning matrices on a grid.

    The grid is equally spaced (TimeGrid enforces it), so blocks are built
    from the n distinct lags; this keeps them exactly Toeplitz and makes the
    Bessel evaluation O(n) instead of O(n^2).
    """
    n = grid.n
    lags = grid.spacing * np.arange(n)
    val, ds, dsdt = _matern_tables(hp, lags)

    idx = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    sign = np.sign(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
    K = val[idx]
    dK_s = sign * ds[idx]
    dK_t = dK_s.T
    dK_st = dsdt[idx]

    chol, jit_k = _chol_with_jitter(K, float(np.max(np.diag(K))), "K(I,I)")
    Kj = K + jit_k * np.eye(n)
    m = cho_solve(chol, dK_s.T).T
    C = dK_st - m @ dK_t
    C = 0.5 * (C + C.T)
    jit_c = 1e-8 * float(np.max(np.diag(dK_st)))
    C = C + jit_c * np.eye(n)

    return GpConditionals(
        grid=grid, hp=hp, K=Kj, dK_s=dK_s, dK_t=dK_t, dK_st=dK_st,
        m=m, C=C, mean=np.full(n, float(mean_value)), chol_K=chol,
        jitter_K=jit_k, jitter_C=jit_c,
    )


def marginal_log_likelihood(obs_times, obs_values, hp: KernelHyperparams) -> float:
    """Gaussian marginal log-likelihood with the sample mean as prior mean."""
    y = np.asarray(obs_values, dtype=float)
    t = np.asarray(obs_times, dtype=float)
    n = y.size
    yc = y - y.mean()
    M = matern_value(hp, t[:, None], t[None, :])
    M[np.diag_indices(n)] += hp.noise_sd ** 2 + 1e-10 * hp.amplitude_sq
    try:
        chol = cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf
    alpha = cho_solve(chol, yc)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    return float(-0.5 * (yc @ alpha) - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi))


def fit_hyperparameters(obs_times, obs_values, nu: float = 2.01,
                        fixed_noise_sd: float | None = None) -> KernelHyperparams:
    """Maximize the marginal likelihood over (amplitude_sq, lengthscale, noise_sd).

    nu stays fixed. Multi-start local optimization (8 deterministic starts,
    log-space parameters); ties resolve to the lowest start index. Constant
    observations short-circuit to floor values with the degenerate flag set.
    """
    t = np.asarray(obs_times, dtype=float)
    y = np.asarray(obs_values, dtype=float)
    if t.size < 5:
        raise ValueError("need at least 5 observations to fit hyperparameters")
    if np.any(np.diff(t) <= 0):
        raise ValueError("obs_times must be strictly increasing")

    if np.ptp(y) == 0.0 or np.var(y) < 1e-24:
        return KernelHyperparams(amplitude_sq=1e-6, lengthscale=float(np.ptp(t)) or 1.0,
                                 nu=nu, noise_sd=1e-6, degenerate=True)

    span = float(t[-1] - t[0])
    var_y = float(np.var(y))
    sd_y = math.sqrt(var_y)

    fit_noise = fixed_noise_sd is None

    def unpack(p):
        amp, ell = math.exp(p[0]), math.exp(p[1])
        noise = math.exp(p[2]) if fit_noise else float(fixed_noise_sd)
        return KernelHyperparams(amplitude_sq=amp, lengthscale=ell, nu=nu,
                                 noise_sd=noise)

    def neg_ll(p):
        return -marginal_log_likelihood(t, y, unpack(p))

    starts = []
    for ell0 in (span / 20, span / 10, span / 5, span / 2.5):
        for frac in (0.1, 0.4):
            p = [math.log(var_y), math.log(ell0)]
            if fit_noise:
                p.append(math.log(max(frac * sd_y, 1e-6)))
            starts.append(np.array(p))

    bounds = [
        (math.log(1e-6), math.log(1e6 * var_y)),
        (math.log(1e-3 * span), math.log(1e2 * span)),
    ]
    if fit_noise:
        bounds.append((math.log(1e-6), math.log(10 * sd_y + 1e-6)))

    best_val, best_p = np.inf, None
    for p0 in starts:
        res = minimize(neg_ll, p0, method="L-BFGS-B", bounds=bounds)
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_p = res.fun, res.x
    if best_p is None:
        raise RuntimeError("hyperparameter fit failed from every start")
    return unpack(best_p)


def gp_smooth_posterior(obs_times, obs_values, hp: KernelHyperparams,
                        grid: TimeGrid, prior_mean: float | None = None):
    """GP smoothing posterior mean and pointwise variance on a grid.

    Uses the standard noisy-observation conditioning formulas with a
    constant prior mean (the sample mean of the observations unless
    overridden). Returns (mean, cov_diag), each of length grid.n.
    """
    t = np.asarray(obs_times, dtype=float)
    y = np.asarray(obs_values, dtype=float)
    if hp.noise_sd == 0.0 and np.unique(t).size < t.size:
        raise ValueError("duplicate observation times with zero noise")

    ybar = y.mean() if prior_mean is None else float(prior_mean)
    M = matern_value(hp, t[:, None], t[None, :])
    M[np.diag_indices(t.size)] += hp.noise_sd ** 2 + 1e-12 * hp.amplitude_sq
    chol = cho_factor(M, lower=True)
    Kgt = matern_value(hp, grid.points[:, None], t[None, :])  # (n, N)
    alpha = cho_solve(chol, y - ybar)
    mean = ybar + Kgt @ alpha
    W = cho_solve(chol, Kgt.T)                                # (N, n)
    cov_diag = hp.amplitude_sq - np.einsum("nk,kn->n", Kgt, W)
    return mean, cov_diag
