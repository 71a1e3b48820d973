"""Reduced (eigen + Fourier) negative log-posterior and the full baseline.

Per component d the reduced objective is

  1/2 [ z_d' z_d
        + || A f_d(x) - B_d z_d ||^2_{CF_d^{-1}}
        + || x_d(tau) - y_d ||^2 / sigma_d^2 ]

with x_d = mu_d + Phi_d z_d, Phi_d = V sqrt(Lambda), B_d = A m_d Phi_d and
CF_d = A C_d A'. The baseline (magi) objective keeps the full state x_d and
uses K^{-1} / C^{-1} quadratic forms in the time domain; at j = n and
2l - 1 = n the two coincide because A is then invertible and Phi spans K.

The parameter prior is uniform on the system's parameter box and enforced
by projection in the optimizer, so it drops out of both objectives.

All gradients are analytic (chain rule through the rhs Jacobians); torch is
used as the tensor backend for the optimization loop, never for automatic
differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .kernels import GpConditionals, KernelHyperparams, kernel_block
from .ode_models import OdeSystem, TimeGrid
from .spectral_ops import (
    EigenBasis,
    FourierOperator,
    build_fourier_operator,
    push_covariance,
    truncated_eigen,
)

__all__ = [
    "PosteriorState",
    "fourier_apply",
    "fourier_adjoint",
    "ComponentPrecomp",
    "PosteriorPrecomp",
    "MagiPrecomp",
    "precompute",
    "magi_precompute",
    "neg_log_posterior",
    "gradient",
    "objective_breakdown",
    "magi_neg_log_posterior",
    "magi_gradient",
    "efigp_value_and_grad",
    "magi_value_and_grad",
    "NonFiniteObjectiveError",
]

_T = dict(dtype=torch.float64)


class NonFiniteObjectiveError(RuntimeError):
    """Objective evaluated non-finite; carries the per-term breakdown."""

    def __init__(self, breakdown: dict):
        self.breakdown = breakdown
        super().__init__(f"objective is not finite: {breakdown}")


@dataclass
class PosteriorState:
    """Optimization variables: coefficients per component plus parameters."""

    z: list  # length-D list of (j,) arrays
    theta: np.ndarray

    def __post_init__(self):
        self.z = [np.asarray(zd, dtype=float) for zd in self.z]
        self.theta = np.asarray(self.theta, dtype=float)
        if not all(np.all(np.isfinite(zd)) for zd in self.z):
            raise ValueError("z contains non-finite entries")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite entries")


def _locate_obs_indices(grid: TimeGrid, obs_times: np.ndarray) -> np.ndarray:
    """Indices of tau within the grid; tau must lie on grid points."""
    h = grid.spacing
    idx = np.rint((obs_times - grid.start) / h).astype(int)
    if np.any(idx < 0) or np.any(idx >= grid.n):
        raise ValueError("observation times outside the grid")
    if np.max(np.abs(grid.points[idx] - obs_times)) > 1e-9 * h:
        raise ValueError("observation times are not grid points")
    if np.unique(idx).size != idx.size:
        raise ValueError("observation indices must be distinct")
    return idx


@dataclass
class ComponentPrecomp:
    conditionals: GpConditionals
    basis: EigenBasis
    Phi: torch.Tensor        # (n, j) eigen synthesis map
    Phi_tau: torch.Tensor    # (N, j) rows at observation indices
    B: torch.Tensor          # (2l-1, j)
    Cf_chol: torch.Tensor    # lower Cholesky of A C A'
    obs_values: torch.Tensor
    noise_sd: float
    prior_mean: torch.Tensor


@dataclass
class PosteriorPrecomp:
    system: OdeSystem
    grid: TimeGrid
    fourier_op: FourierOperator
    j: int
    l: int
    obs_index: np.ndarray
    components: list
    times: torch.Tensor        # (n,)
    obs_idx_t: torch.Tensor    # long


def fourier_apply(f: torch.Tensor, l: int) -> torch.Tensor:
    """Apply the truncated augmented-DFT operator via a real FFT.

    Exactly equal (to roundoff) to ``op.matrix @ f``: the operator rows are
    [1; cos(2 pi f k / n); -sin(2 pi f k / n)], i.e. the real and imaginary
    parts of the unnormalized forward DFT. pocketfft is much cheaper than
    the dense multiply at large n, which keeps the per-iteration cost of
    the reduced objective nearly independent of the grid size.
    """
    spec = np.fft.rfft(f.numpy())
    return torch.from_numpy(np.concatenate([spec.real[:l], spec.imag[1:l]]))


def fourier_adjoint(y: torch.Tensor, n: int, l: int) -> torch.Tensor:
    """Apply the transpose of the truncated operator via an inverse FFT.

    The adjoint packs the (2l-1)-vector back into l complex bins; halving
    the non-DC bins undoes the Hermitian doubling inside irfft.
    """
    yv = y.numpy()
    c = np.zeros(n // 2 + 1, dtype=complex)
    c[0] = yv[0]
    c[1:l] = 0.5 * (yv[1:l] + 1j * yv[l:2 * l - 1])
    return torch.from_numpy(np.fft.irfft(c, n=n) * n)


def precompute(system: OdeSystem, grid: TimeGrid, hp: list,
               obs_times, obs_values, j: int, l: int) -> PosteriorPrecomp:
    """Assemble every grid-dependent matrix once.

    hp is one KernelHyperparams per component; obs_values is (D, N) with
    obs_times a subset of the grid. After this call, objective and gradient
    evaluations involve no n x n factorizations.
    """
    obs_times = np.asarray(obs_times, dtype=float)
    obs_values = np.asarray(obs_values, dtype=float)
    if len(hp) != system.dim or obs_values.shape[0] != system.dim:
        raise ValueError("need one hyperparameter set and one obs row per component")
    obs_index = _locate_obs_indices(grid, obs_times)
    op = build_fourier_operator(grid.n, l)
    obs_idx_t = torch.from_numpy(obs_index)

    comps = []
    for d in range(system.dim):
        mean_d = float(obs_values[d].mean())
        cond = kernel_block(grid, hp[d], mean_value=mean_d)
        basis = truncated_eigen(cond.K, j)
        Phi = np.ascontiguousarray(basis.scaled_vectors)
        B = op.matrix @ (cond.m @ Phi)
        CF = push_covariance(op, cond.C)
        Cf_chol = _chol_escalating(CF)
        comps.append(ComponentPrecomp(
            conditionals=cond, basis=basis,
            Phi=torch.from_numpy(Phi),
            Phi_tau=torch.from_numpy(np.ascontiguousarray(Phi[obs_index])),
            B=torch.from_numpy(B),
            Cf_chol=torch.from_numpy(Cf_chol),
            obs_values=torch.from_numpy(np.ascontiguousarray(obs_values[d])),
            noise_sd=float(hp[d].noise_sd),
            prior_mean=torch.from_numpy(cond.mean.copy()),
        ))
    return PosteriorPrecomp(
        system=system, grid=grid, fourier_op=op, j=j, l=l,
        obs_index=obs_index, components=comps,
        times=torch.from_numpy(grid.points.copy()), obs_idx_t=obs_idx_t,
    )


def _chol_escalating(M: np.ndarray) -> np.ndarray:
    """Plain Cholesky; on failure escalate a relative diagonal jitter.

    The pushed-forward C is already positive definite because C carries its
    own jitter, so the escalation path is a safety net only.
    """
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.max(np.diag(M)))
    for mult in (1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        try:
            return np.linalg.cholesky(M + mult * scale * np.eye(M.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("Fourier-domain covariance not factorizable")


def efigp_value_and_grad(pc: PosteriorPrecomp, z: list, theta: torch.Tensor,
                         want_grad: bool = True, want_terms: bool = False):
    """Torch core: objective, gradients and optional per-term breakdown.

    z is a list of (j,) float64 tensors, theta a (P,) float64 tensor.
    Returns (obj, dz_list, dtheta[, terms]); gradient slots are None when
    want_grad is false.
    """
    sysd = pc.system
    D = sysd.dim
    n, l = pc.grid.n, pc.l
    xs = [pc.components[d].prior_mean + pc.components[d].Phi @ z[d]
          for d in range(D)]
    X = torch.stack(xs)
    f = sysd.rhs(X, theta, pc.times, torch)

    obj = torch.zeros((), **_T)
    ss, terms = [], []
    for d in range(D):
        cp = pc.components[d]
        r = fourier_apply(f[d], l) - cp.B @ z[d]
        s = torch.cholesky_solve(r.unsqueeze(1), cp.Cf_chol).squeeze(1)
        ss.append(s)
        res = xs[d][pc.obs_idx_t] - cp.obs_values
        prior = 0.5 * (z[d] @ z[d])
        physics = 0.5 * (r @ s)
        data = 0.5 * (res @ res) / cp.noise_sd ** 2
        obj = obj + prior + physics + data
        if want_terms:
            terms.append({"prior_term": float(prior), "physics_term": float(physics),
                          "data_term": float(data),
                          "total": float(prior + physics + data)})

    dz = dtheta = None
    if want_grad:
        U = torch.stack([fourier_adjoint(s, n, l) for s in ss])  # (D, n)
        Jx = sysd.jac_state(X, theta, pc.times, torch)    # (D, D, n)
        Jth = sysd.jac_params(X, theta, pc.times, torch)  # (D, P, n)
        W = (U.unsqueeze(1) * Jx).sum(0)                  # (D, n), row e
        dz = []
        for e in range(D):
            cp = pc.components[e]
            res = xs[e][pc.obs_idx_t] - cp.obs_values
            g = z[e] - cp.B.T @ ss[e] + cp.Phi.T @ W[e]
            g = g + cp.Phi_tau.T @ (res / cp.noise_sd ** 2)
            dz.append(g)
        dtheta = (U.unsqueeze(1) * Jth).sum(dim=(0, 2))
    if want_terms:
        return obj, dz, dtheta, terms
    return obj, dz, dtheta


def _to_torch_state(pc: PosteriorPrecomp, state: PosteriorState):
    if len(state.z) != len(pc.components):
        raise ValueError("state has wrong number of components")
    z = []
    for d, zd in enumerate(state.z):
        if zd.shape != (pc.components[d].basis.j,):
            raise ValueError("z length does not match the eigenbasis")
        z.append(torch.from_numpy(zd))
    return z, torch.from_numpy(state.theta)


def neg_log_posterior(pc: PosteriorPrecomp, state: PosteriorState) -> float:
    z, theta = _to_torch_state(pc, state)
    obj, _, _, terms = efigp_value_and_grad(pc, z, theta, want_grad=False,
                                            want_terms=True)
    val = float(obj)
    if not np.isfinite(val):
        raise NonFiniteObjectiveError({"components": terms})
    return val


def gradient(pc: PosteriorPrecomp, state: PosteriorState):
    z, theta = _to_torch_state(pc, state)
    obj, dz, dtheta = efigp_value_and_grad(pc, z, theta)
    if not np.isfinite(float(obj)):
        _, _, _, terms = efigp_value_and_grad(pc, z, theta, want_grad=False,
                                              want_terms=True)
        raise NonFiniteObjectiveError({"components": terms})
    return [g.numpy() for g in dz], dtheta.numpy()


def objective_breakdown(pc: PosteriorPrecomp, state: PosteriorState) -> dict:
    """Per-component {prior, physics, data, total} diagnostics (JSON-able)."""
    z, theta = _to_torch_state(pc, state)
    obj, _, _, terms = efigp_value_and_grad(pc, z, theta, want_grad=False,
                                            want_terms=True)
    return {"components": terms, "total": float(obj)}


# --- time-domain baseline ----------------------------------------------------


@dataclass
class MagiComponentPrecomp:
    conditionals: GpConditionals
    Kinv: torch.Tensor
    m: torch.Tensor
    Cinv: torch.Tensor
    obs_values: torch.Tensor
    noise_sd: float
    prior_mean: torch.Tensor


@dataclass
class MagiPrecomp:
    system: OdeSystem
    grid: TimeGrid
    obs_index: np.ndarray
    components: list
    times: torch.Tensor
    obs_idx_t: torch.Tensor


def magi_precompute(system: OdeSystem, grid: TimeGrid, hp: list,
                    obs_times, obs_values) -> MagiPrecomp:
    """Dense K^{-1}, m, C^{-1} per component for the full-state objective."""
    obs_times = np.asarray(obs_times, dtype=float)
    obs_values = np.asarray(obs_values, dtype=float)
    obs_index = _locate_obs_indices(grid, obs_times)
    n = grid.n
    comps = []
    for d in range(system.dim):
        mean_d = float(obs_values[d].mean())
        cond = kernel_block(grid, hp[d], mean_value=mean_d)
        Lk = np.linalg.cholesky(cond.K)
        Kinv = np.linalg.solve(Lk.T, np.linalg.solve(Lk, np.eye(n)))
        Lc = _chol_escalating(cond.C)
        Cinv = np.linalg.solve(Lc.T, np.linalg.solve(Lc, np.eye(n)))
        comps.append(MagiComponentPrecomp(
            conditionals=cond,
            Kinv=torch.from_numpy(0.5 * (Kinv + Kinv.T)),
            m=torch.from_numpy(cond.m.copy()),
            Cinv=torch.from_numpy(0.5 * (Cinv + Cinv.T)),
            obs_values=torch.from_numpy(np.ascontiguousarray(obs_values[d])),
            noise_sd=float(hp[d].noise_sd),
            prior_mean=torch.from_numpy(cond.mean.copy()),
        ))
    return MagiPrecomp(system=system, grid=grid, obs_index=obs_index,
                       components=comps, times=torch.from_numpy(grid.points.copy()),
                       obs_idx_t=torch.from_numpy(obs_index))


def magi_value_and_grad(mp: MagiPrecomp, x: list, theta: torch.Tensor,
                        want_grad: bool = True, want_terms: bool = False):
    """Torch core for the full-state objective; mirrors efigp_value_and_grad."""
    sysd = mp.system
    D = sysd.dim
    X = torch.stack(list(x))
    f = sysd.rhs(X, theta, mp.times, torch)

    obj = torch.zeros((), **_T)
    ss, xcs, terms = [], [], []
    for d in range(D):
        cp = mp.components[d]
        xc = x[d] - cp.prior_mean
        xcs.append(xc)
        r = f[d] - cp.m @ xc
        s = cp.Cinv @ r
        ss.append(s)
        res = x[d][mp.obs_idx_t] - cp.obs_values
        prior = 0.5 * (xc @ (cp.Kinv @ xc))
        physics = 0.5 * (r @ s)
        data = 0.5 * (res @ res) / cp.noise_sd ** 2
        obj = obj + prior + physics + data
        if want_terms:
            terms.append({"prior_term": float(prior), "physics_term": float(physics),
                          "data_term": float(data),
                          "total": float(prior + physics + data)})

    dx = dtheta = None
    if want_grad:
        S = torch.stack(ss)
        Jx = sysd.jac_state(X, theta, mp.times, torch)
        Jth = sysd.jac_params(X, theta, mp.times, torch)
        W = (S.unsqueeze(1) * Jx).sum(0)
        dx = []
        for e in range(D):
            cp = mp.components[e]
            res = x[e][mp.obs_idx_t] - cp.obs_values
            g = cp.Kinv @ xcs[e] - cp.m.T @ ss[e] + W[e]
            g = g.index_add(0, mp.obs_idx_t, res / cp.noise_sd ** 2)
            dx.append(g)
        dtheta = (S.unsqueeze(1) * Jth).sum(dim=(0, 2))
    if want_terms:
        return obj, dx, dtheta, terms
    return obj, dx, dtheta


def magi_neg_log_posterior(mp: MagiPrecomp, x_list, theta) -> float:
    x = [torch.from_numpy(np.asarray(xd, dtype=float)) for xd in x_list]
    th = torch.from_numpy(np.asarray(theta, dtype=float))
    obj, _, _, terms = magi_value_and_grad(mp, x, th, want_grad=False,
                                           want_terms=True)
    val = float(obj)
    if not np.isfinite(val):
        raise NonFiniteObjectiveError({"components": terms})
    return val


def magi_gradient(mp: MagiPrecomp, x_list, theta):
    x = [torch.from_numpy(np.asarray(xd, dtype=float)) for xd in x_list]
    th = torch.from_numpy(np.asarray(theta, dtype=float))
    _, dx, dtheta = magi_value_and_grad(mp, x, th)
    return [g.numpy() for g in dx], dtheta.numpy()


def magi_objective_breakdown(mp: MagiPrecomp, x_list, theta) -> dict:
    x = [torch.from_numpy(np.asarray(xd, dtype=float)) for xd in x_list]
    th = torch.from_numpy(np.asarray(theta, dtype=float))
    obj, _, _, terms = magi_value_and_grad(mp, x, th, want_grad=False,
                                           want_terms=True)
    return {"components": terms, "total": float(obj)}
