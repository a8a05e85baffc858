"""Subspace-constrained reconstruction with temporal and spatial TV.

Minimizes over coefficient maps ``V`` (shape ``(K, N, N)``)::

    0.5 * ||sqrt(W) * (E(V U^T) - y)||^2
        + lambda_t * sum phi(S_t(V U^T)) + lambda_s * sum phi(S_s V)

with ``phi(z) = sqrt(|z|^2 + eps^2)``. ``S_t`` is the forward frame
difference (zero row at the last frame), ``S_s`` the 2D forward-difference
gradient of each coefficient map (zero at the last row/column).
The data term and its gradient go through an exact Toeplitz normal
operator, so each CG iteration costs a handful of FFTs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import TemporalBasis
from .encoding import EncodingOperator, ToeplitzNormal, subspace_adjoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconConfig:
    lambda_t: float | None = None       # None -> lambda_t_rel * max|adjoint init| / sqrt(T)
    lambda_s: float | None = None       # None -> lambda_s_ratio * lambda_t * sqrt(T)
    lambda_t_rel: float = 0.02
    lambda_s_ratio: float = 0.2
    K: int = 6
    max_iters: int = 60
    l1_smoothing_eps: float | None = None   # None -> eps_rel * median|init|
    eps_rel: float = 1e-3
    initial_step: float = 1.0
    backtrack: float = 0.5
    max_backtracks: int = 30
    armijo: float = 1e-4
    convergence_tol: float = 1e-6
    convergence_patience: int = 3
    mask_session_boundaries: bool = False
    backend: str = "auto"

    def __post_init__(self):
        for name in ("lambda_t", "lambda_s", "l1_smoothing_eps"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.l1_smoothing_eps is not None and self.l1_smoothing_eps <= 0:
            raise ValueError("l1_smoothing_eps must be > 0")
        if self.K < 1 or self.max_iters < 0 or self.max_backtracks < 1:
            raise ValueError("K >= 1, max_iters >= 0 and max_backtracks >= 1 required")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass(frozen=True)
class SpatialCoefficients:
    V: np.ndarray  # (K, N, N) complex

    def __post_init__(self):
        if not np.all(np.isfinite(self.V)):
            raise ValueError("coefficient maps contain non-finite values")


@dataclass(frozen=True)
class DynamicSeries:
    frames: np.ndarray                   # (T, N, N) complex
    session_boundaries: tuple = (0,)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def as_matrix(self) -> np.ndarray:
        """Frames as the ``N^2 x T`` matrix ``m``."""
        return self.frames.reshape(self.n_frames, -1).T


@dataclass
class ReconResult:
    coefficients: SpatialCoefficients
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    aborted: bool = False
    lambda_t: float = 0.0
    lambda_s: float = 0.0
    eps: float = 0.0

    @property
    def V(self):
        return self.coefficients.V


def synthesize(V, basis) -> DynamicSeries:
    """Frames ``m[t] = sum_k V[k] U[t, k]``."""
    V = V.V if isinstance(V, SpatialCoefficients) else V
    if isinstance(basis, TemporalBasis):
        U, bounds = basis.U_K, basis.session_boundaries
    else:
        U, bounds = np.asarray(basis), (0,)
    if U.shape[1] != V.shape[0]:
        raise ValueError(f"basis has K={U.shape[1]} columns, coefficients have {V.shape[0]}")
    return DynamicSeries(np.einsum("kxy,tk->txy", V, U, optimize=True), tuple(bounds))


def project(frames, U) -> np.ndarray:
    """Coefficient maps of a frame series in the subspace spanned by orthonormal ``U``."""
    return np.einsum("txy,tk->kxy", frames, U.conj(), optimize=True)


# --- finite-difference operators -------------------------------------------------------

def temporal_mask(T, boundaries=(0,), mask_boundaries=False):
    """1 where the forward frame difference is active, 0 on the last frame (and boundaries)."""
    m = np.ones(T)
    m[-1] = 0.0
    if mask_boundaries:
        for b in boundaries:
            if b > 0:
                m[b - 1] = 0.0
    return m


def temporal_diff(m, mask):
    d = np.zeros_like(m)
    d[:-1] = m[1:] - m[:-1]
    return d * mask[:, None, None]


def temporal_diff_adjoint(g, mask):
    g = g * mask[:, None, None]
    out = -g
    out[1:] += g[:-1]
    return out


def spatial_grad(v):
    """Forward differences along both image axes: shape ``(2,) + v.shape``."""
    g = np.zeros((2,) + v.shape, dtype=v.dtype)
    g[0, ..., :-1, :] = v[..., 1:, :] - v[..., :-1, :]
    g[1, ..., :, :-1] = v[..., :, 1:] - v[..., :, :-1]
    return g


def spatial_grad_adjoint(g):
    gx, gy = g[0], g[1]
    out = np.zeros_like(gx)
    out[..., :-1, :] -= gx[..., :-1, :]
    out[..., 1:, :] += gx[..., :-1, :]
    out[..., :, :-1] -= gy[..., :, :-1]
    out[..., :, 1:] += gy[..., :, :-1]
    return out


def _phi(z, eps):
    a = np.abs(z)
    return np.sqrt(a * a + eps * eps, out=a)


def _phi_sum(z, eps):
    return float(np.sum(_phi(z, eps)))


# --- problem -----------------------------------------------------------------------------

def _stack_kspace(datasets):
    return np.concatenate([d.kspace for d in datasets], axis=0)


class ReconProblem:
    """Precomputed quantities for one reconstruction (data, basis, operator)."""

    def __init__(self, datasets, op: EncodingOperator, basis: TemporalBasis, cfg: ReconConfig):
        if basis.K != cfg.K:
            basis = basis.truncate(cfg.K)
        self.datasets = list(datasets)
        self.op = op
        self.basis = basis
        self.cfg = cfg
        self.U = np.asarray(basis.U_K)
        self.y = _stack_kspace(self.datasets)
        T = self.y.shape[0]
        if T != basis.n_frames or T != op.n_frames:
            raise ValueError(f"data has {T} frames, basis {basis.n_frames}, operator {op.n_frames}")
        self.normal = ToeplitzNormal(op, self.U, backend=cfg.backend)
        self.b = subspace_adjoint(op, self.y, self.U, backend=cfg.backend)
        self.c0 = 0.5 * float(np.sum(op.weights[None, None, :, None] * np.abs(self.y) ** 2))
        self.tmask = temporal_mask(T, basis.session_boundaries, cfg.mask_session_boundaries)
        # S_t(V U') = V (S_t U)': temporal differences are taken on the basis once
        self.dU = temporal_diff(self.U[:, :, None], self.tmask)[:, :, 0]

        nb = self.normal(self.b)
        den = np.vdot(self.b, nb).real
        self.init_scale = np.vdot(self.b, self.b).real / den if den > 0 else 0.0
        # max|b| grows like sqrt(T) (the DC column of U is ~1/sqrt(T)); dividing it out
        # keeps the temporal penalty per frame independent of series length. The
        # spatial penalty acts on V, whose scale carries the same sqrt(T).
        per_frame = float(np.abs(self.b).max()) / np.sqrt(T)
        self.lambda_t = cfg.lambda_t if cfg.lambda_t is not None else cfg.lambda_t_rel * per_frame
        self.lambda_s = (cfg.lambda_s if cfg.lambda_s is not None
                         else cfg.lambda_s_ratio * cfg.lambda_t_rel * per_frame * np.sqrt(T))
        if cfg.l1_smoothing_eps is not None:
            self.eps = cfg.l1_smoothing_eps
        else:
            med = float(np.median(np.abs(self.b))) * self.init_scale
            self.eps = cfg.eps_rel * med if med > 0 else 1e-6

    @property
    def shape(self):
        n = self.op.grid_size
        return (self.U.shape[1], n, n)

    def initial_guess(self) -> np.ndarray:
        """Density-compensated adjoint in the subspace, scaled by the best scalar fit."""
        return self.init_scale * self.b

    # terms -----------------------------------------------------------------------
    def data_term(self, V, NV=None):
        NV = self.normal(V) if NV is None else NV
        return 0.5 * np.vdot(V, NV).real - np.vdot(V, self.b).real + self.c0

    def temporal_diff(self, V):
        return synthesize(V, self.dU).frames

    def temporal_term(self, V=None, m=None):
        d = self.temporal_diff(V) if m is None else temporal_diff(m, self.tmask)
        return _phi_sum(d, self.eps)

    def spatial_term(self, V):
        return _phi_sum(spatial_grad(V), self.eps)

    def objective(self, V) -> float:
        val = (self.data_term(V) + self.lambda_t * self.temporal_term(V)
               + self.lambda_s * self.spatial_term(V))
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite objective (max|V|={np.abs(V).max():.3g})")
        return float(val)

    def gradient(self, V, NV=None, dt=None, ds=None) -> np.ndarray:
        """Wirtinger gradient; ``NV``, ``dt`` and ``ds`` may carry cached ``N V``, ``S_t m``, ``S_s V``."""
        NV = self.normal(V) if NV is None else NV
        g = NV - self.b
        if self.lambda_t:
            d = self.temporal_diff(V) if dt is None else dt
            g = g + self.lambda_t * project(d / _phi(d, self.eps), self.dU)
        if self.lambda_s:
            s = spatial_grad(V) if ds is None else ds
            g = g + self.lambda_s * spatial_grad_adjoint(s / _phi(s, self.eps))
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        return g

    def objective_direct(self, V) -> float:
        """Objective with the data term evaluated through the explicit NUDFT (test oracle)."""
        m = synthesize(V, self.U).frames
        r = self.op.forward_series(m) - self.y
        data = 0.5 * float(np.sum(self.op.weights[None, None, :, None] * np.abs(r) ** 2))
        return (data + self.lambda_t * self.temporal_term(m=m)
                + self.lambda_s * self.spatial_term(V))


def objective(V, datasets, op, basis, cfg) -> float:
    return ReconProblem(datasets, op, basis, cfg).objective(V)


def gradient(V, datasets, op, basis, cfg) -> np.ndarray:
    return ReconProblem(datasets, op, basis, cfg).gradient(V)


def nonlinear_cg(problem: ReconProblem, V0: np.ndarray) -> ReconResult:
    """Fletcher-Reeves nonlinear CG with Armijo backtracking.

    The trial step along ``d`` is the minimizer of the quadratic data term
    along ``d``, times an adaptive factor that starts at ``initial_step``.
    All operators are linear, so ``N V``, ``S_t m`` and ``S_s V`` are carried
    along the line and only the smoothed magnitudes are re-evaluated while
    backtracking.
    """
    cfg = problem.cfg
    lt, ls, eps = problem.lambda_t, problem.lambda_s, problem.eps
    V = np.array(V0, dtype=np.complex128)
    NV = problem.normal(V)
    dt = problem.temporal_diff(V)
    ds = spatial_grad(V)

    f = problem.objective(V)
    g = problem.gradient(V, NV, dt, ds)
    gg = np.vdot(g, g).real
    d = -g
    trace = [f]
    restart_every = 10 * problem.U.shape[1]
    scale = cfg.initial_step
    converged = aborted = retried = False
    it = 0
    quiet = 0
    while it < cfg.max_iters:
        if gg == 0.0:
            converged = True
            break
        slope = np.vdot(g, d).real
        if slope >= 0:
            d, slope = -g, -gg
        Nd = problem.normal(d)
        dtd = problem.temporal_diff(d)
        dsd = spatial_grad(d)
        curv = np.vdot(d, Nd).real
        a1 = np.vdot(NV - problem.b, d).real
        data0 = problem.data_term(V, NV)
        t = scale * (-slope / curv if curv > 0 else 1.0)
        accepted = False
        for n_bt in range(cfg.max_backtracks):
            ft = data0 + t * a1 + 0.5 * t * t * curv
            if lt:
                ft += lt * _phi_sum(dt + t * dtd, eps)
            if ls:
                ft += ls * _phi_sum(ds + t * dsd, eps)
            if not np.isfinite(ft):
                raise FloatingPointError(f"non-finite objective at iteration {it}, step {t:.3g}, "
                                         f"max|V|={np.abs(V).max():.3g}")
            if ft <= f + cfg.armijo * t * slope:
                accepted = True
                break
            t *= cfg.backtrack
        if not accepted:
            if not retried:
                log.debug("line search failed at iteration %d; restarting along -g/2", it)
                retried = True
                d = -0.5 * g
                scale = cfg.initial_step
                continue
            log.warning("line search failed twice at iteration %d; returning partial result", it)
            aborted = True
            break
        retried = False
        if n_bt == 0:
            scale = min(cfg.initial_step, scale / cfg.backtrack)
        elif n_bt > 1:
            scale *= cfg.backtrack ** (n_bt - 1)
        V = V + t * d
        NV = NV + t * Nd
        dt = dt + t * dtd
        ds = ds + t * dsd
        f_old, f = f, ft
        trace.append(f)
        it += 1
        g_new = problem.gradient(V, NV, dt, ds)
        gg_new = np.vdot(g_new, g_new).real
        if abs(f_old - f) <= cfg.convergence_tol * max(abs(f_old), 1e-300):
            quiet += 1
            if quiet >= cfg.convergence_patience:
                converged = True
                break
        else:
            quiet = 0
        beta = 0.0 if it % restart_every == 0 else gg_new / gg
        d = -g_new + beta * d
        g, gg = g_new, gg_new
    return ReconResult(SpatialCoefficients(V), trace, it, converged, aborted, lt, ls, eps)


def reconstruct(datasets, op: EncodingOperator, basis: TemporalBasis, cfg: ReconConfig = ReconConfig(),
                init=None) -> ReconResult:
    problem = ReconProblem(datasets, op, basis, cfg)
    V0 = problem.initial_guess() if init is None else (init.V if isinstance(init, SpatialCoefficients) else init)
    return nonlinear_cg(problem, V0)
