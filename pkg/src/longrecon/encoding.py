"""Multicoil radial encoding: exact non-uniform DFT, density weights, acquisition.

The forward model for one spoke of angle ``theta`` and readout positions ``k``
(cycles/pixel) is::

    y[c, k] = sum_r coil[c, r] * image[r] * exp(-2j*pi*k*(x*cos(theta) + y*sin(theta)))

It is evaluated exactly. Because the exponential factorizes over the two
pixel axes, each spoke costs one small matrix product per coil instead of a
dense ``samples x pixels`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sp_fft

from .phantom import CoilMaps, PhantomSpec, SessionVariation, render_frame
from .trajectory import SessionSpokePlan, Trajectory


def density_weights(samples_per_spoke: int, k_max: float = 0.5) -> np.ndarray:
    """Radial ramp ``|k|`` scaled to max 1; the centre sample gets half the smallest nonzero weight."""
    if samples_per_spoke < 2:
        raise ValueError("samples_per_spoke must be >= 2")
    k = np.linspace(-k_max, k_max, samples_per_spoke)
    w = 0.5 * (np.abs(k) + np.abs(k[::-1]))
    w[np.isclose(k, 0.0, atol=1e-12 * k_max)] = 0.0
    nonzero = w[w > 0]
    w[w == 0] = 0.5 * nonzero.min()
    return w / w.max()


def _axis_exponentials(angles, kpos, n, sign=-1.0):
    """Per-axis phase factors, each of shape ``(spokes, samples, n)``."""
    c = np.arange(n, dtype=np.float64) - n // 2
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    kx = kpos[None, :] * np.cos(angles)[:, None]
    ky = kpos[None, :] * np.sin(angles)[:, None]
    ex = np.exp(sign * 2j * np.pi * kx[..., None] * c)
    ey = np.exp(sign * 2j * np.pi * ky[..., None] * c)
    return ex, ey


def nudft_spokes(image, coil_maps: np.ndarray, angles, kpos) -> np.ndarray:
    """Exact multicoil samples of ``image`` on the given spokes, shape ``(spokes, samples, coils)``."""
    n = image.shape[-1]
    if image.shape != (n, n) or coil_maps.shape[-2:] != (n, n):
        raise ValueError(f"image {image.shape} does not match coil maps {coil_maps.shape}")
    ex, ey = _axis_exponentials(angles, kpos, n)
    nsp, ns = ex.shape[:2]
    nc = coil_maps.shape[0]
    f = (coil_maps * image).reshape(nc * n, n)
    g = (f @ ey.reshape(nsp * ns, n).T).reshape(nc, n, nsp, ns)
    out = np.einsum("asx,cxas->asc", ex, g, optimize=True)
    return out


def nudft_spokes_adjoint(samples, coil_maps: np.ndarray, angles, kpos) -> np.ndarray:
    """Exact conjugate transpose of :func:`nudft_spokes`."""
    n = coil_maps.shape[-1]
    ex, ey = _axis_exponentials(angles, kpos, n, sign=1.0)
    nsp, ns = ex.shape[:2]
    nc = coil_maps.shape[0]
    if samples.shape != (nsp, ns, nc):
        raise ValueError(f"samples shape {samples.shape} != {(nsp, ns, nc)}")
    # h[c, x, a, s] = ex[a, s, x] * samples[a, s, c]
    h = np.einsum("asx,asc->cxas", ex, samples, optimize=True).reshape(nc * n, nsp * ns)
    img_c = (h @ ey.reshape(nsp * ns, n)).reshape(nc, n, n)
    return np.sum(np.conj(coil_maps) * img_c, axis=0)


@dataclass(frozen=True)
class EncodingOperator:
    """Encoding ``E`` for a dynamic series: frame ``t`` is sampled by ``frame_angles[t]``."""

    coil_maps: CoilMaps
    frame_angles: np.ndarray  # (T, spokes_per_frame)
    samples_per_spoke: int
    k_max: float = 0.5
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", density_weights(self.samples_per_spoke, self.k_max))
        object.__setattr__(self, "frame_angles", np.atleast_2d(np.asarray(self.frame_angles, float)))

    @classmethod
    def for_datasets(cls, coil_maps: CoilMaps, datasets) -> "EncodingOperator":
        angles = np.concatenate([d.trajectory.frame_angles() for d in datasets], axis=0)
        return cls(coil_maps, angles, datasets[0].trajectory.samples_per_spoke,
                   datasets[0].trajectory.k_max)

    @property
    def kpos(self) -> np.ndarray:
        return np.linspace(-self.k_max, self.k_max, self.samples_per_spoke)

    @property
    def n_frames(self) -> int:
        return self.frame_angles.shape[0]

    @property
    def grid_size(self) -> int:
        return self.coil_maps.grid_size

    @property
    def n_coils(self) -> int:
        return self.coil_maps.n_coils

    def _check_frame(self, frame):
        if not 0 <= frame < self.n_frames:
            raise IndexError(f"frame {frame} outside [0, {self.n_frames})")

    def forward(self, image, frame: int) -> np.ndarray:
        self._check_frame(frame)
        return nudft_spokes(image, self.coil_maps.maps, self.frame_angles[frame], self.kpos)

    def adjoint(self, samples, frame: int) -> np.ndarray:
        self._check_frame(frame)
        return nudft_spokes_adjoint(samples, self.coil_maps.maps, self.frame_angles[frame], self.kpos)

    def forward_series(self, images) -> np.ndarray:
        """``(T, N, N)`` images to ``(T, spokes, samples, coils)`` samples."""
        return np.stack([self.forward(images[t], t) for t in range(self.n_frames)])

    def adjoint_series(self, samples) -> np.ndarray:
        return np.stack([self.adjoint(samples[t], t) for t in range(self.n_frames)])

    def sample_positions(self) -> tuple[np.ndarray, np.ndarray]:
        """k-space coordinates of every sample, each shaped ``(T, spokes, samples)``."""
        k = self.kpos
        a = self.frame_angles[..., None]
        return k * np.cos(a), k * np.sin(a)


# --- subspace-projected operators -------------------------------------------------

try:  # optional fast path
    import finufft as _finufft
except ImportError:  # pragma: no cover - depends on the environment
    _finufft = None

BACKENDS = ("auto", "exact", "finufft")


def _resolve_backend(backend):
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if backend == "auto":
        return "finufft" if _finufft is not None else "exact"
    if backend == "finufft" and _finufft is None:
        raise ImportError("finufft backend requested but the package is not installed")
    return backend


def _chunks(total, size):
    for start in range(0, total, size):
        yield slice(start, min(start + size, total))


def adjoint_sum(kx, ky, z, n, backend="auto"):
    """``out[q, x, y] = sum_j z[j, q] exp(+2j*pi*(kx[j]*x + ky[j]*y))`` on centred ``n x n`` grid."""
    backend = _resolve_backend(backend)
    kx, ky = np.ravel(kx), np.ravel(ky)
    z = np.asarray(z, dtype=np.complex128).reshape(len(kx), -1)
    q = z.shape[1]
    if backend == "finufft":
        out = _finufft.nufft2d1(2 * np.pi * kx, 2 * np.pi * ky, np.ascontiguousarray(z.T), (n, n),
                                eps=1e-13, isign=1, modeord=0, nthreads=1)
        return out.reshape(q, n, n)
    c = np.arange(n, dtype=np.float64) - n // 2
    acc = np.zeros((n, n * q), dtype=np.complex128)
    for sl in _chunks(len(kx), max(1, 2 ** 22 // (n * q))):
        a = np.exp(2j * np.pi * kx[sl, None] * c)
        b = np.exp(2j * np.pi * ky[sl, None] * c)
        acc += a.T @ (b[:, :, None] * z[sl, None, :]).reshape(len(a), n * q)
    return acc.reshape(n, n, q).transpose(2, 0, 1)


def subspace_adjoint(op: EncodingOperator, kspace: np.ndarray, basis_u: np.ndarray,
                     weighted: bool = True, backend: str = "auto") -> np.ndarray:
    """``sum_t U[t, k] E_t^H (W y_t)`` for every basis column: shape ``(K, N, N)``."""
    n = op.grid_size
    T, nsp, ns, nc = kspace.shape
    K = basis_u.shape[1]
    if T != op.n_frames or basis_u.shape[0] != T:
        raise ValueError("frame count mismatch between data, operator and basis")
    kx, ky = op.sample_positions()
    w = op.weights if weighted else np.ones(ns)
    z = (kspace * w[None, None, :, None])[..., None] * basis_u[:, None, None, None, :]
    img = adjoint_sum(kx, ky, z.reshape(T * nsp * ns, nc * K), n, backend)
    img = img.reshape(nc, K, n, n)
    return np.einsum("cxy,ckxy->kxy", np.conj(op.coil_maps.maps), img, optimize=True)


class ToeplitzNormal:
    """Exact ``A^H W A`` for the subspace-constrained encoding, via 2N-periodic embedding.

    With ``A(V) = E(V U^T)``, the normal operator maps coefficient maps
    ``V[k]`` to ``sum_k' sum_c conj(S_c) * (P[k, k'] conv (S_c V[k']))``, where
    the point-spread kernels ``P[k, k']`` collect the sample weights
    ``w * U[t, k] * U[t, k']``. Readouts are symmetric about the k-space
    centre, so every kernel is real and even.
    """

    def __init__(self, op: EncodingOperator, basis_u: np.ndarray, backend: str = "auto"):
        self.op = op
        n = op.grid_size
        self.n = n
        T, K = basis_u.shape
        if T != op.n_frames:
            raise ValueError("basis frame count does not match the operator")
        self.K = K
        kx, ky = op.sample_positions()
        nsp, ns = kx.shape[1:]
        pairs = [(i, j) for i in range(K) for j in range(i, K)]
        uu = np.stack([basis_u[:, i] * basis_u[:, j] for i, j in pairs], axis=1)  # (T, P)
        wz = op.weights[None, None, :, None] * uu[:, None, None, :]
        wz = np.broadcast_to(wz, (T, nsp, ns, len(pairs))).reshape(-1, len(pairs))
        if _resolve_backend(backend) == "finufft":
            kern = adjoint_sum(kx, ky, wz, 2 * n, "finufft").real.transpose(1, 2, 0)
        else:
            kern = self._cosine_kernels(kx.ravel(), ky.ravel(), wz, n)
        # kern[dx + n, dy + n] holds P(dx, dy); reorder to circulant layout
        kern = np.fft.ifftshift(kern, axes=(0, 1))
        kf = np.fft.fft2(kern, axes=(0, 1)).real  # real & even kernel -> real spectrum
        # pixel-major (2n, 2n, K, K) so the kernel mixing is one batched matmul
        self.kernel_hat = np.empty((2 * n, 2 * n, K, K))
        for p, (i, j) in enumerate(pairs):
            self.kernel_hat[..., i, j] = kf[..., p]
            self.kernel_hat[..., j, i] = kf[..., p]

    @staticmethod
    def _cosine_kernels(kx, ky, wz, n):
        d = np.arange(-n, n, dtype=np.float64)
        acc = np.zeros((2 * n, 2 * n, wz.shape[1]))
        for sl in _chunks(len(kx), 2048):
            ax = 2 * np.pi * kx[sl, None] * d
            ay = 2 * np.pi * ky[sl, None] * d
            m = ax.shape[0]
            acc += (np.cos(ax).T @ (np.cos(ay)[:, :, None] * wz[sl, None, :]).reshape(m, -1)
                    ).reshape(2 * n, 2 * n, -1)
            acc -= (np.sin(ax).T @ (np.sin(ay)[:, :, None] * wz[sl, None, :]).reshape(m, -1)
                    ).reshape(2 * n, 2 * n, -1)
        return acc

    def __call__(self, v: np.ndarray) -> np.ndarray:
        n = self.n
        maps = self.op.coil_maps.maps.transpose(1, 2, 0)[:, :, None, :]   # (n, n, 1, C)
        x = v.transpose(1, 2, 0)[..., None] * maps                       # (n, n, K, C)
        # zero-padded 2N x 2N FFT, skipping the all-zero half along the second axis
        xf = sp_fft.fft(sp_fft.fft(x, n=2 * n, axis=1), n=2 * n, axis=0)
        y = self.kernel_hat @ xf
        y = sp_fft.ifft(sp_fft.ifft(y, axis=0)[:n], axis=1)[:, :n]
        return np.einsum("xyc,xykc->kxy", np.conj(maps[:, :, 0]), y, optimize=True)


# --- acquisition -------------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """In-plane rigid motion: shift ``(dx, dy)`` in pixels, rotation ``dtheta`` in radians."""

    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    def inverse(self) -> "RigidTransform":
        return RigidTransform(-self.dx, -self.dy, -self.dtheta)

    @property
    def is_identity(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0 and self.dtheta == 0.0


@dataclass(frozen=True)
class SessionDataset:
    kspace: np.ndarray          # (T, 2, samples, coils)
    navigators: np.ndarray      # (T, samples, coils)
    trajectory: Trajectory
    plan: SessionSpokePlan
    noise_sigma: float = 0.0
    seed: int = 0
    applied_transform: RigidTransform | None = None

    def __post_init__(self):
        T = self.plan.n_frames
        if self.kspace.shape[0] != T or self.navigators.shape[0] != T:
            raise ValueError(f"expected {T} frames for plan, got {self.kspace.shape[0]}")
        if self.trajectory.n_frames != T:
            raise ValueError("trajectory frame count does not match plan")

    @property
    def n_frames(self) -> int:
        return self.kspace.shape[0]

    @property
    def samples_per_spoke(self) -> int:
        return self.kspace.shape[2]

    @property
    def n_coils(self) -> int:
        return self.kspace.shape[3]

    def select(self, plan: SessionSpokePlan) -> "SessionDataset":
        """Sub-dataset for a plan whose spokes lie inside this dataset's range."""
        lo, hi = self.plan.global_index_range
        if plan.start < lo or plan.stop > hi or (plan.start - lo) % 2:
            raise ValueError(f"plan range {plan.global_index_range} not inside {(lo, hi)}")
        f0 = (plan.start - lo) // 2
        sl = slice(f0, f0 + plan.n_frames)
        traj = plan.trajectory(self.samples_per_spoke)
        if self.applied_transform is not None and self.applied_transform.dtheta:
            traj = replace(traj, angle=traj.angle + self.applied_transform.dtheta)
        return replace(self, kspace=self.kspace[sl], navigators=self.navigators[sl],
                       trajectory=traj, plan=replace(plan, session_id=self.plan.session_id))


def acquire_session(spec: PhantomSpec, variation: SessionVariation, plan: SessionSpokePlan,
                    coil_maps: CoilMaps, samples_per_spoke: int, noise_sigma: float = 0.0,
                    seed: int = 0) -> SessionDataset:
    """Simulate the frames of ``plan``: two golden-angle spokes plus one zero-angle navigator each.

    Frame ``i`` of the plan is acquired at phantom time ``plan.first_frame + i``
    so that any plan is a consistent slice of the full session acquisition;
    noise is drawn per (seed, session, frame) for the same reason.
    """
    traj = plan.trajectory(samples_per_spoke)
    kpos = traj.kspace_positions()
    fa = traj.frame_angles()
    maps = coil_maps.maps
    T = plan.n_frames
    ksp = np.empty((T, 2, samples_per_spoke, coil_maps.n_coils), dtype=np.complex128)
    nav = np.empty((T, samples_per_spoke, coil_maps.n_coils), dtype=np.complex128)
    for i in range(T):
        frame = plan.first_frame + i
        img = render_frame(spec, variation, frame)
        s = nudft_spokes(img, maps, [fa[i, 0], fa[i, 1], 0.0], kpos)
        if noise_sigma > 0:
            rng = np.random.default_rng([seed, plan.session_id, frame])
            noise = rng.standard_normal((2,) + s.shape)
            s = s + noise_sigma * (noise[0] + 1j * noise[1]) / np.sqrt(2.0)
        ksp[i] = s[:2]
        nav[i] = s[2]
    return SessionDataset(ksp, nav, traj, plan, float(noise_sigma), int(seed))
