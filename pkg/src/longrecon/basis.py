"""Temporal subspace estimation from zero-angle navigator projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles

DEFAULT_K = 6


@dataclass(frozen=True)
class NavigatorProjections:
    P: np.ndarray                 # (positions, T) real magnitude profiles
    session_boundaries: tuple     # frame offset where each session starts

    @property
    def n_frames(self) -> int:
        return self.P.shape[1]


@dataclass(frozen=True)
class TemporalBasis:
    U: np.ndarray                 # (T, r) right singular vectors, r = min(positions, T)
    K: int
    singular_values: np.ndarray
    session_boundaries: tuple = (0,)

    @property
    def U_K(self) -> np.ndarray:
        return self.U[:, :self.K]

    @property
    def n_frames(self) -> int:
        return self.U.shape[0]

    def truncate(self, K: int) -> "TemporalBasis":
        if not 1 <= K <= self.U.shape[1]:
            raise ValueError(f"K={K} outside [1, {self.U.shape[1]}]")
        return TemporalBasis(self.U, K, self.singular_values, self.session_boundaries)

    def restrict(self, start: int, stop: int) -> np.ndarray:
        """Rows of ``U_K`` for frames ``[start, stop)`` (not orthonormal in general)."""
        return self.U_K[start:stop]


def navigator_projections(datasets) -> NavigatorProjections:
    """Stack coil-combined navigator projections of all sessions column-wise, in order.

    Each zero-angle readout is inverse transformed (explicit DFT) onto
    ``samples_per_spoke`` pixel positions along the readout axis and coils
    are combined by root-sum-of-squares, which discards coil phase.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    ref = datasets[0]
    geom = (ref.samples_per_spoke, ref.n_coils, ref.trajectory.k_max)
    for d in datasets[1:]:
        if (d.samples_per_spoke, d.n_coils, d.trajectory.k_max) != geom:
            raise ValueError("sessions differ in samples per spoke, coil count or k_max")
    n = ref.samples_per_spoke
    kpos = ref.trajectory.kspace_positions()
    x = np.arange(n, dtype=np.float64) - n // 2
    F = np.exp(2j * np.pi * np.outer(x, kpos)) / len(kpos)
    cols, bounds, offset = [], [], 0
    for d in datasets:
        proj = np.einsum("xs,tsc->xtc", F, d.navigators, optimize=True)
        cols.append(np.sqrt(np.sum(np.abs(proj) ** 2, axis=-1)))
        bounds.append(offset)
        offset += d.n_frames
    return NavigatorProjections(np.concatenate(cols, axis=1), tuple(bounds))


def _fix_signs(U):
    idx = np.argmax(np.abs(U), axis=0)
    piv = U[idx, np.arange(U.shape[1])]
    phase = piv / np.abs(piv)
    return U / phase


def estimate_basis(proj: NavigatorProjections, K: int = DEFAULT_K, rtol: float = 1e-10) -> TemporalBasis:
    """Uncentered PCA: right singular vectors of the projection matrix.

    No mean is removed, so the first component carries the time-average
    (DC-like) signal. Each column is scaled so its largest-magnitude entry is
    real and positive.
    """
    P = np.asarray(proj.P)
    T = P.shape[1]
    if not 1 <= K <= T:
        raise ValueError(f"K must lie in [1, {T}], got {K}")
    _, s, vh = np.linalg.svd(P, full_matrices=False)
    rank = int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0
    if K > rank:
        raise ValueError(f"K={K} exceeds the numerical rank {rank} of the navigator matrix "
                         f"(singular values: {np.array2string(s[:K + 1], precision=3)})")
    U = _fix_signs(vh.conj().T)
    if np.isrealobj(P):
        U = U.real
    return TemporalBasis(U, K, s, proj.session_boundaries)


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between the column spaces of ``A`` and ``B``."""
    return np.sort(subspace_angles(A, B))
