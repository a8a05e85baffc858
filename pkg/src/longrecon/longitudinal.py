"""Multi-session pipeline: averaging, rigid alignment in k-space, concatenation, splitting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .basis import DEFAULT_K, TemporalBasis, estimate_basis, navigator_projections
from .encoding import RigidTransform, SessionDataset, adjoint_sum, density_weights
from .phantom import CoilMaps
from .solver import DynamicSeries

log = logging.getLogger(__name__)

MAX_SHIFT_FRACTION = 0.25
MAX_ROTATION = math.pi / 8


def validate_transform(t: RigidTransform, n: int) -> None:
    if abs(t.dx) >= n * MAX_SHIFT_FRACTION or abs(t.dy) >= n * MAX_SHIFT_FRACTION:
        raise ValueError(f"shift ({t.dx:.2f}, {t.dy:.2f}) exceeds N/4 for N={n}")
    if abs(t.dtheta) >= MAX_ROTATION:
        raise ValueError(f"rotation {t.dtheta:.3f} rad exceeds pi/8")


def compose_inverse(t: RigidTransform) -> RigidTransform:
    """Inverse of ``x -> R(dtheta) x + d`` written in the same rotate-then-shift form."""
    c, s = math.cos(-t.dtheta), math.sin(-t.dtheta)
    # 0.0 - v keeps zero components as +0.0
    return RigidTransform(0.0 - (c * t.dx - s * t.dy), 0.0 - (s * t.dx + c * t.dy), 0.0 - t.dtheta)


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    peak: float
    warning: bool = False


def time_average(dataset: SessionDataset, coil_maps: CoilMaps, backend: str = "auto") -> np.ndarray:
    """Density-compensated adjoint of every imaging spoke of a session pooled into one frame.

    Scaled by the k-space area represented by a unit weight so that the
    result is on the image intensity scale.
    """
    traj = dataset.trajectory
    kpos = traj.kspace_positions()
    angles = traj.imaging_angles
    w = density_weights(traj.samples_per_spoke, traj.k_max)
    # pooled over many angles the centre disc covers a quarter of a ring's area
    w[traj.samples_per_spoke // 2] *= 0.5
    kx = (kpos[None, :] * np.cos(angles)[:, None]).ravel()
    ky = (kpos[None, :] * np.sin(angles)[:, None]).ravel()
    y = dataset.kspace.reshape(-1, dataset.samples_per_spoke, dataset.n_coils)  # (spokes, S, C)
    z = (y * w[None, :, None]).reshape(-1, dataset.n_coils)
    n = coil_maps.grid_size
    img_c = adjoint_sum(kx, ky, z, n, backend)
    img = np.sum(np.conj(coil_maps.maps) * img_c, axis=0)
    dk = 2.0 * traj.k_max / (traj.samples_per_spoke - 1)
    area_per_weight = math.pi * traj.k_max * dk / len(angles)
    return img * area_per_weight


def _parabolic(cm, c0, cp):
    den = cm - 2.0 * c0 + cp
    return 0.0 if den == 0 else 0.5 * (cm - cp) / den


def phase_correlation(reference: np.ndarray, moving: np.ndarray) -> tuple[float, float, float]:
    """Shift of ``moving`` relative to ``reference`` (pixels, axis order) and the peak height."""
    fa = np.fft.fft2(reference)
    fb = np.fft.fft2(moving)
    cross = fb * np.conj(fa)
    cross /= np.maximum(np.abs(cross), 1e-12 * np.abs(cross).max() + 1e-300)
    corr = np.fft.ifft2(cross).real
    n0, n1 = corr.shape
    i, j = np.unravel_index(np.argmax(corr), corr.shape)
    peak = float(corr[i, j])
    di = _parabolic(corr[(i - 1) % n0, j], corr[i, j], corr[(i + 1) % n0, j])
    dj = _parabolic(corr[i, (j - 1) % n1], corr[i, j], corr[i, (j + 1) % n1])
    si = (i + di + n0 / 2) % n0 - n0 / 2
    sj = (j + dj + n1 / 2) % n1 - n1 / 2
    return float(si), float(sj), peak


def _polar_spectrum(img, n_angles=360):
    n = img.shape[0]
    mag = np.abs(np.fft.fftshift(np.fft.fft2(img)))
    mag = np.log1p(mag)
    radii = np.linspace(2, n / 2 - 1, n // 2)
    phis = np.linspace(0, np.pi, n_angles, endpoint=False)
    rr, pp = np.meshgrid(radii, phis, indexing="ij")
    coords = np.array([n / 2 + rr * np.cos(pp), n / 2 + rr * np.sin(pp)])
    return ndimage.map_coordinates(mag, coords, order=1), phis


def estimate_rotation(reference: np.ndarray, moving: np.ndarray, n_angles: int = 360) -> float:
    """Rotation of ``moving`` relative to ``reference`` from polar magnitude spectra (radians)."""
    pa, phis = _polar_spectrum(np.abs(reference), n_angles)
    pb, _ = _polar_spectrum(np.abs(moving), n_angles)
    pa = pa - pa.mean(axis=1, keepdims=True)
    pb = pb - pb.mean(axis=1, keepdims=True)
    corr = np.fft.ifft(np.fft.fft(pb, axis=1) * np.conj(np.fft.fft(pa, axis=1)), axis=1).real.sum(axis=0)
    i = int(np.argmax(corr))
    di = _parabolic(corr[i - 1], corr[i], corr[(i + 1) % n_angles])
    shift = (i + di + n_angles / 2) % n_angles - n_angles / 2
    return float(shift * np.pi / n_angles)


def rotate_image(img: np.ndarray, dtheta: float) -> np.ndarray:
    """Rotate about the grid centre by ``dtheta`` in the (x, y) = (axis 0, axis 1) plane."""
    n = img.shape[0]
    c = n // 2
    ct, st = math.cos(dtheta), math.sin(dtheta)
    # output(r) = input(R^-1 (r - c) + c)
    mat = np.array([[ct, st], [-st, ct]])
    offset = np.array([c, c]) - mat @ np.array([c, c])
    if np.iscomplexobj(img):
        return (ndimage.affine_transform(img.real, mat, offset, order=3)
                + 1j * ndimage.affine_transform(img.imag, mat, offset, order=3))
    return ndimage.affine_transform(img, mat, offset, order=3)


def estimate_rigid(reference_avg: np.ndarray, moving_avg: np.ndarray, rotation: bool = False,
                   peak_threshold: float = 0.1) -> RegistrationResult:
    """Rigid transform taking the reference average onto the moving average.

    Translation comes from phase correlation of magnitude images with
    parabolic sub-pixel refinement. Rotation (optional) is estimated first
    from the polar-resampled magnitude spectra, then undone before the
    translation search. A correlation peak below ``peak_threshold``, or an
    estimate outside the sanity bounds, yields the identity with ``warning=True``.
    """
    if reference_avg.shape != moving_avg.shape:
        raise ValueError("images must have equal dimensions")
    ref, mov = np.abs(reference_avg), np.abs(moving_avg)
    dtheta = estimate_rotation(ref, mov) if rotation else 0.0
    if dtheta:
        mov_unrot = rotate_image(mov, -dtheta)
        ref_for_shift = ref
        si, sj, peak = phase_correlation(ref_for_shift, mov_unrot)
        # moving = shift(R ref) ; unrotated moving = R^-1 shift(R ref) = shift(R^-1 d)(ref)
        c, s = math.cos(dtheta), math.sin(dtheta)
        dx, dy = c * si - s * sj, s * si + c * sj
    else:
        dx, dy, peak = phase_correlation(ref, mov)
    if peak < peak_threshold:
        log.warning("registration peak %.3f below threshold %.3f; using identity", peak, peak_threshold)
        return RegistrationResult(RigidTransform(), peak, True)
    est = RigidTransform(dx, dy, dtheta)
    try:
        validate_transform(est, ref.shape[0])
    except ValueError as exc:
        log.warning("registration estimate rejected (%s); using identity", exc)
        return RegistrationResult(RigidTransform(), peak, True)
    return RegistrationResult(est, peak, False)


def apply_rigid_kspace(dataset: SessionDataset, t: RigidTransform) -> SessionDataset:
    """Move the imaged object by ``t`` directly in radial k-space.

    Rotation adds ``dtheta`` to every stored spoke angle (navigators
    included); translation multiplies each sample by
    ``exp(-2j*pi*k*(dx*cos(theta) + dy*sin(theta)))`` using the rotated angle.
    """
    if t.is_identity:
        return dataset
    traj = dataset.trajectory
    new_angle = traj.angle + t.dtheta
    traj = replace(traj, angle=new_angle, global_index=traj.global_index.copy(),
                   is_navigator=traj.is_navigator.copy())
    kpos = traj.kspace_positions()
    fa = traj.frame_angles()                                  # (T, 2)
    nav_angle = new_angle[traj.is_navigator]                  # (T,)
    ksp, nav = dataset.kspace, dataset.navigators
    if t.dx or t.dy:
        proj = t.dx * np.cos(fa) + t.dy * np.sin(fa)
        ksp = ksp * np.exp(-2j * np.pi * kpos[None, None, :] * proj[..., None])[..., None]
        proj_n = t.dx * np.cos(nav_angle) + t.dy * np.sin(nav_angle)
        nav = nav * np.exp(-2j * np.pi * kpos[None, :] * proj_n[:, None])[..., None]
    prev = dataset.applied_transform
    applied = t if prev is None else RigidTransform(prev.dx + t.dx, prev.dy + t.dy,
                                                     prev.dtheta + t.dtheta)
    return replace(dataset, kspace=ksp, navigators=nav, trajectory=traj, applied_transform=applied)


def align_sessions(datasets, coil_maps: CoilMaps, rotation: bool = False, reference: int = 0,
                   backend: str = "auto"):
    """Register every session's time average to the reference session and correct its k-space.

    Returns the aligned datasets and one :class:`RegistrationResult` per session.
    """
    avgs = [time_average(d, coil_maps, backend) for d in datasets]
    out, results = [], []
    for i, (d, avg) in enumerate(zip(datasets, avgs)):
        if i == reference:
            out.append(d)
            results.append(RegistrationResult(RigidTransform(), 1.0, False))
            continue
        res = estimate_rigid(avgs[reference], avg, rotation=rotation)
        out.append(apply_rigid_kspace(d, compose_inverse(res.transform)))
        results.append(res)
    return out, results


@dataclass(frozen=True)
class ExtendedDataset:
    sessions: tuple
    joint_basis: TemporalBasis
    frame_boundaries: tuple

    @property
    def n_frames(self) -> int:
        return sum(d.n_frames for d in self.sessions)


def concatenate(datasets, K: int = DEFAULT_K) -> ExtendedDataset:
    """Join sessions (in the given chronological order) into one extended series with a joint basis."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one session")
    proj = navigator_projections(datasets)
    basis = estimate_basis(proj, K)
    return ExtendedDataset(tuple(datasets), basis, proj.session_boundaries)


def split_series(series: DynamicSeries) -> list[DynamicSeries]:
    """Cut an extended series back into per-session series at its recorded boundaries."""
    bounds = series.session_boundaries
    if not bounds:
        raise ValueError("series has no session boundaries")
    edges = list(bounds) + [series.n_frames]
    return [DynamicSeries(series.frames[a:b], (0,)) for a, b in zip(edges[:-1], edges[1:])]
