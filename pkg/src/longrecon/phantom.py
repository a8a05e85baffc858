"""Analytic dynamic 2D phantom with respiratory motion and simulated coil maps.

Image arrays are indexed ``[x, y]`` with pixel coordinates measured from the
grid midpoint (``index - N // 2``). Respiratory motion acts along ``x``, which is
the readout direction of the zero-angle navigator spoke.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    intensity: float
    rotation: float = 0.0
    motion_gain: float = 0.0
    name: str = ""
    fat: bool = False
    outer: bool = False


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float]
    radius: float
    intensity_delta: float
    motion_gain: float = 1.0


@dataclass(frozen=True)
class Respiration:
    amplitude: float = 3.0
    period: float = 50.0
    drift: float = 0.0

    def displacement(self, t: float, phase_offset: float = 0.0) -> float:
        return (self.amplitude * math.sin(2.0 * math.pi * (t + phase_offset) / self.period)
                + self.drift * t)


@dataclass(frozen=True)
class SessionVariation:
    translation: tuple[float, float] = (0.0, 0.0)
    contour_scale: float = 1.0
    fat_intensity_factor: float = 1.0
    respiration_phase_offset: float = 0.0

    def __post_init__(self):
        if not 0.8 <= self.contour_scale <= 1.2:
            raise ValueError(f"contour_scale must lie in [0.8, 1.2], got {self.contour_scale}")
        if self.fat_intensity_factor < 0:
            raise ValueError("fat_intensity_factor must be >= 0")


IDENTITY_VARIATION = SessionVariation()


@dataclass(frozen=True)
class PhantomSpec:
    grid_size: int
    ellipses: tuple[Ellipse, ...]
    respiration: Respiration = field(default_factory=Respiration)
    lesion: Lesion | None = None
    seed: int = 0

    def __post_init__(self):
        for e in self.ellipses:
            if not 0.0 <= e.intensity <= 1.0:
                raise ValueError(f"ellipse {e.name!r} intensity {e.intensity} outside [0, 1]")
        if self.lesion is not None and not -1.0 <= self.lesion.intensity_delta <= 0.2:
            raise ValueError("lesion intensity_delta must keep the composite in [0, 1.2]")

    def ellipse(self, name: str) -> Ellipse:
        for e in self.ellipses:
            if e.name == name:
                return e
        raise KeyError(name)


def default_phantom(grid_size: int = 64, lesion: bool = False, *, amplitude: float = 3.0,
                    period: float = 50.0, drift: float = 0.0, seed: int = 0) -> PhantomSpec:
    """Abdomen-like phantom scaled to ``grid_size`` (designed at 64 px)."""
    s = grid_size / 64.0
    # x is superior-inferior (negative = towards the head); y is left-right.
    raw = [
        ("body_fat", (0.0, 0.0), (21.5, 25.0), 0.0, 0.35, 0.0, True, True),
        ("body", (0.0, 0.0), (19.0, 22.5), 0.0, 0.45, 0.0, False, True),
        ("lung_base", (-17.0, -6.0), (5.0, 13.0), 0.0, 0.05, 1.0, False, False),
        ("liver", (-4.0, -7.0), (11.0, 13.0), 0.25, 0.70, 1.0, False, False),
        ("stomach", (-6.0, 10.0), (6.0, 6.5), -0.3, 0.25, 0.7, False, False),
        ("kidney_l", (7.0, -9.0), (5.0, 3.0), 0.2, 0.85, 0.4, False, False),
        ("kidney_r", (7.0, 10.0), (5.0, 3.0), -0.2, 0.85, 0.4, False, False),
        ("visceral_fat", (13.0, 0.0), (3.5, 8.0), 0.0, 0.30, 0.2, True, False),
        ("spine", (2.0, 0.0), (4.0, 3.0), 0.0, 0.55, 0.0, False, False),
        ("aorta", (-2.0, 2.5), (1.6, 1.6), 0.0, 1.00, 0.0, False, False),
    ]
    ellipses = tuple(
        Ellipse(center=(c[0] * s, c[1] * s), axes=(a[0] * s, a[1] * s), rotation=rot,
                intensity=inten, motion_gain=gain, name=name, fat=fat, outer=outer)
        for name, c, a, rot, inten, gain, fat, outer in raw)
    les = Lesion(center=(-3.0 * s, -9.0 * s), radius=2.5 * s, intensity_delta=0.2) if lesion else None
    return PhantomSpec(grid_size, ellipses, Respiration(amplitude * s, period, drift * s), les, seed)


def perturbed_phantom(base: PhantomSpec, seed: int, geometry_jitter: float = 0.15,
                      intensity_jitter: float = 0.15, motion_jitter: float = 0.3) -> PhantomSpec:
    """A different "subject" with similar anatomy, for pseudo-longitudinal controls."""
    rng = np.random.default_rng(seed)
    ellipses = []
    for e in base.ellipses:
        if e.outer:
            ellipses.append(e)
            continue
        scale = 1.0 + geometry_jitter * rng.uniform(-1, 1, 2)
        shift = geometry_jitter * 10.0 * rng.uniform(-1, 1, 2) * base.grid_size / 64.0
        inten = float(np.clip(e.intensity * (1.0 + intensity_jitter * rng.uniform(-1, 1)), 0.0, 1.0))
        gain = e.motion_gain * (1.0 + motion_jitter * rng.uniform(-1, 1))
        ellipses.append(replace(
            e, center=(e.center[0] + shift[0], e.center[1] + shift[1]),
            axes=(e.axes[0] * scale[0], e.axes[1] * scale[1]),
            rotation=e.rotation + 0.3 * rng.uniform(-1, 1), intensity=inten, motion_gain=gain))
    resp = replace(base.respiration,
                   amplitude=base.respiration.amplitude * (1.0 + motion_jitter * rng.uniform(-1, 1)),
                   period=base.respiration.period * (1.0 + 0.3 * rng.uniform(-1, 1)))
    return replace(base, ellipses=tuple(ellipses), respiration=resp, seed=seed)


def pixel_coordinates(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(n, dtype=np.float64) - n // 2
    return np.meshgrid(c, c, indexing="ij")


def _half_extent(axes, rotation):
    a, b = axes
    ca, sa = math.cos(rotation), math.sin(rotation)
    return math.hypot(a * ca, b * sa), math.hypot(a * sa, b * ca)


def _check_fov(center, axes, rotation, n, label):
    hx, hy = _half_extent(axes, rotation)
    lo, hi = -(n // 2), n - n // 2 - 1
    if center[0] - hx < lo or center[0] + hx > hi or center[1] - hy < lo or center[1] + hy > hi:
        raise ValueError(f"{label} leaves the field of view (center={center}, axes={axes})")


def _inside(x, y, center, axes, rotation):
    dx, dy = x - center[0], y - center[1]
    c, s = math.cos(rotation), math.sin(rotation)
    u = (c * dx + s * dy) / axes[0]
    v = (-s * dx + c * dy) / axes[1]
    return u * u + v * v <= 1.0


def render_frame(spec: PhantomSpec, variation: SessionVariation = IDENTITY_VARIATION,
                 t: float = 0.0) -> np.ndarray:
    """Rasterize the phantom at frame time ``t`` (frames; may be fractional).

    Ellipses are painted in order, each overwriting earlier ones inside its
    support. The lesion is added on top of the composite.
    """
    if t < 0:
        raise ValueError("frame time must be >= 0")
    n = spec.grid_size
    x, y = pixel_coordinates(n)
    s = spec.respiration.displacement(t, variation.respiration_phase_offset)
    tx, ty = variation.translation
    img = np.zeros((n, n))
    for e in spec.ellipses:
        inten = e.intensity * (variation.fat_intensity_factor if e.fat else 1.0)
        if e.fat and variation.fat_intensity_factor == 0.0:
            continue
        axes = e.axes
        if e.outer:
            axes = (axes[0] * variation.contour_scale, axes[1] * variation.contour_scale)
        center = (e.center[0] + e.motion_gain * s + tx, e.center[1] + ty)
        _check_fov(center, axes, e.rotation, n, f"ellipse {e.name!r}")
        img[_inside(x, y, center, axes, e.rotation)] = inten
    if spec.lesion is not None:
        les = spec.lesion
        center = (les.center[0] + les.motion_gain * s + tx, les.center[1] + ty)
        _check_fov(center, (les.radius, les.radius), 0.0, n, "lesion")
        img[_inside(x, y, center, (les.radius, les.radius), 0.0)] += les.intensity_delta
    return img


def region_mask(spec: PhantomSpec, variation: SessionVariation, t: float, name: str) -> np.ndarray:
    """Pixels where the named ellipse is visible (not overwritten) at time ``t``.

    ``name`` may be an ellipse name, ``"fat"`` (all fat-tagged ellipses),
    ``"lesion"`` or ``"background"`` (outside every ellipse).
    """
    n = spec.grid_size
    x, y = pixel_coordinates(n)
    s = spec.respiration.displacement(t, variation.respiration_phase_offset)
    tx, ty = variation.translation
    owner = np.full((n, n), -1)
    for i, e in enumerate(spec.ellipses):
        axes = e.axes
        if e.outer:
            axes = (axes[0] * variation.contour_scale, axes[1] * variation.contour_scale)
        center = (e.center[0] + e.motion_gain * s + tx, e.center[1] + ty)
        owner[_inside(x, y, center, axes, e.rotation)] = i
    if name == "background":
        return owner < 0
    if name == "lesion":
        les = spec.lesion
        if les is None:
            return np.zeros((n, n), dtype=bool)
        center = (les.center[0] + les.motion_gain * s + tx, les.center[1] + ty)
        return _inside(x, y, center, (les.radius, les.radius), 0.0)
    if name == "fat":
        fat_ids = [i for i, e in enumerate(spec.ellipses) if e.fat]
        return np.isin(owner, fat_ids)
    ids = [i for i, e in enumerate(spec.ellipses) if e.name == name]
    if not ids:
        raise KeyError(name)
    return np.isin(owner, ids)


@dataclass(frozen=True)
class CoilMaps:
    maps: np.ndarray  # (C, N, N) complex

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def grid_size(self) -> int:
        return self.maps.shape[-1]


def simulate_coil_maps(n_coils: int, n: int, seed: int = 0) -> CoilMaps:
    """Smooth coil profiles placed evenly around the FOV boundary.

    Each raw map is a Gaussian centred on the boundary times a low-order complex
    polynomial; the set is normalized so the root-sum-of-squares equals 1
    inside the disc of radius ``0.45 * n`` (and everywhere the raw RSS is
    nonzero, which is the whole grid).
    """
    if n_coils < 1:
        raise ValueError("need at least one coil")
    rng = np.random.default_rng(seed)
    x, y = pixel_coordinates(n)
    xn, yn = x / n, y / n
    maps = np.empty((n_coils, n, n), dtype=np.complex128)
    for c in range(n_coils):
        phi = 2.0 * math.pi * c / n_coils + rng.uniform(-0.1, 0.1)
        cx, cy = 0.5 * math.cos(phi), 0.5 * math.sin(phi)
        width = 0.45 + 0.1 * rng.uniform()
        g = np.exp(-((xn - cx) ** 2 + (yn - cy) ** 2) / (2.0 * width ** 2))
        coef = rng.normal(size=(3, 2)) * np.array([1.0, 0.3, 0.3])[:, None]
        poly = (1.0 + 0.0j + (coef[1, 0] + 1j * coef[1, 1]) * xn
                + (coef[2, 0] + 1j * coef[2, 1]) * yn)
        phase = np.exp(1j * (rng.uniform(0, 2 * math.pi) + 2.0 * (cx * xn + cy * yn)))
        maps[c] = g * poly * phase
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps /= rss
    return CoilMaps(maps)
