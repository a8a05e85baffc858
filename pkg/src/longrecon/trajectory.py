"""Golden-angle radial schedules with interleaved zero-angle navigators."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

GOLDEN_ANGLE = math.pi * 2.0 / (1.0 + math.sqrt(5.0))


class SpokePolicy(str, enum.Enum):
    NON_REPEATING = "non_repeating"
    REPEATING = "repeating"


def golden_angle(n: int) -> float:
    """Angle (radians, in [0, 2*pi)) of the ``n``-th golden-angle spoke."""
    if n < 0:
        raise ValueError(f"golden-angle index must be >= 0, got {n}")
    return math.fmod(n * GOLDEN_ANGLE, 2.0 * math.pi)


@dataclass(frozen=True)
class Trajectory:
    """Ordered spoke list: two imaging spokes followed by one navigator, repeated.

    ``global_index`` is the golden-angle counter for imaging spokes and ``-1``
    for navigators, which never consume a golden-angle index.
    """

    global_index: np.ndarray
    angle: np.ndarray
    is_navigator: np.ndarray
    samples_per_spoke: int
    k_max: float = 0.5

    def __post_init__(self):
        for name in ("global_index", "angle", "is_navigator"):
            getattr(self, name).setflags(write=False)

    def __len__(self):
        return len(self.angle)

    @property
    def imaging_angles(self) -> np.ndarray:
        return self.angle[~self.is_navigator]

    @property
    def imaging_indices(self) -> np.ndarray:
        return self.global_index[~self.is_navigator]

    @property
    def n_frames(self) -> int:
        return int(self.is_navigator.sum())

    def frame_angles(self) -> np.ndarray:
        """Imaging-spoke angles grouped per frame, shape ``(frames, 2)``."""
        return self.imaging_angles.reshape(-1, 2)

    def kspace_positions(self) -> np.ndarray:
        """Evenly spaced readout positions in ``[-k_max, k_max]`` (cycles/pixel)."""
        return np.linspace(-self.k_max, self.k_max, self.samples_per_spoke)


def build_navi_trajectory(imaging_spokes: int, samples_per_spoke: int,
                          start_global_index: int = 0) -> Trajectory:
    if imaging_spokes <= 0 or imaging_spokes % 2:
        raise ValueError(f"imaging_spokes must be positive and even, got {imaging_spokes}")
    if samples_per_spoke < 2:
        raise ValueError("samples_per_spoke must be >= 2")
    if start_global_index < 0:
        raise ValueError("start_global_index must be >= 0")

    n_frames = imaging_spokes // 2
    gidx = np.full((n_frames, 3), -1, dtype=np.int64)
    gidx[:, :2] = start_global_index + np.arange(imaging_spokes).reshape(n_frames, 2)
    gidx = gidx.ravel()
    nav = gidx < 0
    angle = np.array([0.0 if g < 0 else golden_angle(int(g)) for g in gidx])
    return Trajectory(gidx, angle, nav, int(samples_per_spoke))


@dataclass(frozen=True)
class SessionSpokePlan:
    session_id: int
    imaging_spoke_count: int
    start: int
    stop: int
    policy: SpokePolicy

    @property
    def global_index_range(self) -> tuple[int, int]:
        return (self.start, self.stop)

    @property
    def n_frames(self) -> int:
        return self.imaging_spoke_count // 2

    @property
    def first_frame(self) -> int:
        """Frame offset of this plan inside the session's full acquisition."""
        return self.start // 2

    def trajectory(self, samples_per_spoke: int) -> Trajectory:
        return build_navi_trajectory(self.imaging_spoke_count, samples_per_spoke, self.start)


def plan_sessions(counts, policy=SpokePolicy.NON_REPEATING) -> list[SessionSpokePlan]:
    """Assign golden-angle index ranges to each session.

    Non-repeating plans take consecutive disjoint sections of the golden-angle
    sequence; repeating plans all start from index 0.
    """
    counts = [int(c) for c in counts]
    if not counts:
        raise ValueError("at least one session spoke count is required")
    for c in counts:
        if c <= 0 or c % 2:
            raise ValueError(f"spoke counts must be positive and even, got {c}")
    policy = SpokePolicy(policy)

    plans = []
    offset = 0
    for sid, c in enumerate(counts):
        start = offset if policy is SpokePolicy.NON_REPEATING else 0
        plans.append(SessionSpokePlan(sid, c, start, start + c, policy))
        offset += c
    return plans
