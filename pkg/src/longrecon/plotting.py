"""Figure output: 8-bit PNG frames, x-t profiles and matplotlib frame grids.

Images are stored with array axis 0 (x, the motion direction) as rows.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

WINDOW_PERCENTILE = 99.5


def _frames(series) -> np.ndarray:
    frames = getattr(series, "frames", series)
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError(f"expected (T, N, N) frames, got shape {frames.shape}")
    return np.abs(frames)


def display_window(reference) -> float:
    """Upper display bound: the 99.5th percentile of the reference magnitude."""
    return float(np.percentile(np.abs(np.asarray(reference)), WINDOW_PERCENTILE))


def to_uint8(img, vmax: float) -> np.ndarray:
    if vmax <= 0 or not np.isfinite(vmax):
        return np.zeros(np.shape(img), dtype=np.uint8)
    return np.round(np.clip(np.abs(img) / vmax, 0.0, 1.0) * 255).astype(np.uint8)


def xt_profile(series, row: int | None = None) -> np.ndarray:
    """Magnitude along x at fixed y = ``row`` for every frame, shape (N, T)."""
    frames = _frames(series)
    n = frames.shape[2]
    row = n // 2 if row is None else int(row)
    if not 0 <= row < n:
        raise ValueError(f"row {row} outside [0, {n})")
    return frames[:, :, row].T


def emit_frames(series, path, stride: int = 1, reference=None, row: int | None = None,
                prefix: str = "frame") -> list[Path]:
    """Write every ``stride``-th magnitude frame as an 8-bit grayscale PNG plus one x-t profile.

    The window is [0, p99.5] of ``reference`` (the series itself when omitted).
    Returns the written paths, frames first and the profile last.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    frames = _frames(series)
    vmax = display_window(frames if reference is None else _frames(reference))
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    width = max(4, len(str(frames.shape[0] - 1)))
    written = []
    for t in range(0, frames.shape[0], stride):
        p = out / f"{prefix}_{t:0{width}d}.png"
        Image.fromarray(to_uint8(frames[t], vmax), mode="L").save(p)
        written.append(p)
    p = out / f"{prefix}_xt.png"
    Image.fromarray(to_uint8(xt_profile(frames, row), vmax), mode="L").save(p)
    written.append(p)
    return written


def frame_grid(panels: dict, path, frame_indices, vmax: float | None = None, title: str = "") -> Path:
    """Grid figure: one row per labelled series, one column per frame index."""
    labels = list(panels)
    idx = list(frame_indices)
    if not labels or not idx:
        raise ValueError("frame_grid needs at least one series and one frame")
    mags = {k: _frames(v) for k, v in panels.items()}
    if vmax is None:
        vmax = display_window(mags[labels[0]])
    fig, axes = plt.subplots(len(labels), len(idx), figsize=(1.6 * len(idx), 1.7 * len(labels)),
                             squeeze=False)
    for r, lab in enumerate(labels):
        for c, t in enumerate(idx):
            ax = axes[r, c]
            ax.imshow(mags[lab][t], cmap="gray", vmin=0, vmax=vmax or 1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"t={t}", fontsize=8)
            if c == 0:
                ax.set_ylabel(lab, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def xt_figure(panels: dict, path, row: int | None = None, vmax: float | None = None,
              title: str = "") -> Path:
    """Stacked x-t profiles, one panel per labelled series."""
    labels = list(panels)
    profiles = {k: xt_profile(v, row) for k, v in panels.items()}
    if vmax is None:
        vmax = display_window(profiles[labels[0]])
    fig, axes = plt.subplots(len(labels), 1, figsize=(7, 1.5 * len(labels)), squeeze=False)
    for ax, lab in zip(axes[:, 0], labels):
        ax.imshow(profiles[lab], cmap="gray", vmin=0, vmax=vmax or 1.0, aspect="auto")
        ax.set_ylabel(lab, fontsize=8)
        ax.set_yticks([])
    axes[-1, 0].set_xlabel("frame")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def grid_indices(n_frames: int, count: int = 6) -> list[int]:
    count = max(1, min(count, n_frames))
    return sorted({int(i) for i in np.linspace(0, n_frames - 1, count)})


def expected_frame_count(n_frames: int, stride: int) -> int:
    return math.ceil(n_frames / stride)
