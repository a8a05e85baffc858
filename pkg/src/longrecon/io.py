"""Artifact I/O: the ``LRA1`` binary array format and YAML sidecars.

``LRA1`` layout (all little-endian)::

    bytes 0-3   magic b"LRA1"
    uint32      rank
    uint32      dtype code (0=f32, 1=f64, 2=c64, 3=c128)
    uint64[rank] dims
    data        row-major (C order)
"""

from __future__ import annotations

import dataclasses
import enum
import struct
from pathlib import Path

import numpy as np
import yaml

MAGIC = b"LRA1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<c8"), 3: np.dtype("<c16")}
CODE_FOR_DTYPE = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def write_array(path, arr) -> Path:
    path = Path(path)
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        dt = np.dtype("<c8") if arr.dtype == np.complex64 else np.dtype("<c16")
    else:
        dt = np.dtype("<f4") if arr.dtype == np.float32 else np.dtype("<f8")
    arr = arr.astype(dt, order="C", copy=False)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", arr.ndim, CODE_FOR_DTYPE[dt]))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    head = fh.read(8)
    if len(head) != 8:
        raise FormatError(f"{path}: truncated header")
    rank, code = struct.unpack("<II", head)
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}Q", raw)
    return {"rank": rank, "dtype": DTYPE_CODES[code].name, "dtype_code": code, "dims": list(dims),
            "data_offset": 12 + 8 * rank}


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        hdr = _read_header(fh, path)
        dt = DTYPE_CODES[hdr["dtype_code"]]
        count = int(np.prod(hdr["dims"])) if hdr["dims"] else 1
        data = np.frombuffer(fh.read(count * dt.itemsize), dtype=dt)
    if data.size != count:
        raise FormatError(f"{path}: truncated data ({data.size} of {count} values)")
    return data.reshape(hdr["dims"]).astype(dt.newbyteorder("="))


def to_plain(obj):
    """Convert dataclasses, enums and numpy values into YAML-safe builtins."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_sidecar(path, meta: dict) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(to_plain(meta), sort_keys=False))
    return path


def read_sidecar(path) -> dict:
    return yaml.safe_load(Path(path).read_text())


# --- typed artifacts ---------------------------------------------------------------------

def save_trajectory(stem, traj, plans=None) -> None:
    stem = Path(stem)
    table = np.stack([traj.global_index.astype(np.float64), traj.angle,
                      traj.is_navigator.astype(np.float64)], axis=1)
    write_array(stem.with_suffix(".lra"), table)
    meta = {"kind": "trajectory", "columns": ["global_index", "angle_rad", "is_navigator"],
            "entries": len(traj), "imaging_spokes": int((~traj.is_navigator).sum()),
            "navigators": int(traj.is_navigator.sum()), "samples_per_spoke": traj.samples_per_spoke,
            "k_max": traj.k_max}
    if plans is not None:
        meta["sessions"] = [{"session_id": p.session_id, "imaging_spoke_count": p.imaging_spoke_count,
                             "global_index_range": list(p.global_index_range),
                             "policy": p.policy.value} for p in plans]
    write_sidecar(stem.with_suffix(".yaml"), meta)


def save_dataset(stem, ds) -> None:
    stem = Path(stem)
    write_array(stem.with_suffix(".kspace.lra"), ds.kspace)
    write_array(stem.with_suffix(".nav.lra"), ds.navigators)
    t = ds.applied_transform
    write_sidecar(stem.with_suffix(".yaml"), {
        "kind": "session_dataset",
        "dims": {"frames": ds.n_frames, "spokes_per_frame": 2,
                 "samples_per_spoke": ds.samples_per_spoke, "coils": ds.n_coils},
        "dtype": "c128",
        "plan": {"session_id": ds.plan.session_id, "imaging_spoke_count": ds.plan.imaging_spoke_count,
                 "global_index_range": list(ds.plan.global_index_range),
                 "policy": ds.plan.policy.value},
        "seed": ds.seed, "noise_sigma": ds.noise_sigma,
        "applied_transform": None if t is None else to_plain(t)})


def save_basis(stem, basis) -> None:
    stem = Path(stem)
    write_array(stem.with_suffix(".U.lra"), basis.U_K)
    write_array(stem.with_suffix(".sv.lra"), basis.singular_values)
    write_sidecar(stem.with_suffix(".yaml"), {"kind": "temporal_basis", "K": basis.K,
                                              "frames": basis.n_frames,
                                              "session_boundaries": list(basis.session_boundaries)})


def load_basis(stem):
    from .basis import TemporalBasis
    stem = Path(stem)
    meta = read_sidecar(stem.with_suffix(".yaml"))
    U = read_array(stem.with_suffix(".U.lra"))
    sv = read_array(stem.with_suffix(".sv.lra"))
    return TemporalBasis(U, int(meta["K"]), sv, tuple(meta["session_boundaries"]))
