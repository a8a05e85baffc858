import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from longrecon import io as lra
from longrecon.encoding import acquire_session
from longrecon.phantom import IDENTITY_VARIATION, default_phantom, simulate_coil_maps
from longrecon.trajectory import build_navi_trajectory, plan_sessions

DTYPES = [np.float32, np.float64, np.complex64, np.complex128]


def test_hand_built_file_decodes(tmp_path):
    # header and payload assembled byte by byte, independent of write_array
    values = [1.5, -2.0, 0.25, 8.0, 3.0, -1.0]
    blob = b"LRA1" + struct.pack("<II", 2, 1) + struct.pack("<QQ", 2, 3) + struct.pack("<6d", *values)
    p = tmp_path / "hand.lra"
    p.write_bytes(blob)
    out = lra.read_array(p)
    assert out.dtype == np.float64
    np.testing.assert_array_equal(out, np.array(values).reshape(2, 3))
    h = lra.read_header(p)
    assert h["rank"] == 2 and h["dims"] == [2, 3] and h["dtype"] == "float64"
    assert h["data_offset"] == 4 + 8 + 16


def test_written_bytes_match_layout(tmp_path):
    arr = np.array([[1 + 2j, 3 - 4j]], dtype=np.complex64)
    p = lra.write_array(tmp_path / "c.lra", arr)
    blob = p.read_bytes()
    assert blob[:4] == b"LRA1"
    assert struct.unpack("<II", blob[4:12]) == (2, 2)
    assert struct.unpack("<QQ", blob[12:28]) == (1, 2)
    assert struct.unpack("<4f", blob[28:]) == (1.0, 2.0, 3.0, -4.0)


@pytest.mark.parametrize("dtype", DTYPES)
def test_round_trip_each_dtype(tmp_path, dtype):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5))
    if np.issubdtype(dtype, np.complexfloating):
        arr = arr + 1j * rng.standard_normal((3, 4, 5))
    arr = arr.astype(dtype)
    p = lra.write_array(tmp_path / "a.lra", arr)
    out = lra.read_array(p)
    assert out.dtype == arr.dtype
    np.testing.assert_array_equal(out, arr)


@settings(max_examples=40, deadline=None)
@given(arrays(st.sampled_from(DTYPES), array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("h") / "x.lra"
    lra.write_array(p, arr)
    out = lra.read_array(p)
    assert out.shape == arr.shape and out.dtype == arr.dtype
    np.testing.assert_array_equal(out, arr)


def test_non_contiguous_and_integer_inputs(tmp_path):
    base = np.arange(24, dtype=np.float64).reshape(4, 6)
    view = base[:, ::2].T
    np.testing.assert_array_equal(lra.read_array(lra.write_array(tmp_path / "v.lra", view)), view)
    ints = np.arange(5)
    out = lra.read_array(lra.write_array(tmp_path / "i.lra", ints))
    assert out.dtype == np.float64
    np.testing.assert_array_equal(out, ints)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.lra"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(lra.FormatError, match="magic"):
        lra.read_array(p)


def test_unknown_dtype_code(tmp_path):
    p = tmp_path / "code.lra"
    p.write_bytes(b"LRA1" + struct.pack("<II", 1, 9) + struct.pack("<Q", 1) + bytes(8))
    with pytest.raises(lra.FormatError, match="dtype"):
        lra.read_header(p)


@pytest.mark.parametrize("cut", [2, 6, 14])
def test_truncated_header(tmp_path, cut):
    full = lra.write_array(tmp_path / "f.lra", np.zeros((2, 2))).read_bytes()
    p = tmp_path / "t.lra"
    p.write_bytes(full[:cut])
    with pytest.raises(lra.FormatError):
        lra.read_header(p)


def test_truncated_data(tmp_path):
    full = lra.write_array(tmp_path / "f.lra", np.ones((4, 4))).read_bytes()
    p = tmp_path / "t.lra"
    p.write_bytes(full[:-8])
    with pytest.raises(lra.FormatError, match="truncated data"):
        lra.read_array(p)


def test_sidecar_converts_numpy_and_tuples(tmp_path):
    meta = {"a": np.float64(1.5), "b": (1, 2), "c": np.arange(3), "d": {"e": np.int64(7)}}
    p = lra.write_sidecar(tmp_path / "m.yaml", meta)
    assert lra.read_sidecar(p) == {"a": 1.5, "b": [1, 2], "c": [0, 1, 2], "d": {"e": 7}}


def test_save_trajectory(tmp_path):
    plans = plan_sessions([6, 4])
    traj = build_navi_trajectory(10, 17, 0)
    lra.save_trajectory(tmp_path / "traj", traj, plans)
    table = lra.read_array(tmp_path / "traj.lra")
    assert table.shape == (15, 3)
    np.testing.assert_array_equal(table[:, 0], traj.global_index)
    np.testing.assert_array_equal(table[:, 1], traj.angle)
    meta = lra.read_sidecar(tmp_path / "traj.yaml")
    assert meta["imaging_spokes"] == 10 and meta["navigators"] == 5
    assert [s["imaging_spoke_count"] for s in meta["sessions"]] == [6, 4]


def test_save_dataset(tmp_path):
    maps = simulate_coil_maps(2, 16, 0)
    plan = plan_sessions([4])[0]
    ds = acquire_session(default_phantom(16), IDENTITY_VARIATION, plan, maps, 17, 0.1, 3)
    lra.save_dataset(tmp_path / "ds", ds)
    np.testing.assert_array_equal(lra.read_array(tmp_path / "ds.kspace.lra"), ds.kspace)
    np.testing.assert_array_equal(lra.read_array(tmp_path / "ds.nav.lra"), ds.navigators)
    meta = lra.read_sidecar(tmp_path / "ds.yaml")
    assert meta["dims"]["frames"] == 2 and meta["dims"]["coils"] == 2
    assert meta["seed"] == 3 and meta["noise_sigma"] == 0.1
    assert meta["applied_transform"] is None
