from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from longrecon.basis import (DEFAULT_K, NavigatorProjections, estimate_basis, navigator_projections,
                             principal_angles)
from longrecon.encoding import acquire_session
from longrecon.io import load_basis, save_basis
from longrecon.phantom import IDENTITY_VARIATION, default_phantom, simulate_coil_maps
from longrecon.trajectory import plan_sessions


@pytest.fixture(scope="module")
def maps():
    return simulate_coil_maps(3, 16, 0)


@pytest.fixture(scope="module")
def three_sessions(maps):
    spec = default_phantom(16)
    return [acquire_session(spec, IDENTITY_VARIATION, p, maps, 17, 0.01, 0)
            for p in plan_sessions([500, 300, 200])]


def test_default_k():
    assert DEFAULT_K == 6


def test_single_session_columns(three_sessions):
    P = navigator_projections(three_sessions[:1])
    assert P.P.shape == (17, 250)
    assert P.session_boundaries == (0,)


def test_concatenated_boundaries(three_sessions):
    P = navigator_projections(three_sessions)
    assert P.P.shape[1] == 500
    assert P.session_boundaries == (0, 250, 400)
    solo = [navigator_projections([d]).P for d in three_sessions]
    np.testing.assert_array_equal(P.P, np.concatenate(solo, axis=1))


def test_static_noiseless_columns_identical(maps):
    spec = default_phantom(16, amplitude=0.0)
    ds = acquire_session(spec, IDENTITY_VARIATION, plan_sessions([40])[0], maps, 17, 0.0, 0)
    P = navigator_projections([ds]).P
    np.testing.assert_allclose(P, P[:, :1].repeat(P.shape[1], axis=1), rtol=0, atol=1e-12 * P.max())


def test_projection_is_real_nonnegative(three_sessions):
    P = navigator_projections(three_sessions).P
    assert np.isrealobj(P) and P.min() >= 0


def test_mismatched_geometry_rejected(maps, three_sessions):
    spec = default_phantom(16)
    other = acquire_session(spec, IDENTITY_VARIATION, plan_sessions([20])[0], maps, 15, 0.0, 0)
    with pytest.raises(ValueError):
        navigator_projections([three_sessions[0], other])
    with pytest.raises(ValueError):
        navigator_projections([])


def test_constant_matrix_gives_flat_first_component():
    T = 40
    P = NavigatorProjections(np.full((9, T), 2.5), (0,))
    b = estimate_basis(P, 1)
    np.testing.assert_allclose(b.U_K[:, 0], np.ones(T) / np.sqrt(T), atol=1e-12)
    assert np.all(b.singular_values[1:] < 1e-12 * b.singular_values[0])
    with pytest.raises(ValueError, match="rank"):
        estimate_basis(P, 2)


def test_rank_two_patterns_recovered():
    T = 64
    t = np.arange(T)
    f1 = np.ones(T) / np.sqrt(T)
    f2 = np.cos(2 * np.pi * 3 * t / T)
    f2 /= np.linalg.norm(f2)
    rng = np.random.default_rng(0)
    a, b = rng.random(11) + 1.0, rng.standard_normal(11)
    P = NavigatorProjections(np.outer(a, f1) + np.outer(b, f2), (0,))
    basis = estimate_basis(P, 2)
    angles = principal_angles(basis.U_K, np.stack([f1, f2], axis=1))
    assert angles.max() < 1e-8
    assert np.all(basis.singular_values[2:] < 1e-10 * basis.singular_values[0])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(3, 30)),
              elements=st.floats(-10, 10, allow_nan=False)),
       st.integers(1, 3))
def test_basis_orthonormal_and_signed(P, K):
    s = np.linalg.svd(P, compute_uv=False)
    if s[0] == 0 or np.sum(s > 1e-8 * s[0]) < K:
        return
    b = estimate_basis(NavigatorProjections(P, (0,)), K)
    np.testing.assert_allclose(b.U_K.conj().T @ b.U_K, np.eye(K), atol=1e-10)
    assert np.all(np.diff(b.singular_values) <= 1e-12 * b.singular_values[0])
    for k in range(K):
        col = b.U_K[:, k]
        piv = col[np.argmax(np.abs(col))]
        assert piv.real > 0 and abs(piv.imag) < 1e-14


def test_complex_projections_orthonormal():
    rng = np.random.default_rng(1)
    P = rng.standard_normal((8, 20)) + 1j * rng.standard_normal((8, 20))
    b = estimate_basis(NavigatorProjections(P, (0,)), 4)
    np.testing.assert_allclose(b.U_K.conj().T @ b.U_K, np.eye(4), atol=1e-10)


def test_nonnegative_projections_give_one_signed_first_component(three_sessions):
    b = estimate_basis(navigator_projections(three_sessions), 6)
    assert np.all(b.U_K[:, 0] > 0)
    np.testing.assert_allclose(b.U_K.T @ b.U_K, np.eye(6), atol=1e-10)


def test_duplicated_session_joint_basis_matches_solo(three_sessions):
    d = three_sessions[0]
    solo = estimate_basis(navigator_projections([d]), 4)
    joint = estimate_basis(navigator_projections([d, d]), 4)
    assert joint.session_boundaries == (0, 250)
    assert principal_angles(joint.restrict(0, 250), solo.U_K).max() < 1e-6


def test_k_bounds(three_sessions):
    P = navigator_projections(three_sessions[:1])
    with pytest.raises(ValueError):
        estimate_basis(P, 0)
    with pytest.raises(ValueError):
        estimate_basis(P, 251)


def test_deterministic(three_sessions):
    P = navigator_projections(three_sessions)
    a, b = estimate_basis(P, 6), estimate_basis(P, 6)
    assert a.U.tobytes() == b.U.tobytes()


def test_truncate(three_sessions):
    b = estimate_basis(navigator_projections(three_sessions), 6)
    t = b.truncate(3)
    np.testing.assert_array_equal(t.U_K, b.U_K[:, :3])
    with pytest.raises(ValueError):
        b.truncate(0)


def test_basis_roundtrip(tmp_path, three_sessions):
    b = estimate_basis(navigator_projections(three_sessions), 5)
    save_basis(tmp_path / "joint", b)
    back = load_basis(tmp_path / "joint")
    np.testing.assert_array_equal(back.U_K, b.U_K)
    assert back.K == 5 and back.session_boundaries == (0, 250, 400)


def test_principal_angles_orthogonal():
    e = np.eye(4)
    np.testing.assert_allclose(principal_angles(e[:, :1], e[:, 1:2]), [np.pi / 2])
    np.testing.assert_allclose(principal_angles(e[:, :2], e[:, [1, 0]]), [0, 0], atol=1e-7)
