"""Acceptance criteria at desk scale (N=64, 8 coils, 1000-spoke references).

Each test records one PASS/FAIL line (shown in the terminal summary) before
asserting. The heavy pipeline runs are session-scoped and share reference
reconstructions through one cache; the same-phantom run is timed on its own
cache so its runtime is honest.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from longrecon.basis import TemporalBasis, estimate_basis, navigator_projections
from longrecon.encoding import EncodingOperator, acquire_session
from longrecon.experiments import config_from_dict, find_test, run_experiment, run_seed
from longrecon.metrics import nrmse, paired_ttest_onetail, ssim
from longrecon.phantom import IDENTITY_VARIATION, default_phantom, render_frame, simulate_coil_maps
from longrecon.solver import ReconConfig, ReconProblem, reconstruct, synthesize
from longrecon.trajectory import plan_sessions

pytestmark = pytest.mark.acceptance

SEEDS = list(range(10))
SESSIONS = [{"spokes": 500, "reference_spokes": 1000}, {"spokes": 300, "reference_spokes": 1000},
            {"spokes": 200, "reference_spokes": 1000}]
COMMON = {"grid_size": 64, "coils": 8, "samples_per_spoke": 65, "snr_db": 30.0,
          "figures": {"enabled": False}, "save_arrays": False}


def config(**changes):
    raw = dict(COMMON, sessions=SESSIONS, seeds=SEEDS)
    raw.update(changes)
    return config_from_dict(raw)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def session_means(result, mode, metric="ssim"):
    """(sessions, seeds) array of per-seed session means."""
    return np.array([result.seed_means(mode, s, metric) for s in range(3)])


@pytest.fixture(scope="session")
def ref_cache():
    return {}


@pytest.fixture(scope="session")
def exp1(ref_cache):
    own = {}
    t0 = time.perf_counter()
    result = run_experiment(config(name="exp1", modes=["reference", "single_session", "longitudinal"]),
                            None, own)
    elapsed = time.perf_counter() - t0
    ref_cache.update(own)
    return result, elapsed


@pytest.fixture(scope="session")
def exp2(ref_cache):
    return run_experiment(config(name="exp2", phantom={"lesion": True},
                                 modes=["reference", "single_session", "longitudinal"]), None, ref_cache)


# --- 1 ------------------------------------------------------------------------------------

def test_criterion_1_operator_correctness(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    maps = simulate_coil_maps(4, 32, 0)
    ds = acquire_session(default_phantom(32), IDENTITY_VARIATION, plan_sessions([20])[0], maps, 33, 0.0, 0)
    op = EncodingOperator.for_datasets(maps, [ds])
    dot_errors = []
    for _ in range(10):
        x = crandn(rng, op.n_frames, 32, 32)
        y = crandn(rng, *ds.kspace.shape)
        lhs = np.vdot(y, op.forward_series(x))
        rhs = np.vdot(op.adjoint_series(y), x)
        dot_errors.append(abs(lhs - rhs) / abs(lhs))

    fd_errors = []
    for trial in range(3):
        r = np.random.default_rng(trial)
        cmaps = simulate_coil_maps(2, 8, trial)
        d = acquire_session(default_phantom(16), IDENTITY_VARIATION, plan_sessions([12])[0],
                            simulate_coil_maps(2, 16, 0), 9, 0.0, trial)
        d = replace(d, kspace=crandn(r, 6, 2, 9, 2))
        U = np.linalg.qr(r.standard_normal((6, 2)))[0]
        prob = ReconProblem([d], EncodingOperator.for_datasets(cmaps, [d]), TemporalBasis(U, 2, np.ones(2)),
                            ReconConfig(K=2, lambda_t=0.5, lambda_s=0.2, l1_smoothing_eps=0.05, backend="exact"))
        V = crandn(r, 2, 8, 8)
        g = prob.gradient(V)
        h = 1e-5
        for _ in range(10):
            D = crandn(r, 2, 8, 8)
            fd = (prob.objective(V + h * D) - prob.objective(V - h * D)) / (2 * h)
            an = np.vdot(g, D).real
            fd_errors.append(abs(fd - an) / abs(an))
    elapsed = time.perf_counter() - t0
    ok = max(dot_errors) < 1e-6 and max(fd_errors) < 1e-4 and elapsed < 10
    criterion_log(1, ok, f"dot test max rel err {max(dot_errors):.2e} (<1e-6, 10 trials); gradient vs "
                         f"central differences max rel err {max(fd_errors):.2e} (<1e-4, N=8 T=6 K=2); "
                         f"{elapsed:.1f}s (<10s)")
    assert ok


# --- 2 ------------------------------------------------------------------------------------

def test_criterion_2_oracle_recovery(criterion_log):
    t0 = time.perf_counter()
    cfg = config(name="static", phantom={"amplitude": 0.0}, snr_db=None, noise_sigma=0.0,
                 sessions=[{"spokes": 1000, "reference_spokes": 1000}], seeds=[0], modes=["reference"],
                 recon={"K": 1})
    _, kept, recons = run_seed(cfg, 0, None, keep_frames=True)
    frames = kept[("reference", 0)]
    truth = render_frame(cfg.phantom_spec())
    err = max(nrmse(f, truth) for f in frames)
    elapsed = time.perf_counter() - t0
    ok = err < 0.05 and elapsed < 60
    criterion_log(2, ok, f"noiseless static N=64, 1000 spokes: worst-frame NRMSE {err:.4f} (<0.05); "
                         f"{elapsed:.1f}s (<60s)")
    assert ok


# --- 3 ------------------------------------------------------------------------------------

def test_criterion_3_experiment1(exp1, criterion_log):
    result, elapsed = exp1
    long_ = session_means(result, "longitudinal")
    single = session_means(result, "single_session")
    parts, ge_all = [], True
    for s in range(3):
        t = find_test(result.tests, "longitudinal", "single_session", s)
        ge_all &= long_[s].mean() >= single[s].mean()
        parts.append(f"s{s + 1} long {long_[s].mean():.4f} vs single {single[s].mean():.4f} "
                     f"(t={t['t']:.2f}, p={t['p']:.3g})")
    t3 = find_test(result.tests, "longitudinal", "single_session", 2)
    ok = ge_all and long_[2].mean() > single[2].mean() and t3["p"] < 0.05 and elapsed < 1800
    criterion_log(3, ok, "; ".join(parts) + f"; n={len(SEEDS)} seeds; {elapsed / 60:.1f} min (<30)")
    assert ok


# --- 4 ------------------------------------------------------------------------------------

def test_criterion_4_lesion_contrast(exp2, criterion_log):
    ref = exp2.regions("reference", 2, "lesion_contrast")
    lon = exp2.regions("longitudinal", 2, "lesion_contrast")
    sgl = exp2.regions("single_session", 2, "lesion_contrast")
    assert len(ref) == len(lon) == len(sgl) == len(SEEDS)
    within = np.abs(lon - ref) <= 0.25 * np.abs(ref)
    closer = np.abs(lon - ref) < np.abs(sgl - ref)
    good = int(np.sum(within & closer))
    ok = good >= 8
    criterion_log(4, ok, f"session-3 lesion contrast within 25% of reference and closer than single in "
                         f"{good}/10 seeds (>=8); mean contrast ref {ref.mean():.4f}, long {lon.mean():.4f}, "
                         f"single {sgl.mean():.4f}")
    assert ok


# --- 5 ------------------------------------------------------------------------------------

def test_criterion_5_fat_change_preserved(ref_cache, criterion_log):
    sessions = [dict(SESSIONS[0]), dict(SESSIONS[1], variation={"fat_intensity_factor": 1.5}),
                dict(SESSIONS[2])]
    res = run_experiment(config(name="exp3", sessions=sessions, modes=["reference", "longitudinal"]),
                         None, ref_cache)
    fat = {m: np.array([res.regions(m, s, "fat") for s in range(3)]) for m in ("truth", "reference",
                                                                           "longitudinal")}
    lon, ref, tru = fat["longitudinal"], fat["reference"], fat["truth"]
    delta = np.minimum(tru[1] - tru[0], tru[1] - tru[2])
    excess = np.minimum(lon[1] - lon[0], lon[1] - lon[2])
    keeps_change = excess >= 0.5 * delta
    rel = np.maximum(np.abs(lon[0] - ref[0]) / ref[0], np.abs(lon[2] - ref[2]) / ref[2])
    near_ref = rel <= 0.10
    ok = bool(np.all(keeps_change) and np.all(near_ref))
    criterion_log(5, ok, f"session-2 fat excess >= half the injected delta in {int(keeps_change.sum())}/10 "
                         f"seeds (min ratio {np.min(excess / delta):.2f}); sessions 1/3 fat within 10% of "
                         f"reference in {int(near_ref.sum())}/10 (max rel dev {rel.max():.3f})")
    assert ok


# --- 6 ------------------------------------------------------------------------------------

def test_criterion_6_subject_specificity(exp1, ref_cache, criterion_log):
    result, _ = exp1
    pseudo = run_experiment(config(name="exp5", modes=["pseudo_longitudinal"]), None, ref_cache)
    p_ = session_means(pseudo, "pseudo_longitudinal")
    l_ = session_means(result, "longitudinal")
    s_ = session_means(result, "single_session")
    parts, ok = [], True
    for s in (1, 2):
        t = paired_ttest_onetail(l_[s], p_[s])
        lower = p_[s].mean() < l_[s].mean() and t.p < 0.05
        above_single = p_[s].mean() >= s_[s].mean()
        ok &= lower and above_single
        parts.append(f"s{s + 1} pseudo {p_[s].mean():.4f} vs long {l_[s].mean():.4f} (p={t.p:.3g}) "
                     f"vs single {s_[s].mean():.4f}")
    parts.append(f"all-session mean pseudo {p_.mean():.4f}, single {s_.mean():.4f}")
    criterion_log(6, ok, "; ".join(parts))
    assert ok


# --- 7 ------------------------------------------------------------------------------------

def test_criterion_7_registration(ref_cache, criterion_log):
    shifts = [(0.0, 0.0), (2.5, -2.0), (-2.0, 3.0)]
    sessions = [dict(SESSIONS[s], variation={"translation": list(shifts[s])}) if s else dict(SESSIONS[0])
                for s in range(3)]
    seeds = SEEDS[:5]
    runs = {}
    for reg in (False, True):
        runs[reg] = run_experiment(config(name=f"supp1_{reg}", sessions=sessions, seeds=seeds,
                                          modes=["reference", "longitudinal"], registration=reg),
                                   None, ref_cache)
    on = session_means(runs[True], "longitudinal")
    off = session_means(runs[False], "longitudinal")
    errs = []
    for sr in runs[True].seeds:
        for tr in sr.transforms:
            est = tr["estimated"]
            inj = tr["injected"]
            if tr["session"]:
                errs.append(max(abs(est["dx"] - inj[0]), abs(est["dy"] - inj[1])))
    ok = on.mean() >= off.mean() and len(errs) == 2 * len(seeds) and max(errs) <= 0.3
    per = ", ".join(f"s{s + 1} {on[s].mean():.4f}/{off[s].mean():.4f}" for s in range(3))
    criterion_log(7, ok, f"registered vs unregistered mean SSIM {on.mean():.4f} vs {off.mean():.4f} "
                         f"({per}); shift recovery max error {max(errs):.3f} px (<=0.3) over "
                         f"{len(errs)} estimates")
    assert ok


# --- 8 ------------------------------------------------------------------------------------

def test_criterion_8_trajectories(exp2, ref_cache, criterion_log):
    rep = run_experiment(config(name="supp2", phantom={"lesion": True}, trajectory="repeating",
                                modes=["longitudinal"]), None, ref_cache)
    r_ = session_means(rep, "longitudinal")
    n_ = session_means(exp2, "longitudinal")
    diff = n_.mean() - r_.mean()
    ok = diff >= 0
    per = ", ".join(f"s{s + 1} {n_[s].mean():.4f}/{r_[s].mean():.4f}" for s in range(3))
    criterion_log(8, ok, f"non-repeating vs repeating longitudinal mean SSIM {n_.mean():.4f} vs "
                         f"{r_.mean():.4f} (difference {diff:+.4f}; {per})")
    assert ok


# --- 9 ------------------------------------------------------------------------------------

def test_criterion_9_dc_component(exp1, criterion_log):
    result, _ = exp1
    joint = result.dc("longitudinal", "all")
    single = result.dc("single_session", 2)
    better = int(np.sum(joint < single))
    ok = better >= 9
    criterion_log(9, ok, f"background energy fraction of the first coefficient map: concatenated < 200-spoke "
                         f"single in {better}/10 seeds (>=9); means {joint.mean():.3e} vs {single.mean():.3e}")
    assert ok


# --- 10 -----------------------------------------------------------------------------------

def test_criterion_10_invariants(tmp_path, criterion_log):
    checks = {}
    maps = simulate_coil_maps(4, 32, 1)
    spec = default_phantom(32)
    datasets = [acquire_session(spec, IDENTITY_VARIATION, p, maps, 33, 0.02, 3) for p in plan_sessions([120, 80])]
    basis = estimate_basis(navigator_projections(datasets), 4)
    U = basis.U_K
    checks["orthonormality"] = float(np.abs(U.T @ U - np.eye(4)).max()) < 1e-10

    op = EncodingOperator.for_datasets(maps, datasets)
    res = reconstruct(datasets, op, basis, ReconConfig(K=4, max_iters=30, convergence_tol=0.0))
    trace = np.array(res.objective_trace)
    checks["monotone objective"] = bool(np.all(np.diff(trace) <= 1e-12 * abs(trace[0])))

    m = synthesize(res.coefficients, basis).frames.reshape(basis.n_frames, -1)
    sv = np.linalg.svd(m, compute_uv=False)
    checks["rank-K closure"] = bool(np.all(sv[4:] < 1e-10 * sv[0]))

    rng = np.random.default_rng(4)
    ref = rng.random((10, 10))
    c, L = 0.01, ref.max()
    c1 = (0.01 * L) ** 2
    lum = [(2 * mu * (mu + c) + c1) / (mu ** 2 + (mu + c) ** 2 + c1)
           for mu in (ref[i:i + 7, j:j + 7].mean() for i in range(4) for j in range(4))]
    i = np.arange(8)
    pattern = np.cos(2 * np.pi * i / 7)[:, None] + np.sin(2 * np.pi * i / 7 + 0.4)[None, :]
    checks["ssim examples"] = (abs(ssim(ref, ref) - 1.0) < 1e-12 and abs(ssim(ref + c, ref) - np.mean(lum)) < 1e-12
                               and ssim(-pattern, pattern) < 0)
    checks["nrmse examples"] = (nrmse(ref, ref) == 0.0 and abs(nrmse(np.zeros_like(ref), ref) - 1.0) < 1e-15
                                and abs(nrmse(1.1 * ref, ref) - 0.1) < 1e-12)
    b = np.array([0.2, 0.4, 0.1, 0.7, 0.3])
    a = b + np.arange(1, 6)
    r1, r2, r0 = paired_ttest_onetail(a, b), paired_ttest_onetail(b, a), paired_ttest_onetail(b, b)
    checks["t-test examples"] = (abs(r1.t - 4.2426) < 1e-4 and r1.dof == 4 and abs(r1.p - 0.0066) < 1e-4
                                 and abs(r1.p + r2.p - 1.0) < 1e-12 and r0.t == 0.0 and r0.p == 0.5)

    small = {"grid_size": 16, "coils": 2, "samples_per_spoke": 17, "seeds": [7],
             "sessions": [{"spokes": 20, "reference_spokes": 40}, {"spokes": 12, "reference_spokes": 40}],
             "recon": {"K": 3, "max_iters": 10}, "figures": {"enabled": False},
             "modes": ["reference", "single_session", "longitudinal"]}
    run_experiment(config_from_dict(small), tmp_path / "a")
    run_experiment(config_from_dict(small), tmp_path / "b")
    checks["bit determinism"] = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                                    for f in ("metrics.csv", "seed_means.csv", "regions.csv", "dc.csv"))
    ok = all(checks.values())
    criterion_log(10, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok
