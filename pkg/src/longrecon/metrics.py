"""Image quality metrics and one-tail paired t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _real_image(a):
    a = np.asarray(a)
    return np.abs(a).astype(np.float64) if np.iscomplexobj(a) else a.astype(np.float64)


def ssim(x, ref, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over all full ``window x window`` patches, with ``L = max(ref)``.

    Complex inputs are reduced to magnitudes; real inputs are used as given.
    Local statistics use a uniform window and the unbiased (n-1) covariance
    normalization; stabilizers are ``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2``.
    """
    x, ref = _real_image(x), _real_image(ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if min(x.shape) < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    L = float(ref.max())
    if L <= 0 or float(ref.max() - ref.min()) <= 0:
        raise ValueError("reference has zero dynamic range")
    return _ssim(x, ref, L, window)


def _ssim(x, ref, L, window):
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    npix = window * window
    cov_norm = npix / (npix - 1.0)

    def mean(a):
        return ndimage.uniform_filter(a, size=window, mode="reflect")

    ux, ur = mean(x), mean(ref)
    vx = cov_norm * (mean(x * x) - ux * ux)
    vr = cov_norm * (mean(ref * ref) - ur * ur)
    vxr = cov_norm * (mean(x * ref) - ux * ur)
    s = ((2 * ux * ur + c1) * (2 * vxr + c2)) / ((ux ** 2 + ur ** 2 + c1) * (vx + vr + c2))
    h = window // 2
    return float(s[h:s.shape[0] - h, h:s.shape[1] - h].mean())


def nrmse(x, ref) -> float:
    """``||x - ref|| / ||ref||`` on magnitude images."""
    x = np.abs(np.asarray(x))
    ref = np.abs(np.asarray(ref))
    den = float(np.linalg.norm(ref))
    if den == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(x - ref)) / den


# --- Student t -------------------------------------------------------------------------

def _betacf(a, b, x, max_iter=500, tol=1e-15):
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, dof: float) -> float:
    """Upper-tail probability ``P(T > t)`` for Student's t with ``dof`` degrees of freedom."""
    x = dof / (dof + t * t)
    tail = 0.5 * betainc_regularized(0.5 * dof, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: int
    p: float
    flag: str = ""

    @property
    def stars(self) -> str:
        return "**" if self.p < 0.01 else "*" if self.p < 0.05 else ""


def paired_ttest_onetail(a, b) -> TTestResult:
    """One-tail paired t-test of H1: mean(a) > mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length 1-D samples with n >= 2")
    d = a - b
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, n - 1, 0.5, "zero variance, zero mean difference")
        p = 1e-12 if mean > 0 else 1.0 - 1e-12
        return TTestResult(math.copysign(math.inf, mean), n - 1, p,
                           "zero variance; p is a bound (<1e-12)" if mean > 0 else
                           "zero variance; p is a bound (>1-1e-12)")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, n - 1, student_t_sf(t, n - 1))


# --- reports -----------------------------------------------------------------------------

@dataclass
class MetricsReport:
    per_frame: list = field(default_factory=list)     # dicts: seed, mode, session, frame, ssim, nrmse
    tests: list = field(default_factory=list)         # dicts: label, t, dof, p, flag

    def add_series(self, seed, mode, session, frames, reference_frames):
        for i, (f, r) in enumerate(zip(frames, reference_frames)):
            self.per_frame.append(dict(seed=seed, mode=mode, session=session, frame=i,
                                       ssim=ssim(f, r), nrmse=nrmse(f, r)))

    def values(self, mode, session, metric="ssim", seed=None):
        return np.array([row[metric] for row in self.per_frame
                         if row["mode"] == mode and row["session"] == session
                         and (seed is None or row["seed"] == seed)])

    def seed_means(self, mode, session, metric="ssim"):
        seeds = sorted({row["seed"] for row in self.per_frame})
        return np.array([self.values(mode, session, metric, s).mean() for s in seeds])

    def summary(self):
        keys = sorted({(r["mode"], r["session"]) for r in self.per_frame})
        out = []
        for mode, sess in keys:
            s = self.values(mode, sess, "ssim")
            e = self.values(mode, sess, "nrmse")
            out.append(dict(mode=mode, session=sess, n=len(s), ssim_mean=float(s.mean()),
                            ssim_std=float(s.std(ddof=1)) if len(s) > 1 else 0.0,
                            nrmse_mean=float(e.mean()),
                            nrmse_std=float(e.std(ddof=1)) if len(e) > 1 else 0.0))
        return out
