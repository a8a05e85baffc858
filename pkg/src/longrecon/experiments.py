"""Experiment orchestration: config parsing, simulation, reconstruction, evaluation, artifacts.

Artifact tree written by :func:`run_experiment` (``<out>`` is the output directory)::

    <out>/config.yaml                     resolved configuration
    <out>/metrics.csv                     per-frame SSIM/NRMSE (schema row first)
    <out>/seed_means.csv                  per-seed means of the per-frame metrics
    <out>/regions.csv                     region means (fat, lesion contrast, ...) per series
    <out>/dc.csv                          background energy fraction of the first coefficient map
    <out>/summary.yaml                    means, paired one-tail t-tests, run metadata
    <out>/summary.txt                     the same, human readable
    <out>/transforms/seed<k>.yaml         registration estimates (when enabled)
    <out>/traces/seed<k>/<recon>.csv      objective value per solver iteration
    <out>/arrays/seed<k>/<recon>.*        LRA1 coefficients and basis with YAML sidecars
    <out>/figures/seed<k>/...             frame grids, x-t figures and per-series PNG frames
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import io as lra
from . import plotting
from .basis import TemporalBasis
from .encoding import EncodingOperator, acquire_session, nudft_spokes
from .longitudinal import align_sessions, apply_rigid_kspace, compose_inverse, concatenate
from .metrics import MetricsReport, paired_ttest_onetail
from .phantom import (PhantomSpec, SessionVariation, default_phantom, perturbed_phantom,
                      region_mask, render_frame, simulate_coil_maps)
from .solver import ReconConfig, ReconResult, reconstruct, synthesize
from .trajectory import GOLDEN_ANGLE, SessionSpokePlan, SpokePolicy, plan_sessions

log = logging.getLogger(__name__)

METRICS_SCHEMA = "longrecon-metrics/1"
MODES = ("reference", "single_session", "longitudinal", "pseudo_longitudinal")
COMPARISONS = (
    # (better candidate, baseline): one-tail test that the candidate scores higher SSIM
    ("longitudinal", "single_session"),
    ("longitudinal", "pseudo_longitudinal"),
    ("pseudo_longitudinal", "single_session"),
)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` and ``seed`` say where."""

    def __init__(self, stage: str, seed, cause: BaseException):
        self.stage, self.seed, self.cause = stage, seed, cause
        super().__init__(f"[stage={stage} seed={seed}] {type(cause).__name__}: {cause}")


# --- configuration -----------------------------------------------------------------------

@dataclass(frozen=True)
class SessionConfig:
    spokes: int
    reference_spokes: int = 1000
    variation: SessionVariation = SessionVariation()


@dataclass(frozen=True)
class FigureConfig:
    enabled: bool = True
    seeds: int = 1          # figures for the first this-many seeds
    stride: int = 25
    row: int | None = None
    grid_frames: int = 6


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    grid_size: int = 64
    coils: int = 8
    samples_per_spoke: int = 65
    coil_seed: int = 0
    phantom: dict = field(default_factory=dict)
    pseudo_phantom_seeds: tuple = (101, 202)
    sessions: tuple = (SessionConfig(500), SessionConfig(300), SessionConfig(200))
    trajectory: SpokePolicy = SpokePolicy.NON_REPEATING
    snr_db: float | None = 30.0
    noise_sigma: float | None = None
    recon: ReconConfig = ReconConfig()
    registration: bool = False
    registration_rotation: bool = False
    seeds: tuple = (0,)
    modes: tuple = ("reference", "single_session", "longitudinal")
    output: str = "out"
    figures: FigureConfig = FigureConfig()
    save_arrays: bool = True
    workers: int = 1

    def __post_init__(self):
        if not self.sessions:
            raise ConfigError("at least one session is required")
        for i, s in enumerate(self.sessions):
            if s.spokes <= 0 or s.spokes % 2:
                raise ConfigError(f"session {i}: spokes must be a positive even number, got {s.spokes}")
            if s.reference_spokes <= 0 or s.reference_spokes % 2:
                raise ConfigError(f"session {i}: reference_spokes must be positive and even")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}, got {list(self.modes)}")
        if self.grid_size < 8 or self.coils < 1 or self.samples_per_spoke < 2:
            raise ConfigError("grid_size >= 8, coils >= 1 and samples_per_spoke >= 2 are required")
        if (self.snr_db is None) == (self.noise_sigma is None):
            raise ConfigError("give exactly one of snr_db and noise_sigma")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if "pseudo_longitudinal" in self.modes:
            if len(self.sessions) < 2:
                raise ConfigError("pseudo_longitudinal needs at least two sessions")
            if len(self.pseudo_phantom_seeds) < len(self.sessions) - 1:
                raise ConfigError("pseudo_longitudinal needs one pseudo_phantom_seed per session after the first")
            if len(set(self.pseudo_phantom_seeds)) != len(self.pseudo_phantom_seeds):
                raise ConfigError("pseudo_phantom_seeds must be distinct")
        if self.figures.stride < 1:
            raise ConfigError("figures.stride must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for i, plan in enumerate(self.plans()):
            if plan.stop > self.sessions[i].reference_spokes:
                raise ConfigError(f"session {i}: accelerated spokes {plan.global_index_range} exceed "
                                  f"the {self.sessions[i].reference_spokes}-spoke reference acquisition")

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    def plans(self) -> list[SessionSpokePlan]:
        return plan_sessions([s.spokes for s in self.sessions], self.trajectory)

    def reference_plans(self) -> list[SessionSpokePlan]:
        return [SessionSpokePlan(i, s.reference_spokes, 0, s.reference_spokes, self.trajectory)
                for i, s in enumerate(self.sessions)]

    def phantom_spec(self) -> PhantomSpec:
        return default_phantom(self.grid_size, **self.phantom)

    def pseudo_specs(self) -> list[PhantomSpec]:
        base = self.phantom_spec()
        return [base] + [perturbed_phantom(base, s) for s in self.pseudo_phantom_seeds[: self.n_sessions - 1]]

    def to_dict(self) -> dict:
        d = lra.to_plain(self)
        d["sessions"] = [lra.to_plain(s) for s in self.sessions]
        d["registration"] = {"enabled": d["registration"], "rotation": d.pop("registration_rotation")}
        return d


_RECON_FIELDS = {f.name for f in fields(ReconConfig)}
_FIGURE_FIELDS = {f.name for f in fields(FigureConfig)}
_VARIATION_FIELDS = {f.name for f in fields(SessionVariation)}
_PHANTOM_KEYS = {"lesion", "amplitude", "period", "drift", "seed"}
_TOP_KEYS = {f.name for f in fields(ExperimentConfig)} | {"registration"}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}; allowed {sorted(allowed)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from plain data (parsed YAML)."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_keys("config", raw, _TOP_KEYS)
    kw = {k: v for k, v in raw.items() if k not in ("sessions", "recon", "figures", "registration",
                                                   "phantom", "trajectory", "noise_sigma", "snr_db")}
    try:
        phantom = dict(raw.get("phantom") or {})
        _check_keys("phantom", phantom, _PHANTOM_KEYS)
        kw["phantom"] = phantom
        sessions = []
        for i, s in enumerate(raw.get("sessions") or []):
            s = dict(s)
            _check_keys(f"sessions[{i}]", s, {"spokes", "reference_spokes", "variation"})
            var = dict(s.pop("variation", None) or {})
            _check_keys(f"sessions[{i}].variation", var, _VARIATION_FIELDS)
            if "translation" in var:
                var["translation"] = tuple(float(v) for v in var["translation"])
            sessions.append(SessionConfig(int(s["spokes"]), int(s.get("reference_spokes", 1000)),
                                          SessionVariation(**var)))
        if "sessions" in raw:
            kw["sessions"] = tuple(sessions)
        recon = dict(raw.get("recon") or {})
        _check_keys("recon", recon, _RECON_FIELDS)
        kw["recon"] = ReconConfig(**recon)
        figs = dict(raw.get("figures") or {})
        _check_keys("figures", figs, _FIGURE_FIELDS)
        kw["figures"] = FigureConfig(**figs)
        reg = raw.get("registration", False)
        if isinstance(reg, dict):
            _check_keys("registration", reg, {"enabled", "rotation"})
            kw["registration"] = bool(reg.get("enabled", True))
            kw["registration_rotation"] = bool(reg.get("rotation", False))
        else:
            kw["registration"] = bool(reg)
        if "trajectory" in raw:
            kw["trajectory"] = SpokePolicy(str(raw["trajectory"]))
        if raw.get("noise_sigma") is not None:
            kw["noise_sigma"] = float(raw["noise_sigma"])
            kw["snr_db"] = None
        if "snr_db" in raw:
            kw["snr_db"] = None if raw["snr_db"] is None else float(raw["snr_db"])
        for key in ("seeds", "modes", "pseudo_phantom_seeds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(raw)


# --- simulation helpers --------------------------------------------------------------------

def noise_sigma_for(cfg: ExperimentConfig, coil_maps) -> float:
    """Noise std per complex sample.

    ``snr_db`` is the ratio of root-mean-square signal over the samples of
    eight golden-angle spokes of the static phantom to the noise std.
    """
    if cfg.noise_sigma is not None:
        return float(cfg.noise_sigma)
    spec = cfg.phantom_spec()
    kpos = np.linspace(-0.5, 0.5, cfg.samples_per_spoke)
    angles = np.mod(GOLDEN_ANGLE * np.arange(8), 2 * np.pi)
    k = nudft_spokes(render_frame(spec), coil_maps.maps, angles, kpos)
    return float(np.sqrt(np.mean(np.abs(k) ** 2)) * 10.0 ** (-cfg.snr_db / 20.0))


def truth_series(spec: PhantomSpec, variation: SessionVariation, plan: SessionSpokePlan) -> np.ndarray:
    return np.stack([render_frame(spec, variation, plan.first_frame + i) for i in range(plan.n_frames)])


def region_means(frames, spec: PhantomSpec, variation: SessionVariation, first_frame: int,
                 transform=None) -> dict:
    """Frame-averaged magnitude in truth-derived regions.

    Regions move with the phantom; ``transform`` is the rigid correction
    applied to the data (masks are shifted by the same amount, integer rounded).
    """
    mags = np.abs(np.asarray(frames))
    sums = {}
    has_lesion = spec.lesion is not None
    shift = (0, 0)
    if transform is not None and not transform.is_identity:
        shift = (int(round(transform.dx)), int(round(transform.dy)))
    for i, m in enumerate(mags):
        t = first_frame + i
        masks = {"fat": region_mask(spec, variation, t, "fat"),
                 "liver": region_mask(spec, variation, t, "liver")}
        if has_lesion:
            les = region_mask(spec, variation, t, "lesion")
            masks["lesion"] = les
            masks["liver_minus_lesion"] = masks["liver"] & ~les
        for name, mask in masks.items():
            if shift != (0, 0):
                mask = np.roll(mask, shift, axis=(0, 1))
            if mask.any():
                sums.setdefault(name, []).append(float(m[mask].mean()))
    out = {k: float(np.mean(v)) for k, v in sums.items()}
    if has_lesion and "lesion" in out and "liver_minus_lesion" in out:
        out["lesion_contrast"] = out["lesion"] - out["liver_minus_lesion"]
    return out


def dc_background_fraction(V: np.ndarray, background: np.ndarray) -> float:
    """Energy of the first coefficient map outside the body, as a fraction of its total energy."""
    e = np.abs(V[0]) ** 2
    total = e.sum()
    return float(e[background].sum() / total) if total > 0 else 0.0


# --- per-seed pipeline ----------------------------------------------------------------------

@dataclass
class Recon:
    """One solver run: coefficients, basis, diagnostics and per-session outputs."""
    label: str
    mode: str
    sessions: tuple               # session indices covered
    result: ReconResult
    basis: TemporalBasis
    seconds: float

    def session_frames(self) -> list[np.ndarray]:
        series = synthesize(self.result.coefficients, self.basis)
        edges = list(self.basis.session_boundaries) + [series.n_frames]
        return [series.frames[a:b] for a, b in zip(edges[:-1], edges[1:])]


@dataclass
class SeedResult:
    seed: int
    report: MetricsReport
    regions: list = field(default_factory=list)     # dicts: seed, mode, session, region, value
    dc: list = field(default_factory=list)          # dicts: seed, mode, session, fraction
    transforms: list = field(default_factory=list)  # dicts per session
    recon_info: list = field(default_factory=list)  # dicts: label, iterations, converged, ...
    noise_sigma: float = 0.0


class _Stage:
    def __init__(self, name, seed):
        self.name, self.seed = name, seed

    def __enter__(self):
        log.info("seed %s: %s", self.seed, self.name)
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and not isinstance(ev, PipelineError):
            raise PipelineError(self.name, self.seed, ev) from ev
        return False


def _reconstruct(label, mode, datasets, session_idx, coil_maps, cfg: ExperimentConfig) -> Recon:
    t0 = time.perf_counter()
    ext = concatenate(datasets, cfg.recon.K)
    op = EncodingOperator.for_datasets(coil_maps, datasets)
    res = reconstruct(list(datasets), op, ext.joint_basis, cfg.recon)
    if res.aborted:
        log.warning("%s: solver aborted after %d iterations", label, res.iterations)
    return Recon(label, mode, tuple(session_idx), res, ext.joint_basis, time.perf_counter() - t0)


class _ReferenceStore:
    """References keyed by (phantom, session, transform); kept as coefficients plus basis."""

    def __init__(self, shared: dict | None):
        self.items = shared if shared is not None else {}

    def get(self, key, build):
        if key not in self.items:
            self.items[key] = build()
        return self.items[key]


def _cache_key(cfg: ExperimentConfig, seed, spec_tag, session, transform) -> str:
    parts = dict(spec_tag=spec_tag, session=session, seed=seed, grid=cfg.grid_size, coils=cfg.coils,
                 S=cfg.samples_per_spoke, coil_seed=cfg.coil_seed, phantom=cfg.phantom,
                 pseudo=list(cfg.pseudo_phantom_seeds) if spec_tag else None,
                 ref_spokes=cfg.sessions[session].reference_spokes,
                 variation=lra.to_plain(cfg.sessions[session].variation),
                 snr=cfg.snr_db, sigma=cfg.noise_sigma, recon=lra.to_plain(cfg.recon),
                 transform=None if transform is None else lra.to_plain(transform))
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None, reference_cache: dict | None = None,
             keep_frames: bool = False):
    """Run every configured mode for one seed. Returns ``(SeedResult, frames)``.

    ``frames`` maps ``(mode, session)`` to magnitude/complex frame arrays when
    ``keep_frames`` is set (figures need them), otherwise it is empty.
    """
    modes = set(cfg.modes)
    compare = modes - {"reference"}
    want_refs = "reference" in modes or bool(compare)
    store = _ReferenceStore(reference_cache)
    report = MetricsReport()
    sr = SeedResult(seed, report)
    kept: dict = {}
    recons: list[Recon] = []

    with _Stage("setup", seed):
        coil_maps = simulate_coil_maps(cfg.coils, cfg.grid_size, cfg.coil_seed)
        sigma = noise_sigma_for(cfg, coil_maps)
        sr.noise_sigma = sigma
        spec = cfg.phantom_spec()
        plans, ref_plans = cfg.plans(), cfg.reference_plans()
        variations = [s.variation for s in cfg.sessions]

    def acquire(spec_, s):
        return acquire_session(spec_, variations[s], ref_plans[s], coil_maps, cfg.samples_per_spoke,
                               sigma, seed)

    with _Stage("acquisition", seed):
        full = [acquire(spec, s) for s in range(cfg.n_sessions)]
        accel = [full[s].select(plans[s]) for s in range(cfg.n_sessions)]

    transforms = [None] * cfg.n_sessions
    aligned = accel
    if cfg.registration and "longitudinal" in modes:
        with _Stage("registration", seed):
            aligned, results = align_sessions(accel, coil_maps, rotation=cfg.registration_rotation,
                                              backend=cfg.recon.backend)
            for s, r in enumerate(results):
                corr = compose_inverse(r.transform)
                transforms[s] = None if corr.is_identity else corr
                sr.transforms.append(dict(session=s, estimated=lra.to_plain(r.transform),
                                          correction=lra.to_plain(corr), peak=float(r.peak),
                                          warning=bool(r.warning),
                                          injected=list(variations[s].translation)))

    def reference(dataset, spec_tag, s, transform=None) -> Recon:
        key = _cache_key(cfg, seed, spec_tag, s, transform)

        def build():
            ds = dataset
            if transform is not None:
                ds = apply_rigid_kspace(ds, transform)
            return _reconstruct(f"reference{'_' + spec_tag if spec_tag else ''}_s{s}"
                                f"{'_aligned' if transform is not None else ''}",
                                "reference", [ds], [s], coil_maps, cfg)
        return store.get(key, build)

    def frames_of(rec: Recon, idx=0):
        return rec.session_frames()[idx]

    def ref_frames(rec: Recon, s):
        f = frames_of(rec)
        f0 = plans[s].first_frame
        return f[f0: f0 + plans[s].n_frames]

    ref_raw = {}
    if want_refs:
        with _Stage("reference", seed):
            for s in range(cfg.n_sessions):
                ref_raw[s] = reference(full[s], "", s)
                if "reference" in modes:
                    recons.append(ref_raw[s])

    def evaluate(mode, rec: Recon, outputs, spec_, refs_by_session, transforms_=None):
        for j, s in enumerate(rec.sessions):
            out_f = outputs[j]
            ref_f = ref_frames(refs_by_session[s], s)
            report.add_series(seed, mode, s, out_f, ref_f)
            tr = None if transforms_ is None else transforms_[s]
            for name, val in region_means(out_f, spec_, variations[s], plans[s].first_frame, tr).items():
                sr.regions.append(dict(seed=seed, mode=mode, session=s, region=name, value=val))
            if keep_frames:
                kept[(mode, s)] = out_f

    def log_refs(spec_, refs, tag, transforms_=None):
        for s, rec in refs.items():
            f = ref_frames(rec, s)
            tr = None if transforms_ is None else transforms_[s]
            for name, val in region_means(f, spec_, variations[s], plans[s].first_frame, tr).items():
                sr.regions.append(dict(seed=seed, mode=tag, session=s, region=name, value=val))
            if keep_frames:
                kept[(tag, s)] = f

    def truth_regions(spec_, tag):
        for s in range(cfg.n_sessions):
            f = truth_series(spec_, variations[s], plans[s])
            for name, val in region_means(f, spec_, variations[s], plans[s].first_frame).items():
                sr.regions.append(dict(seed=seed, mode=tag, session=s, region=name, value=val))
            if keep_frames:
                kept[(tag, s)] = f

    background = region_mask(spec, variations[0], 0, "background")

    if want_refs:
        log_refs(spec, ref_raw, "reference")
        truth_regions(spec, "truth")

    if "single_session" in modes:
        with _Stage("single_session", seed):
            for s in range(cfg.n_sessions):
                rec = _reconstruct(f"single_s{s}", "single_session", [accel[s]], [s], coil_maps, cfg)
                recons.append(rec)
                evaluate("single_session", rec, [frames_of(rec)], spec, ref_raw)
                bg = region_mask(spec, variations[s], 0, "background")
                sr.dc.append(dict(seed=seed, mode="single_session", session=s,
                                  fraction=dc_background_fraction(rec.result.V, bg)))

    if "longitudinal" in modes:
        with _Stage("longitudinal", seed):
            refs = dict(ref_raw)
            if cfg.registration:
                for s in range(cfg.n_sessions):
                    if transforms[s] is not None:
                        refs[s] = reference(full[s], "", s, transforms[s])
                        recons.append(refs[s])
                log_refs(spec, {s: refs[s] for s in refs if transforms[s] is not None},
                         "reference_aligned", transforms)
            rec = _reconstruct("longitudinal", "longitudinal", aligned, range(cfg.n_sessions), coil_maps, cfg)
            recons.append(rec)
            evaluate("longitudinal", rec, rec.session_frames(), spec, refs, transforms)
            sr.dc.append(dict(seed=seed, mode="longitudinal", session="all",
                              fraction=dc_background_fraction(rec.result.V, background)))

    if "pseudo_longitudinal" in modes:
        with _Stage("pseudo_longitudinal", seed):
            specs = cfg.pseudo_specs()
            pfull = {s: acquire(specs[s], s) for s in range(1, cfg.n_sessions)}
            ds = [accel[0]] + [pfull[s].select(plans[s]) for s in range(1, cfg.n_sessions)]
            prefs = {0: ref_raw[0]}
            for s in range(1, cfg.n_sessions):
                prefs[s] = reference(pfull[s], f"pseudo{cfg.pseudo_phantom_seeds[s - 1]}", s)
                recons.append(prefs[s])
            rec = _reconstruct("pseudo_longitudinal", "pseudo_longitudinal", ds, range(cfg.n_sessions),
                               coil_maps, cfg)
            recons.append(rec)
            outs = rec.session_frames()
            for s in range(cfg.n_sessions):
                sub = replace(rec, sessions=(s,))
                evaluate("pseudo_longitudinal", sub, [outs[s]], specs[s], prefs)
            sr.dc.append(dict(seed=seed, mode="pseudo_longitudinal", session="all",
                              fraction=dc_background_fraction(rec.result.V, background)))

    for rec in recons:
        r = rec.result
        sr.recon_info.append(dict(label=rec.label, mode=rec.mode, iterations=r.iterations,
                                  converged=r.converged, aborted=r.aborted, lambda_t=r.lambda_t,
                                  lambda_s=r.lambda_s, eps=r.eps, seconds=round(rec.seconds, 2),
                                  final_objective=r.objective_trace[-1] if r.objective_trace else None))

    if out is not None:
        with _Stage("artifacts", seed):
            _write_seed_artifacts(cfg, seed, out, recons, sr, plans)
    return sr, kept, recons


def _write_seed_artifacts(cfg, seed, out: Path, recons, sr: SeedResult, plans) -> None:
    tdir = out / "traces" / f"seed{seed}"
    tdir.mkdir(parents=True, exist_ok=True)
    for rec in recons:
        with open(tdir / f"{rec.label}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective"])
            for i, v in enumerate(rec.result.objective_trace):
                w.writerow([i, repr(float(v))])
    if cfg.save_arrays:
        adir = out / "arrays" / f"seed{seed}"
        adir.mkdir(parents=True, exist_ok=True)
        for rec in recons:
            stem = adir / rec.label
            lra.write_array(stem.with_suffix(".V.lra"), rec.result.V)
            lra.write_sidecar(stem.with_suffix(".V.yaml"), {
                "kind": "spatial_coefficients", "label": rec.label, "mode": rec.mode,
                "sessions": list(rec.sessions), "K": rec.basis.K, "seed": seed,
                "iterations": rec.result.iterations, "converged": rec.result.converged,
                "lambda_t": rec.result.lambda_t, "lambda_s": rec.result.lambda_s})
            lra.save_basis(adir / f"{rec.label}_basis", rec.basis)
    if sr.transforms:
        tr = out / "transforms"
        tr.mkdir(parents=True, exist_ok=True)
        lra.write_sidecar(tr / f"seed{seed}.yaml", {"seed": seed, "sessions": sr.transforms})


def _write_figures(cfg, seed, out: Path, kept: dict) -> None:
    fdir = out / "figures" / f"seed{seed}"
    fdir.mkdir(parents=True, exist_ok=True)
    order = ["truth", "reference", "reference_aligned", "single_session", "longitudinal",
             "pseudo_longitudinal"]
    for s in range(cfg.n_sessions):
        panels = {m: kept[(m, s)] for m in order if (m, s) in kept}
        if not panels:
            continue
        ref = panels.get("reference", next(iter(panels.values())))
        vmax = plotting.display_window(ref)
        n = len(ref)
        plotting.frame_grid(panels, fdir / f"session{s}_grid.png", plotting.grid_indices(n, cfg.figures.grid_frames),
                            vmax=vmax, title=f"{cfg.name} seed {seed} session {s}")
        plotting.xt_figure(panels, fdir / f"session{s}_xt.png", row=cfg.figures.row, vmax=vmax,
                           title=f"{cfg.name} seed {seed} session {s} x-t")
        for mode, frames in panels.items():
            plotting.emit_frames(frames, fdir / f"{mode}_s{s}", cfg.figures.stride, reference=ref,
                                 row=cfg.figures.row)


# --- aggregation --------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list                  # SeedResult per seed, in config order
    report: MetricsReport
    tests: list
    out: Path | None

    def regions(self, mode, session, region) -> np.ndarray:
        return np.array([r["value"] for sr in self.seeds for r in sr.regions
                         if r["mode"] == mode and r["session"] == session and r["region"] == region])

    def dc(self, mode, session) -> np.ndarray:
        return np.array([r["fraction"] for sr in self.seeds for r in sr.dc
                         if r["mode"] == mode and r["session"] == session])

    def seed_means(self, mode, session, metric="ssim") -> np.ndarray:
        return self.report.seed_means(mode, session, metric)


def comparison_tests(report: MetricsReport, modes, n_sessions: int) -> list[dict]:
    """One-tail paired t-tests (SSIM higher, NRMSE lower) for each comparison and session.

    Three pairings are reported: ``seed_means`` pairs per-seed session means
    (the headline test), ``pooled_frames`` pairs every frame of every seed,
    and ``per_seed`` pairs frames within each seed separately.
    """
    tests = []
    seeds = sorted({r["seed"] for r in report.per_frame})

    def add(cand, base, s, metric, sign, level, seed, a, b):
        if len(a) < 2 or len(a) != len(b):
            return
        r = paired_ttest_onetail(sign * a, sign * b)
        tests.append(dict(candidate=cand, baseline=base, session=s, metric=metric, level=level,
                          seed=seed, alternative="greater" if sign > 0 else "less", n=len(a),
                          mean_candidate=float(a.mean()), mean_baseline=float(b.mean()),
                          t=r.t, dof=r.dof, p=r.p, flag=r.flag, stars=r.stars))

    for cand, base in COMPARISONS:
        if cand not in modes or base not in modes:
            continue
        for s in range(n_sessions):
            for metric, sign in (("ssim", 1.0), ("nrmse", -1.0)):
                add(cand, base, s, metric, sign, "seed_means", None,
                    report.seed_means(cand, s, metric), report.seed_means(base, s, metric))
                add(cand, base, s, metric, sign, "pooled_frames", None,
                    report.values(cand, s, metric), report.values(base, s, metric))
                for seed in seeds:
                    add(cand, base, s, metric, sign, "per_seed", seed,
                        report.values(cand, s, metric, seed), report.values(base, s, metric, seed))
    return tests


def find_test(tests, candidate, baseline, session, metric="ssim", level="seed_means", seed=None):
    for t in tests:
        if (t["candidate"], t["baseline"], t["session"], t["metric"], t["level"], t["seed"]) == \
                (candidate, baseline, session, metric, level, seed):
            return t
    return None


def _csv_text(header, rows, schema=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if schema:
        w.writerow([f"# schema: {schema}"])
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(r[h])) if isinstance(r[h], (float, np.floating)) else r[h] for h in header])
    return buf.getvalue()


def write_tables(out: Path, result: ExperimentResult) -> None:
    rows = result.report.per_frame
    (out / "metrics.csv").write_text(_csv_text(["seed", "mode", "session", "frame", "ssim", "nrmse"], rows,
                                               METRICS_SCHEMA))
    means = []
    for sr in result.seeds:
        keys = sorted({(r["mode"], r["session"]) for r in sr.report.per_frame})
        for mode, s in keys:
            means.append(dict(seed=sr.seed, mode=mode, session=s,
                              ssim=float(sr.report.values(mode, s, "ssim").mean()),
                              nrmse=float(sr.report.values(mode, s, "nrmse").mean())))
    (out / "seed_means.csv").write_text(_csv_text(["seed", "mode", "session", "ssim", "nrmse"], means,
                                                  METRICS_SCHEMA))
    regions = [r for sr in result.seeds for r in sr.regions]
    (out / "regions.csv").write_text(_csv_text(["seed", "mode", "session", "region", "value"], regions))
    dc = [r for sr in result.seeds for r in sr.dc]
    (out / "dc.csv").write_text(_csv_text(["seed", "mode", "session", "fraction"], dc))


def summary_dict(result: ExperimentResult, elapsed: float) -> dict:
    return {
        "experiment": result.config.name,
        "seeds": list(result.config.seeds),
        "modes": list(result.config.modes),
        "noise_sigma": result.seeds[0].noise_sigma if result.seeds else None,
        "metrics": result.report.summary(),
        "tests": result.tests,
        "dc_background_fraction": {
            f"{m}/{s}": float(np.mean(v)) for m, s in sorted({(r["mode"], str(r["session"]))
                                                              for sr in result.seeds for r in sr.dc})
            for v in [[r["fraction"] for sr in result.seeds for r in sr.dc
                       if r["mode"] == m and str(r["session"]) == s]]},
        "reconstructions": [dict(seed=sr.seed, **info) for sr in result.seeds for info in sr.recon_info],
        "elapsed_seconds": round(elapsed, 1),
    }


def summary_text(summary: dict) -> str:
    lines = [f"experiment: {summary['experiment']}", f"seeds: {summary['seeds']}", "",
             f"{'mode':<22}{'session':>8}{'n':>7}{'SSIM':>10}{'NRMSE':>10}"]
    for m in summary["metrics"]:
        lines.append(f"{m['mode']:<22}{m['session']:>8}{m['n']:>7}{m['ssim_mean']:>10.4f}{m['nrmse_mean']:>10.4f}")
    headline = [t for t in summary["tests"] if t["level"] == "seed_means"]
    pooled = [t for t in summary["tests"] if t["level"] == "pooled_frames"]
    for title, group in (("per-seed means", headline), ("pooled frames", pooled)):
        if group:
            lines += ["", f"one-tail paired t-tests, {title} (*: p < 0.05, **: p < 0.01)"]
            for t in group:
                lines.append(f"{t['candidate']} vs {t['baseline']} session {t['session']} {t['metric']}"
                             f" ({t['alternative']}): n={t['n']} t={t['t']:.3f} dof={t['dof']}"
                             f" p={t['p']:.4g} {t['stars']}")
    if summary["dc_background_fraction"]:
        lines += ["", "background energy fraction of the first coefficient map"]
        for k, v in summary["dc_background_fraction"].items():
            lines.append(f"{k}: {v:.4e}")
    return "\n".join(lines) + "\n"


def _seed_job(args):
    cfg, seed, out, want_figs = args
    sr, kept, _ = run_seed(cfg, seed, out, keep_frames=want_figs)
    if want_figs and out is not None:
        with _Stage("figures", seed):
            _write_figures(cfg, seed, out, kept)
    return sr


def run_experiment(cfg: ExperimentConfig, out=None, reference_cache: dict | None = None) -> ExperimentResult:
    """Run all seeds, aggregate metrics and tests, and write the artifact tree when ``out`` is given.

    ``reference_cache`` (a dict) lets several runs share reference reconstructions;
    it is only honoured when seeds run in this process (``workers == 1``).
    """
    t0 = time.perf_counter()
    out = None if out is None else Path(out)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        except OSError as exc:
            raise PipelineError("output", None, exc) from exc
    fig_seeds = set(cfg.seeds[: cfg.figures.seeds]) if cfg.figures.enabled and out is not None else set()
    results = []
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        jobs = [(cfg, s, out, s in fig_seeds) for s in cfg.seeds]
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        for s in cfg.seeds:
            sr, kept, _ = run_seed(cfg, s, out, reference_cache, keep_frames=s in fig_seeds)
            if s in fig_seeds:
                with _Stage("figures", s):
                    _write_figures(cfg, s, out, kept)
            results.append(sr)
    report = MetricsReport()
    for sr in results:
        report.per_frame.extend(sr.report.per_frame)
    tests = comparison_tests(report, set(cfg.modes), cfg.n_sessions)
    report.tests = tests
    result = ExperimentResult(cfg, results, report, tests, out)
    if out is not None:
        with _Stage("summary", None):
            write_tables(out, result)
            summ = summary_dict(result, time.perf_counter() - t0)
            (out / "summary.yaml").write_text(yaml.safe_dump(lra.to_plain(summ), sort_keys=False))
            (out / "summary.txt").write_text(summary_text(summ))
    return result


def read_metrics_csv(path) -> list[dict]:
    """Parse ``metrics.csv`` (or ``seed_means.csv``), checking the schema row."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema:"):
        raise ValueError(f"{path}: missing schema header row")
    schema = lines[0].split(":", 1)[1].strip()
    if schema != METRICS_SCHEMA:
        raise ValueError(f"{path}: unsupported schema {schema!r}")
    rows = list(csv.DictReader(lines[1:]))
    for r in rows:
        for k in ("ssim", "nrmse"):
            r[k] = float(r[k])
        for k in ("seed", "session", "frame"):
            if k in r:
                r[k] = int(r[k])
    return rows


def expected_frame_files(n_frames: int, stride: int) -> int:
    return math.ceil(n_frames / stride) + 1


__all__ = ["ConfigError", "PipelineError", "ExperimentConfig", "SessionConfig", "FigureConfig",
           "config_from_dict", "load_config", "run_experiment", "run_seed", "ExperimentResult",
           "comparison_tests", "find_test", "noise_sigma_for", "region_means", "dc_background_fraction",
           "read_metrics_csv", "MODES", "METRICS_SCHEMA"]
