"""Experiment registry, configuration, CSV emission and the acceptance driver.

Every experiment maps an :class:`ExperimentConfig` to a list of
:class:`ResultRow`. Each row carries its own pass rule (``abs``: |estimate -
oracle| <= tolerance; ``le`` / ``ge`` / ``gt``: one-sided against oracle with
slack ``tolerance``), so a CSV row can be re-judged without the code.

Random streams are fixed per experiment (see ``STREAMS``); paths inside an
experiment take consecutive per-path streams, so results do not depend on
the worker count or on which experiments ran before.
"""

from __future__ import annotations

import csv
import math
import os
import sys
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import kernels as K
from .decomposition import extract_lambda, lambda_support_stats, ndec_factor_check, singularity_proxy
from .measures import McEstimate, density_identity_check, mass_loss, survival_q
from .models import (
    BUILTIN_START,
    HarmonicReciprocalModel,
    check_harmonic,
    embedded_bessel4,
    inverse_bessel3,
    inverse_distance,
    model_from_label,
    superpose,
)
from .stochastics import (
    QEnsemble,
    RngStream,
    SamplePath,
    TimeGrid,
    resolve_workers,
    sample_brownian_path,
    simulate_q_ensemble,
    simulate_q_path,
)

CSV_HEADER = ("experiment", "param", "t", "estimate", "stderr", "oracle", "tolerance", "pass", "seconds")
RULES = ("abs", "le", "ge", "gt")
MODEL_LABELS = ("inverse-bessel3", "embedded-bessel4")

# one fixed stream id per consumer; experiments sharing an id share paths
STREAMS = {
    "mass-loss": 1,
    "q-ensemble": 2,
    "survival-p": 3,
    "ito-tanaka": 4,
    "lambda-support": 5,
    "ndec-factor": 6,
    "superpose-gradient": 7,
    "harmonicity": 8,
    "lbm1": 100,  # plus one per time
}


class ConfigError(ValueError):
    """Invalid configuration or usage (CLI exit code 2)."""


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment run.

    ``t_values`` and ``n_paths`` left as ``None`` take the experiment's own
    defaults (most experiments use 10^5 paths). ``workers`` left as ``None``
    falls back to ``FOLLMER_LAB_WORKERS`` and then the CPU count; the
    environment variable, when set, overrides this field.
    """

    experiment_name: str
    model_label: str = "inverse-bessel3"
    alpha: Optional[Tuple[float, float]] = None
    t_values: Optional[Tuple[float, ...]] = None
    n_paths: Optional[int] = None
    n_steps_per_unit_time: int = 10_000
    explosion_threshold: float = 1e-3
    epsilon_support: float = 0.05
    seed: int = 42
    workers: Optional[int] = None
    output_path: str = "results.csv"

    def __post_init__(self):
        if self.experiment_name not in REGISTRY:
            raise ConfigError(f"unknown experiment {self.experiment_name!r}; see 'follmer-lab list'")
        if self.model_label not in MODEL_LABELS:
            raise ConfigError(f"model_label must be one of {', '.join(MODEL_LABELS)}")
        if self.alpha is not None:
            a = tuple(float(v) for v in self.alpha)
            if len(a) != 2 or not all(math.isfinite(v) for v in a):
                raise ConfigError("alpha must be a pair of finite reals")
            object.__setattr__(self, "alpha", a)
        if self.t_values is not None:
            ts = tuple(float(v) for v in self.t_values)
            if not ts or not all(math.isfinite(v) and v > 0 for v in ts):
                raise ConfigError("t_values must be a nonempty list of positive times")
            object.__setattr__(self, "t_values", ts)
        if self.n_paths is not None and not (_is_int(self.n_paths) and 2 <= self.n_paths < 2**32):
            raise ConfigError("n_paths must be an integer in [2, 2**32)")
        if not (_is_int(self.n_steps_per_unit_time) and self.n_steps_per_unit_time >= 1):
            raise ConfigError("n_steps_per_unit_time must be a positive integer")
        if not (math.isfinite(self.explosion_threshold) and 0 < self.explosion_threshold < 1):
            raise ConfigError("explosion_threshold must lie in (0, 1)")
        if not (math.isfinite(self.epsilon_support) and self.epsilon_support > 0):
            raise ConfigError("epsilon_support must be positive")
        if not (_is_int(self.seed) and 0 <= self.seed < 2**64):
            raise ConfigError("seed must be an integer in [0, 2**64)")
        if self.workers is not None and not (_is_int(self.workers) and self.workers >= 1):
            raise ConfigError("workers must be a positive integer")
        if not isinstance(self.output_path, str) or not self.output_path:
            raise ConfigError("output_path must be a nonempty path")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps_per_unit_time

    @property
    def experiment(self) -> "Experiment":
        return REGISTRY[self.experiment_name]

    def paths(self) -> int:
        return self.experiment.default_paths if self.n_paths is None else self.n_paths

    def times(self) -> Tuple[float, ...]:
        return self.experiment.default_times if self.t_values is None else self.t_values

    def alphas(self) -> Tuple[float, float]:
        return (1.0, 1.0) if self.alpha is None else self.alpha

    def resolved_workers(self) -> int:
        env = os.environ.get("FOLLMER_LAB_WORKERS")
        if env:
            try:
                return resolve_workers(int(env))
            except ValueError as exc:
                raise ConfigError(f"FOLLMER_LAB_WORKERS: {exc}") from None
        return resolve_workers(self.workers)

    def model(self) -> HarmonicReciprocalModel:
        return model_from_label(self.model_label, self.alphas())

    def start(self) -> np.ndarray:
        return np.asarray(BUILTIN_START[self.model_label], dtype=float)

    def rng(self, consumer: str, index: int = 0) -> RngStream:
        """Stream ``index`` of a consumer; indices are spaced far apart from the base ids."""
        return RngStream(self.seed, STREAMS[consumer] + (index << 16))


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        v = float(text)  # accepts 1e5
        if not v.is_integer():
            raise
        return int(v)


def _parse_floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


_PARSERS: Dict[str, Callable[[str], object]] = {
    "experiment_name": str,
    "model_label": str,
    "alpha": _parse_floats,
    "t_values": _parse_floats,
    "n_paths": _parse_int,
    "n_steps_per_unit_time": _parse_int,
    "explosion_threshold": float,
    "epsilon_support": float,
    "seed": _parse_int,
    "workers": _parse_int,
    "output_path": str,
}
CONFIG_KEYS = tuple(_PARSERS)


def parse_values(raw: Mapping[str, str]) -> Dict[str, object]:
    """Typed config values from strings; the empty string or ``default`` means unset."""
    out = {}
    for key, text in raw.items():
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        text = str(text).strip()
        if text in ("", "default"):
            continue
        try:
            out[key] = _PARSERS[key](text)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {text!r}") from None
    return out


def read_config_file(path: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    raw = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key.replace("-", "_")] = value
    return raw


def make_config(experiment_name: str, overrides: Optional[Mapping[str, object]] = None) -> ExperimentConfig:
    values = dict(overrides or {})
    values.pop("experiment_name", None)
    try:
        return ExperimentConfig(experiment_name=experiment_name, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --- results -------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    param: str
    t: Optional[float]
    estimate: float
    stderr: Optional[float]
    oracle: Optional[float]
    tolerance: float
    rule: str = "abs"
    seconds: float = 0.0
    passed: bool = field(init=False)

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        object.__setattr__(self, "passed", judge(self.rule, self.estimate, self.oracle, self.tolerance))

    def csv_fields(self) -> List[str]:
        return [
            self.experiment, self.param, _fmt(self.t), _fmt(self.estimate), _fmt(self.stderr),
            _fmt(self.oracle), _fmt(self.tolerance), "true" if self.passed else "false", f"{self.seconds:.3f}",
        ]


def judge(rule: str, estimate: float, oracle: Optional[float], tolerance: float) -> bool:
    ref = 0.0 if oracle is None else oracle
    if math.isnan(estimate) or math.isnan(ref):
        return False
    if rule == "abs":
        return abs(estimate - ref) <= tolerance
    if rule == "le":
        return estimate <= ref + tolerance
    if rule == "ge":
        return estimate >= ref - tolerance
    return estimate > ref + tolerance


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_rows(path: str, rows: Sequence[ResultRow]):
    """Append rows, writing the header first if the file is new or empty."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())


def _check_writable(path: str):
    try:
        with open(path, "a", encoding="utf-8"):
            pass
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from None


class _Rows:
    """Row collector that stamps experiment name and wall time."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.items: List[dict] = []

    def add(self, param, estimate, oracle=None, tolerance=0.0, rule="abs", t=None, stderr=None):
        self.items.append(dict(param=param, t=t, estimate=float(estimate), stderr=stderr,
                               oracle=None if oracle is None else float(oracle), tolerance=float(tolerance), rule=rule))

    def mc(self, param, est: McEstimate, oracle, k=3.0, allowance=0.0, t=None, other: Optional[McEstimate] = None):
        se = est.stderr if other is None else est.combined_stderr(other)
        self.add(param, est.mean, oracle, k * se + allowance, "abs", t, est.stderr)

    def finish(self, seconds: float) -> List[ResultRow]:
        return [ResultRow(self.cfg.experiment_name, seconds=seconds, **it) for it in self.items]


# --- shared Q ensembles ----------------------------------------------------------

_ENSEMBLES: "OrderedDict[tuple, QEnsemble]" = OrderedDict()
_ENSEMBLE_CACHE_SIZE = 2


def clear_cache():
    _ENSEMBLES.clear()


def q_ensemble(cfg: ExperimentConfig, times: Sequence[float]) -> QEnsemble:
    """The configured Q ensemble recorded at (at least) ``times``.

    Runs that differ only in their record times reuse one simulation: a
    path's state at t does not depend on how far the simulation runs.
    """
    n = cfg.paths()
    key = (cfg.model_label, cfg.alphas(), n, cfg.seed, cfg.n_steps_per_unit_time, cfg.explosion_threshold)
    for (k, rec), ens in _ENSEMBLES.items():
        if k == key and all(np.any(np.isclose(ens.record_times, t, rtol=0, atol=1e-12)) for t in times):
            return ens
    ens = simulate_q_ensemble(
        cfg.model(), cfg.start(), sorted(set(times)), n, cfg.rng("q-ensemble"), cfg.dt,
        cfg.explosion_threshold, workers=cfg.resolved_workers(),
    )
    _ENSEMBLES[(key, tuple(ens.record_times))] = ens
    while len(_ENSEMBLES) > _ENSEMBLE_CACHE_SIZE:
        _ENSEMBLES.popitem(last=False)
    return ens


def _hit_oracle(t: float) -> float:
    """Q(tau <= t) for the Bessel models: 1 - E^P[N_t]."""
    return 1.0 - K.bessel3_inverse_mean(t)


# --- experiments -----------------------------------------------------------------


def exp_mass_loss(cfg: ExperimentConfig, rows: _Rows):
    model, n, w = cfg.model(), cfg.paths(), cfg.resolved_workers()
    est = None
    for j, t in enumerate(cfg.times()):
        est = mass_loss(model, cfg.start(), t, n, cfg.rng("mass-loss", j), w)
        rows.mc("E[N_t]", est, K.bessel3_inverse_mean(t), t=t)
    # strictness at the last time: the shortfall from 1 in units of stderr
    t = cfg.times()[-1]
    rows.add("(1-E[N_t])/stderr", (1.0 - est.mean) / est.stderr, 10.0, 0.0, "gt", t)


def exp_survival_q(cfg: ExperimentConfig, rows: _Rows):
    model, n, w = cfg.model(), cfg.paths(), cfg.resolved_workers()
    ens = q_ensemble(cfg, cfg.times())
    for j, t in enumerate(cfg.times()):
        q = survival_q(model, cfg.start(), t, n, None, ensemble=ens)
        p = mass_loss(model, cfg.start(), t, n, cfg.rng("survival-p", j), w)
        rows.mc("Q(tau>t) vs E^P[N_t]", q, p.mean, allowance=0.01, t=t, other=p)


def exp_density_check(cfg: ExperimentConfig, rows: _Rows):
    model, n = cfg.model(), cfg.paths()
    ens = q_ensemble(cfg, cfg.times())
    for t in cfg.times():
        for c, allowance in ((1.0, 0.01), (3.0, 0.005), (-10.0, 0.01)):
            lhs, rhs = density_identity_check(model, cfg.start(), t, c, n, None, ensemble=ens)
            rows.mc(f"c={c:g}", lhs, rhs.mean, allowance=allowance, t=t)


def exp_ito_tanaka(cfg: ExperimentConfig, rows: _Rows):
    """Median |residual| on one fine grid and its 10x and 100x subsamples."""
    from .decomposition import ito_tanaka_residual

    t = max(cfg.times())
    fine = TimeGrid.from_step(t, cfg.dt)
    factors = [f for f in (100, 10, 1) if fine.n_steps % f == 0 and fine.n_steps // f >= 1]
    rng = cfg.rng("ito-tanaka")
    n = cfg.paths()
    res = np.empty((len(factors), n))
    for i in range(n):
        path = sample_brownian_path(1.0, fine, rng.path_stream(i))
        for j, f in enumerate(factors):
            sub = SamplePath(TimeGrid(0.0, t, fine.n_steps // f), path.states[::f])
            res[j, i] = abs(ito_tanaka_residual(sub, strict=False)[-1])
    med = np.median(res, axis=1)
    for j, f in enumerate(factors):
        dt = t / (fine.n_steps // f)
        if j + 1 < len(factors):
            # convergence: coarser grid has the strictly larger median
            rows.add(f"median|resid| dt={dt:g} > next", med[j], med[j + 1], 0.0, "gt", t)
        else:
            rows.add(f"median|resid| dt={dt:g}", med[j], 0.05, 0.0, "le", t)


def exp_lambda_support(cfg: ExperimentConfig, rows: _Rows):
    """Where Lambda charges on exploding Q-paths of X = Y1, up to explosion."""
    t = max(cfg.times())
    model, n, eps = cfg.model(), cfg.paths(), cfg.epsilon_support
    grid = TimeGrid.from_step(t, cfg.dt)
    rng = cfg.rng("lambda-support")
    epsilons = (eps, eps / 2, eps / 4)
    support, proxy, mass = [], [], []
    for i in range(n):
        x = simulate_q_path(model, cfg.start(), grid, rng.path_stream(i), cfg.explosion_threshold).component(0)
        if x.stop_index is None:
            continue
        rec = extract_lambda(x)
        support.append(lambda_support_stats(rec, x, eps))
        sp = [singularity_proxy(rec, x, e) for e in epsilons]
        proxy.append([p.time_fraction for p in sp])
        if rec.lambda_[x.stop_index] > 0:
            mass.append(sp[0].mass_fraction)
    if len(support) < 2 or len(mass) < 2:
        rows.add(f"exploding paths of {n}", len(support), 2, 0.0, "ge", t)
        return
    support, proxy, mass = np.asarray(support), np.asarray(proxy), np.asarray(mass)
    se = lambda a: float(a.std(axis=0, ddof=1) / math.sqrt(len(a)))
    rows.add(f"far-mass fraction eps={eps:g}", support.mean(), 0.05, 0.0, "le", t, se(support))
    rows.add(f"band mass fraction eps={eps:g}", mass.mean(), 0.95, 0.0, "ge", t, se(mass))
    pm = proxy.mean(axis=0)
    for j, e in enumerate(epsilons):
        rows.add(f"band time fraction eps={e:g}", pm[j], 0.1, 0.0, "le", t, se(proxy[:, j]))
    rows.add("band time fraction decrease (min over eps halvings)", float(np.min(-np.diff(pm))), 0.0, 0.0, "gt", t)


def exp_compensator(cfg: ExperimentConfig, rows: _Rows):
    ens = q_ensemble(cfg, cfg.times())
    th = ens.explosion_threshold
    hits, lams = [], []
    for t in sorted(cfg.times()):
        hit = McEstimate.from_samples(ens.exploded_by(t), measure=_q(), explosion_threshold=th)
        lam = McEstimate.from_samples(ens.lam[:, ens.column(t)], measure=_q(), explosion_threshold=th)
        rows.mc("Q(tau<=t)", hit, _hit_oracle(t), allowance=0.01, t=t)
        rows.mc("E[Lambda_(t^tau)] vs Q(tau<=t)", lam, hit.mean, allowance=0.03, t=t, other=hit)
        hits.append(hit.mean)
        lams.append(lam.mean)
    if len(hits) > 1:
        rows.add("Q(tau<=t) nondecreasing in t", float(np.min(np.diff(hits))), 0.0, 0.0, "ge")
        rows.add("E[Lambda] nondecreasing in t", float(np.min(np.diff(lams))), 0.0, 0.0, "ge")


def _q():
    from .measures import MeasureTag

    return MeasureTag.Q


def exp_lbm1(cfg: ExperimentConfig, rows: _Rows):
    """E[|grad ln h| / h (Y_t)] against the BES(3) quadrature oracle E[1/R_t^2].

    The Monte Carlo variance is infinite, so agreement uses 3 stderr plus
    5% of the oracle.
    """
    times = cfg.times()
    ests = K.check_lbm1(cfg.model(), times, cfg.paths(), cfg.rng("lbm1"), cfg.start(), cfg.resolved_workers())
    for t, est in zip(times, ests):
        o = K.bessel3_inverse_square_mean(t)
        rows.mc("E[|grad ln h|/h]", est, o, allowance=0.05 * o, t=t)
    # local boundedness: sup over a dense log grid of the oracle stays finite
    grid = np.geomspace(1e-4, 1e2, 61)
    sup = max(K.bessel3_inverse_square_mean(t) for t in grid)
    rows.add("sup_t E[1/R_t^2] on [1e-4, 100]", sup, 2.0, 0.0, "le")


def exp_lbm2(cfg: ExperimentConfig, rows: _Rows):
    t = 1.0
    xs = np.linspace(-3, 3, 61)
    f1 = np.array([K.f_example1(t, x) for x in xs])
    closed = np.array([K.f_example1_closed(t, x) for x in xs])
    rows.add("example1 max_x F(1,x)", f1.max(), 1.0, 0.0, "le", t)
    rows.add("example1 quadrature vs closed form", float(np.max(np.abs(f1 - closed))), 0.0, 1e-8, "abs", t)

    alpha = cfg.alphas()
    g = np.linspace(-3, 3, 13)
    excess = np.empty((2, g.size, g.size))
    on_d0 = np.zeros((g.size, g.size), dtype=bool)
    for a, x1 in enumerate(g):
        for b, x2 in enumerate(g):
            x = np.array([x1, x2])
            on_d0[a, b] = abs(x1 * alpha[1] - x2 * alpha[0]) < 1e-12
            vals = K.f_example2(t, x, alpha)
            for i in (0, 1):
                excess[i, a, b] = vals[i] - K.example2_bound(alpha, x, i + 1)
    for i in (0, 1):
        rows.add(f"example2 max(F{i + 1} - bound) on grid", excess[i].max(), 0.0, 1e-8, "le", t)
        off = excess[i][~on_d0]
        rows.add(f"example2 max(F{i + 1} - bound) off D0", off.max(), 0.0, 1e-8, "le", t)
    rows.add("example2 grid points on D0", int(on_d0.sum()), 0.0, 0.0, "ge", t)


def exp_counterexample(cfg: ExperimentConfig, rows: _Rows):
    t = 1.0
    for k in (1, 2, 3):
        x = np.array([10.0**-k, 0.0])
        rows.add(f"F1 at x1=1e-{k} vs lower bound", K.f_counterexample(t, x)[0],
                 K.counterexample_lower_bound(x, 1), 0.0, "ge", t)
    ref = [(t, 10.0**-k, 0.0) for k in range(1, 7)]
    rep = K.check_lbm2(K.f_counterexample, [(t, 0.5, 0.5)], ceiling=1e4, refinement=ref)
    rows.add("flagged unbounded toward the origin", float(rep.unbounded), 1.0, 0.0, "abs", t)


_SCALING_X1 = (-1.5, 0.3, 1.0, 2.5)
_SCALING_X2 = ((1.5, 0.5), (-0.7, 1.2), (0.4, -2.0), (2.2, 1.9))


def exp_scaling(cfg: ExperimentConfig, rows: _Rows):
    alpha = cfg.alphas()
    f2 = lambda t, x: K.f_example2(t, x, alpha)
    for t in cfg.times():
        for x in _SCALING_X1:
            r = K.check_scaling(K.f_example1, t, x)
            rows.add(f"example1 x={x:g}", r, 0.0, 1e-8 * (1 + abs(K.f_example1(t, x))), "abs", t)
        for x in _SCALING_X2:
            r = K.check_scaling(f2, t, x)
            f = max(abs(v) for v in f2(t, np.asarray(x)))
            rows.add(f"example2 x=({x[0]:g} {x[1]:g})", r, 0.0, 1e-8 * (1 + f), "abs", t)


def _superposition_models():
    """Two superpositions of rank-3 inverse-distance terms (the harmonic ones)."""
    c = RngStream(0, 0).normals(9).reshape(3, 3)  # fixed geometry, independent of the run seed
    parts3 = [inverse_distance(c[0], weight=1.0), inverse_distance(c[1], weight=0.5), inverse_distance(c[2], weight=2.0)]
    u = np.array([1.0, 1.0, 0.0, 1.0]) / math.sqrt(3.0)
    parts4 = [embedded_bessel4(1.0, 1.0),
              inverse_distance(np.array([0.0, 2.0, 0.0, 1.0]), np.eye(4) - np.outer(u, u), weight=0.7)]
    return [(parts3, superpose(parts3, "three-term R3")), (parts4, superpose(parts4, "two-term R4"))]


def _callable_only(model: HarmonicReciprocalModel) -> HarmonicReciprocalModel:
    return HarmonicReciprocalModel(model.dimension, model.h, model.grad_ln_h, model.zero_set_distance, model.label)


def _random_points(rng: RngStream, model: HarmonicReciprocalModel, n: int, min_dist: float) -> np.ndarray:
    pts, block = [], 0
    while len(pts) < n:
        z = 2.0 * rng.path_stream(block).normals(64 * model.dimension)
        block += 1
        for y in z.reshape(-1, model.dimension):
            if model.zero_set_distance(y) >= min_dist and len(pts) < n:
                pts.append(y)
    return np.array(pts)


def exp_superpose_gradient(cfg: ExperimentConfig, rows: _Rows):
    n = 100
    for j, (parts, model) in enumerate(_superposition_models()):
        pts = _random_points(cfg.rng("superpose-gradient", j), model, n, 0.2)
        fallback = superpose([_callable_only(p) for p in parts])
        g_terms = model.grad_ln_h(pts)
        g_ident = fallback.grad_ln_h(pts)
        scale = np.maximum(1.0, np.abs(g_terms))
        rows.add(f"{model.label}: identity residual (relative)", float(np.max(np.abs(g_terms - g_ident) / scale)),
                 0.0, 1e-13, "abs")
        step = 1e-4
        fd = np.empty_like(pts)
        for k in range(model.dimension):
            e = np.zeros(model.dimension)
            e[k] = step
            fd[:, k] = (np.log(model.h(pts + e)) - np.log(model.h(pts - e))) / (2 * step)
        rows.add(f"{model.label}: finite-difference agreement", float(np.max(np.abs(fd - g_terms))), 0.0, 1e-5, "abs")


def exp_harmonicity(cfg: ExperimentConfig, rows: _Rows):
    models = [inverse_bessel3(), embedded_bessel4(*cfg.alphas())]
    for parts, m in _superposition_models():
        models += [m, superpose([_callable_only(p) for p in parts], m.label + " (callable)")]
    for j, m in enumerate(models):
        pts = _random_points(cfg.rng("harmonicity", j), m, 20, 0.5)
        worst = max(abs(check_harmonic(m, y)) for y in pts)
        rows.add(f"{m.label}: max |Laplacian of 1/h|", worst, 0.0, 1e-4, "abs")
    # control: h = |y|^2, so 1/h has Laplacian 2/|y|^4, which the check must see
    ctrl = HarmonicReciprocalModel(
        3, lambda y: np.sum(np.asarray(y) ** 2, axis=-1),
        lambda y: 2.0 * np.asarray(y) / np.sum(np.asarray(y) ** 2, axis=-1)[..., None],
        lambda y: np.linalg.norm(y, axis=-1), "control |y|^2",
    )
    rows.add("control h=|y|^2: Laplacian of 1/h at (1,0,0)", check_harmonic(ctrl, np.array([1.0, 0.0, 0.0])),
             2.0, 1e-4, "abs")


def exp_ndec_factor(cfg: ExperimentConfig, rows: _Rows):
    for t in cfg.times():
        est = ndec_factor_check(t, cfg.paths(), cfg.rng("ndec-factor"), cfg.dt, cfg.resolved_workers())
        rows.mc("E[exp(Lambda_t) u(t,X_t)]", est, 1.0, allowance=0.02, t=t)


_COND_ALPHAS = (-2.0, -0.5, 0.5, 1.0, 3.0)
_COND_X = ((4.0, 0.0), (-1.0, 2.5), (0.3, -0.7), (2.0, 2.0))


def exp_conditioning(cfg: ExperimentConfig, rows: _Rows):
    """Projection-based conditioning against a Schur-complement oracle and closed forms."""
    start = np.array([1.0, 0.0, 0.0, 0.0])
    for t in cfg.times():
        err_var = err_mu1 = err_schur = 0.0
        offset = []
        for a1 in _COND_ALPHAS:
            for a2 in _COND_ALPHAS:
                sh = K.example2_shrinkage(a1, a2)
                den = 1 + a1 * a1 + a2 * a2
                for x1, x2 in _COND_X:
                    obs = sh.embed((x1, x2))
                    cg = K.gaussian_condition(sh, start, t, obs)
                    m_s, c_s = K.schur_condition(start, t * np.eye(4), sh.matrix[:2], (x1, x2))
                    err_schur = max(err_schur, np.max(np.abs(cg.cond_mean - m_s)), np.max(np.abs(cg.cond_cov - c_s)))
                    var = np.array([a1 * a1, a2 * a2]) * t / den
                    err_var = max(err_var, np.max(np.abs(np.diag(cg.cond_cov)[:2] - var)))
                    mu1 = 1 + ((1 + a2 * a2) * (x1 - 1) - a1 * a2 * x2) / den
                    err_mu1 = max(err_mu1, abs(cg.cond_mean[0] - mu1))
                    shown = 1 + ((a1 * a1 + 1) * x2 - a1 * a2 * (x1 - 1)) / den
                    offset.append(shown - m_s[1])
        rows.add("max |mean,cov - Schur oracle|", err_schur, 0.0, 1e-12, "abs", t)
        rows.add("max |sigma_i^2 - t a_i^2/(1+a1^2+a2^2)|", err_var, 0.0, 1e-12, "abs", t)
        rows.add("max |mu1 - closed form|", err_mu1, 0.0, 1e-12, "abs", t)
        # the '1 +' form of mu2 is off from the oracle by exactly one everywhere
        rows.add("max |(unit-offset mu2 - oracle mu2) - 1|", float(np.max(np.abs(np.array(offset) - 1))),
                 0.0, 1e-12, "abs", t)


# --- registry ---------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    runner: Callable[[ExperimentConfig, _Rows], None]
    default_times: Tuple[float, ...] = (1.0,)
    default_paths: int = 100_000


REGISTRY: "OrderedDict[str, Experiment]" = OrderedDict(
    (e.name, e)
    for e in (
        Experiment("mass-loss", "E^P[N_t] against 2 Phi(1/sqrt t) - 1, and its shortfall from 1",
                   exp_mass_loss, (1.0,), 1_000_000),
        Experiment("survival-q", "Q(tau > t) from stopped Q-paths against E^P[N_t]",
                   exp_survival_q, (0.25, 1.0, 4.0)),
        Experiment("density-check", "E^Q[M_t; Y1_t > c] against P(Y1_t > c)", exp_density_check, (1.0,)),
        Experiment("ito-tanaka", "pathwise residual of the projected process and its decay in dt",
                   exp_ito_tanaka, (1.0,), 1_000),
        Experiment("lambda-support", "Lambda charges only near X = 0 on a set of small time",
                   exp_lambda_support, (1.0,), 1_000),
        Experiment("compensator", "E^Q[Lambda_(t^tau)] against Q(tau <= t)", exp_compensator, (0.25, 1.0, 4.0)),
        Experiment("lbm1", "E[|grad ln h| / h (Y_t)] against the BES(3) oracle; local boundedness in t",
                   exp_lbm1, (1e-4, 0.01, 0.25, 1.0, 4.0)),
        Experiment("lbm2", "conditional functionals of both examples against their stated bounds", exp_lbm2),
        Experiment("scaling", "F(t, x) = F(1, x / sqrt t) / t for both examples",
                   exp_scaling, (0.25, 0.5, 1.0, 2.0, 4.0)),
        Experiment("superpose-gradient", "gradient identity for superposed models, exact and by differences",
                   exp_superpose_gradient),
        Experiment("harmonicity", "Laplacian of 1/h for built-in and superposed models", exp_harmonicity),
        Experiment("counterexample", "zero-alpha map: F1 above its lower bound and unbounded at 0",
                   exp_counterexample),
        Experiment("ndec-factor", "E[exp(Lambda_t) u(t, X_t)] = 1 on Brownian paths", exp_ndec_factor),
        Experiment("conditioning", "Gaussian conditioning of the second example against a Schur oracle",
                   exp_conditioning),
    )
)


# --- drivers ------------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, write: bool = True) -> List[ResultRow]:
    """Run one experiment; append its rows to ``config.output_path`` when ``write``."""
    if write:
        _check_writable(config.output_path)
    config.resolved_workers()
    rows = _Rows(config)
    t0 = time.perf_counter()
    config.experiment.runner(config, rows)
    out = rows.finish(time.perf_counter() - t0)
    if write:
        write_rows(config.output_path, out)
    return out


@dataclass(frozen=True)
class RunSummary:
    rows: Tuple[ResultRow, ...]
    errors: Tuple[Tuple[str, str], ...]

    @property
    def passed(self) -> bool:
        return not self.errors and all(r.passed for r in self.rows)

    def table(self) -> str:
        lines = [f"{'experiment':<20} {'rows':>5} {'failed':>6}  status"]
        errs = dict(self.errors)
        for name in REGISTRY:
            rs = [r for r in self.rows if r.experiment == name]
            if not rs and name not in errs:
                continue
            bad = sum(not r.passed for r in rs)
            status = "ERROR " + errs[name] if name in errs else ("FAIL" if bad else "pass")
            lines.append(f"{name:<20} {len(rs):>5} {bad:>6}  {status}")
        lines.append("ALL PASS" if self.passed else "SOME CHECKS FAILED")
        return "\n".join(lines)


def run_all(overrides: Optional[Mapping[str, object]] = None, experiments: Optional[Sequence[str]] = None,
            out=sys.stdout) -> RunSummary:
    """Run the registry in order, collecting errors instead of stopping."""
    names = list(REGISTRY) if experiments is None else list(experiments)
    configs = [make_config(name, overrides) for name in names]  # validate everything up front
    if configs:
        _check_writable(configs[0].output_path)
    rows, errors = [], []
    for cfg in configs:
        try:
            rows += run_experiment(cfg)
        except Exception as exc:  # reported per experiment, the suite goes on
            errors.append((cfg.experiment_name, f"{type(exc).__name__}: {exc}"))
    summary = RunSummary(tuple(rows), tuple(errors))
    if out is not None:
        print(summary.table(), file=out)
    return summary
