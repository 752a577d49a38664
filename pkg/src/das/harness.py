"""Monte-Carlo experiment orchestration.

An :class:`ExperimentConfig` names a regime and its parameters. Each trial
draws one problem instance and runs every requested policy on it, so the
policies are compared on paired instances. Per-round medians and
interquartile ranges are aggregated across trials and CSVs are written
atomically.
"""

import csv
import dataclasses
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gaussian, random_access, sparse
from ._utils import InvalidArgument
from .scenario import gen_gaussian_field, gen_query_scene, gen_sparse_scene

REGIMES = ("gaussian", "sparse", "distributed")
REGIME_POLICIES = {
    "gaussian": gaussian.SELECTORS,
    "sparse": sparse.POLICIES,
    "distributed": random_access.POLICIES,
}


class ConfigError(InvalidArgument):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    regime: str
    seed: int
    K: int | None = None
    L: int = 1
    M: int | None = None
    S: int | None = None
    m: int = 10
    rounds: int | None = None
    p_s: float = 0.25
    threshold: float = 0.0
    error_prob: list = field(default_factory=lambda: [0.0])
    mu: float = 0.1
    psi0: float = 0.0
    policy: list = field(default_factory=list)
    trials: int = 1
    workers: int = 1
    out: str | None = None
    emit_plot_data: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_ALIASES = {"T": "rounds", "selector": "policy", "policies": "policy", "error_probs": "error_prob"}


def _is_int(v):
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def parse_config(data):
    """Build and validate a config from a mapping or a JSON string."""
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"not valid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError("<document>", "config must be a JSON object")
    norm = {}
    for k, v in data.items():
        k = _ALIASES.get(k, k)
        if k not in _FIELDS:
            raise ConfigError(k, "unknown field")
        norm[k] = v
    for req in ("regime", "seed"):
        if norm.get(req) is None:
            raise ConfigError(req, "required")
    regime = norm["regime"]
    if regime not in REGIMES:
        raise ConfigError("regime", f"must be one of {REGIMES}, got {regime!r}")
    for name in ("policy", "error_prob"):
        if name in norm and not isinstance(norm[name], (list, tuple)):
            norm[name] = [norm[name]]
        if name in norm:
            norm[name] = list(norm[name])
    cfg = ExperimentConfig(**norm)
    if not cfg.policy:
        cfg.policy = [REGIME_POLICIES[regime][0]]
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    def need_int(name, minimum):
        v = getattr(cfg, name)
        if v is None:
            raise ConfigError(name, f"required for the {cfg.regime} regime")
        if not _is_int(v):
            raise ConfigError(name, f"must be an integer, got {v!r}")
        if v < minimum:
            raise ConfigError(name, f"must be >= {minimum}, got {v}")

    if not _is_int(cfg.seed) or cfg.seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {cfg.seed!r}")
    need_int("trials", 1)
    need_int("workers", 1)
    need_int("K", 1)
    need_int("L", 1)
    need_int("rounds", 0 if cfg.regime != "distributed" else 1)
    allowed = REGIME_POLICIES[cfg.regime]
    for p in cfg.policy:
        if p not in allowed:
            raise ConfigError("policy", f"{p!r} is not one of {allowed}")
    if len(set(cfg.policy)) != len(cfg.policy):
        raise ConfigError("policy", "duplicate entries")
    for e in cfg.error_prob:
        if not _is_num(e) or not 0 <= e <= 1:
            raise ConfigError("error_prob", f"entries must lie in [0, 1], got {e!r}")
    if cfg.regime == "gaussian" and cfg.rounds * cfg.L > cfg.K:
        raise ConfigError("rounds", f"{cfg.rounds} rounds x L={cfg.L} exceeds K={cfg.K}")
    if cfg.regime == "sparse":
        need_int("M", 1)
        need_int("S", 1)
        if cfg.S > cfg.M:
            raise ConfigError("S", f"sparsity {cfg.S} exceeds M={cfg.M}")
        if cfg.M > cfg.K:
            raise ConfigError("M", f"dictionary size {cfg.M} exceeds K={cfg.K}")
        if cfg.rounds > math.ceil(cfg.K / cfg.L):
            raise ConfigError("rounds", f"{cfg.rounds} rounds of L={cfg.L} exceed K={cfg.K}")
    if cfg.regime == "distributed":
        need_int("m", 1)
        if not _is_num(cfg.p_s) or not 0 <= cfg.p_s <= 1:
            raise ConfigError("p_s", f"must lie in [0, 1], got {cfg.p_s!r}")
        if not _is_num(cfg.mu) or not cfg.mu > 0:
            raise ConfigError("mu", f"must be positive, got {cfg.mu!r}")
        if not _is_num(cfg.psi0):
            raise ConfigError("psi0", f"must be a number, got {cfg.psi0!r}")
        if not _is_num(cfg.threshold) or cfg.threshold < 0:
            raise ConfigError("threshold", f"must be >= 0, got {cfg.threshold!r}")
    return cfg


PRESETS = {
    "fig1": dict(regime="gaussian", K=20, L=1, rounds=20, policy=["entropy"], trials=1, seed=1),
    "fig3": dict(regime="sparse", K=64, M=25, S=3, L=5, rounds=4, policy=["DAS", "RRS"],
                 error_prob=[0.0], trials=100, seed=1),
    "fig4": dict(regime="sparse", K=300, M=100, S=10, L=10, rounds=30, policy=["DAS", "RRS"],
                 error_prob=[0.0, 0.1], trials=50, seed=1),
    "fig5": dict(regime="distributed", K=400, L=10, m=10, p_s=0.25, mu=0.1, psi0=0.0, rounds=50,
                 policy=["RA1", "RA2"], trials=50, seed=1),
}


def preset_config(name, **overrides):
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(base)


@dataclass
class Series:
    """All trials of one (policy, error probability) combination.

    ``values`` is trials x rounds: squared error for the centralised and
    sparse regimes, ``||y - y(t)||`` for t = 1..T in the distributed one.
    """

    label: str
    policy: str
    error_prob: float
    values: np.ndarray
    runs: list = field(default_factory=list, repr=False)

    @property
    def median(self):
        return np.median(self.values, axis=0)

    @property
    def q25(self):
        return np.percentile(self.values, 25, axis=0)

    @property
    def q75(self):
        return np.percentile(self.values, 75, axis=0)

    @property
    def final(self):
        return self.values[:, -1]


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    series: dict
    duration_s: float
    paths: list = field(default_factory=list)

    def __getitem__(self, label):
        return self.series[label]


def _series_label(regime, policy, error_prob):
    return f"{policy}@{error_prob:g}" if regime == "sparse" else policy


def _variants(cfg):
    if cfg.regime == "sparse":
        return [(p, float(e)) for p in cfg.policy for e in cfg.error_prob]
    return [(p, 0.0) for p in cfg.policy]


def _run_trial(cfg, trial):
    """Run every variant of ``cfg`` on the instance of ``trial``."""
    key = (trial,)
    if cfg.regime == "gaussian":
        fld = gen_gaussian_field(cfg.K, cfg.seed, key=key)
        runs = [gaussian.run_centralized_das(fld, p, cfg.rounds, cfg.L) for p, _ in _variants(cfg)]
        return fld, runs
    if cfg.regime == "sparse":
        scene = gen_sparse_scene(cfg.K, cfg.M, cfg.S, cfg.seed, key=key)
        runs = [sparse.run_sparse_das(scene, cfg.L, cfg.rounds, p, e, seed=cfg.seed, key=key)
                for p, e in _variants(cfg)]
        return None, runs
    scene = gen_query_scene(cfg.K, cfg.m, cfg.p_s, cfg.seed, key=key, threshold=cfg.threshold)
    runs = [random_access.run_distributed_das(scene, cfg.L, cfg.rounds, p, cfg.mu, cfg.psi0,
                                              seed=cfg.seed, key=key)
            for p, _ in _variants(cfg)]
    return None, runs


def _trajectory_values(regime, run, rounds):
    if regime == "distributed":
        return np.asarray(run.error_norm[1:], dtype=float)
    v = np.asarray(run.mse, dtype=float)
    if v.size < rounds:
        # a run can stop early once every node is collected; the error is then final
        fill = v[-1] if v.size else run.initial_mse
        v = np.concatenate([v, np.full(rounds - v.size, fill)])
    return v


def _check_writable(path):
    d = os.path.dirname(os.path.abspath(path)) or "."
    if not os.path.isdir(d):
        raise OSError(f"output directory {d} does not exist")
    if not os.access(d, os.W_OK):
        raise OSError(f"output directory {d} is not writable")


def atomic_write(path, write):
    """Call ``write(fh)`` on a temp file beside ``path`` and rename it into place."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sibling(path, suffix):
    stem, ext = os.path.splitext(path)
    return f"{stem}_{suffix}{ext or '.csv'}"


def run_experiment(config):
    """Run all trials of ``config`` and aggregate; writes CSVs when ``config.out`` is set."""
    cfg = config if isinstance(config, ExperimentConfig) else parse_config(config)
    validate_config(cfg)
    if cfg.out:
        _check_writable(cfg.out)
    t0 = time.perf_counter()
    trials = range(cfg.trials)
    if cfg.workers > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_trial, [cfg] * cfg.trials, trials))
    else:
        results = [_run_trial(cfg, t) for t in trials]
    series = {}
    for i, (policy, e) in enumerate(_variants(cfg)):
        runs = [r[1][i] for r in results]
        values = np.vstack([_trajectory_values(cfg.regime, r, cfg.rounds) for r in runs]) \
            if cfg.rounds else np.zeros((cfg.trials, 0))
        label = _series_label(cfg.regime, policy, e)
        series[label] = Series(label, policy, e, values, runs)
    report = ExperimentReport(cfg, series, time.perf_counter() - t0)
    if cfg.regime == "gaussian":
        report.paths = [r[0] for r in results]
    if cfg.out:
        write_outputs(report)
    return report


def _write_main(report, fh):
    cfg = report.config
    if cfg.regime == "sparse":
        rows = [(t, run) for s in report.series.values() for t, run in enumerate(s.runs)]
        sparse.write_trajectories_csv(rows, fh)
    elif cfg.regime == "distributed":
        rows = [(t, run) for s in report.series.values() for t, run in enumerate(s.runs)]
        random_access.write_trajectories_csv(rows, fh)
    else:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "selector", "round", "selected_indices", "criterion_value", "mse"])
        for s in report.series.values():
            for t, tr in enumerate(s.runs):
                for r, (picks, crit, mse) in enumerate(zip(tr.rounds, tr.criterion, tr.mse), 1):
                    w.writerow([t, tr.selector, r, ";".join(map(str, picks)),
                                repr(float(crit)), repr(float(mse))])


def write_plot_data(report, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["series", "round", "median", "q25", "q75"])
    for s in report.series.values():
        for r, (md, lo, hi) in enumerate(zip(s.median, s.q25, s.q75), start=1):
            w.writerow([s.label, r, repr(float(md)), repr(float(lo)), repr(float(hi))])


def write_outputs(report):
    cfg = report.config
    atomic_write(cfg.out, lambda fh: _write_main(report, fh))
    written = [cfg.out]
    if cfg.regime == "gaussian" and report.paths:
        first = next(iter(report.series.values()))
        path = _sibling(cfg.out, "path")
        atomic_write(path, lambda fh: gaussian.write_path_csv(first.runs[0], report.paths[0], fh))
        written.append(path)
    if cfg.emit_plot_data:
        path = _sibling(cfg.out, "plot")
        atomic_write(path, lambda fh: write_plot_data(report, fh))
        written.append(path)
    return written


@dataclass
class Comparison:
    median_diff: np.ndarray
    frac_a_le_b: float
    label_a: str = ""
    label_b: str = ""


def _as_series(x):
    if isinstance(x, ExperimentReport):
        if len(x.series) != 1:
            raise InvalidArgument("report holds several series; pass one Series instead")
        return next(iter(x.series.values()))
    return x


def compare_policies(a, b):
    """Per-round median difference (a - b) and the share of trials where a's final value <= b's.

    Ties count for ``a``. Both inputs must cover the same trials and rounds.
    """
    a, b = _as_series(a), _as_series(b)
    if a.values.shape != b.values.shape:
        raise InvalidArgument(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    if a.values.shape[1] == 0:
        raise InvalidArgument("series have no rounds to compare")
    diff = a.median - b.median
    frac = float(np.mean(a.final <= b.final))
    return Comparison(diff, frac, a.label, b.label)
