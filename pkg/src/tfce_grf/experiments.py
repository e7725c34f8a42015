"""Monte Carlo protocols on synthetic phantoms, with JSON/CSV reports.

Each protocol maps a realisation index ``r`` to a phantom seeded with
``seed + r``, computes per-realisation rows, and summarises them.  Rows are
sorted by realisation index, so serial and process-pool runs give identical
reports apart from timings.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import grf, infer, perm, sim
from ._validation import check_scalar
from .errors import NonPositiveMap, UnknownExperiment

SCHEMA_VERSION = 1
EXPERIMENTS = ("null_fwer", "power", "bench", "smoothness", "concordance", "grid_convergence")
GRID_LADDER = (25, 50, 100, 200, 500, 1000, 2000)


@dataclass(frozen=True)
class ExperimentConfig:
    """Protocol id and scale settings; ``None`` fields take per-protocol defaults."""

    experiment: str = "null_fwer"
    realisations: int | None = None
    dims: int = 64
    subjects: int = 80
    sigma: float = 1.5
    amplitude: float | None = None
    amplitudes: tuple = sim.AMPLITUDE_LADDER
    seed: int = 0
    alpha: float = 0.05
    pipelines: tuple = ("baseline", "hybrid")
    n_levels_baseline: int = 100
    n_levels_hybrid: int = 500
    grid_levels: tuple = GRID_LADDER
    reference_levels: int = 5000
    B: int = 200
    repeats: int = 5
    threads: int = 1
    cache_dir: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise UnknownExperiment(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("dims", "subjects", "seed", "B", "repeats", "threads"):
            check_scalar(getattr(self, name), name, lo=0 if name == "seed" else 1, integer=True)
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        object.__setattr__(self, "pipelines", tuple(self.pipelines))
        object.__setattr__(self, "grid_levels", tuple(int(n) for n in self.grid_levels))

    @property
    def n_realisations(self) -> int:
        if self.realisations is not None:
            return int(self.realisations)
        return {"null_fwer": 200, "power": 50, "bench": 1, "smoothness": 50,
                "concordance": 5, "grid_convergence": 3}[self.experiment]

    @property
    def signal_amplitude(self) -> float:
        if self.amplitude is not None:
            return float(self.amplitude)
        return 0.0 if self.experiment in ("null_fwer", "smoothness") else 0.5

    def phantom(self, r: int, amplitude: float | None = None) -> sim.PhantomSpec:
        a = self.signal_amplitude if amplitude is None else amplitude
        return sim.PhantomSpec(dims=(self.dims,) * 3, n_subjects=self.subjects,
                               noise_sigma=self.sigma, amplitude=a, seed=self.seed + r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["realisations"] = self.n_realisations
        d["amplitude"] = self.signal_amplitude
        return d


def _config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config
    if isinstance(config, str):
        return ExperimentConfig(experiment=config)
    config = dict(config)
    if "id" in config:
        config["experiment"] = config.pop("id")
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(config) - known
    if extra:
        raise ValueError(f"unknown experiment settings: {sorted(extra)}")
    return ExperimentConfig(**config)


# ---------------------------------------------------------------------------
# shared per-realisation steps

@dataclass
class _Realisation:
    mask: np.ndarray
    truth: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    params: grf.GrfParams
    n_subjects: int
    stack: object = field(default=None, repr=False)

    def zmap(self, amplitude: float = 0.0) -> np.ndarray:
        # signal is constant across subjects: it shifts the mean only
        z = sim.moments_to_z(self.mean + amplitude * self.truth, self.sd, self.n_subjects)
        z[~self.mask] = 0.0
        return z


def _realise(cfg: ExperimentConfig, r: int, keep_stack=False) -> _Realisation:
    spec = cfg.phantom(r, amplitude=0.0)
    stack, truth = sim.generate_phantom(spec)
    mask = spec.mask()
    params = grf.estimate_smoothness(stack, mask)
    data = stack.data
    return _Realisation(mask, truth.included, data.mean(axis=0), data.std(axis=0, ddof=1),
                        params, spec.n_subjects, stack if keep_stack else None)


def _enhance(pipeline, z, mask, params, n_levels, cache_dir):
    run = infer.PIPELINES[pipeline]
    try:
        return run(z, mask, params, n_levels, cache_dir=cache_dir)
    except NonPositiveMap:
        return None


def _levels(cfg, pipeline):
    return cfg.n_levels_baseline if pipeline == "baseline" else cfg.n_levels_hybrid


def _floored(em):
    # z_enh below 0 means p_enh > 1/2, i.e. no evidence; the -8.2 floor for
    # p_enh = 1 would otherwise dominate correlations between grids
    return np.maximum(em.z_enh, 0.0)


# ---------------------------------------------------------------------------
# per-realisation protocols (top level so process pools can pickle them)

def _row_null(cfg, r):
    rz = _realise(cfg, r)
    z = rz.zmap(cfg.signal_amplitude)
    row = {"realisation": r, "seed": cfg.seed + r, "fwhm": list(rz.params.fwhm_vox),
           "z_max": float(z[rz.mask].max())}
    n = int(rz.mask.sum())
    for pl in cfg.pipelines:
        em = _enhance(pl, z, rz.mask, rz.params, _levels(cfg, pl), cfg.cache_dir)
        p = np.ones(n) if em is None else em.p_enh[rz.mask]
        row[pl] = {"rejected": bool(p.min() < cfg.alpha / n), "min_p": float(p.min()),
                   "max_z_enh": float(grf.norm_isf(p.min())),
                   "prop_p05": float(np.mean(p < 0.05))}
    return row


def _row_power(cfg, r):
    rz = _realise(cfg, r)
    row = {"realisation": r, "seed": cfg.seed + r, "fwhm": list(rz.params.fwhm_vox), "amplitudes": {}}
    n_true = int(rz.truth.sum())
    for a in cfg.amplitudes:
        z = rz.zmap(a)
        cell = {}
        for pl in cfg.pipelines:
            em = _enhance(pl, z, rz.mask, rz.params, _levels(cfg, pl), cfg.cache_dir)
            sig = np.zeros_like(rz.mask) if em is None else em.significant(cfg.alpha)
            cell[pl] = {"dice": sim.dice(sig, rz.truth),
                        "tpr": float(np.sum(sig & rz.truth)) / n_true,
                        "false_positives": int(np.sum(sig & ~rz.truth)),
                        "n_significant": int(sig.sum())}
        row["amplitudes"][repr(a)] = cell
    return row


def _row_smoothness(cfg, r):
    rz = _realise(cfg, r)
    return {"realisation": r, "seed": cfg.seed + r, "fwhm": list(rz.params.fwhm_vox),
            "fwhm_mean": float(np.mean(rz.params.fwhm_vox))}


def _compare(a, b, mask, alpha):
    za, zb = _floored(a), _floored(b)
    sa, sb = a.significant(alpha), b.significant(alpha)
    return {"r": sim.pearson_r(za, zb, mask),
            "r_unfloored": sim.pearson_r(a.z_enh, b.z_enh, mask),
            "max_abs_dz": float(np.max(np.abs(za - zb)[mask])),
            "mean_abs_dz": float(np.mean(np.abs(za - zb)[mask])),
            "max_abs_dS": float(np.max(np.abs(a.S - b.S)[mask])),
            "dice": sim.dice(sa, sb),
            "subset": bool(np.all(~sa | sb))}


def _row_concordance(cfg, r):
    rz = _realise(cfg, r)
    z = rz.zmap(cfg.signal_amplitude)
    base = infer.ptfce_baseline(z, rz.mask, rz.params, cfg.n_levels_baseline, cache_dir=cfg.cache_dir)
    hyb = infer.ptfce_hybrid(z, rz.mask, rz.params, cfg.n_levels_hybrid, cache_dir=cfg.cache_dir)
    row = {"realisation": r, "seed": cfg.seed + r}
    # hybrid vs baseline: subset test is "hybrid significant implies baseline significant"
    row.update(_compare(hyb, base, rz.mask, cfg.alpha))
    return row


def _row_grid(cfg, r):
    rz = _realise(cfg, r)
    z = rz.zmap(cfg.signal_amplitude)
    ref = infer.ptfce_hybrid(z, rz.mask, rz.params, cfg.reference_levels, cache_dir=cfg.cache_dir)
    row = {"realisation": r, "seed": cfg.seed + r, "levels": {}}
    for n in cfg.grid_levels:
        em = infer.ptfce_hybrid(z, rz.mask, rz.params, n, cache_dir=cfg.cache_dir)
        row["levels"][str(n)] = _compare(em, ref, rz.mask, cfg.alpha)
    return row


def _timed(fn, repeats, warm=True):
    if warm:
        fn()  # warm-up, discarded
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def _row_bench(cfg, r):
    rz = _realise(cfg, r, keep_stack=True)
    z = rz.zmap(cfg.signal_amplitude)
    mask, params = rz.mask, rz.params
    if cfg.signal_amplitude:
        stack = replace(rz.stack, data=rz.stack.data + cfg.signal_amplitude * rz.truth)
    else:
        stack = rz.stack
    methods = {
        "baseline": lambda: infer.ptfce_baseline(z, mask, params, cfg.n_levels_baseline),
        "hybrid": lambda: infer.ptfce_hybrid(z, mask, params, cfg.n_levels_hybrid),
        "perm_etfce": lambda: perm.sign_flip_null(stack, mask, "etfce", cfg.B, cfg.seed + r),
    }
    row = {"realisation": r, "seed": cfg.seed + r, "methods": {}}
    for name, fn in methods.items():
        if name.startswith("perm"):
            # a single relabelling is enough to warm the compiled kernels
            perm.sign_flip_null(stack, mask, "etfce", 1, cfg.seed + r)
            t = _timed(fn, cfg.repeats, warm=False)
        else:
            t = _timed(fn, cfg.repeats)
        row["methods"][name] = {"times": t, "mean": float(np.mean(t)),
                                "sd": float(np.std(t, ddof=1)) if len(t) > 1 else 0.0}
    return row


ROWS = {"null_fwer": _row_null, "power": _row_power, "smoothness": _row_smoothness,
        "concordance": _row_concordance, "grid_convergence": _row_grid, "bench": _row_bench}


# ---------------------------------------------------------------------------
# summaries

def _mean_sd(x):
    x = np.asarray(x, dtype=np.float64)
    return {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
            "n": int(x.size)}


def _summary_null(cfg, rows):
    out = {}
    R = len(rows)
    for pl in cfg.pipelines:
        k = sum(row[pl]["rejected"] for row in rows)
        lo, hi = sim.wilson_interval(k, R)
        out[pl] = {"rejections": k, "rate": k / R, "wilson95": [lo, hi],
                   "prop_p05": _mean_sd([row[pl]["prop_p05"] for row in rows])}
    return out


def _summary_power(cfg, rows):
    out = {}
    for a in cfg.amplitudes:
        key = repr(a)
        cell = {}
        for pl in cfg.pipelines:
            vals = [row["amplitudes"][key][pl] for row in rows]
            cell[pl] = {"dice": _mean_sd([v["dice"] for v in vals]),
                        "tpr": _mean_sd([v["tpr"] for v in vals]),
                        "false_positives": int(sum(v["false_positives"] for v in vals))}
        out[key] = cell
    onset = {}
    for pl in cfg.pipelines:
        onset[pl] = next((a for a in cfg.amplitudes if out[repr(a)][pl]["dice"]["mean"] > 0), None)
    return {"by_amplitude": out, "onset_amplitude": onset}


def _summary_smoothness(cfg, rows):
    target = grf.sigma_to_fwhm(cfg.sigma)
    s = _mean_sd([row["fwhm_mean"] for row in rows])
    s["analytic"] = target
    s["relative_error"] = (s["mean"] - target) / target
    return s


def _summary_concordance(cfg, rows):
    return {k: _mean_sd([row[k] for row in rows])
            for k in ("r", "r_unfloored", "max_abs_dz", "mean_abs_dz", "dice")} | {
        "min_r": min(row["r"] for row in rows), "min_dice": min(row["dice"] for row in rows)}


def _summary_grid(cfg, rows):
    out = {}
    for n in cfg.grid_levels:
        vals = [row["levels"][str(n)] for row in rows]
        out[str(n)] = {k: _mean_sd([v[k] for v in vals]) for k in ("r", "max_abs_dz", "max_abs_dS", "dice")}
    return {"by_levels": out, "reference_levels": cfg.reference_levels}


def _summary_bench(cfg, rows):
    out = {}
    for name in rows[0]["methods"]:
        t = [x for row in rows for x in row["methods"][name]["times"]]
        out[name] = _mean_sd(t)
    if "baseline" in out and "hybrid" in out:
        out["hybrid_over_baseline"] = out["hybrid"]["mean"] / out["baseline"]["mean"]
    return out


SUMMARIES = {"null_fwer": _summary_null, "power": _summary_power, "smoothness": _summary_smoothness,
             "concordance": _summary_concordance, "grid_convergence": _summary_grid,
             "bench": _summary_bench}


def _run_one(args):
    cfg, r = args
    return ROWS[cfg.experiment](cfg, r)


def run_experiment(config) -> dict:
    """Run a protocol and return its report.

    ``config`` is an :class:`ExperimentConfig`, an experiment id, or a
    mapping of config fields (``"id"`` is accepted for ``experiment``).
    """
    cfg = _config(config)
    R = cfg.n_realisations
    check_scalar(R, "realisations", lo=1, integer=True)
    t0 = time.perf_counter()
    jobs = [(cfg, r) for r in range(R)]
    if cfg.threads > 1 and R > 1 and cfg.experiment != "bench":
        with ProcessPoolExecutor(max_workers=min(cfg.threads, R)) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    rows.sort(key=lambda row: row["realisation"])
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "phantom": cfg.phantom(0).to_dict(),
        "rows": rows,
        "summary": SUMMARIES[cfg.experiment](cfg, rows),
        "elapsed_s": time.perf_counter() - t0,
    }


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out[key] = ";".join(str(x) for x in v)
        else:
            out[key] = v
    return out


def report_to_csv(report: dict) -> str:
    """One CSV line per realisation with nested fields flattened to dotted names."""
    rows = [_flatten(row) for row in report["rows"]]
    cols = []
    for row in rows:
        cols += [c for c in row if c not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_report(report: dict, path, fmt: str = "json"):
    path = os.fspath(path)
    text = report_to_csv(report) if fmt == "csv" else json.dumps(report, indent=2, default=_json_default)
    with open(path, "w") as fh:
        fh.write(text)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and math.isnan(o):
        return None
    raise TypeError(f"cannot serialise {type(o).__name__}")
