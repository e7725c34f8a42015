"""Command-line front end.

Exit status is 0 on success, 1 on a usage error and 2 on a data error
(unreadable or invalid input, or a failed computation).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import experiments, grf, infer, perm, sim, volio
from .enhance import TfceParams, tfce_exact, tfce_riemann
from .errors import TfceGrfError

SCHEMA_VERSION = 1
METHODS = ("tfce", "etfce", "ptfce", "hybrid")


@dataclass
class RunConfig:
    """Every setting a subcommand can take; echoed into each report."""

    subcommand: str = "enhance"
    inputs: list = field(default_factory=list)
    output: str | None = None
    mask: str | None = None
    method: str = "hybrid"
    E: float = 0.5
    H: float = 2.0
    h0: float = 0.0
    dh: float = 0.1
    fsl_bug_compat: bool = False
    n_levels: int | None = None
    alpha: float = 0.05
    correction: str = "bonferroni"
    two_sided: bool = False
    fwhm: list | None = None
    residuals: str | None = None
    seed: int | None = None
    seed_source: str = "flag"
    B: int = 200
    cache_dir: str | None = None
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    format: str = "json"
    threshold: float | None = None
    repeats: int = 5
    experiment: str | None = None
    realisations: int | None = None
    dims: int = 64
    subjects: int = 80
    sigma: float = 1.5
    amplitude: float | None = None
    amplitudes: list | None = None

    @classmethod
    def from_args(cls, ns) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in vars(ns).items() if k in known and v is not None}
        cfg = cls(**kw)
        cfg.inputs = [getattr(ns, k) for k in ("zmap", "stack", "a", "b") if getattr(ns, k, None)]
        if ns.subcommand == "smoothest":
            cfg.inputs = [ns.residuals]
        if cfg.seed is None:
            cfg.seed = int(np.random.SeedSequence().entropy) & (2 ** 63 - 1)
            cfg.seed_source = "entropy"
        if cfg.cache_dir is None:
            cfg.cache_dir = os.environ.get(grf.CACHE_ENV)
        return cfg

    def tfce_params(self) -> TfceParams:
        return TfceParams(self.E, self.H, self.h0, self.dh, None, self.fsl_bug_compat)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, help="base RNG seed (default: fresh entropy, recorded)")
    p.add_argument("--threads", type=int, help="worker processes (default: all CPUs)")
    p.add_argument("--cache-dir", dest="cache_dir",
                   help=f"exceedance-table cache (default: ${grf.CACHE_ENV})")
    p.add_argument("--format", choices=("json", "csv"), help="report format")


def _add_grf(p):
    p.add_argument("--mask", help="mask NIfTI (default: non-zero voxels of the input)")
    p.add_argument("--fwhm", type=float, nargs=3, metavar=("FX", "FY", "FZ"),
                   help="smoothness in voxels")
    p.add_argument("--residuals", help="4D residual NIfTI to estimate smoothness from")
    p.add_argument("--n-levels", dest="n_levels", type=int, help="threshold grid size")


def _add_tfce(p):
    p.add_argument("--E", type=float, help="extent exponent (0.5)")
    p.add_argument("--H", type=float, help="height exponent (2.0)")
    p.add_argument("--h0", type=float, help="lower integration bound (0)")
    p.add_argument("--dh", type=float, help="Riemann step (0.1)")
    p.add_argument("--fsl-bug-compat", dest="fsl_bug_compat", action="store_true", default=None,
                   help="omit the step factor from the Riemann sum")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tfce-grf", description="Cluster enhancement and GRF inference for Z maps.")
    sub = ap.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("enhance", help="enhance a Z map")
    p.add_argument("zmap")
    p.add_argument("output", help="output prefix")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--correction", choices=("bonferroni", "bh-fdr"))
    p.add_argument("--two-sided", dest="two_sided", action="store_true", default=None)
    _add_grf(p)
    _add_tfce(p)
    _add_common(p, seed=False)

    p = sub.add_parser("smoothest", help="estimate smoothness from residuals")
    p.add_argument("residuals")
    p.add_argument("--mask")
    p.add_argument("-o", "--output", help="report path (default: stdout)")
    _add_common(p, seed=False)

    p = sub.add_parser("phantom", help="write a synthetic phantom")
    p.add_argument("output", help="output prefix")
    p.add_argument("--dims", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--amplitude", type=float)
    _add_common(p)

    p = sub.add_parser("experiment", help="run a Monte Carlo protocol")
    p.add_argument("experiment", help=f"one of {', '.join(experiments.EXPERIMENTS)}")
    p.add_argument("--realisations", type=int)
    p.add_argument("--dims", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--amplitudes", type=float, nargs="+")
    p.add_argument("--alpha", type=float)
    p.add_argument("--B", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("-o", "--output", help="report path (default: stdout)")
    _add_common(p)

    p = sub.add_parser("perm", help="sign-flip permutation FWER p-map")
    p.add_argument("stack", help="4D subject NIfTI")
    p.add_argument("output", help="output prefix")
    p.add_argument("--mask")
    p.add_argument("--method", choices=("tfce", "etfce"))
    p.add_argument("--B", type=int)
    p.add_argument("--alpha", type=float)
    _add_tfce(p)
    _add_common(p)

    p = sub.add_parser("bench", help="time each method on a map")
    p.add_argument("zmap")
    p.add_argument("--stack", help="4D subject NIfTI for the permutation method")
    p.add_argument("--repeats", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("-o", "--output", help="report path (default: stdout)")
    _add_grf(p)
    _add_common(p)

    p = sub.add_parser("compare", help="agreement between two maps")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--mask")
    p.add_argument("-o", "--output", help="report path (default: stdout)")
    return ap


# ---------------------------------------------------------------------------
# helpers

def _report(cfg: RunConfig, results: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": cfg.subcommand,
            "config": asdict(cfg), "results": results}


def _emit(report, path, fmt="json"):
    if fmt == "csv" and "rows" in report.get("results", {}):
        text = experiments.report_to_csv(report["results"])
    else:
        text = json.dumps(report, indent=2, default=experiments._json_default)
    if path is None:
        sys.stdout.write(text + "\n")
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _mask_for(vol, path):
    if path is None:
        inc = vol.data != 0
    else:
        inc = volio.load(path)[0].data != 0
    return inc


def _grf_params(cfg: RunConfig, inc) -> grf.GrfParams:
    if cfg.fwhm is not None:
        return grf.GrfParams(int(inc.sum()), tuple(cfg.fwhm))
    if cfg.residuals is not None:
        stack, _ = volio.load_stack(cfg.residuals)
        return grf.estimate_smoothness(stack, inc)
    raise _Usage("analytical methods need --fwhm or --residuals")


class _Usage(Exception):
    pass


# ---------------------------------------------------------------------------
# subcommands

def _cmd_enhance(cfg: RunConfig, ns):
    vol, hdr = volio.load(ns.zmap)
    inc = _mask_for(vol, cfg.mask)
    prefix = ns.output
    results = {"n_mask": int(inc.sum())}
    if cfg.method in ("tfce", "etfce"):
        run = tfce_exact if cfg.method == "etfce" else tfce_riemann
        scores = run(vol, inc, cfg.tfce_params())
        if cfg.two_sided:
            scores = scores - run(-vol.data, inc, cfg.tfce_params())
        volio.save(prefix + ".score.nii", volio.Volume3D(scores, vol.voxel_size_mm), inc, hdr)
        results.update({"max_score": float(scores[inc].max()), "min_score": float(scores[inc].min()),
                        "outputs": [prefix + ".score.nii"]})
    else:
        params = _grf_params(cfg, inc)
        pipeline = "baseline" if cfg.method == "ptfce" else "hybrid"
        n_levels = cfg.n_levels or (100 if pipeline == "baseline" else 500)
        kw = {"n_levels": n_levels, "cache_dir": cfg.cache_dir}
        if cfg.two_sided:
            em = infer.two_sided_enhance(vol, inc, params, pipeline, **kw)
        else:
            em = infer.PIPELINES[pipeline](vol, inc, params, **kw)
        if cfg.correction == "bonferroni":
            sig = em.significant(cfg.alpha)
        else:
            sig = infer.bh_fdr_select(em.p_enh, cfg.alpha, inc)
        outs = {}
        for key, arr in (("S", em.S), ("p", em.p_enh), ("z", em.signed_z)):
            path = f"{prefix}.{key}.nii"
            # p is already 1 outside the mask; masking would write 0 there
            volio.save(path, volio.Volume3D(arr, vol.voxel_size_mm), None if key == "p" else inc,
                       hdr, f"enhanced {key}")
            outs[key] = path
        results.update({"grf": params.to_dict(), "n_levels": n_levels,
                        "n_significant": int(sig.sum()), "max_S": float(em.S[inc].max()),
                        "max_z_enh": float(em.z_enh[inc].max()),
                        "bonferroni_z": infer.bonferroni_z_threshold(cfg.alpha, int(inc.sum())),
                        "provenance": em.provenance, "outputs": outs})
    _emit(_report(cfg, results), prefix + ".json")
    return 0


def _cmd_smoothest(cfg, ns):
    stack, _ = volio.load_stack(ns.residuals)
    inc = None if cfg.mask is None else volio.load(cfg.mask)[0].data != 0
    params = grf.estimate_smoothness(stack, inc)
    _emit(_report(cfg, params.to_dict()), cfg.output)
    return 0


def _cmd_phantom(cfg, ns):
    spec = sim.PhantomSpec(dims=(cfg.dims,) * 3, n_subjects=cfg.subjects, noise_sigma=cfg.sigma,
                           amplitude=0.5 if cfg.amplitude is None else cfg.amplitude, seed=cfg.seed)
    stack, truth = sim.generate_phantom(spec)
    prefix = ns.output
    volio.save_stack(prefix + ".stack.nii", stack, description="phantom subjects")
    volio.save(prefix + ".truth.nii", volio.Volume3D(truth.included.astype(float)))
    volio.save(prefix + ".mask.nii", volio.Volume3D(spec.mask().astype(float)))
    results = {"phantom": spec.to_dict(),
               "outputs": [prefix + s for s in (".stack.nii", ".truth.nii", ".mask.nii")]}
    _emit(_report(cfg, results), prefix + ".json")
    return 0


def _cmd_experiment(cfg, ns):
    over = {"experiment": cfg.experiment, "seed": cfg.seed, "threads": cfg.threads,
            "dims": cfg.dims, "subjects": cfg.subjects, "sigma": cfg.sigma, "alpha": cfg.alpha,
            "B": cfg.B, "repeats": cfg.repeats, "cache_dir": cfg.cache_dir}
    if cfg.realisations is not None:
        over["realisations"] = cfg.realisations
    if cfg.amplitude is not None:
        over["amplitude"] = cfg.amplitude
    if cfg.amplitudes:
        over["amplitudes"] = tuple(cfg.amplitudes)
    report = experiments.run_experiment(over)
    _emit(_report(cfg, report), cfg.output, cfg.format)
    return 0


def _cmd_perm(cfg, ns):
    stack, hdr = volio.load_stack(ns.stack)
    inc = (np.ones(stack.data.shape[1:], bool) if cfg.mask is None
           else volio.load(cfg.mask)[0].data != 0)
    method = cfg.method if cfg.method in ("tfce", "etfce") else "etfce"
    z = sim.one_sample_t_to_z(stack, inc).data
    params = cfg.tfce_params()
    scores = perm.enhance_scores(z, inc, method, params)
    null = perm.sign_flip_null(stack, inc, method, cfg.B, cfg.seed, params=params, n_jobs=cfg.threads)
    p = perm.perm_fwer_p(scores, null)
    p[~inc] = 1.0
    prefix = ns.output
    volio.save(prefix + ".p.nii", volio.Volume3D(p, stack.voxel_size_mm), None, hdr, "FWER p")
    results = {"enhancer": method, "B": cfg.B, "seed": cfg.seed, "min_p": float(p[inc].min()),
               "n_significant": int(np.sum(inc & (p <= cfg.alpha))),
               "null_max": null.max_scores.tolist(), "outputs": [prefix + ".p.nii"]}
    _emit(_report(cfg, results), prefix + ".json")
    return 0


def _cmd_bench(cfg, ns):
    vol, _ = volio.load(ns.zmap)
    inc = _mask_for(vol, cfg.mask)
    tp = cfg.tfce_params()
    methods = {"tfce": lambda: tfce_riemann(vol, inc, tp), "etfce": lambda: tfce_exact(vol, inc, tp)}
    if cfg.fwhm is not None or cfg.residuals is not None:
        params = _grf_params(cfg, inc)
        methods["ptfce"] = lambda: infer.ptfce_baseline(vol, inc, params, cfg.n_levels or 100)
        methods["hybrid"] = lambda: infer.ptfce_hybrid(vol, inc, params, cfg.n_levels or 500)
    if ns.stack:
        stack, _ = volio.load_stack(ns.stack)
        methods["perm_etfce"] = lambda: perm.sign_flip_null(stack, inc, "etfce", cfg.B, cfg.seed)
    results = {"repeats": cfg.repeats, "warmup_discarded": True, "methods": {}}
    for name, fn in methods.items():
        fn()
        times = []
        for _ in range(cfg.repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        results["methods"][name] = {"times": times, "mean": float(np.mean(times)),
                                    "sd": float(np.std(times, ddof=1)) if len(times) > 1 else 0.0}
    _emit(_report(cfg, results), cfg.output)
    return 0


def _cmd_compare(cfg, ns):
    a, _ = volio.load(ns.a)
    b, _ = volio.load(ns.b)
    inc = (np.ones(a.dims, bool) if cfg.mask is None else volio.load(cfg.mask)[0].data != 0)
    d = np.abs(a.data - b.data)[inc]
    t = cfg.threshold
    results = {"r": sim.pearson_r(a, b, inc), "max_abs_dz": float(d.max()),
               "mean_abs_dz": float(d.mean()), "threshold": t,
               "dice": sim.dice(inc & (a.data >= t), inc & (b.data >= t)),
               "n_a": int(np.sum(inc & (a.data >= t))), "n_b": int(np.sum(inc & (b.data >= t)))}
    _emit(_report(cfg, results), cfg.output)
    return 0


COMMANDS = {"enhance": _cmd_enhance, "smoothest": _cmd_smoothest, "phantom": _cmd_phantom,
            "experiment": _cmd_experiment, "perm": _cmd_perm, "bench": _cmd_bench,
            "compare": _cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cfg = RunConfig.from_args(ns)
    if cfg.subcommand in ("perm", "bench", "enhance") and getattr(ns, "method", None) is None:
        cfg.method = "etfce" if cfg.subcommand == "perm" else cfg.method
    try:
        return COMMANDS[cfg.subcommand](cfg, ns)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"tfce-grf: error: {exc}", file=sys.stderr)
        return 1
    except (TfceGrfError, ValueError, OSError) as exc:
        print(f"tfce-grf: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
