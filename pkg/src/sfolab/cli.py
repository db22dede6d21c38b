"""Command line entry point: ``sfolab <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Numeric results go to
CSV/JSON files (or standard output with ``--out -``); progress and errors go to
standard error.  Every artifact-producing command writes ``<output>.manifest.json``
next to its main output.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import json
import logging
import os
import statistics
import sys
import timeit
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .basis import build_basis, write_basis_csv
from .data import gen_diffusion_reaction_1d, gen_heat_2d, load_dataset, save_dataset, subsample
from .model import SFOConfig, SFOModel, load_checkpoint, rebuild_for_resolution, save_checkpoint
from .theory import (StencilSpec, geometric_kernel, greens_closed_form, greens_numeric,
                     greens_one_sided, log_fit, modes_for_accuracy, rotation, truncation_study, write_rows)
from .train import (ARM_COLUMNS, TrainConfig, ablate_basis, config_for_dataset, evaluate, glu_vs_mlp,
                    sweep_rank, sweep_width, tied_vs_multi, train, write_csv)

log = logging.getLogger("sfolab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "SFO_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _seed(value: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return int(value)
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(main_output, command: str, args: dict, outputs, extra=None) -> None:
    outputs = [str(p) for p in outputs if p is not None and str(p) != "-"]
    if main_output is None or str(main_output) == "-":
        return
    manifest = {
        "command": command,
        "version": __version__,
        "args": args,
        "seed_override": os.environ.get(SEED_ENV),
        "artifacts": {Path(p).name: _sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    with open(str(main_output) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit_text(out, text: str) -> None:
    if out == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _rows_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in r])
    return buf.getvalue()


def _jsonable(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


# ---------------------------------------------------------------- basis

def cmd_basis(args) -> int:
    seed = _seed(args.seed) if args.kind in ("random", "randomorthogonal") else None
    basis = build_basis(args.kind, args.n, args.modes, seed=seed)
    if args.out == "-":
        header = [f"mode_{l + 1}" for l in range(basis.L)]
        _emit_text("-", _rows_text(header, [[float(v) for v in row] for row in basis.filters]))
        return EXIT_OK
    eig = args.eigen_out or str(Path(args.out).with_suffix("")) + "_eigenvalues.csv"
    write_basis_csv(basis, args.out, eig)
    _write_manifest(args.out, "basis", _jsonable(args), [args.out, eig],
                    {"seeds": {"basis": seed}, "meta": basis.meta})
    log.info("wrote %s (%dx%d) and %s", args.out, basis.n, basis.L, eig)
    return EXIT_OK


# ---------------------------------------------------------------- theory

def _spec_from_args(args) -> StencilSpec:
    alpha, beta = args.alpha, args.beta
    if len(alpha) != len(beta):
        raise UsageError("--alpha and --beta need the same number of values")
    if len(alpha) == 1:
        return StencilSpec.scalar(alpha[0], beta[0])
    if len(alpha) == 2:
        return StencilSpec(rotation(np.deg2rad(args.angle)), alpha, beta)
    return StencilSpec(np.eye(len(alpha)), alpha, beta)


def _greens_table(spec, tmax):
    closed = greens_closed_form(spec, tmax)
    numeric = greens_numeric(spec, tmax)
    d = spec.d
    header = ["t"] + [f"closed_{i}{j}" for i in range(d) for j in range(d)] \
        + [f"numeric_{i}{j}" for i in range(d) for j in range(d)]
    rows = []
    for k, t in enumerate(closed.offsets):
        rows.append([int(t)] + [float(x) for x in closed.samples[k].ravel()]
                    + [float(x) for x in numeric.samples[k].ravel()])
    return header, rows


def _kernel_from_args(args):
    if args.kernel == "geometric":
        return geometric_kernel(1.0, args.rho, args.n, one_sided=True)
    return greens_one_sided(_spec_from_args(args), args.n)


def _truncation_table(args):
    kernel = _kernel_from_args(args)
    Ls = args.modes_list or list(range(1, args.n + 1))
    rows = truncation_study(kernel, args.kinds.split(","), Ls, seed=_seed(args.seed))
    return ["kind", "L", "rel_error"], [list(r) for r in rows]


def _modes_table(args):
    kernel = _kernel_from_args(args)
    basis = build_basis("usb", args.n, args.n)
    res = modes_for_accuracy(kernel, basis, args.eps)
    rows = [[eps, "saturated" if L is None else L] for eps, L in res]
    return ["eps", "L"], rows


def cmd_theory(args) -> int:
    tables = {}
    which = args.which
    if which in ("greens", "all"):
        tables["greens.csv"] = _greens_table(_spec_from_args(args), args.tmax)
    if which in ("truncation", "all"):
        tables["truncation.csv"] = _truncation_table(args)
    if which in ("modes", "all"):
        tables["modes_for_eps.csv"] = _modes_table(args)
    if which == "all":
        out_dir = Path(args.out_dir or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, (header, rows) in tables.items():
            p = out_dir / name
            _emit_text(str(p), _rows_text(header, rows))
            paths.append(p)
        _write_manifest(out_dir / "theory", "theory all", _jsonable(args), paths)
        return EXIT_OK
    (name, (header, rows)), = tables.items()
    out = args.out or name
    _emit_text(out, _rows_text(header, rows))
    _write_manifest(out, f"theory {which}", _jsonable(args), [out])
    if which == "modes":
        good = [(e, L) for e, L in rows if L != "saturated" and e < 1]
        if len(good) >= 2:
            slope, _, r2 = log_fit([e for e, _ in good], [L for _, L in good])
            log.info("L vs log10(1/eps): slope %.3f, R^2 %.4f", slope, r2)
    return EXIT_OK


# ---------------------------------------------------------------- data

def cmd_data_gen(args) -> int:
    seed = _seed(args.seed)
    if args.pde == "diff-react-1d":
        ds = gen_diffusion_reaction_1d(args.n, args.nt, args.samples, seed)
    else:
        ds = gen_heat_2d(args.n, args.nt, args.samples, seed, args.diffusivity)
    save_dataset(ds, args.out)
    _write_manifest(args.out, "data gen", _jsonable(args), [args.out], {"seeds": {"data": seed}})
    log.info("wrote %s: %d samples, grid %s", args.out, ds.N, ds.grid.sizes)
    return EXIT_OK


def cmd_data_info(args) -> int:
    ds = load_dataset(args.data)
    _emit_text(args.out, json.dumps(ds.header(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval

_MODEL_KEYS = set(SFOConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def _split_config(raw: dict):
    unknown = set(raw) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    model = {k: v for k, v in raw.items() if k in _MODEL_KEYS and k != "seed"}
    trn = {k: v for k, v in raw.items() if k in _TRAIN_KEYS and k != "seed"}
    seed = _seed(raw.get("seed", 0))
    return model, trn, seed


def _load_json(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    raw = _load_json(args.config) if args.config else {}
    mkeys, tkeys, seed = _split_config(raw)
    mcfg = config_for_dataset(ds, seed=seed, **mkeys)
    tcfg = TrainConfig(seed=seed, **tkeys)
    model = SFOModel(mcfg)

    def progress(entry):
        if entry["epoch"] % max(1, tcfg.epochs // 10) == 0:
            log.info("epoch %d: train %.4f%% val %.4f%%", entry["epoch"],
                     entry["train_rel_l2"], entry["val_rel_l2"])

    result = train(model, ds, tcfg, progress)
    save_checkpoint(model, args.out)
    outputs = [args.out]
    if args.metrics:
        rows = [dict(h, batch_size=tcfg.batch_size, weight_decay=tcfg.weight_decay, status=result.status)
                for h in result.history]
        write_csv(args.metrics, rows, ["epoch", "train_rel_l2", "val_rel_l2", "batch_size",
                                       "weight_decay", "status"])
        outputs.append(args.metrics)
    _write_manifest(args.out, "train", _jsonable(args), outputs,
                    {"model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
                     "seeds": {"model": seed, "train": seed, "split": tcfg.split_seed},
                     "status": result.status})
    if result.status != "ok":
        log.error("training stopped early: %s", result.message)
        return EXIT_RUNTIME
    log.info("final validation rel_l2 %.4f%%", result.final_val)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if args.stride > 1:
        ds = subsample(ds, args.stride)
    if ds.grid.sizes != model.config.grid:
        model = rebuild_for_resolution(model, ds.grid.sizes[0])
    metrics = evaluate(model, ds)
    metrics["n"] = ds.grid.sizes[0]
    metrics["L"] = model.config.L
    _emit_text(args.out, json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    outputs = [args.out]
    if args.norms_out:
        write_rows(args.norms_out, ["mode", "theta_fro_norm"],
                   [[l + 1, v] for l, v in enumerate(metrics["coefficient_norms"])])
        outputs.append(args.norms_out)
    _write_manifest(args.out, "eval", _jsonable(args), outputs)
    return EXIT_OK


# ---------------------------------------------------------------- ablate

_EXPERIMENTS = {
    "ablate_basis": (ablate_basis, "kinds"),
    "sweep_rank": (sweep_rank, "Ls"),
    "sweep_width": (sweep_width, "ds"),
    "tied_vs_multi": (tied_vs_multi, None),
    "glu_vs_mlp": (glu_vs_mlp, None),
}


def _plan_dataset(spec):
    if isinstance(spec, str):
        return load_dataset(spec)
    spec = dict(spec)
    pde = spec.pop("pde", "diff-react-1d")
    seed = _seed(spec.pop("seed", 0))
    if pde == "diff-react-1d":
        return gen_diffusion_reaction_1d(seed=seed, **spec)
    if pde == "heat-2d":
        return gen_heat_2d(seed=seed, **spec)
    raise UsageError(f"unknown pde {pde!r}")


def _run_plan_arm(plan: dict, value, seed: int):
    """One (value, seed) arm of a plan; runs in a worker process when --jobs > 1."""
    ds = _plan_dataset(plan["data"])
    mkeys, tkeys, _ = _split_config({**plan.get("model", {}), **plan.get("train", {})})
    base = config_for_dataset(ds, **mkeys)
    tcfg = TrainConfig(**tkeys)
    fn, key = _EXPERIMENTS[plan["experiment"]]
    kwargs = {"seeds": (seed,)}
    if key is not None:
        kwargs[key] = (value,)
    if plan["experiment"] == "tied_vs_multi":
        kwargs["L"] = plan.get("L", 6)
        rows = fn(ds, base, tcfg, **kwargs)
        return [r for r in rows if r["value"] == value]
    if plan["experiment"] == "glu_vs_mlp":
        rows = fn(ds, base, tcfg, **kwargs)
        return [r for r in rows if r["value"] == value]
    return fn(ds, base, tcfg, **kwargs)


def cmd_ablate(args) -> int:
    plan = _load_json(args.plan)
    exp = plan.get("experiment")
    if exp not in _EXPERIMENTS:
        raise UsageError(f"plan experiment must be one of {sorted(_EXPERIMENTS)}, got {exp!r}")
    if "data" not in plan:
        raise UsageError("plan needs a 'data' entry (dataset path or generator parameters)")
    if exp == "tied_vs_multi":
        values = ["tied", "multi"]
    elif exp == "glu_vs_mlp":
        values = ["mlp", "glu"]
    else:
        values = plan.get("values")
        if not values:
            raise UsageError("plan needs a non-empty 'values' list")
    env_seed = os.environ.get(SEED_ENV)
    seeds = [_seed(0)] if env_seed else [int(s) for s in plan.get("seeds", [0, 1, 2])]
    arms = [(v, s) for v in values for s in seeds]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_plan_arm, [plan] * len(arms), *zip(*arms)))
    else:
        results = [_run_plan_arm(plan, v, s) for v, s in arms]
    rows = [r for chunk in results for r in chunk]
    write_csv(args.out, rows, ARM_COLUMNS)
    _write_manifest(args.out, "ablate", _jsonable(args), [args.out],
                    {"plan": plan, "seeds": seeds, "timing_columns": ["wall_time_s"]})
    return EXIT_OK


# ---------------------------------------------------------------- bench

def layer_times(sizes, d: int = 32, L: int = 16, batch: int = 8, repeats: int = 5, seed: int = 0):
    """Median wall time of one forward layer evaluation per grid size.

    A run times a block of back-to-back evaluations (sized by ``timeit``
    autorange to at least 0.2 s) and divides by its length.  Runs alternate
    between sizes so background load affects every size alike.
    """
    timers = []
    for n in sizes:
        cfg = SFOConfig(L=L, d=d, T=1, grid=(n,), in_channels=1, out_channels=1, seed=seed)
        model = SFOModel(cfg)
        v = ad.Tensor(np.random.default_rng(seed).standard_normal((batch, d, n)))
        timer = timeit.Timer(lambda model=model, v=v: model.layer_forward(v, 0))
        number, _ = timer.autorange()      # also warms caches
        timers.append((timer, number))
    times = [[] for _ in sizes]
    for _ in range(repeats):
        for k, (timer, number) in enumerate(timers):
            times[k].append(timer.timeit(number) / number)
    return [(n, statistics.median(t)) for n, t in zip(sizes, times)]


def cmd_bench(args) -> int:
    res = layer_times(args.n, args.d, args.modes, args.batch, args.repeats, _seed(args.seed))
    rows = []
    prev = None
    for n, t in res:
        rows.append([n, t, "" if prev is None else t / prev])
        prev = t
    _emit_text(args.out, _rows_text(["n", "median_layer_s", "ratio_vs_previous"], rows))
    _write_manifest(args.out, "bench", _jsonable(args), [args.out],
                    {"timing_columns": ["median_layer_s", "ratio_vs_previous"]})
    worst = max((r[2] for r in rows[1:]), default=0.0)
    log.info("largest time(2n)/time(n) ratio: %.3f", worst)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfolab", description="Spectral filtering operator laboratory.")
    p.add_argument("--version", action="version", version=f"sfolab {__version__}")
    p.add_argument("--verbose", action="store_true", help="debug logging on standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("basis", help="write a filter bank as CSV")
    b.add_argument("--kind", default="usb", choices=["usb", "fourier", "chebyshev", "random"])
    b.add_argument("--n", type=int, default=256)
    b.add_argument("--modes", type=int, default=20)
    b.add_argument("--seed", type=int, default=0, help="random orthogonal basis only")
    b.add_argument("--out", required=True)
    b.add_argument("--eigen-out", default=None, help="eigenvalue sidecar (default <out>_eigenvalues.csv)")
    b.set_defaults(func=cmd_basis)

    t = sub.add_parser("theory", help="Green's kernels and truncation studies")
    t.add_argument("which", choices=["greens", "truncation", "modes", "all"])
    t.add_argument("--alpha", type=_float_list, default=[2.5])
    t.add_argument("--beta", type=_float_list, default=[1.0])
    t.add_argument("--angle", type=float, default=45.0, help="eigenvector rotation (degrees) for d=2")
    t.add_argument("--tmax", type=int, default=20)
    t.add_argument("--n", type=int, default=256)
    t.add_argument("--kernel", choices=["greens", "geometric"], default="greens")
    t.add_argument("--rho", type=float, default=0.9)
    t.add_argument("--kinds", default="usb,fourier,chebyshev,random")
    t.add_argument("--modes-list", type=_int_list, default=None)
    t.add_argument("--eps", type=_float_list, default=[1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default=None)
    t.add_argument("--out-dir", default=None)
    t.set_defaults(func=cmd_theory)

    d = sub.add_parser("data", help="generate or inspect datasets")
    dsub = d.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    g = dsub.add_parser("gen")
    g.add_argument("--pde", choices=["diff-react-1d", "heat-2d"], required=True)
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--nt", type=int, default=None)
    g.add_argument("--samples", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--diffusivity", type=float, default=0.01)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_data_gen)
    i = dsub.add_parser("info")
    i.add_argument("--data", required=True)
    i.add_argument("--out", default="-")
    i.set_defaults(func=cmd_data_info)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config", default=None, help="JSON with model and training fields")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--metrics", default=None, help="per-epoch CSV")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--stride", type=int, default=1)
    e.add_argument("--out", default="-")
    e.add_argument("--norms-out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an experiment plan")
    a.add_argument("--plan", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    be = sub.add_parser("bench", help="per-layer scaling benchmark")
    be.add_argument("--n", type=_int_list, default=[256, 512, 1024])
    be.add_argument("--d", type=int, default=32)
    be.add_argument("--modes", type=int, default=16)
    be.add_argument("--batch", type=int, default=8)
    be.add_argument("--repeats", type=int, default=5)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", default="-")
    be.set_defaults(func=cmd_bench)
    return p


_DATA_DEFAULTS = {"diff-react-1d": (64, 16, 512), "heat-2d": (32, 8, 256)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "data_command", None) == "gen":
        n, nt, N = _DATA_DEFAULTS[args.pde]
        args.n = n if args.n is None else args.n
        args.nt = nt if args.nt is None else args.nt
        args.samples = N if args.samples is None else args.samples
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sfolab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, ArithmeticError, KeyError, json.JSONDecodeError) as exc:
        print(f"sfolab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
