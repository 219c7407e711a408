"""``greenmg`` command line: gen-data, train, eval, bench, export-kernel.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numerical failure,
5 architecture mismatch.
"""

import argparse
import csv
import io as _io
import json
import os
import sys
import time
import tracemalloc

import numpy as np

from . import _backend
from .errors import ArchitectureMismatch, GreenMGError, InvalidCount
from .grid import build_hierarchy
from .io import atomic_write_text, read_container, write_container
from .mlmi import dense_apply, mlmi_apply
from .nn import MlpParams, adam_init, adam_step, init_params
from .problems import Dataset, generate_dataset, problem_spec
from .train import (Objective, TrainConfig, evaluate, export_learned_kernel, train_model)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL, EXIT_ARCH = 0, 2, 3, 4, 5
_FAMILY_CODES = {"usage": EXIT_USAGE, "numerical": EXIT_NUMERICAL, "architecture": EXIT_ARCH}

CHECKPOINT = "checkpoint.gmck"


class UsageError(GreenMGError, ValueError):
    """Bad command-line arguments or configuration values."""


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def _dump_json(data):
    return json.dumps(data, sort_keys=True) + "\n"


def _set_threads(count):
    if count:
        _backend.set_num_threads(count)


# ------------------------------------------------------------------- gen-data

def cmd_gen_data(args):
    if args.count < 1:
        raise InvalidCount(f"--count must be >= 1, got {args.count}")
    overrides = {}
    if args.coeff_seed is not None:
        overrides["coeff_seed"] = args.coeff_seed
    spec = problem_spec(args.problem, args.n, **overrides)
    data = generate_dataset(spec, args.count, args.seed)
    data.save(args.out)
    print(f"problem={spec.name} N={len(data)} n={spec.n} d={spec.d} seed={args.seed} checksum={data.checksum()}")
    return EXIT_OK


# ---------------------------------------------------------------------- train

def _train_config(raw, args):
    raw = dict(raw)
    for key in ("variant", "epochs", "seed", "k", "m", "p", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _checkpoint_extra(config, spec, p):
    return {"variant": config.variant, "k": config.k, "m": config.m, "n": spec.n, "problem": spec.name,
            "p": p}


def cmd_train(args):
    raw = _load_json(args.config)
    config = _train_config(raw, args)
    _set_threads(args.threads or raw.get("threads"))
    if "train_dataset" not in raw:
        raise UsageError("config needs a 'train_dataset' path")
    base = os.path.dirname(os.path.abspath(args.config))
    resolve = lambda path: path if os.path.isabs(path) else os.path.join(base, path)  # noqa: E731
    train = Dataset.load(resolve(raw["train_dataset"]))
    test = Dataset.load(resolve(raw["test_dataset"])) if raw.get("test_dataset") else train
    run_dir = args.run_dir or raw.get("run_dir")
    if not run_dir:
        raise UsageError("no run directory given (--run-dir or 'run_dir' in config)")
    run_dir = resolve(run_dir) if not args.run_dir else run_dir
    if config.problem != train.spec.name:
        raise UsageError(f"config problem {config.problem!r} but dataset holds {train.spec.name!r}")
    os.makedirs(run_dir, exist_ok=True)

    result = train_model(config, train)
    metrics = evaluate(result.params, test, config.variant, config.k, config.m, result.p)
    metrics.train_seconds = result.train_seconds
    spec = train.spec

    snapshot = dict(raw)
    snapshot.update(config.to_dict())
    atomic_write_text(os.path.join(run_dir, "config.json"), _dump_json(snapshot))
    result.params.save(os.path.join(run_dir, CHECKPOINT), extra=_checkpoint_extra(config, spec, result.p))
    buf = _io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["epoch", "loss"])
    for epoch, loss in enumerate(result.losses):
        out.writerow([epoch, repr(float(loss))])
    atomic_write_text(os.path.join(run_dir, "loss_history.csv"), buf.getvalue())
    summary = metrics.summary()
    summary.update(variant=config.variant, problem=spec.name, n=spec.n, seed=config.seed,
                   final_loss=result.losses[-1], epochs=config.epochs)
    atomic_write_text(os.path.join(run_dir, "metrics.json"), _dump_json(summary))
    if raw.get("export_kernel"):
        _write_kernel(os.path.join(run_dir, "kernel.gmk"), result.params, spec.n, spec.d,
                      config.variant, config.k, config.m)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------- eval

def _load_checkpoint(path):
    params = MlpParams.load(path)
    header, _ = read_container(path)
    return params, header.get("extra", {})


def cmd_eval(args):
    params, extra = _load_checkpoint(args.checkpoint)
    data = Dataset.load(args.dataset)
    if params.d != data.spec.d:
        raise ArchitectureMismatch(f"checkpoint is {params.d}D but dataset is {data.spec.d}D")
    if extra.get("n") is not None and extra["n"] != data.spec.n:
        raise ArchitectureMismatch(f"checkpoint trained on n={extra['n']} but dataset has n={data.spec.n}")
    variant = args.variant or extra.get("variant", "GL-aug" if params.out_width == 2 else "GL")
    if (variant == "GL") != (params.out_width == 1):
        raise ArchitectureMismatch(f"variant {variant} does not match out_width {params.out_width}")
    k = args.k if args.k is not None else extra.get("k", 2)
    m = args.m if args.m is not None else extra.get("m", 7)
    metrics = evaluate(params, data, variant, k, m, extra.get("p", 1.0), pointwise=bool(args.export_pointwise))
    if args.export_pointwise:
        _write_pointwise(args.export_pointwise, metrics.E_u, data.spec)
    summary = metrics.summary()
    summary.update(variant=variant, n=data.spec.n, problem=data.spec.name, N=len(data))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _write_pointwise(path, E_u, spec):
    """One row per grid node: coordinates and the sample-averaged E_u."""
    mean = E_u.mean(axis=0).reshape(-1)
    coords = build_hierarchy(spec.n, spec.d, 0).coords(0).reshape(-1, spec.d)
    buf = _io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow([f"x{a}" for a in range(spec.d)] + ["E_u"])
    for row, val in zip(coords, mean):
        out.writerow([*map(repr, row.tolist()), repr(float(val))])
    atomic_write_text(path, buf.getvalue())


# -------------------------------------------------------------- export-kernel

def _write_kernel(path, params, n, d, variant, k, m):
    exported = export_learned_kernel(params, n, d, variant, k, m)
    header = {"kind": "kernel", "variant": variant, "grid": {"n": n, "d": d}}
    blocks = {"kernel": exported["kernel"]}
    if "samples" in exported:
        header.update(k=k, m=m)
        blocks["samples"] = exported["samples"]
    write_container(path, header, blocks)
    return exported


def cmd_export_kernel(args):
    params, extra = _load_checkpoint(args.checkpoint)
    n = args.n or extra.get("n")
    if not n:
        raise UsageError("grid size unknown: pass --n")
    variant = extra.get("variant", "GL-aug" if params.out_width == 2 else "GL")
    k = args.k if args.k is not None else extra.get("k")
    m = args.m if args.m is not None else extra.get("m")
    exported = _write_kernel(args.out, params, n, params.d, variant, k, m)
    if args.points_csv:
        if "plan" not in exported:
            raise UsageError("--points-csv needs a GreenMGNet checkpoint or --k/--m")
        exported["plan"].point_set.write_csv(args.points_csv + ".tmp")
        os.replace(args.points_csv + ".tmp", args.points_csv)
    print(json.dumps({"out": args.out, "n": n, "variant": variant,
                      "samples": int(exported["samples"].shape[0]) if "samples" in exported else None}))
    return EXIT_OK


# ---------------------------------------------------------------------- bench

BENCH_COLUMNS = ["variant", "k", "m", "p", "train_ms_per_step", "infer_ms_per_apply", "peak_resident_bytes"]


def _bench_rows(cfg):
    rows = []
    for v in cfg.get("baselines", ["GL", "GL-aug"]):
        rows.append((v, None, None))
    for k in cfg.get("ks", [1, 2, 3]):
        for m in cfg.get("ms", [0, 1, 3, 7, 15, 31]):
            rows.append(("GreenMGNet", int(k), int(m)))
    return rows


def bench_row(variant, n, d, k, m, repetitions, train_steps, batch=8, seed=0):
    """Time one configuration; returns a dict with the report columns."""
    rng = np.random.default_rng(seed)
    forcings = rng.standard_normal((batch,) + (n,) * d)
    targets = rng.standard_normal((batch,) + (n,) * d)
    tracemalloc.start()
    try:
        objective = Objective(variant, n, d, k, m, 1.0, seed)
        params = init_params(d, 1 if variant == "GL" else 2, seed)
        state = adam_init(params)
        train_ms = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for _ in range(train_steps):
                _, grads = objective.value_and_grad(params, forcings, targets)
                adam_step(state, params, grads, 1e-6)
            train_ms.append(1e3 * (time.perf_counter() - t0) / train_steps)
        exported = export_learned_kernel(params, n, d, variant, k, m)
        h = 1.0 / (n - 1)
        if variant == "GreenMGNet":
            plan, samples = exported["plan"], exported["samples"]
            apply = lambda: mlmi_apply(plan, samples, forcings)  # noqa: E731
        else:
            kernel = exported["kernel"]
            apply = lambda: dense_apply(kernel, forcings, h, d)  # noqa: E731
        apply()
        infer_ms = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            apply()
            infer_ms.append(1e3 * (time.perf_counter() - t0))
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return {"variant": variant, "k": "" if k is None else k, "m": "" if m is None else m,
            "p": objective.fraction, "train_ms_per_step": float(np.mean(train_ms)),
            "infer_ms_per_apply": float(np.mean(infer_ms)), "peak_resident_bytes": int(peak)}


def cmd_bench(args):
    cfg = _load_json(args.config)
    reps = int(cfg.get("repetitions", 3))
    if reps < 1:
        raise InvalidCount("repetitions must be >= 1")
    _set_threads(args.threads or cfg.get("threads", 1))
    n = int(cfg.get("n", 513))
    d = int(cfg.get("d", 1))
    build_hierarchy(n, d, 0)
    out_path = args.out or cfg.get("out", "bench.csv")
    buf = _io.StringIO()
    out = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    out.writeheader()
    for variant, k, m in _bench_rows(cfg):
        row = bench_row(variant, n, d, k, m, reps, int(cfg.get("train_steps", 1)), int(cfg.get("batch", 8)))
        out.writerow(row)
        print(",".join(str(row[c]) for c in BENCH_COLUMNS), file=sys.stderr)
    atomic_write_text(out_path, buf.getvalue())
    print(out_path)
    return EXIT_OK


# ----------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="greenmg", description="Green's function learning with multilevel kernel integration.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a forcing/solution dataset")
    p.add_argument("--problem", required=True)
    p.add_argument("--count", type=int, required=True, help="number of samples N")
    p.add_argument("--n", type=int, required=True, help="grid points per axis (2**L + 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coeff-seed", type=int, default=None, help="Darcy coefficient-field seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", choices=["GL", "GL-aug", "GreenMGNet"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--run-dir")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", choices=["GL", "GL-aug", "GreenMGNet"])
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--export-pointwise", metavar="CSV", help="write mean E_u per grid node")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time training steps and kernel applies")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-kernel", help="evaluate a checkpoint on all grid pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--points-csv", help="also write the MLMI point set as CSV")
    p.set_defaults(func=cmd_export_kernel)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except GreenMGError as exc:
        print(f"greenmg: error: {exc}", file=sys.stderr)
        return _FAMILY_CODES.get(exc.family, EXIT_USAGE)
    except OSError as exc:
        print(f"greenmg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
