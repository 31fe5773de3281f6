"""``lsn`` command line: synth, train, eval, analyze, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 runtime abort (non-finite
loss), 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import datakit, evalkit, gradsuite, spanlab
from . import tensor as T
from .config import Config, ConfigError, load_config
from .container import ContainerError
from .model import NetworkSpec, build_variant, init_params, prepare_image, probability
from .trainer import Checkpoint, Divergence, trace_csv, train

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("lsn")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def spec_for(cfg: Config) -> NetworkSpec:
    return build_variant(int(cfg.variant[3:]), cfg.width_multiplier)


def sidecar(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".config")


def _load_cfg(path: str | None) -> Config:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(f"config {path}: {exc}", EXIT_USAGE) from None
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from None


def _load_data(path: str) -> list[datakit.Sample]:
    if not Path(path).is_dir():
        raise CliError(f"dataset directory {path} does not exist", EXIT_IO)
    try:
        data = datakit.load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"dataset {path}: {exc}", EXIT_IO) from None
    if not data:
        raise CliError(f"dataset {path} has no image/label pairs", EXIT_IO)
    return data


def _load_ckpt(path: str, spec: NetworkSpec) -> Checkpoint:
    try:
        ckpt = Checkpoint.load(path)
    except (OSError, ContainerError) as exc:
        raise CliError(f"checkpoint {path}: {exc}", EXIT_IO) from None
    for name, ref in init_params(spec, 0).items():
        if name not in ckpt.params:
            raise CliError(f"checkpoint {path} lacks parameter {name!r}", EXIT_USAGE)
        if ckpt.params[name].shape != ref.shape:
            raise CliError(f"checkpoint {path}: parameter {name!r} has shape {ckpt.params[name].shape}, "
                           f"expected {ref.shape}", EXIT_USAGE)
    return ckpt


def _model_cfg(args) -> Config:
    """--config if given, else the sidecar written next to the checkpoint, else defaults."""
    if args.config:
        return _load_cfg(args.config)
    side = sidecar(Path(args.ckpt))
    return _load_cfg(str(side) if side.exists() else None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    try:
        datakit.check_size(args.size)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    if args.count < 0:
        raise CliError("--count must be >= 0", EXIT_USAGE)
    try:
        datakit.synth_dataset(args.out, args.count, args.size, args.seed)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_IO) from None
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    spec = spec_for(cfg)
    tcfg = cfg.train_config()
    data = _load_data(args.data)
    out = Path(args.out)
    start = None
    if args.resume:
        start = _load_ckpt(args.resume, spec)
        if start.iteration >= tcfg.max_iters:
            print(f"checkpoint already at iteration {start.iteration} >= max_iters {tcfg.max_iters}; nothing to do")
            return EXIT_OK
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        ckpt, trace = train(spec, data, tcfg, start)
    except Divergence as exc:
        print(f"aborted: {exc}; last good state saved to {out}", file=sys.stderr)
        ckpt, trace, code = exc.checkpoint, exc.trace, EXIT_ABORT
    wall = time.perf_counter() - t0
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        ckpt.save(out)
        out.with_name(out.name + ".loss.csv").write_text(trace_csv(trace, spec.supervision))
        sidecar(out).write_text(cfg.dumps())
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO) from None
    final = trace[-1][2] if trace else float("nan")
    print(f"final loss {final:.6g} wall time {wall:.1f}s")
    return code


ProbabilityFn = Callable[[datakit.Sample], np.ndarray]


def cmd_eval(args, probability_fn: ProbabilityFn | None = None) -> int:
    cfg = _model_cfg(args)
    data = _load_data(args.data)
    if probability_fn is None:
        spec = spec_for(cfg)
        params = _load_ckpt(args.ckpt, spec).params
        probability_fn = lambda s: probability(spec, params, prepare_image(s.image))  # noqa: E731
    frac = cfg.tolerance_frac if args.tolerance is None else args.tolerance
    if frac < 0:
        raise CliError("--tolerance must be >= 0", EXIT_USAGE)
    report = evalkit.evaluate(((probability_fn(s), s.gt) for s in data),
                              evalkit.default_thresholds(cfg.thresholds), tolerance_frac=frac)
    try:
        Path(args.report).write_text(report.to_csv())
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_IO) from None
    print("ODS OIS AP F")
    print(f"{report.ods:.6f} {report.ois:.6f} {report.ap:.6f} {report.f_measure:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _model_cfg(args)
    data = _load_data(args.data)
    spec = spec_for(cfg)
    params = _load_ckpt(args.ckpt, spec).params
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "stage", "per_stage_residual", "cumulative_residual", "stack_rank"])
    for s in data:
        stacks, labels = spanlab.extract_features(spec, params, prepare_image(s.image, "verification"))
        prof = spanlab.residual_profile(stacks, s.gt.astype(np.float64), labels)
        for i, label in enumerate(prof.labels):
            w.writerow([s.id, label, repr(prof.per_stage[i]), repr(prof.cumulative[i]), prof.cumulative_rank[i]])
    try:
        Path(args.report).write_text(buf.getvalue())
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_IO) from None
    print(f"analysed {len(data)} images")
    return EXIT_OK


_CORRUPTIBLE = {cls.name: cls for cls in (T.Conv2d, T.Relu, T.Sigmoid, T.MaxPool2, T.Concat, T.Narrow,
                                          T.UpsampleFixed, T.UpsampleLearned, T.Add, T.Scale, T.Sum)}


def cmd_gradcheck(args) -> int:
    if args.corrupt and args.corrupt not in _CORRUPTIBLE:
        raise CliError(f"unknown op {args.corrupt!r}; choose from {', '.join(sorted(_CORRUPTIBLE))}", EXIT_USAGE)
    t0 = time.perf_counter()
    if args.corrupt:
        with gradsuite.corrupted_backward(_CORRUPTIBLE[args.corrupt]):
            report = gradsuite.run_suite(args.seed)
    else:
        report = gradsuite.run_suite(args.seed)
    ok = True
    for name, err in report.items():
        passed = err <= gradsuite.TOLERANCE
        ok &= passed
        print(f"{name:20s} {err:.3e} {'ok' if passed else 'FAIL'}")
    print(f"{'all ok' if ok else 'FAILED'} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_ABORT


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lsn", description="Linear span networks for skeleton detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic skeleton dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a network")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PR sweep with ODS/OIS/AP")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--tolerance", type=float, help="match tolerance as a fraction of the image diagonal")
    s.add_argument("--config", help="model config (default: the checkpoint's .config sidecar)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="per-stage and cumulative span residuals")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--config", help="model config (default: the checkpoint's .config sidecar)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corrupt", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None, probability_fn: ProbabilityFn | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.func is cmd_eval:
            return cmd_eval(args, probability_fn)
        return args.func(args)
    except CliError as exc:
        print(f"lsn {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
