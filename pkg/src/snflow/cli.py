"""Command-line driver: ``snflow {oracle-check,train,sample,evaluate,baseline}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("snflow")


def _set_threads(n):
    # must run before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_y(text):
    import numpy as np
    if text.startswith("@"):
        rows = [r for r in csv.reader(Path(text[1:]).read_text().splitlines())
                if r and not r[0].startswith("#")]
        return np.array([float(v) for v in rows[0]])
    return np.array([float(v) for v in text.split(",")])


def _load_config(args):
    from .config import ExperimentConfig
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_samples(path, samples, header):
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow([f"x_{i + 1}" for i in range(samples.shape[1])])
        for row in samples:
            w.writerow([repr(float(v)) for v in row])


def _fmt_y(y):
    return ",".join(repr(float(v)) for v in y)


def cmd_oracle_check(args, out):
    from .experiment import oracle_check
    cfg = _load_config(args)
    report = oracle_check(cfg)
    if report.prior_only:
        print("operator is zero: the posterior equals the prior", file=out)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}, TV error max {report.tv_errors.max():.3e} mean {report.tv_errors.mean():.3e} "
          f"over {report.tv_errors.size} observations (tolerance {report.tolerance:.0e})", file=out)
    return 0 if report.passed else 1


def cmd_train(args, out):
    import numpy as np
    from .chain import LossConfig, TrainingDiverged, train
    from .experiment import STREAM_TRAIN, build_chain, build_problem, save_model, stream
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.ini").write_text(cfg.to_ini())
    bundle = build_problem(cfg)
    if bundle.surrogate_rmse is not None:
        print(f"surrogate training RMSE {bundle.surrogate_rmse:.4g}", file=out)
    chain = build_chain(cfg, bundle)
    tr = cfg.training
    loss_cfg = LossConfig(tr["lam"], tr["batch_size"], tr["steps"], tr["lr"])
    status = 0
    try:
        trace = train(chain, bundle.problem, loss_cfg, stream(cfg.seed, STREAM_TRAIN))
    except TrainingDiverged as exc:
        trace = exc.trace
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    with open(out_dir / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    if status:
        return status
    digest = save_model(out_dir / "model.npz", cfg, bundle, chain)
    if trace:
        k = min(50, len(trace))
        print(f"loss first {np.mean(trace[:k]):.5f} last {np.mean(trace[-k:]):.5f} "
              f"(means over {k} steps)", file=out)
    print(f"model written to {out_dir / 'model.npz'} sha256 {digest}", file=out)
    return 0


def cmd_sample(args, out):
    import numpy as np
    from .experiment import load_model, model_sampler
    _, bundle, chain, digest = load_model(args.model)
    y = _parse_y(args.y)
    if y.size != bundle.problem.obs_dim:
        print(f"error: observation has {y.size} entries, model expects {bundle.problem.obs_dim}",
              file=sys.stderr)
        return 2
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    samples = model_sampler(chain)(y, args.n, rng) if args.n > 0 else np.zeros((0, chain.dim))
    path = Path(args.out) if args.out else Path(args.out_dir) / "samples.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_samples(path, samples, [f"model_sha256 {digest}", f"y {_fmt_y(y)}", f"seed {seed}"])
    print(f"{samples.shape[0]} samples written to {path}", file=out)
    return 0


def cmd_evaluate(args, out):
    from .evaluation import EvalResult, binned_kl_report, wasserstein1, write_metrics_csv
    from .experiment import (STREAM_EVAL, evaluation_observations, load_model, model_sampler,
                             reference_sampler, stream)
    cfg, bundle, chain, _ = load_model(args.model)
    if args.config:
        override = _load_config(args)
        cfg.evaluation.update(override.evaluation)
    ev = cfg.evaluation
    ys = evaluation_observations(cfg, bundle)
    ref = reference_sampler(cfg, bundle)
    model = model_sampler(chain)
    rng = stream(cfg.seed, STREAM_EVAL + 100)
    n = ev["n_samples"]
    vals, floor, cover = [], [], []
    for y in ys:
        m = model(y, n, rng)
        r1 = ref(y, n, rng)
        r2 = ref(y, n, rng)
        if ev["metric"] == "w1":
            vals.append(wasserstein1(r1, m, ev["cap"]))
            floor.append(wasserstein1(r1, r2, ev["cap"]))
        else:
            rep = binned_kl_report(r1, m, resolution=ev["resolution"])
            vals.append(rep.value)
            cover.append(rep.coverage)
            floor.append(binned_kl_report(r1, r2, resolution=ev["resolution"]).value)
    import numpy as np
    results = {ev["metric"]: EvalResult(ev["metric"], np.array(vals)),
               f"{ev['metric']}_noise_floor": EvalResult(ev["metric"], np.array(floor))}
    if cover:
        results["coverage"] = EvalResult("coverage", np.array(cover))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", results)
    for name, res in results.items():
        print(f"{name}: {res.mean:.5f} +- {res.std:.5f}", file=out)
    return 0


def cmd_baseline(args, out):
    from .experiment import (STREAM_BASELINE, build_problem, evaluation_observations,
                             reference_sampler, stream)
    cfg = _load_config(args)
    bundle = build_problem(cfg)
    if args.y is not None:
        y = _parse_y(args.y)
    else:
        y = evaluation_observations(cfg, bundle)[args.y_index]
    if y.size != bundle.problem.obs_dim:
        print(f"error: observation has {y.size} entries, problem expects {bundle.problem.obs_dim}",
              file=sys.stderr)
        return 2
    n = args.n if args.n is not None else cfg.evaluation["n_samples"]
    samples = reference_sampler(cfg, bundle)(y, n, stream(cfg.seed, STREAM_BASELINE))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.ini").write_text(cfg.to_ini())
    path = out_dir / "baseline.csv"
    _write_samples(path, samples, [f"y {_fmt_y(y)}", f"seed {cfg.seed}"])
    print(f"{samples.shape[0]} reference samples written to {path}", file=out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="snflow", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS so reductions run in a fixed order")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle-check", parents=[common], help="closed-form posterior vs quadrature")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("train", parents=[common], help="train a chain")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="posterior samples from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--y", required=True, help="comma-separated observation, or @file.csv")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", default=None, help="CSV path (default <out-dir>/samples.csv)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", parents=[common], help="metrics against reference samples")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None, help="take the [evaluation] section from this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", parents=[common], help="reference posterior samples")
    p.add_argument("--config", required=True)
    p.add_argument("--y", default=None, help="observation (default: evaluation observation)")
    p.add_argument("--y-index", type=int, default=0)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    if args.deterministic:
        _set_threads(1)
    elif args.threads:
        _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .config import ConfigError
    try:
        return args.func(args, out)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
