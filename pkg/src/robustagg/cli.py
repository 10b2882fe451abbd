"""Command-line front end.

Subcommands:

* ``simulate``            -- run a Monte Carlo study and write the metrics /
                             per-server detection-rate CSVs.
* ``fit-aggregate-detect``-- ingest one CSV shard per server, fit locally,
                             aggregate robustly and by weighted average, and
                             write the aggregation and detection reports.
* ``tau``                 -- print the efficiency constant for a tuning value.
* ``check``               -- run quick numerical self-tests.

Configuration files are flat ``key = value`` text (``#`` comments allowed);
any command-line override wins over the file.  All output files are written
with full-precision floats so a rerun of the same seeded invocation is
byte-identical; human-readable tables round to 6 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, RobustAggError
from . import numkit
from .aggregate import (
    HuberConfig,
    LocalEstimate,
    huber_aggregate,
    standard_errors,
    tau_c,
    weighted_average,
)
from .detect import detect
from .distsim import (
    WORKERS_ENV_VAR,
    ContaminationKind,
    ContaminationSpec,
    StudyConfig,
    decode_message,
    default_workers,
    detection_rates_to_csv,
    encode_message,
    run_study,
    study_metrics_to_csv,
)
from .models import ModelKind, ModelSpec, Observations, fit_local
from .spatialmed import aggregate_sigma

_CONFIG_KEYS = {
    "model": str,
    "theta0": str,
    "K": int,
    "n": int,
    "c": float,
    "alpha": float,
    "replicates": int,
    "seed": int,
    "contamination": str,
    "count": int,
    "gaussian_scale": float,
    "omniscient_value": str,
    "workers": int,
}


def _parse_model(text: str) -> ModelKind:
    try:
        return ModelKind(text.strip().lower())
    except ValueError:
        raise ConfigError(
            f"unknown model {text!r} (expected 'logistic' or 'linear')"
        ) from None


def _parse_contamination(text: str) -> ContaminationKind:
    try:
        return ContaminationKind(text.strip().lower())
    except ValueError:
        valid = ", ".join(k.value for k in ContaminationKind)
        raise ConfigError(
            f"unknown contamination {text!r} (expected one of {valid})"
        ) from None


def _parse_floats(text: str, key: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(" ", "").split(",") if v != "")
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers") from None


def parse_config_file(path: Path) -> dict:
    """Read a flat key=value file; reject unknown keys and bad values."""
    values: dict = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        caster = _CONFIG_KEYS[key]
        try:
            values[key] = caster(value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: value for {key!r} must be of type {caster.__name__}"
            ) from None
    return values


def make_study_config(file_values: dict, args: argparse.Namespace) -> tuple[StudyConfig, int]:
    """Resolve file values and CLI overrides into a validated study design."""

    def pick(key: str, override, default):
        if override is not None:
            return override
        if key in file_values:
            return file_values[key]
        return default

    model = pick("model", args.model, "logistic")
    if isinstance(model, str):
        model = _parse_model(model)
    theta0 = pick("theta0", args.theta0, "2,1")
    if isinstance(theta0, str):
        theta0 = _parse_floats(theta0, "theta0")
    kind = pick("contamination", args.contamination, "none")
    if isinstance(kind, str):
        kind = _parse_contamination(kind)
    omniscient = pick("omniscient_value", args.omniscient_value, None)
    if isinstance(omniscient, str):
        omniscient = _parse_floats(omniscient, "omniscient_value")

    try:
        spec = ContaminationSpec(
            kind=kind,
            count=pick("count", args.count, None),
            omniscient_value=omniscient,
            gaussian_scale=pick("gaussian_scale", args.gaussian_scale, 200.0),
        )
        config = StudyConfig(
            model=model,
            theta0=theta0,
            n_servers=pick("K", args.K, 20),
            shard_size=pick("n", args.n, 1000),
            c=pick("c", args.c, 1.345),
            contamination=spec,
            replicates=pick("replicates", args.replicates, 200),
            alpha=pick("alpha", args.alpha, 0.05),
            base_seed=pick("seed", args.seed, 20240501),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    workers = pick("workers", args.workers, default_workers())
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return config, workers


def _sig6(x: float) -> str:
    return format(float(x), ".6g")


def _print_metrics_table(metrics) -> None:
    p = metrics.config.p
    print(
        f"replicates: {metrics.replicates_completed} "
        f"(failed: {metrics.replicates_failed}), "
        f"runtime: {metrics.runtime_seconds:.2f}s"
    )
    print(
        f"{'estimator':<18}{'coef':>5}{'bias':>14}{'sd':>14}{'ase':>14}{'cp':>8}{'re':>14}"
    )
    for name, est in (("huber", metrics.huber), ("weighted_average", metrics.weighted)):
        for j in range(p):
            re_cell = _sig6(metrics.relative_efficiency[j]) if name == "huber" else ""
            print(
                f"{name:<18}{j + 1:>5}{_sig6(est.bias[j]):>14}{_sig6(est.sd[j]):>14}"
                f"{_sig6(est.ase[j]):>14}{_sig6(est.cp[j]):>8}{re_cell:>14}"
            )
    if metrics.hit_rate is not None:
        print(f"hit rate (HR): {_sig6(metrics.hit_rate)}")
    print(f"mean flagged fraction: {_sig6(metrics.flag_rate)}")
    flagged = [
        sid for sid, rate in sorted(metrics.per_server_flag_rate.items()) if rate > 0.5
    ]
    if flagged:
        print(
            "detection: servers flagged in a majority of replicates: "
            + ", ".join(str(s) for s in flagged)
        )


def cmd_simulate(args: argparse.Namespace) -> int:
    file_values = parse_config_file(Path(args.config)) if args.config else {}
    config, workers = make_study_config(file_values, args)
    out_dir = Path(args.out_dir)
    if args.dry_run:
        print(
            f"dry run: would execute {config.replicates} replicates "
            f"(model={config.model.value}, K={config.n_servers}, n={config.shard_size}, "
            f"c={config.c}, contamination={config.contamination.kind.value}, "
            f"workers={workers}) and write {out_dir / 'metrics.csv'}"
        )
        return 0
    metrics = run_study(config, workers=workers)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        study_metrics_to_csv(metrics, fh)
    with open(out_dir / "detection_rates.csv", "w", newline="") as fh:
        detection_rates_to_csv(metrics, fh)
    _print_metrics_table(metrics)
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'detection_rates.csv'}")
    return 0


def _read_shard(path: Path, expected_header: list[str] | None):
    """Parse one server's CSV shard; returns (header, observations)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open shard {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: shard file is empty") from None
        if "y" not in header:
            raise ConfigError(f"{path}: header must contain a 'y' column")
        if expected_header is not None and header != expected_header:
            raise ConfigError(
                f"{path}: header {header} does not match first shard {expected_header}"
            )
        y_idx = header.index("y")
        ys, rows = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f"{path}:{rowno}: row has {len(row)} cells, header has {len(header)}"
                )
            numbers = []
            for colno, cell in enumerate(row, start=1):
                try:
                    numbers.append(float(cell))
                except ValueError:
                    raise ConfigError(
                        f"{path}:{rowno}: column {colno} ({header[colno - 1]!r}) "
                        f"is not numeric: {cell!r}"
                    ) from None
            ys.append(numbers[y_idx])
            rows.append([v for i, v in enumerate(numbers) if i != y_idx])
    if not rows:
        raise ConfigError(f"{path}: shard contains no observations")
    return header, Observations(np.array(ys), np.array(rows))


def cmd_pipeline(args: argparse.Namespace) -> int:
    shard_paths = sorted(Path(p) for p in args.shards)
    model_kind = _parse_model(args.model)
    if not args.c > 0:
        raise ConfigError("c must be positive")
    if not 0.0 < args.alpha < 1.0:
        raise ConfigError("alpha must lie strictly between 0 and 1")
    out_dir = Path(args.out_dir)

    header = None
    shards = []
    for path in shard_paths:
        header, obs = _read_shard(path, header)
        shards.append(obs)
    covariates = [h for h in header if h != "y"]

    if args.dry_run:
        total = sum(s.n for s in shards)
        print(
            f"dry run: {len(shards)} shards validated "
            f"({total} observations, covariates: {', '.join(covariates)}); "
            f"would write {out_dir / 'aggregate.csv'} and {out_dir / 'detection.csv'}"
        )
        return 0

    model = ModelSpec(model_kind, len(covariates))
    estimates = []
    for path, obs in zip(shard_paths, shards):
        fit = fit_local(model, obs, server_id=path.stem)
        est = LocalEstimate(
            server_id=fit.server_id,
            n_k=fit.n_k,
            theta_star=fit.theta_hat,
            sigma_star=fit.sigma_hat,
        )
        # Exercise the same wire codec the distributed system would use.
        estimates.append(decode_message(encode_message(est)))

    total = sum(e.n_k for e in estimates)
    if args.trusted_server is not None:
        by_id = {str(e.server_id): e for e in estimates}
        if args.trusted_server not in by_id:
            raise ConfigError(f"trusted server {args.trusted_server!r} not among shards")
        sigma_hat = numkit.ensure_symmetric(by_id[args.trusted_server].sigma_star)
    else:
        sigma_hat = aggregate_sigma(estimates)

    result = huber_aggregate(estimates, sigma_hat, HuberConfig(c=args.c))
    theta_bar, sigma_bar = weighted_average(estimates)
    se_wa = standard_errors(sigma_bar, total, 1.0)
    report = detect(estimates, result.theta_hat, sigma_hat, alpha=args.alpha)

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["coefficient", "name", "huber", "huber_se", "weighted_average", "weighted_average_se"]
        )
        for j, name in enumerate(covariates):
            writer.writerow(
                [
                    j + 1,
                    name,
                    repr(float(result.theta_hat[j])),
                    repr(float(result.se[j])),
                    repr(float(theta_bar[j])),
                    repr(float(se_wa[j])),
                ]
            )
    with open(out_dir / "detection.csv", "w", newline="") as fh:
        report.to_csv(fh)

    print(f"servers: {len(estimates)}, N = {total}, c = {args.c}, tau = {_sig6(result.tau)}")
    print(f"{'coefficient':<16}{'huber':>14}{'(se)':>12}{'weighted':>14}{'(se)':>12}")
    for j, name in enumerate(covariates):
        print(
            f"{name:<16}{_sig6(result.theta_hat[j]):>14}{_sig6(result.se[j]):>12}"
            f"{_sig6(theta_bar[j]):>14}{_sig6(se_wa[j]):>12}"
        )
    flagged_theta = report.flagged_theta_ids()
    flagged_sigma = report.flagged_sigma_ids()
    print(f"detection threshold sqrt(chi2_{report.p},{report.alpha}) = {_sig6(report.threshold)}")
    print("flagged estimates: " + (", ".join(map(str, flagged_theta)) or "none"))
    print("flagged variances: " + (", ".join(map(str, flagged_sigma)) or "none"))
    print(f"wrote {out_dir / 'aggregate.csv'} and {out_dir / 'detection.csv'}")
    return 0


def cmd_tau(args: argparse.Namespace) -> int:
    c = math.inf if args.c.lower() in ("inf", "infinity") else float(args.c)
    if not c > 0:
        raise ConfigError("c must be positive")
    print(f"tau_c({args.c}) = {tau_c(c):.6g}")
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    """Fast self-tests of the numerical kernels; exit nonzero on any failure."""
    rng = np.random.default_rng(7)
    failures = []

    def check(name: str, ok: bool) -> None:
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    a = rng.standard_normal((4, 4))
    sym = (a + a.T) / 2
    check("vech round trip", np.array_equal(numkit.vech_inv(numkit.vech(sym), 4), sym))

    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    pd = (q * np.array([5.0, 2.0, 1.0, 0.5, 0.01])) @ q.T
    b = numkit.inv_sqrt_pd(pd)
    check("inverse square root identity", np.abs(b @ pd @ b - np.eye(5)).max() < 1e-8)

    check("pd projection floor", numkit.min_eigenvalue(numkit.pd_project(sym, 1e-5)) >= 1e-5 - 1e-12)

    check("tau_c(1.345) ~ 0.95", abs(tau_c(1.345) - 0.950) < 1e-3)
    check("tau_c(inf) = 1", tau_c(math.inf) == 1.0)

    est = LocalEstimate(server_id=3, n_k=17, theta_star=rng.standard_normal(3), sigma_star=pd[:3, :3])
    check("wire codec round trip", decode_message(encode_message(est)).theta_star.tolist() == est.theta_star.tolist())

    pdf, cdf = numkit.std_normal(0.0)
    check("standard normal at zero", abs(pdf - 1 / math.sqrt(2 * math.pi)) < 1e-15 and cdf == 0.5)

    check("chi2 quantile dof=2", abs(numkit.chi2_quantile(2, 0.05) - (-2.0 * math.log(0.05))) < 1e-9)

    if failures:
        print(f"{len(failures)} self-test(s) failed")
        return 1
    print("all self-tests passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustagg",
        description="Robust aggregation of local M-estimators for distributed data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--config", help="flat key=value configuration file")
    sim.add_argument("--model", choices=["logistic", "linear"])
    sim.add_argument("--theta0", help="comma-separated true coefficients")
    sim.add_argument("--K", type=int, help="number of servers")
    sim.add_argument("--n", type=int, help="observations per server")
    sim.add_argument("--c", type=float, help="Huber tuning constant")
    sim.add_argument("--alpha", type=float, help="detection level")
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument(
        "--contamination", choices=[k.value for k in ContaminationKind]
    )
    sim.add_argument("--count", type=int, help="number of contaminated servers")
    sim.add_argument("--gaussian-scale", dest="gaussian_scale", type=float)
    sim.add_argument("--omniscient-value", dest="omniscient_value")
    sim.add_argument(
        "--workers",
        type=int,
        help=f"process count (default ${WORKERS_ENV_VAR} or 1)",
    )
    sim.add_argument("--out-dir", default=".", help="where to write the CSVs")
    sim.add_argument("--dry-run", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    pipe = sub.add_parser(
        "fit-aggregate-detect",
        help="fit one CSV shard per server, aggregate, and screen for contamination",
    )
    pipe.add_argument("shards", nargs="+", help="CSV files, one per server")
    pipe.add_argument("--model", default="logistic", choices=["logistic", "linear"])
    pipe.add_argument("--c", type=float, default=1.345)
    pipe.add_argument("--alpha", type=float, default=0.05)
    pipe.add_argument(
        "--trusted-server",
        help="use this server's variance matrix instead of the spatial-median aggregate",
    )
    pipe.add_argument("--out-dir", default=".")
    pipe.add_argument("--dry-run", action="store_true")
    pipe.set_defaults(func=cmd_pipeline)

    tau = sub.add_parser("tau", help="print the efficiency constant tau_c")
    tau.add_argument("c", help="tuning constant (or 'inf')")
    tau.set_defaults(func=cmd_tau)

    chk = sub.add_parser("check", help="run quick numerical self-tests")
    chk.set_defaults(func=cmd_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (RobustAggError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
