"""Command-line front end: simulate / train / estimate / evaluate.

All randomness flows from explicit seeds (CLI flag or config key); nothing
reads the clock or other environment entropy.  Exit codes: 0 success,
2 configuration or validation failure, 3 I/O failure, 4 numeric failure.
"""

# Pin BLAS pools before numpy loads so gradient reductions use a fixed
# single-threaded order; --threads parallelizes only across independent runs.
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, read_csv, write_csv
from .errors import ConfigurationError, DataError, NumericError
from .estimators import (
    estimate_ate,
    format_estimate_report,
    parse_estimate_report,
    selected_covariates,
)
from .network import NetworkConfig
from .prior import PriorHyperparameters
from .simlab import (
    MetricsReport,
    ci_coverage,
    fsr_nsr,
    gen_ar2_missing,
    gen_linear_gaussian,
    gen_varying_size,
    mae_ate,
    pehe,
)
from .training import CovariateModel, TrainingSchedule, train

THREADS_ENV = "CAUSAL_STONET_THREADS"

_TRUTH_HEADER = "truth-sidecar v1"
_METRICS_HEADER = "metrics-report v1"
_TRAINREPORT_HEADER = "training-report v1"


# ---------------------------------------------------------------------------
# flat key = value config files
# ---------------------------------------------------------------------------

# name -> (type tag, required, default, help)
CONFIG_SCHEMA: dict[str, tuple[str, bool, str, str]] = {
    "train_csv": ("str", True, "", "training dataset CSV (x1..xp,A,Y)"),
    "out_dir": ("str", True, "", "directory for checkpoint and training report"),
    "layer_widths": ("int_list", True, "", "p,d1,...,dh,d_out"),
    "noise_variances": ("float_list", True, "", "per-layer latent noise variances"),
    "treatment_layer": ("int", True, "", "1-based hidden layer hosting the treatment unit"),
    "treatment_position": ("int", True, "", "0-based slot index inside that layer"),
    "activation": ("str", False, "tanh", "tanh | sigmoid | relu | identity"),
    "output_kind": ("str", False, "continuous-gaussian", "continuous-gaussian | binary-logistic"),
    "treatment_temperature": ("float", False, "1.0", "divisor on the treatment log-mass"),
    "prior_lambda": ("float", True, "", "slab mixture proportion"),
    "prior_sigma0_sq": ("float", True, "", "spike variance"),
    "prior_sigma1_sq": ("float", True, "", "slab variance"),
    "include_bias_prior": ("bool", False, "true", "penalize biases like weights"),
    "epochs_pretrain": ("int", True, "", "constant-step warmup epochs"),
    "epochs_train": ("int", True, "", "decaying-step epochs before final pruning"),
    "epochs_refine": ("int", True, "", "masked refinement epochs"),
    "batch_size": ("int", True, "", "mini-batch size"),
    "impute_lr": ("float_list", True, "", "per-hidden-layer SGHMC step sizes"),
    "param_lr": ("float_list", True, "", "per-layer parameter step sizes (train phase)"),
    "param_lr_refine": ("float_list", False, "", "refine-phase step sizes (default: train/10)"),
    "miss_lr": ("float", False, "", "covariate-imputation step size"),
    "t_mc": ("int", False, "1", "SGHMC sweeps per imputation"),
    "eta": ("float", False, "0.1", "SGHMC friction"),
    "impute_decay": ("float", False, "1.2", "imputation step decay exponent"),
    "param_decay": ("float", False, "1.2", "parameter step decay exponent"),
    "schedule_form": ("str", False, "a8", "a8 | lemma1"),
    "lemma1_offset": ("float", False, "1.0", "offset of the lemma1 schedule"),
    "seed": ("int", False, "0", "master seed for the whole run"),
    "num_runs": ("int", False, "1", "independent runs; best kept by BIC"),
    "prune_epochs": ("str", False, "end", "end | none | comma list of train-phase epochs"),
    "grad_clip": ("float", False, "", "per-layer gradient norm clip (empty: off)"),
    "tail_length": ("int", False, "30", "trajectory tail kept for averaging"),
    "store_latent_tail": ("bool", False, "false", "keep latent snapshots in the tail"),
    "covariate_model": ("str", False, "diagonal", "none | diagonal | neighborhood"),
    "covariate_bandwidth": ("int", False, "2", "band half-width for the neighborhood fit"),
    "covariate_precision_csv": ("str", False, "", "known precision matrix (overrides fitting)"),
    "clip_kappa": ("float", False, "0.01", "propensity clipping constant"),
    "ci_alpha": ("float", False, "0.05", "confidence level alpha"),
    "metrics": ("str_list", False, "mae,coverage,selection,pehe", "metrics for evaluate"),
}


def print_schema(stream=None) -> None:
    stream = stream or sys.stdout
    stream.write("# configuration schema: flat `key = value` lines, '#' comments\n")
    for key, (kind, required, default, help_) in CONFIG_SCHEMA.items():
        req = "required" if required else f"default: {default!r}"
        stream.write(f"{key}  ({kind}; {req})  {help_}\n")


def _parse_value(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError("expected true/false")
            return raw == "true"
        if kind == "int_list":
            return tuple(int(tok) for tok in raw.split(",") if tok)
        if kind == "float_list":
            return tuple(float(tok) for tok in raw.split(",") if tok)
        if kind == "str_list":
            return tuple(tok.strip() for tok in raw.split(",") if tok.strip())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} ({exc})") from exc


def load_config(path) -> dict:
    """Parse and validate a flat key = value config file."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if not sep:
                raise ConfigurationError(f"{path}:{lineno}: expected `key = value`")
            if key not in CONFIG_SCHEMA:
                raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigurationError(f"{path}:{lineno}: duplicate config key {key!r}")
            values[key] = _parse_value(key, CONFIG_SCHEMA[key][0], raw)
    missing = [k for k, (_, req, _, _) in CONFIG_SCHEMA.items() if req and k not in values]
    if missing:
        raise ConfigurationError(f"missing required config keys: {', '.join(missing)}")
    for key, (kind, required, default, _) in CONFIG_SCHEMA.items():
        if key not in values:
            values[key] = _parse_value(key, kind, default) if default != "" else None
    return values


def _build_objects(cfg: dict):
    config = NetworkConfig(
        layer_widths=cfg["layer_widths"],
        noise_variances=cfg["noise_variances"],
        treatment_layer=cfg["treatment_layer"],
        treatment_position=cfg["treatment_position"],
        activation=cfg["activation"],
        output_kind=cfg["output_kind"],
        treatment_temperature=cfg["treatment_temperature"],
    )
    hyper = PriorHyperparameters(
        lambda_n=cfg["prior_lambda"],
        sigma0_sq=cfg["prior_sigma0_sq"],
        sigma1_sq=cfg["prior_sigma1_sq"],
    )
    prune_raw = cfg["prune_epochs"]
    if prune_raw == "end":
        prune = None
    elif prune_raw == "none":
        prune = ()
    else:
        prune = tuple(int(tok) for tok in prune_raw.split(",") if tok)
    schedule = TrainingSchedule(
        epochs_pretrain=cfg["epochs_pretrain"],
        epochs_train=cfg["epochs_train"],
        epochs_refine=cfg["epochs_refine"],
        batch_size=cfg["batch_size"],
        impute_lr=cfg["impute_lr"],
        param_lr=cfg["param_lr"],
        param_lr_refine=cfg["param_lr_refine"] or None,
        miss_lr=cfg["miss_lr"],
        t_mc=cfg["t_mc"],
        eta=cfg["eta"],
        impute_decay=cfg["impute_decay"],
        param_decay=cfg["param_decay"],
        schedule_form=cfg["schedule_form"],
        lemma1_offset=cfg["lemma1_offset"],
        seed=cfg["seed"],
        num_runs=cfg["num_runs"],
        prune_epochs=prune,
        grad_clip=cfg["grad_clip"],
        tail_length=cfg["tail_length"],
        store_latent_tail=cfg["store_latent_tail"],
        include_bias_prior=cfg["include_bias_prior"],
    )
    return config, hyper, schedule


def _covariate_model(cfg: dict, dataset: Dataset):
    if not dataset.has_missing:
        return None
    path = cfg.get("covariate_precision_csv")
    if path:
        precision = np.loadtxt(path, delimiter=",", dtype=np.float64)
        return CovariateModel(np.zeros(precision.shape[0]), precision)
    kind = cfg["covariate_model"]
    if kind == "none":
        raise ConfigurationError("dataset has missing values but covariate_model = none")
    if kind == "diagonal":
        return CovariateModel.fit_diagonal(dataset.x, dataset.observed)
    if kind == "neighborhood":
        return CovariateModel.fit_neighborhood(
            dataset.x, dataset.observed, bandwidth=cfg["covariate_bandwidth"]
        )
    raise ConfigurationError(f"unknown covariate_model {kind!r}")


# ---------------------------------------------------------------------------
# sidecar and metrics files
# ---------------------------------------------------------------------------


def _covnames(indices) -> str:
    return ",".join(f"x{j + 1}" for j in sorted(indices))


def write_truth_sidecar(path, generator, scenario, seed, sizes, truth) -> None:
    n_train, n_val, n_test = sizes
    lines = [
        _TRUTH_HEADER,
        f"generator = {generator}",
        f"scenario = {scenario}",
        f"seed = {seed}",
        f"n_train = {n_train}",
        f"n_val = {n_val}",
        f"n_test = {n_test}",
        f"ate = {truth.ate!r}",
        f"treatment_covariates = {_covnames(truth.treatment_covariates)}",
        f"outcome_covariates = {_covnames(truth.outcome_covariates)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_truth_sidecar(path) -> dict:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or lines[0] != _TRUTH_HEADER:
        raise DataError(f"{path}: not a recognized truth sidecar")
    out: dict = {}
    for ln in lines[1:]:
        key, _, val = ln.partition(" = ")
        val = val.strip()
        if key in ("treatment_covariates", "outcome_covariates"):
            out[key] = tuple(int(tok[1:]) - 1 for tok in val.split(",")) if val else ()
        elif key in ("seed", "n_train", "n_val", "n_test"):
            out[key] = int(val)
        elif key == "ate":
            out[key] = float(val)
        else:
            out[key] = val
    return out


def _write_truth_csv(dataset: Dataset, path) -> None:
    import pandas as pd

    pd.DataFrame(
        {"cate": dataset.truth.cate, "propensity": dataset.truth.propensity}
    ).to_csv(path, index=False)


def read_truth_csv(path):
    import pandas as pd

    frame = pd.read_csv(path)
    return frame["cate"].to_numpy(np.float64), frame["propensity"].to_numpy(np.float64)


def _fmt_opt(v) -> str:
    return "none" if v is None else repr(v)


def format_metrics_report(report: MetricsReport, n_reports: int) -> str:
    lines = [
        _METRICS_HEADER,
        f"n_reports = {n_reports}",
        f"mae_ate = {_fmt_opt(report.mae_ate)}",
        f"ci_coverage = {_fmt_opt(report.ci_coverage)}",
        f"fsr_treatment = {_fmt_opt(report.fsr_treatment)}",
        f"nsr_treatment = {_fmt_opt(report.nsr_treatment)}",
        f"fsr_outcome = {_fmt_opt(report.fsr_outcome)}",
        f"nsr_outcome = {_fmt_opt(report.nsr_outcome)}",
        f"pehe = {_fmt_opt(report.pehe)}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.generator == "varying-size":
        splits = gen_varying_size(args.n_train, args.n_val, args.n_test, args.seed)
        gen_name = "varying-size"
    elif args.generator == "ar2":
        splits = gen_ar2_missing(args.n_train, args.n_val, args.n_test, args.seed, args.scenario)
        gen_name = "ar2"
    elif args.generator == "linear":
        ds = gen_linear_gaussian(args.n_train + args.n_val + args.n_test, args.p, args.seed, args.tau)
        bounds = np.cumsum([args.n_train, args.n_val, args.n_test])
        import dataclasses

        def slice_ds(lo, hi):
            return Dataset(
                x=ds.x[lo:hi],
                a=ds.a[lo:hi],
                y=ds.y[lo:hi],
                observed=ds.observed[lo:hi],
                truth=dataclasses.replace(
                    ds.truth, cate=ds.truth.cate[lo:hi], propensity=ds.truth.propensity[lo:hi]
                ),
            )

        from .data import TrainValTest

        splits = TrainValTest(
            train=slice_ds(0, bounds[0]),
            val=slice_ds(bounds[0], bounds[1]),
            test=slice_ds(bounds[1], bounds[2]),
        )
        gen_name = "linear"
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigurationError(f"unknown generator {args.generator!r}")

    for name, ds in zip(("train", "val", "test"), splits):
        write_csv(ds, out / f"{name}.csv")
        _write_truth_csv(ds, out / f"{name}_truth.csv")
    write_truth_sidecar(
        out / "truth.txt",
        gen_name,
        getattr(args, "scenario", "complete"),
        args.seed,
        (args.n_train, args.n_val, args.n_test),
        splits.train.truth,
    )
    print(f"wrote train/val/test CSVs and truth sidecar to {out}")
    return 0


def _training_report_text(fitted) -> str:
    lines = [
        _TRAINREPORT_HEADER,
        f"n_train = {fitted.n_train}",
        f"bic = {fitted.bic!r}",
        f"run_index = {fitted.run_index}",
        f"active_parameters = {fitted.mask.count_active()}",
        f"total_parameters = {fitted.params.n_parameters()}",
        "epoch stage log_likelihood log_posterior",
    ]
    stages = fitted.diagnostics["stage"]
    ll = fitted.diagnostics["log_likelihood"]
    lp = fitted.diagnostics["log_posterior"]
    for i, (st, a, b) in enumerate(zip(stages, ll, lp), start=1):
        lines.append(f"{i} {st} {a!r} {b!r}")
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    config, hyper, schedule = _build_objects(cfg)
    dataset = read_csv(cfg["train_csv"])
    cov_model = _covariate_model(cfg, dataset)
    fitted = train(dataset, config, hyper, schedule, cov_model, threads=args.threads)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(fitted, out / "checkpoint.txt")
    (out / "training_report.txt").write_text(_training_report_text(fitted), encoding="utf-8")
    print(f"checkpoint written to {out / 'checkpoint.txt'} (bic = {fitted.bic:.6g})")
    return 0


def cmd_estimate(args) -> int:
    fitted = load_checkpoint(args.checkpoint)
    dataset = read_csv(args.data)
    est = estimate_ate(fitted, dataset, clip=args.clip, alpha=args.alpha)
    selection = selected_covariates(fitted)
    report = format_estimate_report(est, selection)
    Path(args.out).write_text(report, encoding="utf-8")
    if args.cate_out:
        from .estimators import cate as cate_fn
        import pandas as pd

        completions = dataset.x if not dataset.has_missing else fitted.completed_x(dataset)
        pd.DataFrame({"cate_hat": cate_fn(fitted, completions)}).to_csv(args.cate_out, index=False)
    print(f"tau_hat = {est.tau_hat!r}  ci = [{est.ci[0]!r}, {est.ci[1]!r}]")
    return 0


def cmd_evaluate(args) -> int:
    truth = read_truth_sidecar(args.truth)
    reports = [parse_estimate_report(Path(p).read_text(encoding="utf-8")) for p in args.reports]
    if not reports:
        raise ConfigurationError("no estimate reports given")
    metrics = set(args.metrics.split(",")) if args.metrics else {"mae", "coverage", "selection", "pehe"}

    kw: dict = {}
    if "mae" in metrics:
        kw["mae_ate"] = mae_ate([r["tau_hat"] for r in reports], truth["ate"])
    if "coverage" in metrics:
        kw["ci_coverage"] = ci_coverage([(r["ci_lower"], r["ci_upper"]) for r in reports], truth["ate"])
    if "selection" in metrics:
        f_t, n_t = fsr_nsr([r["treatment_covariates"] for r in reports], truth["treatment_covariates"])
        f_y, n_y = fsr_nsr([r["outcome_covariates"] for r in reports], truth["outcome_covariates"])
        kw.update(fsr_treatment=f_t, nsr_treatment=n_t, fsr_outcome=f_y, nsr_outcome=n_y)
    if "pehe" in metrics and args.cate:
        if not args.truth_cate or len(args.truth_cate) != len(args.cate):
            raise ConfigurationError("--cate and --truth-cate must be given in matching pairs")
        import pandas as pd

        vals = []
        for cate_path, truth_path in zip(args.cate, args.truth_cate):
            hat = pd.read_csv(cate_path)["cate_hat"].to_numpy(np.float64)
            true_c, _ = read_truth_csv(truth_path)
            if hat.shape != true_c.shape:
                raise DataError(f"{cate_path}: effect estimates do not match the truth length")
            vals.append(pehe(hat, true_c))
        kw["pehe"] = float(np.mean(vals))

    report = MetricsReport(**kw)
    text = format_metrics_report(report, len(reports))
    Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causal-stonet",
        description="sparse stochastic neural networks for doubly robust causal inference",
    )
    parser.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: env or 1)")
    sub = parser.add_subparsers(dest="command")

    ps = sub.add_parser("simulate", help="write synthetic train/val/test CSVs plus truth sidecar")
    ps.add_argument("--generator", required=True, choices=("varying-size", "ar2", "linear"))
    ps.add_argument("--n-train", type=int, required=True)
    ps.add_argument("--n-val", type=int, required=True)
    ps.add_argument("--n-test", type=int, required=True)
    ps.add_argument("--scenario", default="complete", choices=("complete", "mar", "mnar"))
    ps.add_argument("--seed", type=int, required=True)
    ps.add_argument("--p", type=int, default=10, help="covariate count (linear generator)")
    ps.add_argument("--tau", type=float, default=1.0, help="true effect (linear generator)")
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pt = sub.add_parser("train", help="train a model from a config file")
    pt.add_argument("--config", required=True)
    pt.add_argument("--seed", type=int, default=None, help="override the config seed")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("estimate", help="estimate the ATE from a checkpoint and a dataset")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--alpha", type=float, default=0.05)
    pe.add_argument("--clip", type=float, default=0.01)
    pe.add_argument("--out", required=True)
    pe.add_argument("--cate-out", default=None, help="also write per-sample effect estimates")
    pe.set_defaults(func=cmd_estimate)

    pv = sub.add_parser("evaluate", help="score estimate reports against a truth sidecar")
    pv.add_argument("reports", nargs="+", help="estimate report files")
    pv.add_argument("--truth", required=True, help="truth sidecar file")
    pv.add_argument("--truth-cate", action="append", default=[], help="truth CSV for each --cate")
    pv.add_argument("--cate", action="append", default=[], help="per-sample effect CSVs")
    pv.add_argument("--metrics", default="", help="comma list: mae,coverage,selection,pehe")
    pv.add_argument("--out", required=True)
    pv.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.print_schema:
            print_schema()
            return 0
        if not getattr(args, "command", None):
            parser.print_help()
            return 2
        if args.threads is None:
            args.threads = _default_threads()
        return args.func(args)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
