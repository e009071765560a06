#!/usr/bin/env python3
"""Dev calibration for the autoregressive benchmark (selection + ATE）."""

import argparse
import time

import numpy as np

import causal_stonet as cs
from causal_stonet.simlab import AR2_TRUE_ATE


def run(seed, epochs=(100, 1500, 200), n_train=10_000, batch=500, num_runs=1,
        scenario="complete", t_temp=1.0, verbose=True):
    config = cs.NetworkConfig(
        layer_widths=(100, 8, 6, 5, 1),
        noise_variances=(1e-3, 1e-5, 1e-7, 1e-9),
        treatment_layer=2,
        treatment_position=1,
        activation="tanh",
        treatment_temperature=t_temp,
    )
    hyper = cs.PriorHyperparameters(lambda_n=1e-6, sigma0_sq=3e-3, sigma1_sq=0.3)
    schedule = cs.TrainingSchedule(
        epochs_pretrain=epochs[0],
        epochs_train=epochs[1],
        epochs_refine=epochs[2],
        batch_size=batch,
        impute_lr=(3e-3, 3e-4, 1e-6),
        param_lr=(1e-3, 3e-6, 1e-7, 1e-12),
        param_lr_refine=(1e-4, 3e-7, 1e-8, 1e-13),
        miss_lr=3e-4,
        eta=0.1,
        impute_decay=1.2,
        param_decay=1.2,
        seed=seed,
        num_runs=num_runs,
    )
    splits = cs.gen_ar2_missing(n_train, 1000, 1000, seed=seed, scenario=scenario)
    cov_model = None
    if scenario != "complete":
        cov_model = cs.CovariateModel(np.zeros(100), cs.ar2_precision())
    t0 = time.time()
    fitted = cs.train(splits.train, config, hyper, schedule, cov_model)
    dt = time.time() - t0

    sel = cs.selected_covariates(fitted)
    est = cs.estimate_ate(fitted, splits.test, clip=0.01)
    mu_hat = cs.outcome(fitted, splits.test.x, splits.test.a)
    r2 = 1 - np.mean((splits.test.y - mu_hat) ** 2) / np.var(splits.test.y)
    p_hat = cs.propensity(fitted, splits.test.x)
    p_true = splits.test.truth.propensity
    if verbose:
        print(f"seed={seed} scenario={scenario} time={dt:.1f}s "
              f"active={fitted.mask.count_active()}/{fitted.params.n_parameters()}")
        print(f"  treat set: {sel.treatment_model_covariates}  (truth (0,1,2,4))")
        print(f"  out set:   {sel.outcome_model_covariates}  (truth (0,1,2,3,4))")
        print(f"  tau_hat={est.tau_hat:.4f} (true {AR2_TRUE_ATE:.4f}) |err|={abs(est.tau_hat-AR2_TRUE_ATE):.4f} "
              f"ci=({est.ci[0]:.3f},{est.ci[1]:.3f})")
        print(f"  test R2={r2:.4f}  prop corr={np.corrcoef(p_hat, p_true)[0,1]:.3f} "
              f"prop rmse={np.sqrt(np.mean((p_hat-p_true)**2)):.4f}")
    return fitted, est, sel, r2


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--epochs", type=str, default="100,1500,200")
    ap.add_argument("--n-train", type=int, default=10_000)
    ap.add_argument("--batch", type=int, default=500)
    ap.add_argument("--num-runs", type=int, default=1)
    ap.add_argument("--scenario", type=str, default="complete")
    ap.add_argument("--t-temp", type=float, default=1.0)
    args = ap.parse_args()
    run(args.seed, tuple(int(t) for t in args.epochs.split(",")), args.n_train,
        args.batch, args.num_runs, args.scenario, args.t_temp)
