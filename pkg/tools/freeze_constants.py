#!/usr/bin/env python3
"""Recompute the frozen Monte Carlo constants shipped in causal_stonet.simlab.

Run from the repository root.  Prints the values with their standard errors;
the source constants were frozen from one run of this script.
"""

import numpy as np

from causal_stonet import gen_ar2_missing
from causal_stonet.simlab import _ar2_cate, ar2_draw_covariates, _f_shift, _truncated_normal


def f_product_mean(draws=20_000_000, seed=20240817, chunk=1_000_000):
    """E[f(x1) f(x2)] with x_i = (e + z_i) / sqrt(2), truncated normals."""
    rng = np.random.default_rng(seed)
    tot = tot2 = 0.0
    n = 0
    while n < draws:
        m = min(chunk, draws - n)
        e = _truncated_normal(rng, m)
        z1 = _truncated_normal(rng, m)
        z2 = _truncated_normal(rng, m)
        v = _f_shift((e + z1) / np.sqrt(2)) * _f_shift((e + z2) / np.sqrt(2))
        tot += v.sum()
        tot2 += (v * v).sum()
        n += m
    mean = tot / n
    se = np.sqrt((tot2 / n - mean**2) / n)
    return mean, se


def ar2_true_ate(n_per_call=20_000, calls=50, seed0=777_000):
    """Mean conditional effect under the balanced generator law."""
    means = []
    for k in range(calls):
        splits = gen_ar2_missing(n_per_call, 1, 1, seed=seed0 + k)
        means.append(float(splits.train.truth.cate.mean()))
    means = np.asarray(means)
    return means.mean(), means.std(ddof=1) / np.sqrt(calls)


def ar2_population_ate(draws=1_000_000, seed=555_000, chunk=100_000):
    """Mean conditional effect under the iid covariate law (for comparison)."""
    rng = np.random.default_rng(seed)
    tot = 0.0
    n = 0
    while n < draws:
        m = min(chunk, draws - n)
        x = ar2_draw_covariates(rng, m)
        tot += _ar2_cate(x).sum()
        n += m
    return tot / n


if __name__ == "__main__":
    m, se = f_product_mean()
    print(f"F_PRODUCT_MEAN    = {m!r}  (SE {se:.2e})")
    ate, ate_se = ar2_true_ate()
    print(f"AR2_TRUE_ATE      = {ate!r}  (SE {ate_se:.2e}, balanced generator law)")
    pop = ar2_population_ate()
    print(f"  iid-law mean effect for comparison: {pop!r}")
