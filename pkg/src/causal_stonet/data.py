"""Dataset container and CSV round-tripping.

A dataset is a covariate matrix with an observation mask, a binary treatment
vector and an outcome vector, optionally annotated with ground truth from a
synthetic generator.  CSV layout: header row ``x1..xp,A,Y``, missing
covariates written as empty cells, UTF-8, '.' decimal separator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from .errors import DataError

__all__ = ["Truth", "Dataset", "TrainValTest", "write_csv", "read_csv"]


@dataclass
class Truth:
    """Generator-side ground truth; every field optional."""

    ate: Optional[float] = None
    cate: Optional[np.ndarray] = None
    propensity: Optional[np.ndarray] = None
    treatment_covariates: Optional[frozenset] = None
    outcome_covariates: Optional[frozenset] = None


@dataclass
class Dataset:
    """Covariates with missingness mask, treatment, outcome, optional truth.

    ``observed`` is True where a covariate was observed; ``x`` may contain
    arbitrary placeholder values at unobserved positions.  Covariate indices
    (including the truth sets) are 0-based; CSV columns are named x1..xp.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    observed: Optional[np.ndarray] = None
    truth: Optional[Truth] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError("covariates must be a 2-D matrix")
        n = self.x.shape[0]
        if self.a.shape != (n,) or self.y.shape[0] != n:
            raise DataError("treatment/outcome lengths do not match the covariates")
        if not np.isin(self.a, (0.0, 1.0)).all():
            raise DataError("treatment entries must be 0 or 1")
        if self.observed is None:
            self.observed = np.ones(self.x.shape, dtype=bool)
        else:
            self.observed = np.asarray(self.observed, dtype=bool)
            if self.observed.shape != self.x.shape:
                raise DataError("observation mask shape does not match the covariates")
        if self.truth is not None:
            for name in ("cate", "propensity"):
                arr = getattr(self.truth, name)
                if arr is not None and np.asarray(arr).shape[0] != n:
                    raise DataError(f"truth field {name!r} length does not match the data")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def has_missing(self) -> bool:
        return not self.observed.all()

    def missing_index(self):
        """(row, col) arrays of the unobserved entries, in C order."""
        rows, cols = np.nonzero(~self.observed)
        return rows, cols


class TrainValTest(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


def write_csv(dataset: Dataset, path) -> None:
    """Write ``x1..xp,A,Y`` with empty cells at unobserved covariates."""
    cols = {f"x{j + 1}": dataset.x[:, j].copy() for j in range(dataset.p)}
    frame = pd.DataFrame(cols)
    frame = frame.mask(~pd.DataFrame(dataset.observed, columns=frame.columns))
    frame["A"] = dataset.a.astype(np.int64)
    frame["Y"] = dataset.y
    frame.to_csv(path, index=False)


def read_csv(path) -> Dataset:
    """Inverse of :func:`write_csv`; empty cells become unobserved entries."""
    frame = pd.read_csv(path)
    expected_tail = ["A", "Y"]
    if list(frame.columns[-2:]) != expected_tail:
        raise DataError(f"{path}: expected trailing columns {expected_tail}")
    p = frame.shape[1] - 2
    names = [f"x{j + 1}" for j in range(p)]
    if list(frame.columns[:p]) != names:
        raise DataError(f"{path}: covariate columns must be named x1..x{p}")
    x = frame[names].to_numpy(dtype=np.float64)
    observed = ~np.isnan(x)
    x = np.where(observed, x, 0.0)
    a = frame["A"].to_numpy(dtype=np.float64)
    y = frame["Y"].to_numpy(dtype=np.float64)
    if np.isnan(a).any() or np.isnan(y).any():
        raise DataError(f"{path}: treatment and outcome may not be missing")
    return Dataset(x=x, a=a, y=y, observed=observed)
