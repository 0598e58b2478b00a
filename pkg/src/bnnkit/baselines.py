"""Reference models: linear fit and (ensembles of) point-estimate networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .diagnostics import PredictiveMixture, lppd
from .numerics import gaussian_log_pdf, ols_fit
from .training import de_predict


@dataclass
class LinearBaseline:
    coefficients: np.ndarray
    residual_sd: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.coefficients[0] + X @ self.coefficients[1:]


@dataclass
class LmEval:
    rmse: float
    lppd: float
    model: LinearBaseline


def lm_fit(train: Dataset) -> LinearBaseline:
    coef, residual_sd = ols_fit(train.X, train.y)
    return LinearBaseline(coefficients=coef, residual_sd=residual_sd)


def lm_fit_eval(train: Dataset, test: Dataset) -> LmEval:
    """Least-squares baseline: test RMSE plus LPPD of its Gaussian predictive."""
    model = lm_fit(train)
    pred = model.predict(test.X)
    rmse = float(np.sqrt(np.mean((test.y - pred) ** 2)))
    sd = max(model.residual_sd, 1e-12)
    value = float(np.mean(gaussian_log_pdf(test.y, pred, sd)))
    return LmEval(rmse=rmse, lppd=value, model=model)


@dataclass
class EnsembleEval:
    member_rmse: np.ndarray
    member_lppd: np.ndarray
    dnn_rmse: float
    dnn_lppd: float
    de_rmse: float
    de_lppd: float
    mixture: PredictiveMixture


def dnn_eval(spec, members, test: Dataset) -> EnsembleEval:
    """Member-wise metrics (averaged as the single-network figure) plus the
    mixture metrics of the full ensemble."""
    mixture = de_predict(spec, members, test.X)
    member_rmse, member_lppd = [], []
    for m in range(len(members)):
        single = mixture.for_chain(m)
        member_rmse.append(single.rmse(test.y))
        member_lppd.append(lppd(single, test.y))
    return EnsembleEval(
        member_rmse=np.asarray(member_rmse),
        member_lppd=np.asarray(member_lppd),
        dnn_rmse=float(np.mean(member_rmse)),
        dnn_lppd=float(np.mean(member_lppd)),
        de_rmse=mixture.rmse(test.y),
        de_lppd=lppd(mixture, test.y),
        mixture=mixture,
    )
