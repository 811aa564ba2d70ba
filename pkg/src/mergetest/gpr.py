"""Gaussian process regression surrogate of the performance surface.

Squared-exponential kernel with per-dimension lengthscales, a constant mean
absorbed from the targets, and hyperparameters picked by multi-start local
maximization of the log marginal likelihood.  Inputs are expected in the
normalized [0, 1] case space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.optimize import minimize

JITTER_START = 1e-6
JITTER_MAX = 1e-2

DEFAULT_BOUNDS = {
    "signal_var": (1e-4, 1e6),
    "lengthscale": (1e-2, 1e1),
    "noise_var": (1e-8, 1e6),
}


class IllConditionedData(RuntimeError):
    """Kernel matrix stayed non-PD through the whole jitter escalation."""


def sq_exp_kernel(
    a: np.ndarray, b: np.ndarray, signal_var: float, lengthscales: np.ndarray
) -> np.ndarray:
    """k(s, s') = sigma_f^2 exp(-sum_d (s_d - s'_d)^2 / (2 l_d^2))."""
    diff = a[:, None, :] - b[None, :, :]
    sq = np.sum((diff / lengthscales) ** 2, axis=-1)
    return signal_var * np.exp(-0.5 * sq)


def _chol_with_jitter(k: np.ndarray, noise_var: float):
    n = k.shape[0]
    jitter = JITTER_START
    while jitter <= JITTER_MAX:
        try:
            factor = cho_factor(k + (noise_var + jitter) * np.eye(n), lower=True)
            return factor, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise IllConditionedData("kernel matrix is not positive definite")


@dataclass
class Posterior:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class GprModel:
    inputs: np.ndarray  # (n, d), normalized
    targets: np.ndarray  # (n,)
    signal_var: float
    lengthscales: np.ndarray  # (d,)
    noise_var: float
    beta: float  # constant mean
    _chol: tuple | None = None
    _alpha: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        self.lengthscales = np.asarray(self.lengthscales, dtype=float).ravel()
        if self._chol is None:
            self._factorize()

    def _factorize(self) -> None:
        k = sq_exp_kernel(self.inputs, self.inputs, self.signal_var, self.lengthscales)
        self._chol, self._jitter = _chol_with_jitter(k, self.noise_var)
        self._alpha = cho_solve(self._chol, self.targets - self.beta)

    def predict(self, queries: np.ndarray) -> Posterior:
        """Posterior mean and variance (including observation noise prior)."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        ks = sq_exp_kernel(q, self.inputs, self.signal_var, self.lengthscales)
        mean = self.beta + ks @ self._alpha
        v = cho_solve(self._chol, ks.T)
        var = self.signal_var + self.noise_var - np.sum(ks * v.T, axis=1)
        return Posterior(mean=mean, var=np.maximum(var, 0.0))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "signal_var": self.signal_var,
                    "lengthscales": self.lengthscales.tolist(),
                    "noise_var": self.noise_var,
                    "beta": self.beta,
                    "inputs": self.inputs.tolist(),
                    "targets": self.targets.tolist(),
                },
                fh,
            )

    @classmethod
    def load(cls, path) -> "GprModel":
        with open(path) as fh:
            d = json.load(fh)
        return cls(
            inputs=np.array(d["inputs"]),
            targets=np.array(d["targets"]),
            signal_var=d["signal_var"],
            lengthscales=np.array(d["lengthscales"]),
            noise_var=d["noise_var"],
            beta=d["beta"],
        )


def log_marginal_likelihood(
    inputs: np.ndarray,
    targets: np.ndarray,
    signal_var: float,
    lengthscales: np.ndarray,
    noise_var: float,
    beta: float,
) -> float:
    """Exact Gaussian log marginal likelihood of the centered targets."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel() - beta
    n = x.shape[0]
    k = sq_exp_kernel(x, x, signal_var, np.asarray(lengthscales, dtype=float))
    factor, _ = _chol_with_jitter(k, noise_var)
    alpha = cho_solve(factor, y)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(-0.5 * (y @ alpha) - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi))


def _bounded_penalty(log_theta: np.ndarray, log_lo: np.ndarray, log_hi: np.ndarray):
    over = np.maximum(log_theta - log_hi, 0.0) + np.maximum(log_lo - log_theta, 0.0)
    return 1e6 * float(np.sum(over**2))


def fit(
    inputs: np.ndarray,
    targets: np.ndarray,
    n_restarts: int = 4,
    bounds: dict | None = None,
    seed: int = 0,
) -> GprModel:
    """Fit hyperparameters by multi-start Nelder-Mead on the log likelihood.

    The constant mean is fixed at the target mean; the optimizer works in
    log-space over (signal variance, per-dimension lengthscales, noise
    variance), with the initial point always kept as a candidate so the fit
    never ends below its starting likelihood.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if x.shape[0] < 2:
        raise ValueError("need at least 2 training points")
    if x.shape[0] != y.shape[0]:
        raise ValueError("inputs/targets length mismatch")
    d = x.shape[1]
    bounds = bounds if bounds is not None else DEFAULT_BOUNDS
    beta = float(np.mean(y))

    y_var = float(np.var(y))
    sf0 = max(y_var, 1e-4)
    theta0 = np.concatenate([[sf0], np.full(d, 0.2), [max(0.1 * y_var, 1e-6)]])
    log_lo = np.log(
        np.concatenate(
            [
                [bounds["signal_var"][0]],
                np.full(d, bounds["lengthscale"][0]),
                [bounds["noise_var"][0]],
            ]
        )
    )
    log_hi = np.log(
        np.concatenate(
            [
                [bounds["signal_var"][1]],
                np.full(d, bounds["lengthscale"][1]),
                [bounds["noise_var"][1]],
            ]
        )
    )

    def objective(log_theta: np.ndarray) -> float:
        pen = _bounded_penalty(log_theta, log_lo, log_hi)
        theta = np.exp(np.clip(log_theta, log_lo, log_hi))
        try:
            lml = log_marginal_likelihood(x, y, theta[0], theta[1 : 1 + d], theta[-1], beta)
        except IllConditionedData:
            return 1e12
        return -lml + pen

    rng = np.random.default_rng(seed)
    starts = [np.log(theta0)]
    for _ in range(max(0, n_restarts - 1)):
        starts.append(np.log(theta0) + rng.normal(scale=1.0, size=d + 2))

    best_log_theta = np.log(theta0)
    best_obj = objective(best_log_theta)
    for s0 in starts:
        res = minimize(
            objective,
            np.clip(s0, log_lo, log_hi),
            method="Nelder-Mead",
            options={"maxiter": 200 * (d + 2), "xatol": 1e-4, "fatol": 1e-6},
        )
        if res.fun < best_obj:
            best_obj = res.fun
            best_log_theta = res.x

    theta = np.exp(np.clip(best_log_theta, log_lo, log_hi))
    return GprModel(
        inputs=x,
        targets=y,
        signal_var=float(theta[0]),
        lengthscales=theta[1 : 1 + d],
        noise_var=float(theta[-1]),
        beta=beta,
    )
