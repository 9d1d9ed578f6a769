"""Gaussian-process regression with a composite time/composition kernel.

The covariance between two encoded rows ``p = (x, s)`` and ``q = (x', s')``,
where ``x`` is the scaled composition and ``s = log(t + delta)`` the warped
age, is::

    alpha * k_time(s, s') + beta * k_joint((x, s), (x', s'))

with a squared-exponential ``k_time`` and an ARD Matern-5/2 ``k_joint``. Both
component kernels have unit variance; ``alpha`` and ``beta`` carry the signal
variance. Encoded rows keep the warped age in the last column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, lapack, solve_triangular
from scipy.optimize import minimize

from .dataset import Dataset, FeatureScaler, MixComposition, feature_matrix

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_DELTA = 1.0 / 24.0
MODEL_FORMAT = "mixopt-gp-model"
MODEL_VERSION = 1


class FitError(RuntimeError):
    """Covariance could not be factorized, even after jitter escalation."""


def time_warp(t, delta: float = DEFAULT_DELTA):
    """``log(t + delta)``; ``delta > 0`` keeps age 0 finite."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("ages must be ≥ 0")
    out = np.log(t + delta)
    return float(out) if out.ndim == 0 else out


def k_time(a, b, ell: float):
    """Squared-exponential kernel on warped time."""
    d = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) / ell
    return np.exp(-0.5 * d * d)


def matern52(r):
    r = np.asarray(r, dtype=float)
    sr = SQRT5 * r
    return (1.0 + sr + sr * sr / 3.0) * np.exp(-sr)


def k_joint(u, v, ells) -> float:
    """ARD Matern-5/2 between two vectors."""
    diff = (np.asarray(u, dtype=float) - np.asarray(v, dtype=float)) / np.asarray(ells, dtype=float)
    return float(matern52(np.sqrt(np.sum(diff * diff))))


@dataclass(frozen=True)
class KernelHyperparams:
    alpha: float
    beta: float
    ell_time: float
    ell_joint: np.ndarray
    noise_var: float
    mean_const: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "ell_joint", np.asarray(self.ell_joint, dtype=float).copy())
        if self.alpha < 0 or self.beta < 0 or self.noise_var < 0:
            raise ValueError("variances must be ≥ 0")
        if self.ell_time <= 0 or np.any(self.ell_joint <= 0):
            raise ValueError("lengthscales must be > 0")

    @property
    def dim(self) -> int:
        return len(self.ell_joint)

    def to_vector(self, noise_floor: float = 1e-12) -> np.ndarray:
        """Unconstrained parameter vector: logs of every positive quantity, then the mean."""
        tiny = 1e-300
        return np.concatenate(
            [
                np.log([max(self.alpha, tiny), max(self.beta, tiny), self.ell_time]),
                np.log(self.ell_joint),
                [math.log(max(self.noise_var, noise_floor)), self.mean_const],
            ]
        )

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "KernelHyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(
            alpha=math.exp(theta[0]),
            beta=math.exp(theta[1]),
            ell_time=math.exp(theta[2]),
            ell_joint=np.exp(theta[3:-2]),
            noise_var=math.exp(theta[-2]),
            mean_const=float(theta[-1]),
        )

    @classmethod
    def default(cls, y: np.ndarray, dim: int) -> "KernelHyperparams":
        y = np.asarray(y, dtype=float)
        var = float(np.var(y)) if len(y) > 1 and np.var(y) > 0 else 1.0
        return cls(
            alpha=var / 2,
            beta=var / 2,
            ell_time=1.0,
            ell_joint=np.ones(dim),
            noise_var=0.01 * var,
            mean_const=float(np.mean(y)) if len(y) else 0.0,
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "ell_time": self.ell_time,
            "ell_joint": self.ell_joint.tolist(),
            "noise_var": self.noise_var,
            "mean_const": self.mean_const,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "KernelHyperparams":
        return cls(**payload)


def composite_kernel(p, q, h: KernelHyperparams) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(h.alpha * k_time(p[-1], q[-1], h.ell_time) + h.beta * k_joint(p, q, h.ell_joint))


def _sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def gram_parts(A: np.ndarray, B: np.ndarray, h: KernelHyperparams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-variance ``k_time`` and ``k_joint`` matrices plus the joint distance ``r``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != h.dim or B.shape[1] != h.dim:
        raise ValueError(f"inputs must have {h.dim} columns, got {A.shape[1]} and {B.shape[1]}")
    dt = (A[:, -1][:, None] - B[:, -1][None, :]) / h.ell_time
    Kt = np.exp(-0.5 * dt * dt)
    r = np.sqrt(_sq_dist(A / h.ell_joint, B / h.ell_joint))
    return Kt, matern52(r), r


def gram(A: np.ndarray, B: np.ndarray, h: KernelHyperparams) -> np.ndarray:
    Kt, Kj, _ = gram_parts(A, B, h)
    return h.alpha * Kt + h.beta * Kj


def prior_variance(h: KernelHyperparams) -> float:
    return h.alpha + h.beta


def _factorize(K: np.ndarray, scale: float, jitter: float, max_jitter: float = 1e-2):
    """Cholesky of ``K + jitter*scale*I``, escalating jitter by 10x until it succeeds."""
    n = len(K)
    scale = scale if scale > 0 else 1.0
    level = jitter
    while level <= max_jitter * (1 + 1e-12):
        try:
            L = cholesky(K + level * scale * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, level
        except LinAlgError:
            pass
        level *= 10.0
    if not np.all(np.isfinite(K)):
        raise FitError(f"Cholesky failed up to jitter {max_jitter:g}; covariance has non-finite entries")
    eig = np.linalg.eigvalsh(K)
    raise FitError(
        f"Cholesky failed up to jitter {max_jitter:g}; eigenvalues in [{eig[0]:.3g}, {eig[-1]:.3g}], "
        f"condition ~{abs(eig[-1] / eig[0]) if eig[0] != 0 else math.inf:.3g}"
    )


def log_marginal_likelihood(
    h: KernelHyperparams,
    X: np.ndarray,
    y: np.ndarray,
    jitter: float = 1e-8,
    return_grad: bool = False,
):
    """Log marginal likelihood of ``y`` under the GP with hyperparameters ``h``.

    The gradient, when requested, is taken with respect to
    ``h.to_vector()`` (log-variances, log-lengthscales, log-noise, mean)
    and accounts for the jitter term ``jitter * (alpha + beta) * I``.
    Jitter escalation changes the objective, so the level actually used is
    fixed for the gradient computation.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    Kt, Kj, r = gram_parts(X, X, h)
    K = h.alpha * Kt + h.beta * Kj + h.noise_var * np.eye(n)
    scale = h.alpha + h.beta
    L, level = _factorize(K, scale, jitter)
    resid = y - h.mean_const
    a = cho_solve((L, True), resid, check_finite=False)
    lml = -0.5 * resid @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    if not return_grad:
        return float(lml)

    jit = level if scale > 0 else 0.0
    Kinv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise FitError(f"inverse from Cholesky factor failed (info={info})")
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    W = np.outer(a, a) - Kinv
    trW = np.trace(W)
    grad = np.empty(h.dim + 5)
    grad[0] = 0.5 * h.alpha * (np.sum(W * Kt) + jit * trW)
    grad[1] = 0.5 * h.beta * (np.sum(W * Kj) + jit * trW)
    dt = (X[:, -1][:, None] - X[:, -1][None, :]) / h.ell_time
    grad[2] = 0.5 * h.alpha * np.sum(W * Kt * dt * dt)
    # d k_joint / d log ell_d = (5/3)(1 + sqrt5 r) exp(-sqrt5 r) * (dx_d / ell_d)^2
    M = W * ((5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r))
    Z = X / h.ell_joint
    rowsum = M.sum(axis=1)
    per_dim = 2.0 * (Z * Z).T @ rowsum - 2.0 * np.sum(Z * (M @ Z), axis=0)
    grad[3 : 3 + h.dim] = 0.5 * h.beta * per_dim
    grad[-2] = 0.5 * h.noise_var * trW
    grad[-1] = np.sum(a)
    return float(lml), grad


@dataclass(frozen=True)
class GpModel:
    """Fitted GP state. Immutable; ``predict`` is reentrant."""

    X: np.ndarray
    y_centered: np.ndarray
    hyper: KernelHyperparams
    chol: np.ndarray
    weights: np.ndarray
    lml: float
    jitter: float = 1e-8
    scaler: FeatureScaler | None = None
    delta: float = DEFAULT_DELTA
    converged: bool = True
    grad_norm: float = 0.0
    n_iter: int = 0
    fit_info: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_data(
        cls,
        X: np.ndarray,
        y: np.ndarray,
        hyper: KernelHyperparams,
        jitter: float = 1e-8,
        **kwargs,
    ) -> "GpModel":
        """Condition the GP on ``(X, y)`` with fixed hyperparameters."""
        X = np.array(X, dtype=float).reshape(-1, hyper.dim)
        y = np.array(y, dtype=float).reshape(-1)
        resid = y - hyper.mean_const
        if len(y) == 0:
            return cls(X, resid, hyper, np.zeros((0, 0)), np.zeros(0), 0.0, jitter, **kwargs)
        K = gram(X, X, hyper) + hyper.noise_var * np.eye(len(y))
        L, level = _factorize(K, hyper.alpha + hyper.beta, jitter)
        weights = cho_solve((L, True), resid, check_finite=False)
        lml = -0.5 * resid @ weights - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * LOG_2PI
        for arr in (X, resid, L, weights):
            arr.setflags(write=False)
        return cls(X, resid, hyper, L, weights, float(lml), level, **kwargs)

    @property
    def n_train(self) -> int:
        return len(self.y_centered)

    def predict(self, Xs: np.ndarray, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, Xs, include_noise=include_noise)

    def encode(self, mixes: Sequence[MixComposition], ages) -> np.ndarray:
        """Encoded rows for each ``(mix, age)`` pair (ages broadcast against mixes)."""
        if self.scaler is None:
            raise ValueError("model has no feature scaler; encode rows manually")
        return encode_rows(mixes, ages, self.scaler, self.delta)

    def predict_mix(self, mixes: Sequence[MixComposition], age: float) -> tuple[np.ndarray, np.ndarray]:
        return self.predict(self.encode(mixes, np.full(len(mixes), float(age))))

    def predict_features(self, F: np.ndarray, age: float) -> tuple[np.ndarray, np.ndarray]:
        """Predict at raw feature rows (see :data:`FEATURES`) for one age."""
        if self.scaler is None:
            raise ValueError("model has no feature scaler")
        F = np.atleast_2d(np.asarray(F, dtype=float))
        warped = np.full(len(F), time_warp(float(age), self.delta))
        return self.predict(np.column_stack([self.scaler.transform(F), warped]))

    def to_text(self) -> str:
        return model_to_text(self)


def encode_rows(mixes: Sequence[MixComposition], ages, scaler: FeatureScaler, delta: float = DEFAULT_DELTA) -> np.ndarray:
    ages = np.broadcast_to(np.asarray(ages, dtype=float), (len(mixes),))
    return np.column_stack([scaler.transform(feature_matrix(mixes)), time_warp(ages, delta)]) if len(mixes) else np.zeros((0, scaler.lower.size + 1))


def encode_dataset(d: Dataset, scaler: FeatureScaler, delta: float = DEFAULT_DELTA) -> tuple[np.ndarray, np.ndarray]:
    mixes = [d.mixes[o.mix_id] for o in d.observations]
    ages = [o.age for o in d.observations]
    y = np.array([o.mean_strength for o in d.observations], dtype=float)
    return encode_rows(mixes, ages, scaler, delta), y


def predict(m: GpModel, Xs: np.ndarray, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the latent strength at encoded rows ``Xs``."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    if Xs.shape[1] != m.hyper.dim:
        raise ValueError(f"query rows need {m.hyper.dim} columns, got {Xs.shape[1]}")
    prior = np.full(len(Xs), prior_variance(m.hyper))
    if m.n_train == 0:
        mean, var = np.full(len(Xs), m.hyper.mean_const), prior
    else:
        Ks = gram(m.X, Xs, m.hyper)
        mean = m.hyper.mean_const + Ks.T @ m.weights
        v = solve_triangular(m.chol, Ks, lower=True, check_finite=False)
        var = np.maximum(prior - np.sum(v * v, axis=0), 0.0)
    if include_noise:
        var = var + m.hyper.noise_var
    return mean, var


def predict_strength_curve(
    m: GpModel,
    mix: MixComposition,
    ages: Iterable[float],
    k: float = 2.0,
    include_noise: bool = False,
) -> list[tuple[float, float, float, float]]:
    """``(age, mean, mean - k*sd, mean + k*sd)`` for each age (default band: 95%)."""
    ages = [float(a) for a in ages]
    if any(a <= 0 for a in ages):
        raise ValueError("ages must be > 0")
    mean, var = m.predict(m.encode([mix] * len(ages), ages), include_noise=include_noise)
    sd = np.sqrt(var)
    return [(a, float(mu), float(mu - k * s), float(mu + k * s)) for a, mu, s in zip(ages, mean, sd)]


def _bounds(dim: int, var_y: float) -> list[tuple[float | None, float | None]]:
    lv = math.log(var_y)
    return (
        [(lv + math.log(1e-6), lv + math.log(1e3))] * 2
        + [(math.log(1e-2), math.log(1e3))] * (1 + dim)
        + [(lv + math.log(1e-8), lv + math.log(10.0)), (None, None)]
    )


def fit(
    X: np.ndarray,
    y: np.ndarray,
    init: KernelHyperparams | None = None,
    restarts: int = 8,
    max_iters: int = 200,
    jitter: float = 1e-8,
    tol: float = 1e-5,
    seed: int = 0,
    **model_kwargs,
) -> GpModel:
    """Maximize the log marginal likelihood from several starts; keep the best.

    The first start is ``init`` (or :meth:`KernelHyperparams.default`); the
    rest perturb it with standard-normal noise in log space. Optimization is
    L-BFGS-B on the unconstrained vector with the analytic gradient. Rows
    are sorted first, so the fitted model does not depend on their order.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ValueError("fit needs at least 2 observations")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("fit needs finite inputs and targets")
    # canonical row order makes the result independent of input order
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]
    dim = X.shape[1]
    init = init or KernelHyperparams.default(y, dim)
    var_y = float(np.var(y)) if np.var(y) > 0 else 1.0
    bounds = _bounds(dim, var_y)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    rng = np.random.default_rng(seed)

    def objective(theta):
        try:
            value, grad = log_marginal_likelihood(KernelHyperparams.from_vector(theta), X, y, jitter, return_grad=True)
        except FitError:
            return 1e25, np.zeros_like(theta)
        return -value, -grad

    theta0 = np.clip(init.to_vector(), lo, hi)
    best = None
    failures = 0
    for i in range(max(restarts, 1)):
        start = theta0.copy()
        if i > 0:
            start[:-1] += rng.normal(size=len(start) - 1)
            start = np.clip(start, lo, hi)
        res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": max_iters, "gtol": tol})
        if res.fun >= 1e25:
            failures += 1
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError(f"all {restarts} restarts failed to factorize the covariance")

    theta = best.x
    _, grad = objective(theta)
    at_lo = (theta <= lo) & (grad > 0)
    at_hi = (theta >= hi) & (grad < 0)
    proj = np.where(at_lo | at_hi, 0.0, grad)
    grad_norm = float(np.max(np.abs(proj)))
    hyper = KernelHyperparams.from_vector(theta)
    return GpModel.from_data(
        X,
        y,
        hyper,
        jitter,
        converged=grad_norm <= tol or bool(best.success),
        grad_norm=grad_norm,
        n_iter=int(best.nit),
        fit_info={"restarts": restarts, "failed_restarts": failures, "message": str(best.message), "stopped": "tol" if grad_norm <= tol else "optimizer"},
        **model_kwargs,
    )


def fit_dataset(
    train: Dataset,
    delta: float = DEFAULT_DELTA,
    scaler: FeatureScaler | None = None,
    **fit_kwargs,
) -> GpModel:
    """Fit on a dataset: the feature scaler is fitted on ``train`` only."""
    scaler = scaler or FeatureScaler.fit(train.mixes.values())
    X, y = encode_dataset(train, scaler, delta)
    return fit(X, y, scaler=scaler, delta=delta, **fit_kwargs)


def model_to_text(m: GpModel) -> str:
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "hyper": m.hyper.to_dict(),
        "jitter": m.jitter,
        "delta": m.delta,
        "lml": m.lml,
        "scaler": m.scaler.to_dict() if m.scaler is not None else None,
        "X": m.X.tolist(),
        "y": (m.y_centered + m.hyper.mean_const).tolist(),
    }
    return f"# {MODEL_FORMAT} v{MODEL_VERSION}\n" + json.dumps(payload, indent=1) + "\n"


def model_from_text(text: str) -> GpModel:
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    payload = json.loads(body)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError("not a serialized GP model")
    if payload["version"] != MODEL_VERSION:
        raise ValueError(f"unsupported model version {payload['version']}")
    hyper = KernelHyperparams.from_dict(payload["hyper"])
    scaler = FeatureScaler.from_dict(payload["scaler"]) if payload["scaler"] else None
    X = np.array(payload["X"], dtype=float).reshape(-1, hyper.dim)
    # the stored jitter is the level that succeeded, so refactorization is identical
    return GpModel.from_data(X, np.array(payload["y"], dtype=float), hyper, payload["jitter"], scaler=scaler, delta=payload["delta"])


def with_hyper(m: GpModel, hyper: KernelHyperparams) -> GpModel:
    """Recondition the same training data under different hyperparameters."""
    return GpModel.from_data(m.X, m.y_centered + m.hyper.mean_const, hyper, m.jitter, scaler=m.scaler, delta=m.delta)


__all__ = [
    "FitError",
    "GpModel",
    "KernelHyperparams",
    "composite_kernel",
    "encode_dataset",
    "encode_rows",
    "fit",
    "fit_dataset",
    "gram",
    "k_joint",
    "k_time",
    "log_marginal_likelihood",
    "model_from_text",
    "predict",
    "predict_strength_curve",
    "time_warp",
]
