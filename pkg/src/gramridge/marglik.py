"""Laplace-approximated marginal likelihood in linear-predictor space.

Under the ridge prior the linear predictor ``eta = X beta`` is Gaussian with
covariance ``Gamma``, so the evidence is an ``n``-dimensional integral. The
Laplace approximation at the posterior mode ``eta_hat = Gamma v`` is

    log ML ~ l(eta_hat) - v^T Gamma v / 2 - log det(I + W^{1/2} Gamma W^{1/2}) / 2,

which is exact for the Gaussian family. Writing the prior term as
``v^T Gamma v`` avoids inverting ``Gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .glm import ConvergenceError, IwlsControl, ResponseSpec, family_moments, fit_gamma, loglik
from .linalg import WEIGHT_FLOOR, DesignError, PenaltyConfig, RidgeContext, SolverError
from .tuning import TunerConfig, TuneResult, preferential, search_penalties


@dataclass(frozen=True, eq=False)
class LaplaceMlState:
    """Mode, approximate log evidence and the jitter that was added to ``Gamma``."""

    eta_mode: np.ndarray
    log_ml: float
    jitter: float
    iterations: int
    log_det: float


def log_det_weighted(gamma, weights) -> float:
    """``log det(I + W^{1/2} Gamma W^{1/2})`` via Cholesky (``n x n`` only)."""
    sw = np.sqrt(np.maximum(np.asarray(weights, dtype=np.float64), WEIGHT_FLOOR))
    a = np.eye(gamma.shape[0]) + sw[:, None] * gamma * sw[None, :]
    try:
        c = sla.cholesky(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        sign, val = np.linalg.slogdet(a)
        if sign <= 0:
            raise SolverError("I + W^1/2 Gamma W^1/2 is not positive definite", np.linalg.cond(a))
        return float(val)
    return float(2.0 * np.sum(np.log(np.diag(c))))


def laplace_log_ml(gamma, response: ResponseSpec, ctrl: IwlsControl | None = None,
                   jitter="auto") -> LaplaceMlState:
    """Laplace approximation of the log marginal likelihood for a given ``Gamma``.

    Parameters
    ----------
    gamma : ndarray
        Prior covariance of the linear predictor.
    response : ResponseSpec
    ctrl : IwlsControl, optional
        Controls for the mode search.
    jitter : float or "auto"
        Ridge ``eps I`` added to ``Gamma``. ``"auto"`` adds
        ``1e-8 * trace(Gamma) / n`` only if the mode search hits a singular
        system.

    Raises
    ------
    ConvergenceError
        If the mode search does not converge.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    n = gamma.shape[0]
    if jitter == "auto":
        try:
            return _laplace(gamma, response, ctrl, 0.0)
        except (SolverError, np.linalg.LinAlgError):
            eps = 1e-8 * max(np.trace(gamma), 1e-300) / n
            return _laplace(gamma, response, ctrl, eps)
    return _laplace(gamma, response, ctrl, float(jitter))


def _laplace(gamma, response, ctrl, eps) -> LaplaceMlState:
    g = gamma + eps * np.eye(gamma.shape[0]) if eps else gamma
    fit = fit_gamma(g, response, None, ctrl)
    if not fit.converged:
        raise ConvergenceError(
            f"marginal-likelihood mode search did not converge in {fit.iterations} iterations"
        )
    eta = fit.eta
    _, w, _ = family_moments(response.family, eta, response)
    ld = log_det_weighted(g, w)
    quad = float(fit.dual @ (g @ fit.dual))
    value = loglik(response.family, eta, response) - 0.5 * quad - 0.5 * ld
    return LaplaceMlState(eta, float(value), eps, fit.iterations, ld)


def _ml_init_block(sigma, response, cfg: TunerConfig, ctrl, grid_size=41) -> float:
    lo, hi = cfg.bounds
    scale = np.trace(sigma) / sigma.shape[0]
    if scale <= 0:
        return float(np.exp(hi))
    grid = np.unique(np.clip(np.log(scale) + np.linspace(-10.0, 10.0, grid_size), lo, hi))
    cache = {}

    def f(t):
        t = float(t)
        if t not in cache:
            try:
                cache[t] = laplace_log_ml(sigma / np.exp(t), response, ctrl).log_ml
            except (ConvergenceError, SolverError, np.linalg.LinAlgError):
                cache[t] = -np.inf
        return cache[t]

    values = np.array([f(t) for t in grid])
    i = int(np.argmax(values))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    best_t, best_f = grid[i], values[i]
    if b > a:
        res = minimize_scalar(lambda t: -f(t) if np.isfinite(f(t)) else 1e300, bounds=(a, b),
                              method="bounded", options={"xatol": 1e-8, "maxiter": 200})
        if -res.fun > best_f:
            best_t = float(res.x)
    return float(np.exp(best_t))


def ml_initial_penalties(ctx: RidgeContext, response: ResponseSpec, cfg: TunerConfig,
                         ctrl: IwlsControl | None = None) -> PenaltyConfig:
    """Per-block starting penalties maximizing the single-block evidence."""
    return PenaltyConfig([_ml_init_block(s, response, cfg, ctrl) for s in ctx.grams.sigmas])


def _ml_evaluator(response, ctrl):
    def make(cctx):
        def evaluate(pen):
            try:
                v = laplace_log_ml(cctx.gamma(pen), response, ctrl).log_ml
            except (ConvergenceError, SolverError, np.linalg.LinAlgError):
                v = -np.inf
            return v, v
        return evaluate
    return make


def tune_ml(ctx: RidgeContext, response: ResponseSpec, cfg: TunerConfig | None = None,
            fixed_mask=None, initial: PenaltyConfig | None = None, preferred=None,
            ctrl: IwlsControl | None = None) -> TuneResult:
    """Tune penalties by maximizing the Laplace marginal likelihood.

    Uses the same annealing + Nelder-Mead/Brent search as CV tuning. Paired
    designs are tuned through their paired parametrization; ``preferred``
    triggers two-stage preferential tuning.

    Raises
    ------
    DesignError
        If the design has unpenalized covariates, which this criterion does
        not support.
    """
    if ctx.unpenalized is not None:
        raise DesignError(
            "marginal-likelihood tuning does not support unpenalized covariates; "
            "use cross-validation or move them into a penalized block"
        )
    cfg = cfg or TunerConfig()
    maker = _ml_evaluator(response, ctrl)

    def stage(c, init, mask):
        init = init if init is not None else ml_initial_penalties(c, response, cfg, ctrl)
        return search_penalties(c, maker, init, cfg, mask)

    if preferred:
        return preferential(ctx, preferred, stage, lambda c: ml_initial_penalties(c, response, cfg, ctrl))
    return stage(ctx, initial, fixed_mask)
