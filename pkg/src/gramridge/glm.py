"""IWLS fitting in linear-predictor space for linear, logistic and Cox models.

The iteration never touches coefficients. Each cycle computes family weights
``w`` and the centered response ``C`` at the current linear predictor, forms
the hat matrix from the cached ``Gamma`` and updates

    eta <- H_{Lambda,W} (C + W eta).

Cox models use the full likelihood with a Breslow baseline that is
re-estimated every cycle; the weights are ``H_0(t_i) exp(eta_i)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .linalg import (
    HatFactors,
    PenaltyConfig,
    RidgeContext,
    hat_matrix_unpenalized,
    recover_coefficients,
)

FAMILIES = ("linear", "logistic", "cox")
PROB_CLAMP = 1e-12
LOG_2PI = np.log(2.0 * np.pi)


class ConvergenceError(RuntimeError):
    """Raised when an iterative fit diverges."""


def _vector(x, name) -> np.ndarray:
    arr = np.array(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ResponseSpec:
    """Response vector and family.

    Use the :meth:`linear`, :meth:`logistic` and :meth:`cox` constructors.
    For Cox responses ``y`` holds the event indicator and ``time`` the
    follow-up times.
    """

    family: str
    y: np.ndarray
    time: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        y = _vector(self.y, "response")
        if self.family in ("logistic", "cox") and not np.all((y == 0) | (y == 1)):
            label = "labels" if self.family == "logistic" else "event indicators"
            raise ValueError(f"{label} must be 0/1")
        time = self.time
        if self.family == "cox":
            if time is None:
                raise ValueError("cox response requires survival times")
            time = _vector(time, "time")
            if time.size != y.size:
                raise ValueError("time and event vectors differ in length")
            if not np.all(time > 0):
                raise ValueError("survival times must be positive")
        elif time is not None:
            raise ValueError(f"time is only meaningful for cox, not {self.family}")
        offset = self.offset
        if offset is not None:
            offset = _vector(offset, "offset")
            if offset.size != y.size:
                raise ValueError("offset length does not match response")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def linear(cls, y, offset=None) -> ResponseSpec:
        return cls("linear", y, None, offset)

    @classmethod
    def logistic(cls, y, offset=None) -> ResponseSpec:
        return cls("logistic", y, None, offset)

    @classmethod
    def cox(cls, time, event, offset=None) -> ResponseSpec:
        return cls("cox", event, time, offset)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def event(self) -> np.ndarray:
        return self.y

    def offset_or_zero(self) -> np.ndarray:
        return np.zeros(self.n) if self.offset is None else self.offset

    def subset(self, idx) -> ResponseSpec:
        idx = np.asarray(idx, dtype=int)
        return ResponseSpec(
            self.family,
            self.y[idx],
            None if self.time is None else self.time[idx],
            None if self.offset is None else self.offset[idx],
        )

    def strata(self) -> np.ndarray | None:
        """Class labels used to balance folds (labels or events), else None."""
        if self.family == "linear":
            return None
        return self.y.astype(int)


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    """Breslow cumulative baseline hazard, a right-continuous step function.

    ``times``/``jumps`` hold the distinct event times and the summed hazard
    increments there. The training risk set (``risk_times``,
    ``risk_exp_eta``) is kept so hazards for new samples can be evaluated.
    """

    times: np.ndarray
    jumps: np.ndarray
    risk_times: np.ndarray
    risk_exp_eta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cumulative", np.cumsum(self.jumps))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        pos = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[0.0], self.cumulative])
        return padded[pos]

    def risk_sum(self, t) -> np.ndarray:
        """``sum_{j: t_j >= t} exp(eta_j)`` over the training samples."""
        order = np.argsort(self.risk_times, kind="stable")
        st = self.risk_times[order]
        tail = np.cumsum(self.risk_exp_eta[order][::-1])[::-1]
        tail = np.concatenate([tail, [0.0]])
        return tail[np.searchsorted(st, np.asarray(t, dtype=np.float64), side="left")]

    def held_out_hazard(self, t, eta) -> np.ndarray:
        """Hazard jump a new event at ``t`` would receive if added to the risk set."""
        return 1.0 / (self.risk_sum(t) + np.exp(np.asarray(eta, dtype=np.float64)))


def _risk_denominators(eta_full, time) -> np.ndarray:
    """``S_i = sum_{j: t_j >= t_i} exp(eta_j)``; tied times share the value."""
    order = np.argsort(time, kind="stable")
    st = time[order]
    ex = np.exp(eta_full[order])
    tail = np.cumsum(ex[::-1])[::-1]
    first = np.searchsorted(st, st, side="left")
    s_sorted = tail[first]
    out = np.empty_like(s_sorted)
    out[order] = s_sorted
    return out


def breslow(eta, response: ResponseSpec) -> BaselineHazard:
    """Breslow estimate ``h_0(t_i) = d_i / sum_{t_j >= t_i} exp(eta_j)``.

    ``eta`` excludes the response offset; the offset is added here.
    """
    if response.family != "cox":
        raise ValueError("breslow requires a cox response")
    d = response.event
    if not np.any(d > 0):
        raise ValueError("no events: the baseline hazard is not estimable")
    eta_full = np.asarray(eta, dtype=np.float64) + response.offset_or_zero()
    s = _risk_denominators(eta_full, response.time)
    per_sample = d / s
    ev = d > 0
    times, inv = np.unique(response.time[ev], return_inverse=True)
    jumps = np.bincount(inv, weights=per_sample[ev], minlength=times.size)
    return BaselineHazard(times, jumps, response.time.copy(), np.exp(eta_full))


def family_moments(family: str, eta, response: ResponseSpec, baseline=None):
    """Mean, IWLS weight and centered response at ``eta`` (offset added here).

    Returns
    -------
    mean, weight, centered : ndarray
        ``Y~``, ``w`` and ``C``. For Cox, ``mean`` is the expected event
        count ``H_0(t_i) exp(eta_i)`` which equals the weight.
    """
    eta_full = np.asarray(eta, dtype=np.float64) + response.offset_or_zero()
    y = response.y
    if family == "linear":
        return eta_full, np.ones_like(eta_full), y - eta_full
    if family == "logistic":
        p = expit(eta_full)
        return p, p * (1.0 - p), y - p
    if family == "cox":
        if baseline is None:
            baseline = breslow(eta, response)
        w = baseline(response.time) * np.exp(eta_full)
        return w, w, y - w
    raise ValueError(f"unknown family {family!r}")


def loglik_terms(family: str, eta, response: ResponseSpec, baseline=None) -> np.ndarray:
    """Per-sample log-likelihood contributions.

    Linear uses unit dispersion. Logistic probabilities are clamped to
    ``[1e-12, 1 - 1e-12]``. Cox uses the full likelihood
    ``d_i (log h_0(t_i) + eta_i) - H_0(t_i) exp(eta_i)``; when ``baseline`` is
    None it is estimated from ``eta`` itself, otherwise a held-out event's
    hazard is the jump it would receive if added to the baseline's risk set.
    """
    eta_full = np.asarray(eta, dtype=np.float64) + response.offset_or_zero()
    y = response.y
    if family == "linear":
        return -0.5 * (y - eta_full) ** 2 - 0.5 * LOG_2PI
    if family == "logistic":
        p = np.clip(expit(eta_full), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return y * np.log(p) + (1.0 - y) * np.log1p(-p)
    if family == "cox":
        d = response.event
        if baseline is None:
            s = _risk_denominators(eta_full, response.time)
            cum = breslow(eta, response)(response.time)
            log_h = -np.log(s)
        else:
            cum = baseline(response.time)
            log_h = np.log(baseline.held_out_hazard(response.time, eta_full))
        return np.where(d > 0, log_h + eta_full, 0.0) - cum * np.exp(eta_full)
    raise ValueError(f"unknown family {family!r}")


def loglik(family: str, eta, response: ResponseSpec, baseline=None) -> float:
    """Total log-likelihood; see :func:`loglik_terms`."""
    return float(np.sum(loglik_terms(family, eta, response, baseline)))


@dataclass(frozen=True)
class IwlsControl:
    """Convergence settings for :func:`fit_gamma`."""

    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 10
    divergence_bound: float = 500.0
    record_path: bool = False


@dataclass(frozen=True, eq=False)
class FitState:
    """Result of an IWLS fit.

    ``eta`` excludes the response offset. ``unpen_coef`` (``k = K L``) and
    ``dual`` (``v = M L``) reproduce it as ``X_1 k + Gamma v`` and are all that
    is needed for prediction and coefficient recovery.
    """

    eta: np.ndarray
    weights: np.ndarray
    linearized: np.ndarray
    hat: HatFactors
    unpen_coef: np.ndarray
    dual: np.ndarray
    baseline: BaselineHazard | None
    converged: bool
    iterations: int
    penalized_loglik: float
    family: str
    halvings: int = 0
    path: tuple = ()
    context: RidgeContext | None = field(default=None, repr=False)
    penalties: PenaltyConfig | None = None

    @property
    def kernels(self) -> tuple:
        return () if self.context is None else self.context.kernels

    def coefficients(self) -> np.ndarray:
        """Stacked coefficients ``[unpenalized; block_1; ...]``."""
        if self.context is None:
            raise RuntimeError("fit has no training context; use iwls_fit to obtain one")
        return recover_coefficients(self, self.context.design, self.penalties)


def _objective(family, eta, v, gamma, response):
    base = loglik(family, eta, response)
    return base - 0.5 * float(v @ (gamma @ v))


def _initial(family, response, unpen, n):
    k0 = np.zeros(0 if unpen is None else unpen.shape[1])
    eta0 = np.zeros(n)
    if family == "logistic" and unpen is not None:
        ybar = np.clip(response.y.mean(), 1e-6, 1.0 - 1e-6)
        k0 = np.linalg.lstsq(unpen, np.full(n, logit(ybar)), rcond=None)[0]
        eta0 = unpen @ k0
    return k0, eta0


def fit_gamma(gamma, response: ResponseSpec, unpen=None, ctrl: IwlsControl | None = None) -> FitState:
    """Run IWLS for a fixed ``Gamma`` (and optional unpenalized block).

    Parameters
    ----------
    gamma : ndarray
        ``n x n`` penalty-weighted Gram sum.
    response : ResponseSpec
    unpen : ndarray, optional
        Unpenalized covariates ``X_1``.
    ctrl : IwlsControl, optional

    Returns
    -------
    FitState
        With ``converged=False`` if the iteration cap was hit.

    Raises
    ------
    ConvergenceError
        If the linear predictor becomes non-finite or exceeds the divergence
        bound.
    """
    ctrl = ctrl or IwlsControl()
    gamma = np.asarray(gamma, dtype=np.float64)
    n = gamma.shape[0]
    if response.n != n:
        raise ValueError(f"response has {response.n} samples, Gamma has {n}")
    if unpen is not None:
        unpen = np.asarray(unpen, dtype=np.float64)
        if unpen.ndim == 1:
            unpen = unpen[:, None]
        if unpen.shape[1] == 0:
            unpen = None
    family = response.family

    k, eta = _initial(family, response, unpen, n)
    v = np.zeros(n)
    obj = _objective(family, eta, v, gamma, response)
    path = [eta.copy()] if ctrl.record_path else []
    halvings_total = 0
    converged = False
    it = 0
    baseline = None

    while it < ctrl.max_iter:
        it += 1
        baseline = breslow(eta, response) if family == "cox" else None
        _, w, c = family_moments(family, eta, response, baseline)
        lin = c + w * eta
        fac = hat_matrix_unpenalized(gamma, w, unpen)
        k_new = fac.K @ lin
        v_new = fac.M @ lin
        eta_new = (unpen @ k_new if unpen is not None else 0.0) + gamma @ v_new

        if family == "linear":
            eta, k, v = eta_new, k_new, v_new
            obj = _objective(family, eta, v, gamma, response)
            converged = True
            if ctrl.record_path:
                path.append(eta.copy())
            break

        if not np.all(np.isfinite(eta_new)) or np.max(np.abs(eta_new)) > ctrl.divergence_bound:
            raise ConvergenceError(
                f"IWLS diverged at iteration {it}: max|eta| exceeds {ctrl.divergence_bound:g}"
            )

        obj_new = _objective(family, eta_new, v_new, gamma, response)
        step = 1.0
        halvings = 0
        slack = 1e-10 * (1.0 + abs(obj))
        while obj_new < obj - slack and halvings < ctrl.max_halvings:
            step *= 0.5
            halvings += 1
            eta_try = eta + step * (eta_new - eta)
            v_try = v + step * (v_new - v)
            obj_new = _objective(family, eta_try, v_try, gamma, response)
        if halvings:
            eta_new = eta + step * (eta_new - eta)
            v_new = v + step * (v_new - v)
            k_new = k + step * (k_new - k)
        halvings_total += halvings

        delta = np.max(np.abs(eta_new - eta))
        eta, k, v, obj = eta_new, k_new, v_new, obj_new
        if ctrl.record_path:
            path.append(eta.copy())
        if delta < ctrl.tol:
            converged = True
            break

    if family == "cox":
        baseline = breslow(eta, response)
    return FitState(
        eta=eta,
        weights=w,
        linearized=lin,
        hat=fac,
        unpen_coef=k,
        dual=v,
        baseline=baseline,
        converged=converged,
        iterations=it,
        penalized_loglik=obj,
        family=family,
        halvings=halvings_total,
        path=tuple(path),
    )


def iwls_fit(ctx: RidgeContext, penalties: PenaltyConfig, response: ResponseSpec,
             ctrl: IwlsControl | None = None) -> FitState:
    """Fit a multi-penalty ridge GLM on a cached design context.

    The returned state carries the context and penalties so it can predict on
    new samples (:func:`gramridge.linalg.predict_new`) and recover
    coefficients.
    """
    fit = fit_gamma(ctx.gamma(penalties), response, ctx.unpenalized, ctrl)
    return dataclasses.replace(fit, context=ctx, penalties=penalties)
