"""Fold construction, cross-validated utilities and double cross-validation.

For a candidate penalty ``Gamma`` is assembled once; every fold slices
``Gamma[in, in]`` and ``Gamma[out, in]`` from it.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .glm import ConvergenceError, IwlsControl, ResponseSpec, fit_gamma, iwls_fit, loglik_terms
from .linalg import PenaltyConfig, RidgeContext, SolverError, submatrix_gamma

log = logging.getLogger(__name__)

CRITERIA = ("cvl", "auc", "cindex", "mse")
_COMPATIBLE = {
    "cvl": ("linear", "logistic", "cox"),
    "auc": ("logistic",),
    "cindex": ("cox",),
    "mse": ("linear", "logistic"),
}


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Fold assignment per repeat.

    ``assignments`` has shape ``(repeats, n)`` with fold ids in ``0..k-1``.
    """

    assignments: np.ndarray
    k: int
    seed: int | None = None
    balance: str = "none"

    @property
    def repeats(self) -> int:
        return self.assignments.shape[0]

    @property
    def n(self) -> int:
        return self.assignments.shape[1]

    def splits(self, repeat: int = 0):
        """List of ``(in_idx, out_idx)`` pairs for one repeat, in fold order."""
        a = self.assignments[repeat]
        return [(np.flatnonzero(a != f), np.flatnonzero(a == f)) for f in range(self.k)]

    def subset(self, idx) -> FoldPlan:
        return FoldPlan(self.assignments[:, np.asarray(idx, dtype=int)], self.k, self.seed, self.balance)


def make_folds(response: ResponseSpec, k: int = 10, repeats: int = 1, seed=0,
               stratify: bool = True) -> FoldPlan:
    """Random k-fold assignment, balanced over labels (logistic) or events (cox).

    Within each repeat the samples of each stratum are shuffled and the
    strata are concatenated (largest label first for binary data, events
    first for survival data); fold ids are then dealt round-robin. This
    spreads every stratum as evenly as possible and keeps fold sizes within
    one of each other. Plans are reproducible from ``seed`` via numpy's
    PCG64 generator.
    """
    n = response.n
    k = int(k)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    if repeats < 1:
        raise ValueError("repeats must be positive")
    rng = np.random.default_rng(seed)
    strata = response.strata() if stratify else None
    if strata is None:
        groups = [np.arange(n)]
        balance = "none"
    else:
        labels = np.unique(strata)[::-1]
        groups = [np.flatnonzero(strata == s) for s in labels]
        balance = "events" if response.family == "cox" else "labels"
        small = [int(s) for s, g in zip(labels, groups) if g.size < k]
        if small:
            warnings.warn(
                f"strata {small} have fewer members than folds ({k}); balance is best-effort",
                RuntimeWarning,
                stacklevel=2,
            )
    out = np.empty((repeats, n), dtype=int)
    for r in range(repeats):
        order = np.concatenate([rng.permutation(g) for g in groups])
        out[r, order] = np.arange(n) % k
    out.setflags(write=False)
    return FoldPlan(out, k, None if seed is None else int(seed), balance)


@dataclass(frozen=True)
class UtilitySpec:
    """Tuning criterion.

    ``criterion`` is one of ``cvl``, ``auc``, ``cindex``, ``mse`` or a
    callable ``f(predictions, held_out_response) -> float`` applied to the
    pooled held-out linear predictors of each repeat. ``mse`` is the only
    built-in that is minimized; :meth:`score` turns any value into a
    larger-is-better number.
    """

    criterion: str | Callable = "cvl"
    maximize: bool | None = None
    name: str = field(default="")

    def __post_init__(self):
        if not callable(self.criterion) and self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}; expected one of {CRITERIA}")
        if self.maximize is None:
            object.__setattr__(self, "maximize", self.criterion != "mse")
        if not self.name:
            label = self.criterion if isinstance(self.criterion, str) else getattr(
                self.criterion, "__name__", "custom")
            object.__setattr__(self, "name", label)

    @classmethod
    def coerce(cls, spec) -> UtilitySpec:
        if isinstance(spec, UtilitySpec):
            return spec
        return cls(spec)

    def check_family(self, family: str) -> None:
        if isinstance(self.criterion, str) and family not in _COMPATIBLE[self.criterion]:
            raise ValueError(f"criterion {self.criterion!r} is not defined for {family} responses")

    def score(self, value: float) -> float:
        if np.isnan(value):
            return -np.inf
        return value if self.maximize else -value

    @property
    def worst(self) -> float:
        return -np.inf if self.maximize else np.inf


def auc(predictions, labels) -> float:
    """Mann-Whitney AUC; ties count one half. NaN if only one class is present."""
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels) > 0
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(pred)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def concordance_index(predictions, time, event) -> float:
    """Harrell's c-index with higher predictions meaning higher risk.

    A pair is usable when the shorter time is an observed event; tied
    predictions get half credit. NaN when there are no usable pairs.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    d = np.asarray(event) > 0
    usable = d[:, None] & (t[:, None] < t[None, :])
    total = usable.sum()
    if total == 0:
        return float("nan")
    diff = pred[:, None] - pred[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float((score * usable).sum() / total)


def evaluate_metric(criterion, predictions, response: ResponseSpec, baseline=None) -> float:
    """Evaluate a criterion on held-out linear predictors.

    ``predictions`` are on the linear-predictor scale and include any
    offset. ``mse`` compares with the mean (probabilities for logistic).
    ``cvl`` returns the summed log-likelihood. Undefined values (one class,
    no usable pairs) are returned as NaN.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.size != response.n:
        raise ValueError(f"{pred.size} predictions for {response.n} samples")
    if callable(criterion):
        return float(criterion(pred, response))
    if criterion == "auc":
        return auc(pred, response.y)
    if criterion == "cindex":
        return concordance_index(pred, response.time, response.event)
    if criterion == "mse":
        mean = expit(pred) if response.family == "logistic" else pred
        return float(np.mean((response.y - mean) ** 2))
    if criterion == "cvl":
        shifted = ResponseSpec(response.family, response.y, response.time, None)
        return float(np.sum(loglik_terms(response.family, pred, shifted, baseline)))
    raise ValueError(f"unknown criterion {criterion!r}")


@dataclass(frozen=True, eq=False)
class FoldResult:
    out_idx: np.ndarray
    eta: np.ndarray
    loglik: np.ndarray | None
    ok: bool


def _fold_fit(gamma, response, unpen, in_idx, out_idx, ctrl, need_loglik) -> FoldResult:
    try:
        g_ii = submatrix_gamma(gamma, in_idx, in_idx)
        g_oi = submatrix_gamma(gamma, out_idx, in_idx)
        x1_in = None if unpen is None else unpen[in_idx]
        fit = fit_gamma(g_ii, response.subset(in_idx), x1_in, ctrl)
    except (ConvergenceError, SolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("fold fit failed (%s); utility set to worst value", exc)
        return FoldResult(out_idx, np.full(out_idx.size, np.nan), None, False)
    if not fit.converged:
        log.warning("fold fit did not converge in %d iterations", fit.iterations)
        return FoldResult(out_idx, np.full(out_idx.size, np.nan), None, False)
    eta = g_oi @ fit.dual
    if unpen is not None:
        eta = eta + unpen[out_idx] @ fit.unpen_coef
    ll = None
    if need_loglik:
        ll = loglik_terms(response.family, eta, response.subset(out_idx), fit.baseline)
    return FoldResult(out_idx, eta, ll, True)


def cross_validated_predictions(ctx: RidgeContext, penalties: PenaltyConfig, response: ResponseSpec,
                                plan: FoldPlan, ctrl: IwlsControl | None = None, workers: int = 1,
                                need_loglik: bool = True, gamma=None):
    """Held-out fits for every fold of every repeat.

    Returns a list (one entry per repeat) of :class:`FoldResult` lists in fold
    order. Folds run concurrently when ``workers > 1``; the ordering of the
    output does not depend on completion order.
    """
    if plan.n != response.n or response.n != ctx.n:
        raise ValueError("fold plan, response and design disagree on sample count")
    if gamma is None:
        gamma = ctx.gamma(penalties)
    unpen = ctx.unpenalized
    jobs = [
        (r, i, o) for r in range(plan.repeats) for i, o in plan.splits(r) if o.size
    ]

    def run(job):
        _, i, o = job
        return _fold_fit(gamma, response, unpen, i, o, ctrl, need_loglik)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    per_repeat = [[] for _ in range(plan.repeats)]
    for (r, _, _), res in zip(jobs, results):
        per_repeat[r].append(res)
    return per_repeat


def cv_utility(ctx: RidgeContext, penalties: PenaltyConfig, response: ResponseSpec, plan: FoldPlan,
               utility="cvl", ctrl: IwlsControl | None = None, workers: int = 1) -> float:
    """Cross-validated utility of one penalty configuration.

    ``cvl`` sums the held-out log-likelihood over samples; other criteria
    are computed on the pooled held-out predictions of a repeat. Repeats are
    averaged. A failed or non-converged fold makes the result the worst
    possible value (``-inf`` for maximized criteria, ``+inf`` for ``mse``).
    """
    utility = UtilitySpec.coerce(utility)
    utility.check_family(response.family)
    is_cvl = utility.criterion == "cvl"
    per_repeat = cross_validated_predictions(
        ctx, penalties, response, plan, ctrl, workers, need_loglik=is_cvl
    )
    values = []
    for folds in per_repeat:
        if not all(f.ok for f in folds):
            return utility.worst
        if is_cvl:
            values.append(float(sum(np.sum(f.loglik) for f in folds)))
            continue
        eta = np.empty(response.n)
        for f in folds:
            eta[f.out_idx] = f.eta
        values.append(evaluate_metric(utility.criterion, eta + response.offset_or_zero(), response))
    # anchored mean: identical replicates average to the replicate bit-for-bit
    values = np.asarray(values)
    return float(values[0] + np.mean(values - values[0]))


def default_criterion(family: str) -> str:
    return {"linear": "mse", "logistic": "auc", "cox": "cindex"}[family]


@dataclass(frozen=True, eq=False)
class DoubleCvReport:
    """Per-outer-split performance of tune-then-fit."""

    criterion: str
    metrics: np.ndarray
    penalties: tuple
    predictions: np.ndarray
    plan: FoldPlan

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.metrics))

    def table(self) -> str:
        rows = ["split\t" + self.criterion + "\t" + "\t".join(
            f"lambda_{i + 1}" for i in range(self.penalties[0].n_blocks))]
        for s, (m, p) in enumerate(zip(self.metrics, self.penalties)):
            rows.append(f"{s}\t{m!r}\t" + "\t".join(repr(float(v)) for v in p.lambdas))
        return "\n".join(rows) + "\n"


def double_cv(ctx: RidgeContext, response: ResponseSpec, outer_k: int = 3, inner_k: int = 10,
              repeats: int = 1, cfg=None, utility="cvl", criterion=None, seed=0,
              method: str = "cv", initial: PenaltyConfig | None = None,
              ctrl: IwlsControl | None = None) -> DoubleCvReport:
    """Outer CV around the inner tuning loop.

    Each outer split tunes penalties on its training part (``method`` is
    ``cv`` or ``ml``), refits there, and evaluates ``criterion`` (default: MSE
    for linear, AUC for logistic, c-index for cox) on the held-out part. The
    outer plan uses ``seed``; inner plans use ``seed + 1 + split``.
    """
    from .marglik import tune_ml
    from .tuning import TunerConfig, tune

    cfg = cfg or TunerConfig()
    criterion = criterion or default_criterion(response.family)
    outer = make_folds(response, outer_k, 1, seed)
    metrics, pens = [], []
    preds = np.full(response.n, np.nan)
    for s, (in_idx, out_idx) in enumerate(outer.splits(0)):
        sub_ctx = ctx.subset(in_idx)
        sub_resp = response.subset(in_idx)
        if method == "cv":
            k_in = min(inner_k, in_idx.size)
            inner = make_folds(sub_resp, k_in, repeats, seed + 1 + s)
            res = tune(sub_ctx, sub_resp, inner, utility, cfg, initial=initial, ctrl=ctrl)
        elif method == "ml":
            res = tune_ml(sub_ctx, sub_resp, cfg, initial=initial)
        else:
            raise ValueError(f"unknown tuning method {method!r}")
        fit = iwls_fit(sub_ctx, res.penalties, sub_resp, ctrl)
        g_oi = submatrix_gamma(ctx.gamma(res.penalties), out_idx, in_idx)
        eta = g_oi @ fit.dual
        if ctx.unpenalized is not None:
            eta = eta + ctx.unpenalized[out_idx] @ fit.unpen_coef
        out_resp = response.subset(out_idx)
        eta_full = eta + out_resp.offset_or_zero()
        preds[out_idx] = eta_full
        metrics.append(evaluate_metric(criterion, eta_full, out_resp, fit.baseline))
        pens.append(res.penalties)
    name = criterion if isinstance(criterion, str) else getattr(criterion, "__name__", "custom")
    return DoubleCvReport(name, np.array(metrics), tuple(pens), preds, outer)
