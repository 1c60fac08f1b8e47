"""Penalty tuning: per-block initialization and global + local search on log-penalties.

The search maximizes a utility over ``log(lambda)`` for the free blocks. A
short simulated-annealing run is followed by Nelder-Mead (two or more free
parameters) or bounded Brent (one). The best point seen at any stage is
returned, so the result is never worse than the initializer.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize, minimize_scalar

from .cv import FoldPlan, UtilitySpec, cv_utility, make_folds
from .glm import ConvergenceError, IwlsControl, ResponseSpec, breslow, family_moments, loglik, loglik_terms
from .linalg import DesignError, PenaltyConfig, RidgeContext, SolverError

log = logging.getLogger(__name__)

_BIG = 1e300


class ConstantBlockError(ValueError):
    """Raised when a block has no variation across samples."""


@dataclass(frozen=True)
class TunerConfig:
    """Search budgets and settings.

    ``global_iters`` annealing proposals are followed by at most
    ``local_iters`` iterations of the local method. ``bounds`` apply to the
    natural log of each penalty. Paired penalties are searched in the scaled
    parametrization, starting from coupling ``paired_coupling``.
    """

    global_iters: int = 10
    local_iters: int = 25
    local_method: str = "auto"
    bounds: tuple = (-10.0, 30.0)
    seed: int = 0
    log_scale: bool = True
    anneal_temperature: float = 1.0
    anneal_decay: float = 0.8
    anneal_step: float = 1.0
    brent_xatol: float = 1e-5
    paired_parametrization: str = "scaled"
    paired_coupling: float = 0.25
    workers: int = 1

    def __post_init__(self):
        if self.global_iters < 0 or self.local_iters < 0:
            raise ValueError("iteration budgets must be non-negative")
        lo, hi = self.bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid log-penalty bounds {self.bounds}")
        if self.local_method not in ("auto", "nelder_mead", "brent", "none"):
            raise ValueError(f"unknown local method {self.local_method!r}")
        if not self.log_scale:
            raise ValueError("the search always runs on log-penalties")
        if not 0 < self.anneal_decay < 1:
            raise ValueError("anneal_decay must lie in (0, 1)")


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    trace: list
    n_evals: int


def optimize_log_penalties(objective: Callable, x0, cfg: TunerConfig) -> OptimResult:
    """Maximize ``objective(x)`` over ``x`` in the box ``cfg.bounds``.

    Every fresh evaluation is appended to the trace as ``(x, value)``.
    Among equal values the earliest evaluated point is kept.
    """
    lo, hi = cfg.bounds
    x0 = np.clip(np.asarray(x0, dtype=np.float64).ravel(), lo, hi)
    dim = x0.size
    cache: dict = {}
    trace: list = []
    best = {"x": x0.copy(), "f": -np.inf}

    def evaluate(x):
        x = np.clip(np.asarray(x, dtype=np.float64).ravel(), lo, hi)
        key = tuple(x.tolist())
        if key in cache:
            return cache[key]
        f = float(objective(x))
        if np.isnan(f):
            f = -np.inf
        cache[key] = f
        trace.append((x.copy(), f))
        if f > best["f"]:
            best["x"], best["f"] = x.copy(), f
        return f

    f_cur = evaluate(x0)
    if f_cur == -np.inf:
        raise ValueError(
            "utility is -inf at the initial penalties; check the data for "
            "separation, constant blocks or non-finite values"
        )
    if dim == 0:
        return OptimResult(x0, f_cur, trace, len(trace))

    rng = np.random.default_rng(cfg.seed)
    x_cur = x0.copy()
    temp = cfg.anneal_temperature
    scale = cfg.anneal_step
    for _ in range(cfg.global_iters):
        prop = np.clip(x_cur + scale * rng.standard_normal(dim), lo, hi)
        f_prop = evaluate(prop)
        u = rng.uniform()
        if f_prop >= f_cur or (np.isfinite(f_prop) and u < np.exp((f_prop - f_cur) / temp)):
            x_cur, f_cur = prop, f_prop
        temp *= cfg.anneal_decay
        scale *= cfg.anneal_decay

    method = cfg.local_method
    if method == "auto":
        method = "brent" if dim == 1 else "nelder_mead"
    if method == "brent" and dim != 1:
        raise ValueError("Brent search needs exactly one free penalty")

    def neg(x):
        f = evaluate(np.atleast_1d(x))
        return -f if np.isfinite(f) else _BIG

    start = best["x"].copy()
    if cfg.local_iters > 0 and method == "brent":
        a, b = max(lo, start[0] - 5.0), min(hi, start[0] + 5.0)
        minimize_scalar(neg, bounds=(a, b), method="bounded",
                        options={"maxiter": cfg.local_iters, "xatol": cfg.brent_xatol})
    elif cfg.local_iters > 0 and method == "nelder_mead":
        simplex = [start]
        for i in range(dim):
            v = start.copy()
            v[i] = v[i] + 1.0 if v[i] + 1.0 <= hi else v[i] - 1.0
            simplex.append(v)
        minimize(neg, start, method="Nelder-Mead", bounds=[(lo, hi)] * dim,
                 options={"maxiter": cfg.local_iters, "initial_simplex": np.array(simplex),
                          "xatol": 1e-6, "fatol": 1e-10, "adaptive": False})
    return OptimResult(best["x"], best["f"], trace, len(trace))


@dataclass(frozen=True, eq=False)
class SvdCache:
    """Thin SVD of one block, ``X_b = R V^T`` with ``R = U D``."""

    R: np.ndarray
    V: np.ndarray
    singular_values: np.ndarray

    @classmethod
    def from_block(cls, block) -> SvdCache:
        x = np.asarray(block, dtype=np.float64)
        u, s, vt = np.linalg.svd(x, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            r = 0
        else:
            r = int(np.sum(s > s[0] * max(x.shape) * np.finfo(float).eps))
        return cls(u[:, :r] * s[:r], vt[:r].T, s[:r])

    @property
    def rank(self) -> int:
        return self.singular_values.size


def _primal_fit(z, penalty, response: ResponseSpec, ctrl: IwlsControl):
    """Coefficient-space IWLS for a small design ``z`` and per-column penalties."""
    n, p = z.shape
    lam = np.asarray(penalty, dtype=np.float64)
    family = response.family
    beta = np.zeros(p)
    eta = np.zeros(n)

    def objective(b, e):
        return loglik(family, e, response) - 0.5 * float(b @ (lam * b))

    obj = objective(beta, eta)
    for it in range(1, ctrl.max_iter + 1):
        _, w, c = family_moments(family, eta, response)
        w = np.maximum(w, 1e-10)
        a = z.T @ (w[:, None] * z) + np.diag(lam)
        rhs = z.T @ (c + w * eta)
        try:
            beta_new = sla.cho_solve(sla.cho_factor(a), rhs)
        except np.linalg.LinAlgError:
            beta_new = np.linalg.solve(a, rhs)
        eta_new = z @ beta_new
        if family == "linear":
            return beta_new, True
        if not np.all(np.isfinite(eta_new)) or np.max(np.abs(eta_new)) > ctrl.divergence_bound:
            raise ConvergenceError("coefficient-space IWLS diverged")
        obj_new = objective(beta_new, eta_new)
        step, halvings = 1.0, 0
        slack = 1e-10 * (1.0 + abs(obj))
        while obj_new < obj - slack and halvings < ctrl.max_halvings:
            step *= 0.5
            halvings += 1
            obj_new = objective(beta + step * (beta_new - beta), eta + step * (eta_new - eta))
        if halvings:
            beta_new = beta + step * (beta_new - beta)
            eta_new = eta + step * (eta_new - eta)
        delta = np.max(np.abs(eta_new - eta))
        beta, eta, obj = beta_new, eta_new, obj_new
        if delta < ctrl.tol:
            return beta, True
    return beta, False


def _uni_cvl(z, unpen, response, plan, lam, ctrl) -> float:
    p1 = 0 if unpen is None else unpen.shape[1]
    design = z if unpen is None else np.hstack([unpen, z])
    penalty = np.concatenate([np.zeros(p1), np.full(z.shape[1], lam)])
    total = 0.0
    for r in range(plan.repeats):
        for in_idx, out_idx in plan.splits(r):
            if not out_idx.size:
                continue
            sub = response.subset(in_idx)
            try:
                beta, ok = _primal_fit(design[in_idx], penalty, sub, ctrl)
            except (ConvergenceError, np.linalg.LinAlgError):
                return -np.inf
            if not ok:
                return -np.inf
            baseline = None
            if response.family == "cox":
                baseline = breslow(design[in_idx] @ beta, sub)
            eta_out = design[out_idx] @ beta
            total += float(np.sum(loglik_terms(response.family, eta_out,
                                               response.subset(out_idx), baseline)))
    return total / plan.repeats


def init_uni_penalty(block, response: ResponseSpec, plan: FoldPlan, unpen=None, method: str = "svd",
                     grid_size: int = 41, bounds=(-10.0, 30.0), xatol: float = 1e-8,
                     ctrl: IwlsControl | None = None) -> float:
    """Single-block penalty maximizing the cross-validated log-likelihood.

    A log-spaced grid centred at ``||X||_F^2 / n`` is refined by bounded
    Brent between the neighbours of the best grid point. With
    ``method="svd"`` every fold fit runs on ``R`` from one thin SVD
    ``X = R V^T`` of the full block (``rank(X)`` columns instead of ``p``);
    ``method="direct"`` fits on ``X`` itself and serves as a reference.
    """
    x = np.asarray(block, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != response.n:
        raise DesignError("block must be an n x p matrix matching the response")
    if x.shape[1] == 0 or np.all(np.ptp(x, axis=0) == 0.0):
        raise ConstantBlockError("block is constant across samples; no penalty can be estimated")
    ctrl = ctrl or IwlsControl()
    if method == "svd":
        z = SvdCache.from_block(x).R
    elif method == "direct":
        z = x
    else:
        raise ValueError(f"unknown method {method!r}")
    if unpen is not None:
        unpen = np.asarray(unpen, dtype=np.float64)

    lo, hi = bounds
    center = np.log(np.sum(x * x) / x.shape[0])
    grid = np.unique(np.clip(center + np.linspace(-10.0, 10.0, grid_size), lo, hi))
    cache = {}

    def f(t):
        t = float(t)
        if t not in cache:
            cache[t] = _uni_cvl(z, unpen, response, plan, np.exp(t), ctrl)
        return cache[t]

    values = np.array([f(t) for t in grid])
    if not np.any(np.isfinite(values)):
        raise ConvergenceError("no grid penalty gave a finite cross-validated likelihood")
    i = int(np.argmax(values))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, grid.size - 1)]
    best_t, best_f = grid[i], values[i]
    if b > a:
        res = minimize_scalar(lambda t: -f(t) if np.isfinite(f(t)) else _BIG, bounds=(a, b),
                              method="bounded", options={"xatol": xatol, "maxiter": 200})
        if -res.fun > best_f:
            best_t = float(res.x)
    return float(np.exp(best_t))


@dataclass(frozen=True, eq=False)
class TuneResult:
    """Tuned penalties with the evaluation trace.

    ``trace`` lists ``(lambdas, cross, utility)`` for every evaluated
    candidate, with lambdas in the caller's block order. ``utility`` is the
    raw criterion value at the returned penalties (NaN when nothing was
    evaluated).
    """

    penalties: PenaltyConfig
    utility: float
    trace: tuple
    n_evals: int
    initial: PenaltyConfig
    stage1: TuneResult | None = field(default=None, repr=False)


def _unscale_pair(l1, l2, l3):
    r = l3 / np.sqrt(l1 * l2)
    c = r / (1.0 - r)
    return l1 / (1.0 + c), l2 / (1.0 + c), c


class _Search:
    """Map between the free search vector and :class:`PenaltyConfig`."""

    def __init__(self, pair, initial: PenaltyConfig, fixed_mask, cfg: TunerConfig):
        self.pair = pair
        self.cfg = cfg
        self.fixed = np.asarray(fixed_mask, dtype=bool)
        self.free = np.flatnonzero(~self.fixed)
        self.paired = pair is not None
        base = np.array(initial.lambdas, dtype=np.float64)
        if self.paired:
            if initial.cross is None:
                coupling = cfg.paired_coupling
            else:
                a, b = pair
                t1, t2, coupling = _unscale_pair(base[a], base[b], initial.cross)
                base[a], base[b] = t1, t2
            self.coupling_free = not (self.fixed[pair[0]] and self.fixed[pair[1]])
            self.coupling = max(coupling, np.exp(cfg.bounds[0]))
        else:
            self.coupling_free = False
        self.base = base

    def x0(self) -> np.ndarray:
        x = list(np.log(self.base[self.free]))
        if self.coupling_free:
            x.append(np.log(self.coupling))
        return np.array(x)

    def to_penalties(self, x) -> PenaltyConfig:
        lam = self.base.copy()
        nf = self.free.size
        lam[self.free] = np.exp(x[:nf])
        if not self.paired:
            return PenaltyConfig(lam, self.fixed)
        coupling = np.exp(x[nf]) if self.coupling_free else self.coupling
        return PenaltyConfig.paired_from(lam, self.pair, (lam[self.pair[0]], lam[self.pair[1]], coupling),
                                         self.cfg.paired_parametrization, self.fixed)


def _permute(pen: PenaltyConfig, order) -> PenaltyConfig:
    return PenaltyConfig(pen.lambdas[order], pen.fixed_mask[order], pen.cross)


def search_penalties(ctx: RidgeContext, make_evaluator: Callable, initial: PenaltyConfig,
                     cfg: TunerConfig, fixed_mask=None) -> TuneResult:
    """Generic penalty search shared by CV, marginal-likelihood and elbo tuning.

    ``make_evaluator(ctx)`` must return ``f(penalties) -> (raw, score)`` where
    ``score`` is maximized. Blocks are put in name order before searching so
    the result does not depend on how the caller ordered them.
    """
    nb = ctx.n_blocks
    if fixed_mask is None:
        fixed_mask = initial.fixed_mask
    fixed_mask = np.asarray(fixed_mask, dtype=bool)
    if fixed_mask.size != nb or initial.n_blocks != nb:
        raise DesignError("penalty and mask lengths must match the number of blocks")
    order = np.argsort(np.array(ctx.block_names), kind="stable")
    inverse = np.argsort(order)
    cctx = ctx if np.array_equal(order, np.arange(nb)) else ctx.select_blocks(order)
    cinit = _permute(PenaltyConfig(initial.lambdas, fixed_mask, initial.cross), order)
    pair = cctx.design.paired
    if initial.cross is not None and pair is None:
        raise DesignError("paired penalty given for a design without paired blocks")

    search = _Search(pair, cinit, cinit.fixed_mask, cfg)
    evaluator = make_evaluator(cctx)
    raw_values: dict = {}
    trace = []

    def back(pen: PenaltyConfig) -> PenaltyConfig:
        return PenaltyConfig(pen.lambdas[inverse], pen.fixed_mask[inverse], pen.cross)

    def objective(x):
        try:
            pen = search.to_penalties(x)
        except DesignError:
            return -np.inf
        raw, score = evaluator(pen)
        raw_values[tuple(np.asarray(x).tolist())] = raw
        orig = back(pen)
        trace.append((tuple(orig.lambdas.tolist()), orig.cross, raw))
        return score

    x0 = search.x0()
    start_pen = back(search.to_penalties(x0))
    if x0.size == 0:
        return TuneResult(start_pen, float("nan"), (), 0, start_pen)
    res = optimize_log_penalties(objective, x0, cfg)
    best = back(search.to_penalties(res.x))
    raw = raw_values[tuple(np.clip(res.x, *cfg.bounds).tolist())]
    return TuneResult(best, raw, tuple(trace), res.n_evals, start_pen)


def _upper_fallback(cfg, name):
    warnings.warn(
        f"block {name!r} is constant; its penalty starts at the upper bound",
        RuntimeWarning,
        stacklevel=3,
    )
    return float(np.exp(cfg.bounds[1]))


def initial_penalties(ctx: RidgeContext, response: ResponseSpec, plan: FoldPlan,
                      cfg: TunerConfig, ctrl: IwlsControl | None = None) -> PenaltyConfig:
    """Per-block starting penalties from :func:`init_uni_penalty`."""
    lams = []
    for name, block in zip(ctx.block_names, ctx.design.blocks):
        try:
            lams.append(init_uni_penalty(block, response, plan, ctx.unpenalized,
                                         bounds=cfg.bounds, ctrl=ctrl))
        except ConstantBlockError:
            lams.append(_upper_fallback(cfg, name))
    return PenaltyConfig(lams)


def _cv_evaluator(response, plan, utility, ctrl, workers):
    def make(cctx):
        def evaluate(pen):
            raw = cv_utility(cctx, pen, response, plan, utility, ctrl, workers)
            return raw, utility.score(raw)
        return evaluate
    return make


def tune(ctx: RidgeContext, response: ResponseSpec, plan: FoldPlan | None = None, utility="cvl",
         cfg: TunerConfig | None = None, fixed_mask=None, initial: PenaltyConfig | None = None,
         ctrl: IwlsControl | None = None) -> TuneResult:
    """Tune block penalties by cross-validation.

    Parameters
    ----------
    ctx : RidgeContext
    response : ResponseSpec
    plan : FoldPlan, optional
        Defaults to stratified 10-fold (or leave-one-out for ``n < 10``) with
        ``cfg.seed``.
    utility : str or UtilitySpec
    cfg : TunerConfig, optional
    fixed_mask : array_like of bool, optional
        Blocks whose penalty stays at its initial value. Defaults to the mask
        carried by ``initial``.
    initial : PenaltyConfig, optional
        Starting point; computed with :func:`init_uni_penalty` per block when
        omitted.

    Returns
    -------
    TuneResult
    """
    cfg = cfg or TunerConfig()
    utility = UtilitySpec.coerce(utility)
    utility.check_family(response.family)
    if plan is None:
        plan = make_folds(response, min(10, response.n), 1, cfg.seed)
    if initial is None:
        initial = initial_penalties(ctx, response, plan, cfg, ctrl)
    maker = _cv_evaluator(response, plan, utility, ctrl, cfg.workers)
    return search_penalties(ctx, maker, initial, cfg, fixed_mask)


def _block_indices(ctx: RidgeContext, blocks: Sequence) -> list:
    out = []
    for b in blocks:
        if isinstance(b, str):
            if b not in ctx.block_names:
                raise DesignError(f"unknown block {b!r}")
            out.append(ctx.block_names.index(b))
        else:
            out.append(int(b))
    return sorted(set(out))


def preferential(ctx: RidgeContext, preferred: Sequence, stage_tuner: Callable,
                 start: Callable) -> TuneResult:
    """Two-stage tuning shared by the CV and marginal-likelihood tuners.

    ``stage_tuner(ctx, initial_or_None, fixed_mask_or_None)`` runs one stage;
    ``start(ctx)`` gives default initial penalties for a context.
    """
    pref = _block_indices(ctx, preferred)
    if not pref:
        raise DesignError("preferred block set is empty")
    if len(pref) == ctx.n_blocks:
        raise DesignError("all blocks are preferred; nothing is left for the second stage")
    rest = [i for i in range(ctx.n_blocks) if i not in pref]
    stage1 = stage_tuner(ctx.select_blocks(pref), None, None)
    init = np.empty(ctx.n_blocks)
    init[pref] = stage1.penalties.lambdas
    init[rest] = start(ctx.select_blocks(rest)).lambdas
    mask = np.zeros(ctx.n_blocks, dtype=bool)
    mask[pref] = True
    cross = None
    sub = ctx.select_blocks(pref)
    if sub.design.paired is not None:
        cross = stage1.penalties.cross
    stage2 = stage_tuner(ctx, PenaltyConfig(init, mask, cross), mask)
    return TuneResult(stage2.penalties, stage2.utility, stage2.trace, stage2.n_evals,
                      stage2.initial, stage1)


def tune_preferential(ctx: RidgeContext, response: ResponseSpec, plan: FoldPlan | None = None,
                      utility="cvl", cfg: TunerConfig | None = None, preferred: Sequence = (),
                      ctrl: IwlsControl | None = None) -> TuneResult:
    """Preferential tuning.

    Stage 1 tunes the preferred blocks with the other blocks left out of the
    model. Stage 2 fixes those penalties and tunes the rest with every block
    in the model. The stage-1 result is attached as ``stage1``.
    """
    cfg = cfg or TunerConfig()
    if plan is None:
        plan = make_folds(response, min(10, response.n), 1, cfg.seed)

    def stage(c, initial, mask):
        return tune(c, response, plan, utility, cfg, mask, initial, ctrl)

    return preferential(ctx, preferred, stage,
                        lambda c: initial_penalties(c, response, plan, cfg, ctrl))
