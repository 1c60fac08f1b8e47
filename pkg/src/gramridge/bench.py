"""Synthetic data and timing comparison of three hat-matrix backends.

* ``naive``: solves the ``p x p`` system ``(Lambda + X^T W X)`` per evaluation.
* ``woodbury``: forms ``X Lambda^{-1} X^T`` from the raw design per evaluation
  and solves in ``n``-space.
* ``gram``: computes the block Gram matrices once and only reweights and
  slices them per evaluation.

An evaluation is one in-fold hat-matrix build plus one linear-predictor
update for a fresh (penalties, weights, fold) triple.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .glm import ResponseSpec
from .linalg import BlockedDesign, PenaltyConfig, assemble_gamma, hat_matrix, precompute_grams

BACKENDS = ("naive", "woodbury", "gram")


@dataclass(frozen=True)
class SimSpec:
    """Simulation settings.

    ``family`` is ``linear``, ``logistic``, ``probit`` or ``cox``; probit
    data come back as a binary (logistic-family) response. Coefficients of
    block ``b`` are drawn from ``N(0, 1/lambdas[b])``.
    """

    n: int
    block_sizes: tuple
    lambdas: tuple
    family: str = "logistic"
    censoring: float = 0.3
    seed: int = 0
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.n <= 0 or any(p <= 0 for p in self.block_sizes):
            raise ValueError("dimensions must be positive")
        if len(self.lambdas) != len(self.block_sizes):
            raise ValueError("one penalty per block is required")
        if any(lam <= 0 for lam in self.lambdas):
            raise ValueError("penalties must be positive")
        if not 0 <= self.censoring < 1:
            raise ValueError("censoring rate must lie in [0, 1)")
        if self.family not in ("linear", "logistic", "probit", "cox"):
            raise ValueError(f"unknown family {self.family!r}")


def simulate(spec: SimSpec):
    """Draw ``(design, response, beta_true)`` from the ridge prior model.

    Covariates are standard normal. Logistic labels use ``expit(eta)``;
    cox times are exponential with rate ``exp(eta)`` and a fraction
    ``censoring`` of samples is censored uniformly before its event time.
    """
    rng = np.random.default_rng(spec.seed)
    blocks = [rng.standard_normal((spec.n, p)) for p in spec.block_sizes]
    betas = [rng.standard_normal(p) / np.sqrt(lam) for p, lam in zip(spec.block_sizes, spec.lambdas)]
    eta = sum(x @ b for x, b in zip(blocks, betas))
    if spec.family == "linear":
        resp = ResponseSpec.linear(eta + spec.noise_sd * rng.standard_normal(spec.n))
    elif spec.family == "logistic":
        resp = ResponseSpec.logistic((rng.uniform(size=spec.n) < expit(eta)).astype(float))
    elif spec.family == "probit":
        resp = ResponseSpec.logistic((eta + rng.standard_normal(spec.n) > 0).astype(float))
    else:
        t = rng.exponential(size=spec.n) / np.exp(eta)
        censored = rng.uniform(size=spec.n) < spec.censoring
        t = np.where(censored, t * rng.uniform(size=spec.n), t)
        t = np.maximum(t, np.finfo(float).tiny)
        resp = ResponseSpec.cox(t, (~censored).astype(float))
    design = BlockedDesign(tuple(blocks))
    return design, resp, np.concatenate(betas)


def topk_overlap(beta_hat, beta_true, k: int) -> int:
    """Number of shared indices among the ``k`` largest ``|beta|`` of each vector.

    Ties in ``|beta|`` are broken by index.
    """
    a = np.abs(np.asarray(beta_hat, dtype=np.float64)).ravel()
    b = np.abs(np.asarray(beta_true, dtype=np.float64)).ravel()
    if a.size != b.size:
        raise ValueError("coefficient vectors differ in length")
    if not 0 <= k <= a.size:
        raise ValueError(f"k={k} outside 0..{a.size}")
    top_a = np.argsort(-a, kind="stable")[:k]
    top_b = np.argsort(-b, kind="stable")[:k]
    return int(np.intersect1d(top_a, top_b).size)


@dataclass(frozen=True, eq=False)
class Evaluation:
    lambdas: np.ndarray
    weights: np.ndarray
    linearized: np.ndarray
    in_idx: np.ndarray


def evaluation_plan(n: int, n_blocks: int, budget: int, k: int = 10, seed: int = 0):
    """Deterministic list of (penalties, in-fold weights, response, fold) triples."""
    rng = np.random.default_rng(seed)
    folds = rng.permutation(n) % k
    plan = []
    for _ in range(budget):
        lam = np.exp(rng.uniform(-2.0, 6.0, size=n_blocks))
        f = int(rng.integers(k))
        in_idx = np.flatnonzero(folds != f)
        w = rng.uniform(0.05, 0.25, size=in_idx.size)
        lin = rng.standard_normal(in_idx.size)
        plan.append(Evaluation(lam, w, lin, in_idx))
    return plan


def _naive_eval(blocks, ev: Evaluation) -> np.ndarray:
    x = np.hstack([b[ev.in_idx] for b in blocks])
    diag = np.concatenate([np.full(b.shape[1], lam) for b, lam in zip(blocks, ev.lambdas)])
    a = x.T @ (ev.weights[:, None] * x)
    a[np.diag_indices_from(a)] += diag
    beta = sla.cho_solve(sla.cho_factor(a, check_finite=False), x.T @ ev.linearized,
                         check_finite=False)
    return x @ beta


def _woodbury_eval(blocks, ev: Evaluation) -> np.ndarray:
    gamma = np.zeros((ev.in_idx.size, ev.in_idx.size))
    for b, lam in zip(blocks, ev.lambdas):
        xb = b[ev.in_idx]
        gamma += (xb @ xb.T) / lam
    return hat_matrix(gamma, ev.weights).hat @ ev.linearized


def _gram_eval(grams, ev: Evaluation) -> np.ndarray:
    sub = grams.subset(ev.in_idx)
    gamma = assemble_gamma(sub, PenaltyConfig(ev.lambdas))
    return hat_matrix(gamma, ev.weights).hat @ ev.linearized


@dataclass
class BenchReport:
    """Timing results.

    ``total`` holds the (possibly extrapolated) wall time for the whole
    budget per backend; for ``gram`` it includes ``precompute``.
    ``extrapolated`` marks backends timed on a subset of evaluations and
    scaled linearly to the budget.
    """

    n: int
    block_sizes: tuple
    budget: int
    total: dict
    per_eval: dict
    precompute: float
    extrapolated: dict
    timed_evals: dict
    residual: float
    speedup: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "block_sizes": list(self.block_sizes),
            "p": int(sum(self.block_sizes)),
            "budget": self.budget,
            "total_seconds": self.total,
            "per_eval_seconds": self.per_eval,
            "gram_precompute_seconds": self.precompute,
            "extrapolated": self.extrapolated,
            "timed_evals": self.timed_evals,
            "crosscheck_residual": self.residual,
            "speedup_vs_gram": self.speedup,
        }

    def table(self) -> str:
        lines = [f"# n={self.n} p={sum(self.block_sizes)} budget={self.budget}",
                 "backend\tseconds\tper_eval\tspeedup_vs_gram\textrapolated"]
        for b in self.total:
            lines.append(f"{b}\t{self.total[b]:.4g}\t{self.per_eval[b]:.4g}\t"
                         f"{self.speedup.get(b, 1.0):.3g}\t{self.extrapolated[b]}")
        return "\n".join(lines) + "\n"


class CrossCheckError(RuntimeError):
    """Raised when backends disagree before timing."""


def benchmark(spec: SimSpec, budget: int = 1000, backends=BACKENDS, k: int = 10,
              max_timed: dict | None = None, check_evals: int = 2, seed: int | None = None,
              tol: float = 1e-6) -> BenchReport:
    """Time ``budget`` evaluations per backend on data drawn from ``spec``.

    Parameters
    ----------
    spec : SimSpec
    budget : int
        Number of evaluations per backend.
    backends : iterable of str
        Must include ``gram`` and at least one baseline.
    k : int
        Fold count used to draw held-out folds.
    max_timed : dict, optional
        Cap on actually executed evaluations per backend; the remainder is
        extrapolated linearly from the mean time of the executed ones.
        Defaults to 3 for ``naive`` (its ``p x p`` solves make the full
        budget impractical at large ``p``) and the full budget otherwise.
    check_evals : int
        Evaluations on which all backends must agree to ``tol`` (relative
        to ``max(1, max|eta|)``) before any timing starts.

    Raises
    ------
    CrossCheckError
        If the backends disagree.
    """
    backends = tuple(backends)
    if "gram" not in backends or len(backends) < 2:
        raise ValueError("backends must include 'gram' and at least one baseline")
    unknown = set(backends) - set(BACKENDS)
    if unknown:
        raise ValueError(f"unknown backends {sorted(unknown)}")
    if budget < 1:
        raise ValueError("budget must be positive")
    caps = {"naive": 3}
    caps.update(max_timed or {})
    design, _, _ = simulate(spec)
    blocks = design.blocks
    plan = evaluation_plan(spec.n, len(blocks), budget, k, spec.seed if seed is None else seed)

    grams = precompute_grams(design)
    resid = 0.0
    for ev in plan[:check_evals]:
        ref = _gram_eval(grams, ev)
        scale = max(1.0, float(np.max(np.abs(ref))))
        for b in backends:
            if b == "gram":
                continue
            other = _naive_eval(blocks, ev) if b == "naive" else _woodbury_eval(blocks, ev)
            resid = max(resid, float(np.max(np.abs(other - ref))) / scale)
    if resid > tol:
        raise CrossCheckError(f"backends disagree on eta: relative residual {resid:.3g} > {tol:g}")

    total, per_eval, extrap, timed = {}, {}, {}, {}
    precompute = 0.0
    for b in backends:
        m = min(budget, int(caps.get(b, budget)))
        t0 = time.perf_counter()
        if b == "gram":
            g = precompute_grams(design)
            precompute = time.perf_counter() - t0
            t1 = time.perf_counter()
            for ev in plan[:m]:
                _gram_eval(g, ev)
            run = time.perf_counter() - t1
        elif b == "woodbury":
            for ev in plan[:m]:
                _woodbury_eval(blocks, ev)
            run = time.perf_counter() - t0
        else:
            for ev in plan[:m]:
                _naive_eval(blocks, ev)
            run = time.perf_counter() - t0
        per_eval[b] = run / m
        total[b] = per_eval[b] * budget + (precompute if b == "gram" else 0.0)
        extrap[b] = m < budget
        timed[b] = m
    speed = {b: total[b] / total["gram"] for b in backends}
    return BenchReport(spec.n, tuple(spec.block_sizes), budget, total, per_eval, precompute,
                       extrap, timed, resid, speed)
