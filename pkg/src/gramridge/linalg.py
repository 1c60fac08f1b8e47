"""Gram-matrix identities for multi-penalty ridge regression.

Every per-candidate computation (penalty vector, IWLS weights, CV fold) is
done with ``n x n`` matrices. The only step whose cost grows with the number
of covariates is :func:`precompute_grams`, which forms one Gram matrix
``X_b X_b^T`` per block. After that, the penalty-weighted Gram sum

    Gamma = X Lambda^{-1} X^T = sum_b Sigma_b / lambda_b

is assembled in ``O(B n^2)`` and the weighted hat matrix follows from the
Woodbury identity

    X (Lambda + X^T W X)^{-1} X^T = Gamma - Gamma (W^{-1} + Gamma)^{-1} Gamma.

Unpenalized covariates are handled through a weighted projection onto the
orthogonal complement of their column space (see
:func:`hat_matrix_unpenalized`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

#: Lower clamp applied to IWLS weights before forming ``W^{-1}``.
WEIGHT_FLOOR = 1e-10

Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DesignError(ValueError):
    """Raised for inconsistent block designs or penalty settings."""


class SolverError(np.linalg.LinAlgError):
    """Raised when an ``n x n`` system is numerically singular."""

    def __init__(self, message: str, condition: float = np.inf):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


def linear_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inner-product kernel, ``a @ b.T``."""
    return a @ b.T


def gaussian_kernel(bandwidth: float) -> Kernel:
    """Return a Gaussian (RBF) kernel ``exp(-||a_i - b_j||^2 / (2 h^2))``."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")

    def kernel(a, b):
        sq = (
            np.sum(a * a, axis=1)[:, None]
            + np.sum(b * b, axis=1)[None, :]
            - 2.0 * (a @ b.T)
        )
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))

    kernel.tag = f"gaussian({bandwidth:g})"
    return kernel


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, order="F")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DesignError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DesignError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def dependent_columns(x: np.ndarray, rtol: float = 1e-10) -> list[int]:
    """Indices of columns that are linear combinations of the others.

    Uses a column-pivoted QR; columns pivoted past the numerical rank are
    reported.
    """
    if x.shape[1] == 0:
        return []
    _, r, piv = sla.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return sorted(int(j) for j in piv)
    rank = int(np.sum(diag > rtol * diag[0]))
    return sorted(int(j) for j in piv[rank:])


@dataclass(frozen=True, eq=False)
class BlockedDesign:
    """Design matrix split into penalized blocks and an unpenalized part.

    Parameters
    ----------
    blocks : sequence of array_like
        Penalized blocks ``X_b``, each ``n x p_b``.
    unpenalized : array_like, optional
        ``n x p_1`` matrix of unpenalized covariates (e.g. an intercept).
        Must have linearly independent columns.
    block_names : sequence of str, optional
        Labels for the blocks; defaults to ``block1, block2, ...``.
    paired : (int, int), optional
        Indices of two blocks whose columns correspond one-to-one and receive
        a paired penalty.
    """

    blocks: tuple
    unpenalized: np.ndarray | None = None
    block_names: tuple | None = None
    paired: tuple | None = None

    def __post_init__(self):
        blocks = tuple(_as_matrix(b, f"block {i}") for i, b in enumerate(self.blocks))
        if not blocks:
            raise DesignError("at least one penalized block is required")
        n = blocks[0].shape[0]
        for i, b in enumerate(blocks):
            if b.shape[0] != n:
                raise DesignError(
                    f"block {i} has {b.shape[0]} rows, expected {n}"
                )
        names = self.block_names
        if names is None:
            names = tuple(f"block{i + 1}" for i in range(len(blocks)))
        names = tuple(str(s) for s in names)
        if len(names) != len(blocks):
            raise DesignError("block_names length does not match number of blocks")
        if len(set(names)) != len(names):
            raise DesignError(f"duplicate block names: {names}")

        unpen = self.unpenalized
        if unpen is not None:
            unpen = _as_matrix(unpen, "unpenalized")
            if unpen.shape[1] == 0:
                unpen = None
        if unpen is not None:
            if unpen.shape[0] != n:
                raise DesignError(
                    f"unpenalized block has {unpen.shape[0]} rows, expected {n}"
                )
            if unpen.shape[1] > n:
                raise DesignError("more unpenalized columns than samples")
            bad = dependent_columns(unpen)
            if bad:
                raise DesignError(
                    f"unpenalized columns are linearly dependent; offending columns: {bad}"
                )

        paired = self.paired
        if paired is not None:
            paired = tuple(int(i) for i in paired)
            if len(paired) != 2 or paired[0] == paired[1]:
                raise DesignError("paired must name two distinct blocks")
            for i in paired:
                if not 0 <= i < len(blocks):
                    raise DesignError(f"paired block index {i} out of range")
            if blocks[paired[0]].shape[1] != blocks[paired[1]].shape[1]:
                raise DesignError("paired blocks must have equal column counts")

        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "unpenalized", unpen)
        object.__setattr__(self, "block_names", names)
        object.__setattr__(self, "paired", paired)

    @property
    def n(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def block_sizes(self) -> tuple:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def n_unpenalized(self) -> int:
        return 0 if self.unpenalized is None else self.unpenalized.shape[1]

    def subset_rows(self, idx) -> BlockedDesign:
        idx = np.asarray(idx, dtype=int)
        unpen = None if self.unpenalized is None else self.unpenalized[idx]
        return BlockedDesign(
            tuple(b[idx] for b in self.blocks), unpen, self.block_names, self.paired
        )

    def select_blocks(self, keep: Sequence[int]) -> BlockedDesign:
        keep = [int(i) for i in keep]
        paired = None
        if self.paired is not None and all(i in keep for i in self.paired):
            paired = tuple(keep.index(i) for i in self.paired)
        return BlockedDesign(
            tuple(self.blocks[i] for i in keep),
            self.unpenalized,
            tuple(self.block_names[i] for i in keep),
            paired,
        )

    def full_matrix(self) -> np.ndarray:
        """Dense ``[X_1 | X_blocks]`` matrix; used for checks, not in fitting."""
        parts = ([] if self.unpenalized is None else [self.unpenalized]) + list(self.blocks)
        return np.hstack(parts)


@dataclass(frozen=True, eq=False)
class GramSet:
    """Cached ``n x n`` Gram matrices, one per block (plus the paired swap Gram)."""

    sigmas: tuple
    sigma_q: np.ndarray | None = None
    kernel_tags: tuple = ()
    paired: tuple | None = None

    @property
    def n(self) -> int:
        return self.sigmas[0].shape[0]

    def subset(self, rows, cols=None) -> GramSet:
        rows = np.asarray(rows, dtype=int)
        cols = rows if cols is None else np.asarray(cols, dtype=int)
        ix = np.ix_(rows, cols)
        sq = None if self.sigma_q is None else self.sigma_q[ix]
        return GramSet(tuple(s[ix] for s in self.sigmas), sq, self.kernel_tags, self.paired)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def precompute_grams(design: BlockedDesign, kernels=None) -> GramSet:
    """Compute ``Sigma_b = K_b(X_b, X_b)`` for every block.

    ``kernels`` is an optional sequence (one entry per block, ``None`` meaning
    linear) of callables ``k(A, B)`` returning the ``rows(A) x rows(B)`` Gram
    matrix. When the design declares a paired pair, the swap Gram
    ``X Q X^T = X_a X_b^T + X_b X_a^T`` is formed as well.
    """
    kernels = _resolve_kernels(design, kernels)
    sigmas, tags = [], []
    for b, k in zip(design.blocks, kernels):
        s = k(b, b)
        s = 0.5 * (s + s.T)
        sigmas.append(_frozen(s))
        tags.append(getattr(k, "tag", "linear" if k is linear_kernel else k.__name__))
    sigma_q = None
    if design.paired is not None:
        a, b = design.paired
        if kernels[a] is not linear_kernel or kernels[b] is not linear_kernel:
            raise DesignError("paired blocks require the linear kernel")
        c = design.blocks[a] @ design.blocks[b].T
        sigma_q = _frozen(c + c.T)
    return GramSet(tuple(sigmas), sigma_q, tuple(tags), design.paired)


def _resolve_kernels(design, kernels):
    if kernels is None:
        return [linear_kernel] * design.n_blocks
    if isinstance(kernels, dict):
        kernels = [kernels.get(name) for name in design.block_names]
    kernels = list(kernels)
    if len(kernels) != design.n_blocks:
        raise DesignError("one kernel entry per block is required")
    return [linear_kernel if k is None else k for k in kernels]


def paired_param_transform(triple, parametrization: str = "additive") -> tuple:
    """Map user-facing paired penalties to ``(lambda_1, lambda_2, lambda_3)``.

    ``additive``: ``l1 b^2 + l2 b'^2 + lc (b - b')^2`` gives
    ``(l1 + lc, l2 + lc, lc)``.
    ``scaled``: ``l1 b^2 + l2 b'^2 + lc (sqrt(l1) b - sqrt(l2) b')^2`` gives
    ``(l1 (1 + lc), l2 (1 + lc), sqrt(l1 l2) lc)``.

    The resulting 2x2 block ``[[l1, -l3], [-l3, l2]]`` multiplies the
    quadratic form ``l1 b^2 - 2 l3 b b' + l2 b'^2``.
    """
    t1, t2, tc = (float(v) for v in triple)
    if not (t1 > 0 and t2 > 0):
        raise DesignError("paired penalties lambda~_1, lambda~_2 must be positive")
    if not tc >= 0:
        raise DesignError("paired coupling lambda~_c must be non-negative")
    if parametrization == "additive":
        out = (t1 + tc, t2 + tc, tc)
    elif parametrization == "scaled":
        out = (t1 * (1.0 + tc), t2 * (1.0 + tc), np.sqrt(t1 * t2) * tc)
    else:
        raise ValueError(f"unknown parametrization {parametrization!r}")
    if not out[0] * out[1] > out[2] ** 2:
        raise DesignError("paired penalty block is not positive definite")
    return out


@dataclass(frozen=True, eq=False)
class PenaltyConfig:
    """Penalty vector, optional paired cross term and fixed/free flags.

    For a paired pair ``(a, b)``, ``lambdas[a]`` and ``lambdas[b]`` hold the
    diagonal entries ``lambda_1, lambda_2`` of the 2x2 block and ``cross``
    holds ``lambda_3``. ``cross=None`` means the pair is not coupled.
    """

    lambdas: np.ndarray
    fixed_mask: np.ndarray | None = None
    cross: float | None = None

    def __post_init__(self):
        lam = np.array(self.lambdas, dtype=np.float64).ravel()
        if lam.size == 0:
            raise DesignError("empty penalty vector")
        if not np.all(lam > 0) or not np.all(np.isfinite(lam)):
            raise DesignError(f"penalties must be positive and finite, got {lam}")
        lam.setflags(write=False)
        mask = self.fixed_mask
        if mask is None:
            mask = np.zeros(lam.size, dtype=bool)
        mask = np.array(mask, dtype=bool).ravel()
        if mask.size != lam.size:
            raise DesignError("fixed_mask length does not match penalties")
        mask.setflags(write=False)
        cross = self.cross
        if cross is not None:
            cross = float(cross)
            if not np.isfinite(cross):
                raise DesignError("paired cross penalty must be finite")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "fixed_mask", mask)
        object.__setattr__(self, "cross", cross)

    @classmethod
    def paired_from(cls, lambdas, pair, triple, parametrization="additive", fixed_mask=None):
        """Build a config whose ``pair`` blocks carry a transformed paired triple."""
        l1, l2, l3 = paired_param_transform(triple, parametrization)
        lam = np.array(lambdas, dtype=np.float64)
        lam[pair[0]], lam[pair[1]] = l1, l2
        return cls(lam, fixed_mask, l3)

    @property
    def n_blocks(self) -> int:
        return self.lambdas.size

    def pair_block(self, pair) -> np.ndarray:
        """The 2x2 penalty block ``Lambda_s`` for the paired blocks."""
        a, b = pair
        c = 0.0 if self.cross is None else self.cross
        return np.array([[self.lambdas[a], -c], [-c, self.lambdas[b]]])

    def pair_inverse(self, pair) -> np.ndarray:
        """``Omega_s = Lambda_s^{-1}``; raises if ``Lambda_s`` is not positive definite."""
        a, b = pair
        l1, l2 = self.lambdas[a], self.lambdas[b]
        l3 = 0.0 if self.cross is None else self.cross
        if not l1 * l2 > l3 * l3:
            raise DesignError("paired penalty block is not positive definite")
        # written so that l3 == 0 yields exactly 1/l1, 1/l2, 0
        w1 = 1.0 / (l1 - l3 * l3 / l2)
        w2 = 1.0 / (l2 - l3 * l3 / l1)
        w3 = l3 / (l1 * l2 - l3 * l3)
        return np.array([[w1, w3], [w3, w2]])

    def with_lambdas(self, lambdas, cross=None) -> PenaltyConfig:
        return PenaltyConfig(lambdas, self.fixed_mask, self.cross if cross is None else cross)


def block_weights(penalties: PenaltyConfig, pair=None) -> tuple:
    """Per-block multipliers of ``Sigma_b`` in Gamma, and the swap-Gram multiplier.

    Unpaired blocks get ``1/lambda_b``; paired blocks get the diagonal of
    ``Omega_s`` and the swap Gram gets its off-diagonal entry.
    """
    w = 1.0 / penalties.lambdas
    w_cross = 0.0
    if penalties.cross is not None:
        if pair is None:
            raise DesignError("paired penalty given but the design has no paired blocks")
        omega = penalties.pair_inverse(pair)
        w = w.copy()
        w[pair[0]], w[pair[1]] = omega[0, 0], omega[1, 1]
        w_cross = omega[0, 1]
    return w, w_cross


def assemble_gamma(grams: GramSet, penalties: PenaltyConfig) -> np.ndarray:
    """``Gamma = sum_b w_b Sigma_b (+ omega_3 Sigma_Q)`` in ``O(B n^2)``."""
    if penalties.n_blocks != len(grams.sigmas):
        raise DesignError(
            f"{penalties.n_blocks} penalties given for {len(grams.sigmas)} blocks"
        )
    if penalties.cross is not None and grams.sigma_q is None:
        raise DesignError("paired penalty requested but no swap Gram was precomputed")
    w, w_cross = block_weights(penalties, grams.paired)
    gamma = np.zeros_like(grams.sigmas[0])
    for wb, s in zip(w, grams.sigmas):
        gamma += wb * s
    if penalties.cross is not None:
        gamma += w_cross * grams.sigma_q
    return gamma


@dataclass(frozen=True, eq=False)
class HatFactors:
    """Hat matrix and the factors needed for prediction.

    ``hat = X_1 K + Gamma M``; predictions for new rows are
    ``X_1^new K L + Gamma^new M L`` for the linearized response ``L``.
    """

    hat: np.ndarray
    K: np.ndarray
    M: np.ndarray
    gamma: np.ndarray


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        c = sla.cho_factor(a, lower=True, check_finite=False)
        return sla.cho_solve(c, b, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise SolverError("W^-1 + Gamma is numerically singular", cond)
    warnings.warn(
        "Cholesky factorization failed; falling back to pivoted LU "
        f"(condition estimate {cond:.3g})",
        RuntimeWarning,
        stacklevel=3,
    )
    return sla.lu_solve(sla.lu_factor(a, check_finite=False), b, check_finite=False)


def _clamped(weights, n) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != n:
        raise DesignError(f"expected {n} weights, got {w.size}")
    return np.maximum(w, WEIGHT_FLOOR)


def hat_matrix(gamma: np.ndarray, weights) -> HatFactors:
    """Weighted hat matrix with all covariates penalized.

    ``H = Gamma - Gamma (W^{-1} + Gamma)^{-1} Gamma``; ``M = I - (W^{-1} +
    Gamma)^{-1} Gamma`` so that ``H = Gamma M``.
    """
    n = gamma.shape[0]
    w = _clamped(weights, n)
    a = gamma + np.diag(1.0 / w)
    s = _solve_spd(a, gamma)
    h = gamma - gamma @ s
    h = 0.5 * (h + h.T)
    m = np.eye(n) - s
    return HatFactors(h, np.zeros((0, n)), m, gamma)


def hat_matrix_unpenalized(gamma_pen: np.ndarray, weights, unpen) -> HatFactors:
    """Weighted hat matrix with an unpenalized block ``X_1``.

    With ``X_{1,W} = W^{1/2} X_1``, ``P = I - X_{1,W}(X_{1,W}^T X_{1,W})^{-1}
    X_{1,W}^T`` and ``G = W^{1/2} Gamma W^{1/2}``::

        H_2 = W^{-1/2} G (I - (I + P G)^{-1} P G) P W^{-1/2}
        H   = W^{-1/2} X_{1,W} (X_{1,W}^T X_{1,W})^{-1} X_{1,W}^T
              (I - W^{1/2} H_2 W^{1/2}) W^{-1/2} + H_2

    Returned alongside are ``K`` (``p_1 x n``) and ``M`` (``n x n``) with
    ``H = X_1 K + Gamma M``.
    """
    if unpen is None or np.shape(unpen)[1] == 0:
        return hat_matrix(gamma_pen, weights)
    x1 = np.asarray(unpen, dtype=np.float64)
    n = gamma_pen.shape[0]
    if x1.shape[0] != n:
        raise DesignError("unpenalized block row count does not match Gamma")
    w = _clamped(weights, n)
    sw = np.sqrt(w)
    isw = 1.0 / sw
    x1w = sw[:, None] * x1
    q, r = np.linalg.qr(x1w)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * diag.max():
        bad = dependent_columns(x1w)
        raise DesignError(
            f"unpenalized columns are linearly dependent; offending columns: {bad}"
        )
    eye = np.eye(n)
    proj = eye - q @ q.T
    gw = sw[:, None] * gamma_pen * sw[None, :]
    pg = proj @ gw
    try:
        t = np.linalg.solve(eye + pg, pg)
    except np.linalg.LinAlgError as exc:
        raise SolverError("I + P Gamma_W is singular", np.linalg.cond(eye + pg)) from exc
    inner = (eye - t) @ proj
    g_inner = gw @ inner
    h2 = isw[:, None] * g_inner * isw[None, :]
    m = sw[:, None] * inner * isw[None, :]
    k = sla.solve_triangular(r, q.T @ (eye - g_inner)) * isw[None, :]
    h = x1 @ k + h2
    return HatFactors(h, k, m, gamma_pen)


def _check_index(idx, n, name) -> np.ndarray:
    idx = np.asarray(idx, dtype=int).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{name} index out of range 0..{n - 1}")
    return idx


def submatrix_gamma(gamma: np.ndarray, rows, cols) -> np.ndarray:
    """``Gamma[rows, cols]`` with range checks; no Gram recomputation."""
    n = gamma.shape[0]
    rows = _check_index(rows, n, "row")
    cols = _check_index(cols, gamma.shape[1], "column")
    return gamma[np.ix_(rows, cols)]


def cv_hat_matrix(gamma: np.ndarray, weights_in, in_idx, out_idx, unpen=None) -> np.ndarray:
    """Hat matrix mapping in-fold linearized responses to out-of-fold predictors.

    ``H_out = Gamma[out,in] - Gamma[out,in] (W_in^{-1} + Gamma[in,in])^{-1}
    Gamma[in,in]``. With an unpenalized block the in-fold factors ``K, M`` are
    used: ``H_out = X_1[out] K + Gamma[out,in] M``.
    """
    g_ii = submatrix_gamma(gamma, in_idx, in_idx)
    g_oi = submatrix_gamma(gamma, out_idx, in_idx)
    if unpen is None:
        w = _clamped(weights_in, g_ii.shape[0])
        if g_oi.shape[0] == 0:
            return g_oi
        s = _solve_spd(g_ii + np.diag(1.0 / w), g_ii)
        return g_oi - g_oi @ s
    x1 = np.asarray(unpen, dtype=np.float64)
    fac = hat_matrix_unpenalized(g_ii, weights_in, x1[np.asarray(in_idx, dtype=int)])
    return x1[np.asarray(out_idx, dtype=int)] @ fac.K + g_oi @ fac.M


@dataclass(frozen=True, eq=False)
class RidgeContext:
    """A design together with its cached Gram matrices and kernels.

    Everything downstream (fitting, CV, tuning) works from this object. The
    Gram matrices are computed once in :meth:`from_design`; fold and block
    subsets slice them instead of recomputing.
    """

    design: BlockedDesign
    grams: GramSet
    kernels: tuple = field(default=())

    @classmethod
    def from_design(cls, design: BlockedDesign, kernels=None) -> RidgeContext:
        ks = tuple(_resolve_kernels(design, kernels))
        return cls(design, precompute_grams(design, ks), ks)

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def n_blocks(self) -> int:
        return self.design.n_blocks

    @property
    def unpenalized(self):
        return self.design.unpenalized

    @property
    def block_names(self) -> tuple:
        return self.design.block_names

    def gamma(self, penalties: PenaltyConfig) -> np.ndarray:
        return assemble_gamma(self.grams, penalties)

    def subset(self, idx) -> RidgeContext:
        idx = np.asarray(idx, dtype=int)
        return RidgeContext(self.design.subset_rows(idx), self.grams.subset(idx), self.kernels)

    def select_blocks(self, keep) -> RidgeContext:
        keep = [int(i) for i in keep]
        design = self.design.select_blocks(keep)
        sq = self.grams.sigma_q if design.paired is not None else None
        grams = GramSet(
            tuple(self.grams.sigmas[i] for i in keep),
            sq,
            tuple(self.grams.kernel_tags[i] for i in keep) if self.grams.kernel_tags else (),
            design.paired,
        )
        kernels = tuple(self.kernels[i] for i in keep) if self.kernels else ()
        return RidgeContext(design, grams, kernels)


def cross_gamma(ctx: RidgeContext, penalties: PenaltyConfig, new_blocks) -> np.ndarray:
    """``Gamma^new = sum_b w_b K_b(X_b^new, X_b)`` between new and training rows."""
    design = ctx.design
    new_blocks = [np.asarray(b, dtype=np.float64) for b in new_blocks]
    if len(new_blocks) != design.n_blocks:
        raise DesignError(
            f"expected {design.n_blocks} new blocks, got {len(new_blocks)}"
        )
    m = new_blocks[0].shape[0]
    for i, (nb, b) in enumerate(zip(new_blocks, design.blocks)):
        if nb.ndim != 2 or nb.shape[1] != b.shape[1] or nb.shape[0] != m:
            raise DesignError(
                f"new block {i} has shape {nb.shape}, expected (m, {b.shape[1]})"
            )
    kernels = ctx.kernels or (linear_kernel,) * design.n_blocks
    w, w_cross = block_weights(penalties, design.paired)
    out = np.zeros((m, design.n))
    for wb, k, nb, b in zip(w, kernels, new_blocks, design.blocks):
        out += wb * k(nb, b)
    if penalties.cross is not None:
        a, b = design.paired
        sq = new_blocks[a] @ design.blocks[b].T + new_blocks[b] @ design.blocks[a].T
        out += w_cross * sq
    return out


def recover_coefficients(fit, design: BlockedDesign, penalties: PenaltyConfig) -> np.ndarray:
    """Coefficients ``[K; Lambda^{-1} X_2^T M] L`` from a converged fit.

    The fit stores ``k = K L`` and ``v = M L``; this is the single place where
    a ``p x n`` product is formed. Unpenalized coefficients come first, then
    the blocks in order.
    """
    if not fit.converged:
        raise RuntimeError("cannot recover coefficients from a non-converged fit")
    kernels = getattr(fit, "kernels", ()) or ()
    if any(k is not linear_kernel for k in kernels):
        raise DesignError("coefficients are undefined for non-linear kernels")
    v = fit.dual
    w, w_cross = block_weights(penalties, design.paired)
    proj = [b.T @ v for b in design.blocks]
    coefs = [wb * pb for wb, pb in zip(w, proj)]
    if penalties.cross is not None:
        a, b = design.paired
        coefs[a] = coefs[a] + w_cross * proj[b]
        coefs[b] = coefs[b] + w_cross * proj[a]
    unpen = np.asarray(fit.unpen_coef, dtype=np.float64).ravel()
    return np.concatenate([unpen] + coefs)


def predict_new(fit, new_blocks, new_unpen=None, new_offset=None) -> np.ndarray:
    """Linear predictors for new samples, ``X_1^new k + Gamma^new v``.

    ``fit`` must carry its training context (as returned by
    :func:`gramridge.glm.iwls_fit`). Offsets are not included unless
    ``new_offset`` is given.
    """
    ctx = getattr(fit, "context", None)
    if ctx is None or fit.penalties is None:
        raise RuntimeError("fit has no training context; use iwls_fit to obtain one")
    g_new = cross_gamma(ctx, fit.penalties, new_blocks)
    eta = g_new @ fit.dual
    p1 = ctx.design.n_unpenalized
    if p1:
        if new_unpen is None:
            raise DesignError("model has unpenalized covariates; new_unpen is required")
        x1 = np.asarray(new_unpen, dtype=np.float64)
        if x1.ndim == 1:
            x1 = x1[:, None]
        if x1.shape != (g_new.shape[0], p1):
            raise DesignError(f"new_unpen has shape {x1.shape}, expected ({g_new.shape[0]}, {p1})")
        eta = eta + x1 @ fit.unpen_coef
    if new_offset is not None:
        eta = eta + np.asarray(new_offset, dtype=np.float64)
    return eta
