"""Divergences, kernel discrepancies and the importance-ratio estimate.

The Gaussian KLs operate on tensors (they appear inside training losses);
everything else works on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, NumericError, ShapeError
from .tensor import Tensor

RATIO_VARIANTS = ("constant", "exp-normalized", "sigmoid")
DEFAULT_BANDWIDTHS = (0.1, 0.5, 1.0, 2.0, 8.0)


@dataclass(frozen=True)
class RatioMode:
    variant: str = "constant"
    r_basic: float = 0.05

    def __post_init__(self):
        if self.variant not in RATIO_VARIANTS:
            raise ContractError(f"unknown ratio variant {self.variant!r}", "divergence.RatioMode")
        if not self.r_basic > 0:
            raise ContractError("r_basic must be positive", "divergence.RatioMode")


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: tuple[float, ...] = field(default=DEFAULT_BANDWIDTHS)

    def __post_init__(self):
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ContractError("bandwidths must be a nonempty list of positive values", "divergence.KernelSpec")

    @classmethod
    def median_heuristic(cls, X: np.ndarray, Y: np.ndarray, max_points: int = 2000) -> "KernelSpec":
        Z = np.concatenate([np.asarray(X), np.asarray(Y)])[:max_points]
        d2 = _sqdist(Z, Z)
        med = np.median(d2[np.triu_indices(len(Z), 1)])
        return cls((float(np.sqrt(0.5 * med)),))


# ------------------------------------------------------------- Gaussian KLs


def kl_diag_gaussians(mu1, lv1, mu2, lv2) -> Tensor:
    """KL(N(mu1, e^lv1) || N(mu2, e^lv2)) summed over the last axis."""
    mu1, lv1, mu2, lv2 = (T.as_tensor(x) for x in (mu1, lv1, mu2, lv2))
    if not mu1.shape == lv1.shape == mu2.shape == lv2.shape:
        raise ShapeError("argument shapes disagree", "divergence.kl_diag_gaussians")
    ratio = T.mul(T.add(T.exp(lv1), T.square(T.sub(mu1, mu2))), T.exp(T.neg(lv2)))
    per = T.scale(T.add(T.sub(T.sub(lv2, lv1), 1.0), ratio), 0.5)
    return T.sum_(per, axis=-1)


def kl_to_standard_prior(mu, logvar) -> Tensor:
    """KL(N(mu, e^logvar) || N(0, I)) per row."""
    mu, logvar = T.as_tensor(mu), T.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError("argument shapes disagree", "divergence.kl_to_standard_prior")
    per = T.scale(T.sub(T.add(T.exp(logvar), T.square(mu)), T.add(logvar, 1.0)), 0.5)
    return T.sum_(per, axis=-1)


# ---------------------------------------------------------- importance ratio


def importance_ratio(energies, mode: RatioMode) -> np.ndarray:
    """Per-sample weights for the data-side KL; never part of the graph."""
    e = np.asarray(energies.data if isinstance(energies, Tensor) else energies, dtype=np.float64)
    if e.ndim != 1 or e.size < 1:
        raise ContractError("energies must be a nonempty vector", "divergence.importance_ratio")
    if not np.all(np.isfinite(e)):
        raise NumericError("non-finite energy", "divergence.importance_ratio")
    r = mode.r_basic
    if mode.variant == "constant":
        return np.full(e.shape, r)
    if mode.variant == "exp-normalized":
        a = -e
        w = np.exp(a - a.max())
        return r * w / w.mean()
    return r * T._sigmoid(e.mean() - e)


# --------------------------------------------------------------- MMD / KSD


def _sqdist(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d2, 0.0)


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def mmd2_rbf(X, Y, k: KernelSpec = KernelSpec()) -> float:
    """Unbiased MMD² with a sum of RBF kernels exp(-|x-y|² / 2σ²)."""
    X, Y = _as_2d(X), _as_2d(Y)
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ContractError("mmd2_rbf needs at least 2 samples per set", "divergence.mmd2_rbf")
    dxx, dyy, dxy = _sqdist(X, X), _sqdist(Y, Y), _sqdist(X, Y)
    total = 0.0
    for bw in k.bandwidths:
        g = 1.0 / (2.0 * bw * bw)
        kxx = np.exp(-g * dxx)
        kyy = np.exp(-g * dyy)
        kxy = np.exp(-g * dxy)
        sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        total += sxx + syy - 2.0 * kxy.mean()
    return float(total)


def stein_kernel_matrix(X, S, bandwidth: float) -> np.ndarray:
    """u_q(x_i, x_j) for an RBF base kernel, given scores S = ∇ log q(X)."""
    X, S = _as_2d(X), _as_2d(S)
    d = X.shape[1]
    h2 = bandwidth * bandwidth
    diff = X[:, None, :] - X[None, :, :]
    d2 = (diff * diff).sum(-1)
    K = np.exp(-d2 / (2.0 * h2))
    term1 = (S @ S.T) * K
    # ∇_{x'} k = (x - x')/h² k ;  ∇_x k = -(x - x')/h² k
    term2 = np.einsum("id,ijd->ij", S, diff) / h2 * K
    term3 = -np.einsum("jd,ijd->ij", S, diff) / h2 * K
    term4 = (d / h2 - d2 / (h2 * h2)) * K
    return term1 + term2 + term3 + term4


def ksd_rbf(X, score: Callable[[np.ndarray], np.ndarray], bandwidth: float = 1.0) -> float:
    """U-statistic kernelized Stein discrepancy of samples X against q."""
    X = _as_2d(X)
    n = len(X)
    if n < 2:
        raise ContractError("ksd_rbf needs at least 2 samples", "divergence.ksd_rbf")
    S = _as_2d(score(X))
    if S.shape != X.shape or not np.all(np.isfinite(S)):
        raise NumericError("score must be finite with the shape of X", "divergence.ksd_rbf")
    U = stein_kernel_matrix(X, S, bandwidth)
    return float((U.sum() - np.trace(U)) / (n * (n - 1)))


def ksd_rbf_with_se(X, score, bandwidth: float = 1.0) -> tuple[float, float]:
    """KSD U-statistic and its leading-order standard error."""
    X = _as_2d(X)
    n = len(X)
    U = stein_kernel_matrix(X, _as_2d(score(X)), bandwidth)
    np.fill_diagonal(U, 0.0)
    stat = U.sum() / (n * (n - 1))
    row = U.sum(1) / (n - 1)
    se = 2.0 * np.std(row, ddof=1) / np.sqrt(n)
    return float(stat), float(se)


# ------------------------------------------------------- discrete measures


def _check_dist(p, where: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12 * max(1, p.size):
        raise ContractError("input is not a probability vector", where)
    return p


def tv_discrete(p, q) -> float:
    p = _check_dist(p, "divergence.tv_discrete")
    q = _check_dist(q, "divergence.tv_discrete")
    if p.shape != q.shape:
        raise ShapeError("distribution shapes disagree", "divergence.tv_discrete")
    return float(0.5 * np.abs(p - q).sum())


def kl_discrete(p, q) -> float:
    """Σ p log(p/q) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("distribution shapes disagree", "divergence.kl_discrete")
    support = p > 0
    if np.any(q[support] <= 0):
        raise DomainError("q vanishes where p has mass", "divergence.kl_discrete")
    ps, qs = p[support], q[support]
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def symmetric_kl_discrete(p, q) -> float:
    return kl_discrete(p, q) + kl_discrete(q, p)
