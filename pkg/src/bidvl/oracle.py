"""Exact enumeration over small discrete EBLVMs.

With a finite visible set V and latent set H every quantity of the coupled
model p(v, h) ∝ exp(−E[v, h]) is computable exactly, so the gradient split,
the lower/upper-level objectives and their equivalence at the lower-level
optimum can be checked to machine precision.

Tables are indexed ``[v, h]``. Gradients are taken with respect to the
energy table itself, i.e. every cell is one parameter.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .divergence import kl_discrete, symmetric_kl_discrete, tv_discrete
from .errors import ContractError
from .tensor import finite_diff

MAX_SUPPORT = 16


@dataclass
class DiscreteEBLVM:
    E: np.ndarray

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        V, H = self.E.shape
        if not (1 <= V <= MAX_SUPPORT and 1 <= H <= MAX_SUPPORT):
            raise ContractError(f"support {V}×{H} exceeds {MAX_SUPPORT}×{MAX_SUPPORT}", "oracle.DiscreteEBLVM")
        if not np.all(np.isfinite(self.E)):
            raise ContractError("energy table must be finite", "oracle.DiscreteEBLVM")


@dataclass
class DiscreteVariational:
    q_post: np.ndarray  # [v, h], rows sum to 1
    p_joint: np.ndarray  # [v, h], sums to 1


@dataclass
class Marginals:
    logZ: float
    p_joint: np.ndarray
    p_v: np.ndarray
    p_h_given_v: np.ndarray


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def exact_marginals(m: DiscreteEBLVM) -> Marginals:
    neg = -m.E
    logZ = _logsumexp(neg)
    log_joint = neg - logZ
    log_pv = _logsumexp(log_joint, axis=1)
    p_joint = np.exp(log_joint)
    return Marginals(
        logZ=float(logZ),
        p_joint=p_joint,
        p_v=np.exp(log_pv),
        p_h_given_v=np.exp(log_joint - log_pv[:, None]),
    )


def exact_nll_grad(m: DiscreteEBLVM, data: np.ndarray) -> np.ndarray:
    """d KL(q || p_ψ(v)) / dE[v, h] = q(v) p(h|v) − p(v, h)."""
    q = _data(data, m.E.shape[0])
    mg = exact_marginals(m)
    return q[:, None] * mg.p_h_given_v - mg.p_joint


def split_terms(m: DiscreteEBLVM, var: DiscreteVariational, data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Variational estimate plus posterior and joint residuals."""
    q = _data(data, m.E.shape[0])
    mg = exact_marginals(m)
    qa = q[:, None] * var.q_post
    term_a = qa - var.p_joint
    term_b = q[:, None] * mg.p_h_given_v - qa
    term_c = var.p_joint - mg.p_joint
    return term_a, term_b, term_c


def solve_ll_exact(m: DiscreteEBLVM, data=None) -> DiscreteVariational:
    mg = exact_marginals(m)
    return DiscreteVariational(q_post=mg.p_h_given_v.copy(), p_joint=mg.p_joint.copy())


def ll_objective(m: DiscreteEBLVM, var: DiscreteVariational, data, metric: str = "kl") -> float:
    """Lower-level objective under the chosen metric (kl, symmetric-kl or tv)."""
    q = _data(data, m.E.shape[0])
    mg = exact_marginals(m)
    post_a = (q[:, None] * var.q_post).ravel()
    post_b = (q[:, None] * mg.p_h_given_v).ravel()
    ja, jb = var.p_joint.ravel(), mg.p_joint.ravel()
    if metric == "kl":
        return kl_discrete(post_a, post_b) + kl_discrete(ja, jb)
    if metric == "symmetric-kl":
        return symmetric_kl_discrete(post_a, post_b) + symmetric_kl_discrete(ja, jb)
    if metric == "tv":
        return tv_discrete(post_a, post_b) + tv_discrete(ja, jb)
    raise ContractError(f"unknown metric {metric!r}", "oracle.ll_objective")


@dataclass
class Objectives:
    J: float
    J_UL: float
    KL_post: float
    KL_joint: float


def j_objectives(m: DiscreteEBLVM, var: DiscreteVariational, data) -> Objectives:
    q = _data(data, m.E.shape[0])
    mg = exact_marginals(m)
    qa = (q[:, None] * var.q_post).ravel()
    pj = mg.p_joint.ravel()
    J = kl_discrete(q, mg.p_v)
    kl_data_joint = kl_discrete(qa, pj)
    kl_joint = kl_discrete(var.p_joint.ravel(), pj)
    kl_post = kl_discrete(qa, (q[:, None] * mg.p_h_given_v).ravel())
    return Objectives(J=J, J_UL=kl_data_joint - kl_joint, KL_post=kl_post, KL_joint=kl_joint)


def j_ul_value(E: np.ndarray, var: DiscreteVariational, data) -> float:
    """J_UL as a function of the energy table with ω held fixed."""
    return j_objectives(DiscreteEBLVM(E), var, data).J_UL


def theorem1_grad_check(m: DiscreteEBLVM, data) -> float:
    """max |term_a − exact NLL gradient| at the exactly solved lower level."""
    var = solve_ll_exact(m, data)
    term_a, _, _ = split_terms(m, var, data)
    return float(np.max(np.abs(term_a - exact_nll_grad(m, data))))


# ----------------------------------------------------------- random draws


def _data(q, V: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (V,) or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-12:
        raise ContractError("data must be a probability vector over V", "oracle.data")
    return q


def random_simplex(rng: np.random.Generator, shape) -> np.ndarray:
    """Dirichlet(1) draws along the last axis."""
    x = rng.exponential(size=shape)
    return x / x.sum(axis=-1, keepdims=True)


def random_model(rng: np.random.Generator, V: int, H: int, lo: float = -2.0, hi: float = 2.0) -> DiscreteEBLVM:
    return DiscreteEBLVM(rng.uniform(lo, hi, size=(V, H)))


def random_variational(rng: np.random.Generator, V: int, H: int) -> DiscreteVariational:
    return DiscreteVariational(
        q_post=random_simplex(rng, (V, H)),
        p_joint=random_simplex(rng, (V * H,)).reshape(V, H),
    )


# ------------------------------------------------------------------ suite


@dataclass
class SuiteRow:
    check: str
    n_cases: int
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def run_suite(seeds: int = 50, base_seed: int = 0) -> list[SuiteRow]:
    """All enumeration identities over ``seeds`` random cases each."""
    th_val = th_grad = split = chain = bound = 0.0
    fd = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s])
        V, H = rng.integers(2, 7, size=2)
        m = random_model(rng, V, H)
        q = random_simplex(rng, (V,))
        var_star = solve_ll_exact(m, q)
        ob = j_objectives(m, var_star, q)
        th_val = max(th_val, abs(ob.J_UL - ob.J))
        th_grad = max(th_grad, theorem1_grad_check(m, q))
        var = random_variational(rng, V, H)
        a, b, c = split_terms(m, var, q)
        split = max(split, float(np.max(np.abs(a + b + c - exact_nll_grad(m, q)))))
        ob = j_objectives(m, var, q)
        chain = max(chain, abs((ob.J_UL - ob.J) - (ob.KL_post - ob.KL_joint)))
        bound = max(bound, abs(ob.J_UL - ob.J) - (ob.KL_post + ob.KL_joint))
        if s < 5:
            g = finite_diff(lambda E: j_ul_value(E, var, q), m.E, 1e-5)
            fd = max(fd, float(np.max(np.abs(g - a))))
    return [
        SuiteRow("theorem1_value", seeds, th_val, 1e-10),
        SuiteRow("theorem1_gradient", seeds, th_grad, 1e-10),
        SuiteRow("split_identity", seeds, split, 1e-12),
        SuiteRow("ul_gap_identity", seeds, chain, 1e-12),
        SuiteRow("ul_gap_bound", seeds, max(bound, 0.0), 1e-12),
        SuiteRow("ul_gradient_finite_diff", min(seeds, 5), fd, 1e-7),
    ]


def suite_csv(rows: list[SuiteRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "n_cases", "max_deviation", "tolerance", "passed"])
    for r in rows:
        w.writerow([r.check, r.n_cases, f"{r.max_deviation:.6e}", f"{r.tolerance:.0e}", int(r.passed)])
    return buf.getvalue()
