"""Entropic optimal transport: pairwise costs, log-domain Sinkhorn, Top-K
truncation of couplings, and a debiased Sinkhorn distance for evaluation.

All solvers run on plain numpy; couplings are treated as constants by the
training losses, so nothing here records onto the autodiff tape except
``transport_cost_sq``, which propagates gradients through the cost entries
of a fixed plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - mirror environments without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

from . import ndtensor as nd


class CostError(ValueError):
    pass


@dataclass
class CostMatrix:
    entries: np.ndarray
    tag: str = "euclidean"


@dataclass
class Coupling:
    """Nonnegative plan with prescribed marginals from a Sinkhorn solve."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    epsilon: float
    converged: bool = True
    iterations: int = 0


@dataclass
class TopKCoupling:
    """Per-row truncation of a plan to its K heaviest entries.

    ``indices[i]`` holds the retained column indices of row i and
    ``weights[i]`` the corresponding plan entries; ``mass`` is their total.
    """

    indices: np.ndarray      # (B, K) int
    weights: np.ndarray      # (B, K)
    mass: float = field(default=0.0)
    k: int = 0


def pairwise_sqdist(X, Y):
    """Squared Euclidean distances between rows, computed by expansion."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    sq = (X * X).sum(axis=1)[:, None] + (Y * Y).sum(axis=1)[None, :] - 2.0 * (X @ Y.T)
    return np.maximum(sq, 0.0)


def cost_euclidean(Za, Zb):
    """Geometric cost C_ij = ||z_i^a - z_j^b||^2 between two latent batches."""
    Za = np.asarray(Za, dtype=np.float64)
    Zb = np.asarray(Zb, dtype=np.float64)
    if Za.shape[1] != Zb.shape[1]:
        raise CostError(f"latent dims differ: {Za.shape[1]} vs {Zb.shape[1]}")
    return CostMatrix(pairwise_sqdist(Za, Zb), tag="euclidean")


def euler_one_step(field, t_from, Z, dt):
    """Single explicit Euler step Z + field(t_from, Z)*dt; dt may be negative."""
    Z = np.asarray(Z, dtype=np.float64)
    return Z + np.asarray(field(t_from, Z), dtype=np.float64) * dt


def cost_bidirectional(Za, Zb, forward_field, backward_field, t_a, t_b):
    """Fused cost mixing one-step forward and backward Euler predictions.

    C_ij = 0.5*||(z_i^a + v_f(t_a, z_i^a)*dt) - z_j^b||^2
         + 0.5*||z_i^a - (z_j^b + v_b(t_b, z_j^b)*(-dt))||^2,  dt = t_b - t_a.
    """
    if t_b <= t_a:
        raise CostError(f"need t_b > t_a, got t_a={t_a}, t_b={t_b}")
    Za = np.asarray(Za, dtype=np.float64)
    Zb = np.asarray(Zb, dtype=np.float64)
    if Za.shape[1] != Zb.shape[1]:
        raise CostError(f"latent dims differ: {Za.shape[1]} vs {Zb.shape[1]}")
    dt = t_b - t_a
    pred_b = euler_one_step(forward_field, t_a, Za, dt)
    pred_a = euler_one_step(backward_field, t_b, Zb, -dt)
    entries = 0.5 * pairwise_sqdist(pred_b, Zb) + 0.5 * pairwise_sqdist(Za, pred_a)
    return CostMatrix(entries, tag="bidirectional-fused")


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------

def _logsumexp(M, axis):
    mx = M.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(M - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


@njit(cache=True)
def _sinkhorn_kernel(Ce, CeT, loga, logb, max_iters, tol, fe, ge, check_every):
    """Gauss-Seidel log-domain Sinkhorn loop on eps-scaled potentials, in place.

    Works entirely in the scaled domain (potential/eps); terms more than 40
    log-units below the running max are skipped, which changes sums by less
    than 1e-15 relative. Rows are rescaled last, so row marginals are exact
    at exit; the violation is measured on columns every ``check_every``
    iterations.
    """
    n, m = Ce.shape
    it = 0
    converged = False
    while it < max_iters:
        it += 1
        for j in range(m):
            mx = -1e300
            for i in range(n):
                v = fe[i] - CeT[j, i]
                if v > mx:
                    mx = v
            s = 0.0
            for i in range(n):
                v = fe[i] - CeT[j, i] - mx
                if v > -40.0:
                    s += np.exp(v)
            ge[j] = logb[j] - (mx + np.log(s))
        for i in range(n):
            mx = -1e300
            for j in range(m):
                v = ge[j] - Ce[i, j]
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(m):
                v = ge[j] - Ce[i, j] - mx
                if v > -40.0:
                    s += np.exp(v)
            fe[i] = loga[i] - (mx + np.log(s))
        if it % check_every == 0 or it == max_iters:
            viol = 0.0
            for j in range(m):
                colsum = 0.0
                for i in range(n):
                    v = fe[i] + ge[j] - CeT[j, i]
                    if v > -400.0:
                        colsum += np.exp(v)
                d = abs(colsum - np.exp(logb[j]))
                if d > viol:
                    viol = d
            if viol < tol:
                converged = True
                break
    return it, converged


def _sinkhorn_kernel_numpy(Ce, CeT, loga, logb, max_iters, tol, fe, ge, check_every):
    """Vectorized twin of _sinkhorn_kernel for installs without numba."""
    it = 0
    converged = False
    b = np.exp(logb)
    while it < max_iters:
        it += 1
        ge[:] = logb - _logsumexp(fe[:, None] - Ce, axis=0)
        fe[:] = loga - _logsumexp(ge[None, :] - Ce, axis=1)
        if it % check_every == 0 or it == max_iters:
            P = np.exp(fe[:, None] + ge[None, :] - Ce)
            if np.abs(P.sum(axis=0) - b).max() < tol:
                converged = True
                break
    return it, converged


def _sinkhorn_log(C, loga, logb, eps, max_iters, tol, anneal=True):
    """Annealed warm start followed by the fixed-point loop at ``eps``.

    Annealing only improves the initial potentials; the fixed point and the
    stopping rule are those of plain Sinkhorn at ``eps``.
    """
    n, m = C.shape
    fe = np.zeros(n)
    ge = np.zeros(m)
    kernel = _sinkhorn_kernel if _HAVE_NUMBA else _sinkhorn_kernel_numpy
    if anneal:
        d_max = float(C.max())
        if d_max > eps:
            schedule = _epsilon_schedule(d_max, eps, 0.5)
            for k, e in enumerate(schedule[:-1]):
                Ce = C / e
                kernel(Ce, np.ascontiguousarray(Ce.T), loga, logb, 5, 0.0,
                       fe, ge, 10)
                # potentials are carried in scaled form f/eps
                ratio = e / schedule[k + 1]
                fe *= ratio
                ge *= ratio
    Ce = C / eps
    it, converged = kernel(Ce, np.ascontiguousarray(Ce.T), loga, logb,
                           max_iters, tol, fe, ge, 5)
    P = np.exp(fe[:, None] + ge[None, :] - Ce)
    return fe * eps, ge * eps, P, it, converged


def sinkhorn(C, row_marginal=None, col_marginal=None, epsilon=0.05,
             max_iters=500, tol=1e-6):
    """Entropic OT plan between discrete measures with the given marginals.

    Solves min <P, C> + eps * sum P(log P - 1) over couplings of the
    marginals, by log-domain Sinkhorn fixed-point iteration. Returns a
    Coupling; ``converged`` is False when max_iters was hit first.
    """
    C = C.entries if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    if not np.isfinite(C).all():
        raise CostError("cost matrix contains non-finite entries")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n, m = C.shape
    a = np.full(n, 1.0 / n) if row_marginal is None else np.asarray(row_marginal, dtype=np.float64)
    b = np.full(m, 1.0 / m) if col_marginal is None else np.asarray(col_marginal, dtype=np.float64)
    for name, v in (("row", a), ("col", b)):
        if (v < 0).any() or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} marginal is not a probability vector")
    _, _, P, it, ok = _sinkhorn_log(C, np.log(a), np.log(b), epsilon, max_iters, tol)
    return Coupling(plan=P, row_marginal=a, col_marginal=b, epsilon=epsilon,
                    converged=ok, iterations=it)


def transport_cost(plan, C):
    """<P, C> for a fixed plan (plain value, no gradients)."""
    C = C.entries if isinstance(C, CostMatrix) else C
    return float((plan * C).sum())


def topk_truncate(pi, K):
    """Keep the K largest plan entries per row (ties: lower column index wins)."""
    plan = pi.plan if isinstance(pi, Coupling) else np.asarray(pi, dtype=np.float64)
    B, M = plan.shape
    if not 1 <= K <= M:
        raise ValueError(f"K must be in [1, {M}], got {K}")
    # stable argsort on the negated row keeps lower indices first among ties
    order = np.argsort(-plan, axis=1, kind="stable")[:, :K]
    idx = np.sort(order, axis=1)
    w = np.take_along_axis(plan, idx, axis=1)
    return TopKCoupling(indices=idx, weights=w, mass=float(w.sum()), k=K)


# ---------------------------------------------------------------------------
# Evaluation distance
# ---------------------------------------------------------------------------

@njit(cache=True)
def _softmin_scaled_kernel(Ce, hw):
    """out_i = -LSE_j(hw_j - Ce_ij), with sub-1e-15 terms skipped."""
    n, m = Ce.shape
    out = np.empty(n)
    for i in range(n):
        mx = -1e300
        for j in range(m):
            v = hw[j] - Ce[i, j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(m):
            v = hw[j] - Ce[i, j] - mx
            if v > -40.0:
                s += np.exp(v)
        out[i] = -(mx + np.log(s))
    return out


def _softmin_scaled(Ce, hw):
    if _HAVE_NUMBA:
        return _softmin_scaled_kernel(Ce, hw)
    M = hw[None, :] - Ce
    mx = M.max(axis=1, keepdims=True)
    return -(mx + np.log(np.exp(M - mx).sum(axis=1, keepdims=True))).squeeze(1)


def _softmin(eps, Ce, logw, h):
    """softmin_i = -eps * log sum_j w_j exp((h_j - C_ij)/eps), with Ce = C/eps."""
    return eps * _softmin_scaled(Ce, logw + h / eps)


def _epsilon_schedule(d_max, eps_target, scaling):
    """Geometric annealing from the cost's own scale down to the target."""
    eps_list = []
    eps = max(d_max, eps_target)
    while eps > eps_target * 1.0000001:
        eps_list.append(eps)
        eps *= scaling * scaling
    eps_list.append(eps_target)
    return eps_list


def _divergence_potentials(X, Y, eps_target, scaling, inner_iters, final_iters, tol):
    """Annealed symmetric-update Sinkhorn potentials for the pair and both
    self problems, in the weighted convention P_ij = a_i b_j exp((f+g-C)/eps).

    The averaged Jacobi updates make the result exactly symmetric under
    swapping X and Y, which the alternating solver is not at loose
    convergence.
    """
    D_xy = pairwise_sqdist(X, Y)
    D_xx = pairwise_sqdist(X, X)
    D_yy = pairwise_sqdist(Y, Y)
    D_yx = np.ascontiguousarray(D_xy.T)
    n, m = D_xy.shape
    loga = np.full(n, -np.log(n))
    logb = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    p = np.zeros(n)   # symmetric potential of OT(X, X)
    q = np.zeros(m)   # symmetric potential of OT(Y, Y)
    d_max = max(float(D_xy.max()), float(D_xx.max()), float(D_yy.max()))
    schedule = _epsilon_schedule(d_max, eps_target, scaling)
    for idx, eps in enumerate(schedule):
        Ce_xy, Ce_yx = D_xy / eps, D_yx / eps
        Ce_xx, Ce_yy = D_xx / eps, D_yy / eps
        rounds = final_iters if idx == len(schedule) - 1 else inner_iters
        for _ in range(rounds):
            f_new = 0.5 * (f + _softmin(eps, Ce_xy, logb, g))
            g_new = 0.5 * (g + _softmin(eps, Ce_yx, loga, f))
            p = 0.5 * (p + _softmin(eps, Ce_xx, loga, p))
            q = 0.5 * (q + _softmin(eps, Ce_yy, logb, q))
            drift = max(np.abs(f_new - f).max(), np.abs(g_new - g).max())
            f, g = f_new, g_new
            if idx == len(schedule) - 1 and drift < tol:
                break
    return f, g, p, q, D_xy, loga, logb


def ot_distance(X, Y, blur=0.05, scaling=0.5, debiased=True,
                inner_iters=5, final_iters=300, tol=1e-7):
    """Entropic OT cost between point clouds with squared-Euclidean ground cost.

    epsilon = blur**2; ``scaling`` controls the geometric epsilon-annealing
    schedule from the cost's max scale down to blur**2. The debiased variant
    is computed from the dual potentials of the pair problem minus the
    symmetric self problems; it vanishes for identical clouds and is
    symmetric and nonnegative. The plain variant returns <P, D>.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.size == 0 or Y.size == 0:
        raise ValueError("ot_distance requires nonempty point sets")
    if X.shape[1] != Y.shape[1]:
        raise CostError(f"feature dims differ: {X.shape[1]} vs {Y.shape[1]}")
    if not 0 < scaling < 1:
        raise ValueError(f"scaling must lie in (0, 1), got {scaling}")
    eps = blur * blur
    f, g, p, q, D_xy, loga, logb = _divergence_potentials(
        X, Y, eps, scaling, inner_iters, final_iters, tol)
    a = np.exp(loga)
    b = np.exp(logb)
    if debiased:
        value = float((f - p) @ a + (g - q) @ b)
        return max(value, 0.0)
    logP = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - D_xy) / eps
    P = np.exp(logP)
    return float((P * D_xy).sum() / P.sum())


# ---------------------------------------------------------------------------
# Differentiable transport cost for the global losses
# ---------------------------------------------------------------------------

def transport_cost_sq(plan, X, Y):
    """<P, D> with D_ij = ||x_i - y_j||^2, differentiable through X and/or Y.

    The plan is a fixed numpy array (stop-gradient on the coupling); either
    side may be a DiffTensor, in which case a scalar tensor is returned.

    Expands the quadratic so only O(B*G) tensor ops are recorded:
    <P,D> = sum_i r_i||x_i||^2 + sum_j c_j||y_j||^2 - 2 sum(X * (P @ Y)).
    """
    plan = np.asarray(plan, dtype=np.float64)
    r = plan.sum(axis=1)
    c = plan.sum(axis=0)
    x_t = isinstance(X, nd.Tensor)
    y_t = isinstance(Y, nd.Tensor)
    if not x_t and not y_t:
        return transport_cost(plan, pairwise_sqdist(X, Y))

    def row_sq_weighted(T, w):
        return nd.tsum(nd.mul(nd.tsum(nd.square(T), axis=1), nd.constant(w)))

    Xt = X if x_t else nd.constant(np.asarray(X, dtype=np.float64))
    Yt = Y if y_t else nd.constant(np.asarray(Y, dtype=np.float64))
    term_x = row_sq_weighted(Xt, r)
    term_y = row_sq_weighted(Yt, c)
    if x_t:
        cross = nd.tsum(nd.mul(Xt, nd.matmul(nd.constant(plan), Yt)))
    else:
        cross = nd.tsum(nd.mul(Yt, nd.matmul(nd.constant(plan.T), Xt)))
    return nd.add(nd.add(term_x, term_y), nd.scale(cross, -2.0))
