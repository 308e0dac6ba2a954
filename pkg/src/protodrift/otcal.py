"""Entropic optimal transport and the prototype calibration loss.

Sinkhorn runs in the log domain on the potentials of the KL-regularised
problem

    min_T <T, C> + eps * KL(T || f d^T)   s.t.  T 1 = f,  T^T 1 = d,

with the plan ``T_ij = f_i d_j exp((a_i + b_j - C_ij) / eps)``. In this
parametrisation the derivative of the optimal value with respect to ``f`` is
the row potential ``a`` (up to an additive constant that vanishes on the
simplex), which is what the calibration loss feeds back to the tape. The
regularised value shrinks towards the unregularised optimum as ``eps``
decreases, so the schedule produces a non-increasing sequence of values.

Each half-step may be over-relaxed (``omega > 1``). The dual is separable
per coordinate within a half-step, and missing a coordinate's maximiser by
``x`` costs ``mass * eps * h(x)`` with ``h(x) = exp(x/eps) - 1 - x/eps``, so
the extrapolated value is kept only where it still secures a fixed share of
the plain Sinkhorn gain. Every half-step therefore increases the dual by a
sufficient amount and the fixed point is unchanged.

At small ``eps`` nearly degenerate plans can still make Sinkhorn crawl. A
problem that misses the tolerance after the sweep budget is finished with
damped Newton steps on the semi-dual in ``a`` (``b`` eliminated by its exact
update), which converges quadratically near the optimum.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

DEFAULT_EPS_SCHEDULE = (0.1, 0.01, 0.001)
ORACLE_MAX_DIM = 6
DEFAULT_OMEGA = 1.8
# an over-relaxed coordinate must keep at least 1 - this share of the plain gain
_RELAX_KEEP = 0.75
# initial (and smallest) Newton trust radius, in units of eps
_NEWTON_CAP = 5.0


class TransportError(RuntimeError):
    pass


@dataclass
class CostMatrix:
    values: np.ndarray
    mode: str
    row_ids: list[int] = field(default_factory=list)
    col_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("cost entries must be non-negative")


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost_matrix: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    epsilon: float
    iterations: int
    marginal_error: float
    objective: float
    stage_objectives: list[float]
    converged: bool

    @property
    def transport_cost(self):
        return float(np.sum(self.plan * self.cost_matrix))

    @property
    def row_marginal(self):
        return self.plan.sum(axis=1)

    @property
    def col_marginal(self):
        return self.plan.sum(axis=0)


@dataclass
class CalibrationReport:
    per_prototype: list[float]
    loss: float


def build_cost_matrix(row_ids, col_ids, means=None, mode="semantic"):
    """Ground cost between current classes (rows) and base classes (columns).

    ``zero_one``: 0 for matching ids, 1 otherwise. ``semantic``: one minus the
    cosine of the class mean features, clamped to [0, 2], matching ids 0.
    Entries below 1e-12 are set to exactly 0.
    """
    row_ids, col_ids = list(row_ids), list(col_ids)
    if mode == "zero_one":
        values = np.array([[0.0 if r == c else 1.0 for c in col_ids] for r in row_ids])
    elif mode == "semantic":
        means = means or {}
        for k in row_ids + col_ids:
            if k not in means:
                raise ValueError(f"semantic cost: class {k} has no prototype mean")
        values = np.zeros((len(row_ids), len(col_ids)))
        for i, r in enumerate(row_ids):
            for j, c in enumerate(col_ids):
                if r == c:
                    continue
                a, b = means[r], means[c]
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                if na == 0 or nb == 0:
                    raise ValueError(f"semantic cost: zero mean feature for class {r if na == 0 else c}")
                v = min(max(1.0 - float(a @ b) / (na * nb), 0.0), 2.0)
                # parallel means: keep rounding noise out of the "same class" zero
                values[i, j] = 0.0 if v < 1e-12 else v
    else:
        raise ValueError(f"unknown cost mode {mode!r}")
    return CostMatrix(values, mode, row_ids, col_ids)


def _as_simplex(p, what):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{what} must be a non-empty vector")
    if np.any(p < -1e-6) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"{what} is not on the probability simplex (sum {p.sum():.9g}, min {p.min():.3g})")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _relax(old, target, omega, eps):
    """Over-relaxed update, falling back to the plain one where it is not safe."""
    if omega == 1.0:
        return target
    step = target - old
    with np.errstate(over="ignore", invalid="ignore"):
        plain_gap = np.expm1(-step / eps) + step / eps
        over_gap = np.expm1((omega - 1.0) * step / eps) - (omega - 1.0) * step / eps
    safe = np.isfinite(step) & (over_gap <= _RELAX_KEEP * plain_gap)
    return np.where(safe, old + omega * step, target)


def sinkhorn_batch(f, d, cost, eps_schedule=DEFAULT_EPS_SCHEDULE, max_iter=2000, tol=1e-9, init=None, omega=DEFAULT_OMEGA, newton_steps=100):
    """Solve ``B`` problems sharing one cost matrix.

    ``f`` is (B, Q), ``d`` is (B, K). Returns potentials ``a`` (B, Q), ``b`` (B, K),
    plans (B, Q, K), per-problem marginal errors, per-stage objectives
    (n_stages, B) and the total iteration count. ``omega = 1`` gives plain
    Sinkhorn; ``newton_steps = 0`` disables the Newton finish.
    """
    if not 1.0 <= omega < 2.0:
        raise ValueError(f"omega must lie in [1, 2), got {omega}")
    c = np.asarray(cost, dtype=np.float64)
    logf, logd = _log(f), _log(d)
    if init is None:
        a = np.zeros(f.shape)
        b = np.zeros(d.shape)
    else:
        a, b = (np.array(x, dtype=np.float64) for x in init)
    stage_obj = []
    total = 0
    for eps in eps_schedule:
        if not eps > 0:
            raise ValueError("eps schedule entries must be positive")
        for _ in range(max_iter):
            total += 1
            b = _relax(b, -eps * _lse(logf[:, :, None] + (a[:, :, None] - c) / eps, axis=1), omega, eps)
            a = _relax(a, -eps * _lse(logd[:, None, :] + (b[:, None, :] - c) / eps, axis=2), omega, eps)
            plan = np.exp(logf[:, :, None] + logd[:, None, :] + (a[:, :, None] + b[:, None, :] - c) / eps)
            err = _marginal_error(plan, f, d)
            if np.max(err) <= tol:
                break
        if newton_steps > 0 and np.max(err) > tol:
            for i in np.flatnonzero(err > tol):
                a[i] = _newton_polish(a[i], logf[i], logd[i], f[i], c, eps, tol, newton_steps)
            b = -eps * _lse(logf[:, :, None] + (a[:, :, None] - c) / eps, axis=1)
            plan = np.exp(logf[:, :, None] + logd[:, None, :] + (a[:, :, None] + b[:, None, :] - c) / eps)
            err = _marginal_error(plan, f, d)
        if not np.all(np.isfinite(plan)) or not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
            raise TransportError("non-finite Sinkhorn iterate")
        obj = np.sum(a * f, axis=1) + np.sum(b * d, axis=1) - eps * (plan.sum(axis=(1, 2)) - 1.0)
        stage_obj.append(obj)
    return a, b, plan, err, np.array(stage_obj), total


def _semi_dual(a, logf, logd, f, c, eps):
    """Semi-dual value, row-sum gap and log-plan with ``b`` at its exact update."""
    z = logf[:, None] + (a[:, None] - c) / eps
    b = -eps * _lse(z, axis=0)
    value = float(a[f > 0] @ f[f > 0] + np.sum(np.exp(logd) * b))
    logt = logd[None, :] + z + b[None, :] / eps
    return value, logt


def _newton_polish(a, logf, logd, f, c, eps, tol, max_steps=100):
    """Maximise the semi-dual in ``a`` with backtracking Newton steps."""
    live = f > 0
    d = np.exp(logd)
    value, logt = _semi_dual(a, logf, logd, f, c, eps)
    radius = _NEWTON_CAP * eps
    for _ in range(max_steps):
        t = np.exp(logt)
        grad = np.where(live, f, 0.0) - t.sum(axis=1)
        if np.abs(grad).sum() <= tol:
            break
        with np.errstate(invalid="ignore", divide="ignore"):
            pi = np.where(d > 0, t / np.where(d > 0, d, 1.0), 0.0)
        # negative Hessian: sum_j d_j (diag(pi_j) - pi_j pi_j^T) / eps
        hess = (np.diag(t.sum(axis=1)) - (pi * d) @ pi.T) / eps
        idx = np.flatnonzero(live)
        # near-disconnected plans leave almost flat directions; floor the
        # curvature and cap the step so those move by at most a few eps
        w, v = np.linalg.eigh(hess[np.ix_(idx, idx)])
        if not w[-1] > 0:
            break
        w = np.maximum(w, 1e-12 * w[-1])
        step = np.zeros_like(a)
        step[idx] = v @ ((v.T @ grad[idx]) / w)
        step[idx] -= step[idx].mean()
        size = np.max(np.abs(step))
        capped = size > radius
        if capped:
            step *= radius / size
        slope = float(grad @ step)
        if not slope > 0:
            break
        scale = 1.0
        while scale > 1e-8:
            trial = a + scale * step
            new_value, new_logt = _semi_dual(trial, logf, logd, f, c, eps)
            if new_value >= value + 1e-4 * scale * slope:
                break
            scale *= 0.5
        else:
            break
        # trust radius: widen after a full capped step, shrink after backtracking
        if scale == 1.0 and capped:
            radius *= 2.0
        elif scale < 1.0:
            radius = max(scale * radius, _NEWTON_CAP * eps)
        a, value, logt = trial, new_value, new_logt
    return a


def _marginal_error(plan, f, d):
    rows = np.abs(plan.sum(axis=2) - f).sum(axis=1)
    cols = np.abs(plan.sum(axis=1) - d).sum(axis=1)
    return np.maximum(rows, cols)


def sinkhorn(f, d, cost, eps_schedule=DEFAULT_EPS_SCHEDULE, max_iter=2000, tol=1e-9, newton_steps=100):
    """Entropic OT between ``f`` (length Q) and ``d`` (length K) with epsilon scaling."""
    f = _as_simplex(f, "f")
    d = _as_simplex(d, "d")
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if c.shape != (f.size, d.size):
        raise ValueError(f"cost shape {c.shape} does not match marginals ({f.size}, {d.size})")
    eps_schedule = list(eps_schedule)
    if not eps_schedule or any(b >= a for a, b in zip(eps_schedule, eps_schedule[1:])):
        raise ValueError("eps schedule must be a non-empty decreasing list")
    a, b, plan, err, stage_obj, iters = sinkhorn_batch(f[None], d[None], c, eps_schedule, max_iter, tol, newton_steps=newton_steps)
    converged = bool(err[0] <= tol)
    if not converged:
        logger.info("sinkhorn: max_iter reached with marginal error %.3g", err[0])
    return TransportPlan(
        plan=plan[0],
        cost_matrix=c,
        alpha=a[0],
        beta=b[0],
        epsilon=eps_schedule[-1],
        iterations=iters,
        marginal_error=float(err[0]),
        objective=float(stage_obj[-1, 0]),
        stage_objectives=[float(v) for v in stage_obj[:, 0]],
        converged=converged,
    )


def wasserstein_cost(plan, cost):
    """Frobenius inner product of a plan and a cost matrix."""
    t = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if t.shape != c.shape:
        raise ValueError(f"plan shape {t.shape} does not match cost shape {c.shape}")
    return float(np.sum(t * c))


def exact_ot_oracle(f, d, cost):
    """Exact transportation-LP optimum for small instances (HiGHS simplex)."""
    f = np.asarray(f, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    q, k = c.shape
    if q > ORACLE_MAX_DIM or k > ORACLE_MAX_DIM:
        raise ValueError(f"oracle is capped at {ORACLE_MAX_DIM}x{ORACLE_MAX_DIM}, got {q}x{k}")
    if f.shape != (q,) or d.shape != (k,):
        raise ValueError("marginal lengths do not match the cost matrix")
    a_eq = np.zeros((q + k, q * k))
    for i in range(q):
        a_eq[i, i * k : (i + 1) * k] = 1.0
    for j in range(k):
        a_eq[q + j, j::k] = 1.0
    res = linprog(c.ravel(), A_eq=a_eq, b_eq=np.concatenate([f, d]), bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise TransportError(f"oracle LP failed: {res.message}")
    return float(res.fun)


def enumerate_vertex_cost(f, d, cost):
    """Brute-force LP optimum over basic feasible solutions (tiny instances).

    Every vertex of the transportation polytope is supported on a spanning
    forest of the bipartite row/column graph; choosing ``Q + K - 1`` cells and
    solving the resulting square system enumerates them all.
    """
    f = np.asarray(f, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    c = np.asarray(cost, dtype=np.float64)
    q, k = c.shape
    if q * k > 12:
        raise ValueError("vertex enumeration is limited to Q*K <= 12")
    cells = [(i, j) for i in range(q) for j in range(k)]
    a_full = np.zeros((q + k, q * k))
    for idx, (i, j) in enumerate(cells):
        a_full[i, idx] = 1.0
        a_full[q + j, idx] = 1.0
    rhs = np.concatenate([f, d])
    best = np.inf
    for basis in itertools.combinations(range(q * k), q + k - 1):
        sub = a_full[:, basis]
        if np.linalg.matrix_rank(sub) < q + k - 1:
            continue
        x, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
        if np.any(x < -1e-12) or np.max(np.abs(sub @ x - rhs)) > 1e-10:
            continue
        best = min(best, float(sum(c[cells[b]] * v for b, v in zip(basis, x))))
    return best


class CalibrationState:
    """Warm-start potentials carried between optimisation steps."""

    def __init__(self):
        self.potentials = None


def calibration_loss(
    tape, logits, distributions, cost, state=None, eps_schedule=DEFAULT_EPS_SCHEDULE, max_iter=2000, tol=1e-9, max_marginal_error=1e-4, newton_steps=100
):
    """Mean transport cost between current predictions and stored distributions.

    ``logits`` is a (K_base, Q) node: the current model evaluated on each base
    prototype. ``distributions`` is (K_base, K_base). The node value is the mean
    of ``<T_k, C>``; its gradient with respect to each softmax output row is the
    centred row potential divided by K_base, chained through the softmax.

    With a ``state`` whose potentials are already set, only the final epsilon is
    run, starting from the previous solution.
    """
    probs = tape.softmax(logits)
    f = tape.value(probs)
    d = np.asarray(distributions, dtype=np.float64)
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if f.shape[0] != d.shape[0] or c.shape != (f.shape[1], d.shape[1]):
        raise ValueError(f"calibration shapes disagree: probs {f.shape}, distributions {d.shape}, cost {c.shape}")
    init = None
    schedule = list(eps_schedule)
    if state is not None and state.potentials is not None and state.potentials[0].shape == f.shape:
        init = state.potentials
        schedule = schedule[-1:]
    a, b, plan, err, _, _ = sinkhorn_batch(f, d, c, schedule, max_iter, tol, init, newton_steps=newton_steps)
    if np.max(err) > max_marginal_error:
        raise TransportError(f"calibration: Sinkhorn marginal error {np.max(err):.3g} exceeds {max_marginal_error}")
    if state is not None:
        state.potentials = (a, b)
    per_proto = np.sum(plan * c, axis=(1, 2))
    k = f.shape[0]
    grad = (a - a.mean(axis=1, keepdims=True)) / k
    node = tape.linearized(probs, float(np.mean(per_proto)), grad)
    return node, CalibrationReport([float(w) for w in per_proto], float(np.mean(per_proto)))


def entropic_value(f, d, cost, eps_schedule=DEFAULT_EPS_SCHEDULE, max_iter=2000, tol=1e-13):
    """Regularised optimal value at the final epsilon (dual objective)."""
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    f = np.atleast_2d(f)
    d = np.atleast_2d(d)
    *_, stage_obj, _ = sinkhorn_batch(f, d, c, list(eps_schedule), max_iter, tol)
    return stage_obj[-1]
