"""Reference solvers used as oracles: batched ADMM for convex QPs and a
reduced-space log-barrier method that works through any family's completion.

Both return plain arrays and per-instance status strings.  They also produce
the supervised labels (partial variables of the reference solution).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ContractError, DimensionError, LabelingError, SolverError

OPTIMAL = "optimal"
MAX_ITER = "max_iter"


@dataclass
class AdmmSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    max_iter: int = 20000
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eq_rho_scale: float = 1e3
    check_every: int = 10


@dataclass
class AdmmResult:
    Y: np.ndarray
    status: list
    prim_res: np.ndarray
    dual_res: np.ndarray
    iterations: np.ndarray


def admm_qp(P, q, A, b, G, h, settings: AdmmSettings | None = None) -> AdmmResult:
    """Batched operator-splitting solve of ``min 1/2 y'Py + q'y, Ay = b, Gy <= h``.

    ``P`` is (n, n) or a diagonal given as a vector; ``q`` is (n,) or (batch, n);
    ``b`` is (batch, n_eq).  The constraint matrix and step sizes are shared by the
    batch, so the linear system is factorized once.
    """
    s = settings or AdmmSettings()
    P = np.diag(P) if np.ndim(P) == 1 else np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    A = np.asarray(A, dtype=np.float64).reshape(-1, n)
    G = np.asarray(G, dtype=np.float64).reshape(-1, n)
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if A.shape[0] == 0:
        b = np.zeros((b.shape[0], 0))
    if b.shape[1] != A.shape[0]:
        raise DimensionError(f"admm: b has {b.shape[1]} columns, A has {A.shape[0]} rows")
    batch = b.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), (batch, n))
    M = np.vstack([A, G])
    n_eq = A.shape[0]
    lo = np.hstack([b, np.full((batch, G.shape[0]), -np.inf)])
    hi = np.hstack([b, np.broadcast_to(np.asarray(h, dtype=np.float64), (batch, G.shape[0]))])
    rho = np.full(M.shape[0], s.rho)
    rho[:n_eq] *= s.eq_rho_scale
    chol = sla.cho_factor(P + s.sigma * np.eye(n) + M.T @ (rho[:, None] * M))

    x = np.zeros((batch, n))
    z = np.clip(np.zeros((batch, M.shape[0])), lo, hi)
    y = np.zeros_like(z)
    done = np.zeros(batch, dtype=bool)
    iters = np.full(batch, s.max_iter)
    r_prim = np.full(batch, np.inf)
    r_dual = np.full(batch, np.inf)
    for k in range(1, s.max_iter + 1):
        xt = sla.cho_solve(chol, (s.sigma * x - q + (rho * z - y) @ M).T).T
        zt = xt @ M.T
        x = s.alpha * xt + (1 - s.alpha) * x
        zr = s.alpha * zt + (1 - s.alpha) * z
        z_new = np.clip(zr + y / rho, lo, hi)
        y = y + rho * (zr - z_new)
        z = z_new
        if k % s.check_every == 0 or k == s.max_iter:
            Mx = x @ M.T
            Px = x @ P.T
            Mty = y @ M
            r_prim = np.abs(Mx - z).max(axis=1)
            r_dual = np.abs(Px + q + Mty).max(axis=1)
            e_prim = s.eps_abs + s.eps_rel * np.maximum(np.abs(Mx).max(axis=1), np.abs(z).max(axis=1))
            e_dual = s.eps_abs + s.eps_rel * np.maximum.reduce(
                [np.abs(Px).max(axis=1), np.abs(Mty).max(axis=1), np.abs(q).max(axis=1)])
            newly = (r_prim <= e_prim) & (r_dual <= e_dual) & ~done
            iters[newly] = k
            done |= newly
            if done.all():
                break
    status = [OPTIMAL if d else MAX_ITER for d in done]
    return AdmmResult(x, status, r_prim, r_dual, iters)


def solve_qp_admm(family, x, settings: AdmmSettings | None = None) -> AdmmResult:
    if getattr(family, "kind", None) != "quadratic":
        raise ContractError("ADMM needs a convex quadratic family")
    return admm_qp(family.q, family.p, family.A, np.atleast_2d(x), family.G, family.h_rhs, settings)


# ------------------------------------------------------------------ barrier

@dataclass
class BarrierSettings:
    mu0: float = 1.0
    factor: float = 0.2
    rounds: int = 8
    armijo: float = 1e-4
    shrink: float = 0.5
    tol: float = 1e-6
    max_inner: int = 200
    max_backtrack: int = 60
    starts: int = 3
    perturb: float = 1e-2
    seed: int = 0
    margin: float = 1e-6
    nudge_margin: float = 1e-3
    nudge_steps: int = 200


@dataclass
class BarrierResult:
    Y: np.ndarray
    Z: np.ndarray
    status: list
    objective: np.ndarray
    stationarity: np.ndarray


class _Reduced:
    """z-space view of a family: completion, pullback and (optionally) a Hessian.

    Linear completions (QP/sine) get exact Newton steps through the dense
    completion matrix.  Nonlinear ones use a Gauss-Newton model built from
    the completion Jacobian ``dy/dz`` (curvature of the completion itself is
    left out), safeguarded by the line search.
    """

    def __init__(self, family):
        self.family = family
        self.G = family.G
        self.h = family.h_rhs
        self.linear = hasattr(family, "completion_matrix")
        if self.linear:
            self.Mc = family.completion_matrix()

    def start(self, x):
        fam = self.family
        if hasattr(fam, "feasible_point"):
            return fam.partial_of(fam.feasible_point(x))
        return fam.initial_partial(x)

    def complete(self, x, Z):
        fam = self.family
        if self.linear:
            Y, _ = fam.complete_linear(x, Z)
            return Y, None, np.ones(Z.shape[0], dtype=bool)
        Y, cache = fam.complete_np(x, Z)
        return Y, cache, cache.converged

    def pullback(self, cache, dY):
        if self.linear:
            return dY @ self.Mc
        return self.family.pullback_np(cache, dY)

    def objective(self, x, Y):
        return self.family.objective_np(x, Y)

    def objective_grad(self, x, Y):
        return self.family.objective_grad_np(Y) if self.linear else self.family.objective_grad_np(x, Y)

    def jacobian(self, cache, batch):
        """``dy/dz`` per row, (B, n, m)."""
        if self.linear:
            return np.broadcast_to(self.Mc, (batch, *self.Mc.shape))
        m = self.family.m
        cols = [self.family.jvp_np(cache, np.tile(e, (batch, 1))) for e in np.eye(m)]
        return np.stack(cols, axis=2)

    def hessian(self, x, Z, Y, cache, mu, slack, grad):
        if not self.linear:
            return self._fd_hessian(x, Z, mu, grad)
        M = self.jacobian(cache, Y.shape[0])
        Hy = self.family.objective_hess_diag_np(Y)
        GM = self.G @ M
        H = np.swapaxes(GM, 1, 2) @ (GM * (mu / slack ** 2)[:, :, None])
        H += np.swapaxes(M, 1, 2) @ (M * Hy[:, :, None])
        return H

    def _fd_hessian(self, x, Z, mu, grad):
        """Forward differences of the analytic barrier gradient, one batched completion.

        The thin feasible sets of power flow make the completion's own
        curvature matter, so a Gauss-Newton model is not good enough here.
        """
        B, m = Z.shape
        eps = 1e-7 * np.maximum(1.0, np.abs(Z))
        Zp = np.repeat(Z, m, axis=0)
        Zp[np.arange(B * m), np.tile(np.arange(m), B)] += eps.reshape(-1)
        xp = np.repeat(x, m, axis=0)
        Yp, cp, ok = self.complete(xp, Zp)
        sp = self.h - Yp @ self.G.T
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = _barrier_grad(self, xp, Yp, _masked_cache(cp, ok), mu, sp)
        H = (gp.reshape(B, m, m) - grad[:, None, :]) / eps[:, :, None]
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        return np.where(np.isfinite(H), H, 0.0)


def _masked_cache(cache, ok):
    if not ok.all():
        cache.converged = ok
    return cache


def _barrier_value(red, x, Y, mu):
    s = red.h - Y @ red.G.T
    val = red.objective(x, Y)
    with np.errstate(invalid="ignore", divide="ignore"):
        logs = np.where(s > 0, np.log(np.where(s > 0, s, 1.0)), -np.inf).sum(axis=1)
    return val - mu * logs, s


def _barrier_grad(red, x, Y, cache, mu, s):
    gy = red.objective_grad(x, Y) + mu * (1.0 / s) @ red.G
    return red.pullback(cache, gy)


def _nudge(red, x, Z, settings):
    """Levenberg-Marquardt on ``||relu(g + margin)||^2`` until every slack is positive."""
    Z = Z.copy()
    m = Z.shape[1]
    for _ in range(settings.nudge_steps):
        Y, cache, ok = red.complete(x, Z)
        s = red.h - Y @ red.G.T
        bad = (s.min(axis=1) <= settings.margin) & ok
        if not bad.any():
            break
        v = np.maximum(settings.nudge_margin - s, 0.0)
        J = (red.G @ red.jacobian(cache, Z.shape[0])) * (v > 0)[:, :, None]
        g = np.einsum("bim,bi->bm", J, v)
        A = np.swapaxes(J, 1, 2) @ J
        damp = 1e-10 * (1.0 + np.trace(A, axis1=1, axis2=2))
        d = -np.linalg.solve(A + damp[:, None, None] * np.eye(m), g[..., None])[..., 0]
        d[~bad] = 0.0
        val = (v ** 2).sum(axis=1)
        slope = 2.0 * (g * d).sum(axis=1)
        step = np.where(bad, 1.0, 0.0)
        for _ in range(settings.max_backtrack):
            Yt, _, okt = red.complete(x, Z + step[:, None] * d)
            vt = np.maximum(settings.nudge_margin - (red.h - Yt @ red.G.T), 0.0)
            worse = bad & (~okt | ((vt ** 2).sum(axis=1) > val + 1e-4 * step * slope))
            if not worse.any():
                break
            step = np.where(worse, step * settings.shrink, step)
        Z = Z + step[:, None] * d
    return Z


def _modified_newton(H, g):
    lam, V = np.linalg.eigh(H)
    # only a round-off guard: barrier curvature makes H very ill-conditioned late on
    floor = 1e-13 * np.maximum(1.0, np.abs(lam).max(axis=1, keepdims=True))
    lam = np.maximum(np.abs(lam), floor)
    return -np.einsum("bij,bj->bi", V, np.einsum("bji,bj->bi", V, g) / lam)


def _barrier_from(red, x, Z, settings):
    Z = Z.copy()
    mu = settings.mu0
    Y, cache, _ = red.complete(x, Z)
    for r in range(settings.rounds):
        if r:
            mu *= settings.factor
        F, s = _barrier_value(red, x, Y, mu)
        grad = _barrier_grad(red, x, Y, cache, mu, s)
        active = np.ones(Z.shape[0], dtype=bool)
        for _ in range(settings.max_inner):
            active &= np.abs(grad).max(axis=1) > settings.tol
            if not active.any():
                break
            d = _modified_newton(red.hessian(x, Z, Y, cache, mu, s, grad), grad)
            slope = (grad * d).sum(axis=1)
            uphill = slope >= 0
            d[uphill] = -grad[uphill]
            slope[uphill] = -(grad[uphill] ** 2).sum(axis=1)
            step = np.where(active, 1.0, 0.0)
            if red.linear:
                # fraction to the boundary; nonlinear families rely on the -inf barrier value
                Gd = (d @ red.Mc.T) @ red.G.T
                with np.errstate(divide="ignore", invalid="ignore"):
                    lim = np.where(Gd > 0, s / Gd, np.inf).min(axis=1)
                step = np.minimum(step, 0.99 * lim)
            accepted = ~active
            for _ in range(settings.max_backtrack):
                Yt, ct, ok = red.complete(x, Z + step[:, None] * d)
                Ft, st = _barrier_value(red, x, Yt, mu)
                slack = 1e-14 * np.maximum(1.0, np.abs(F))  # round-off room near the optimum
                good = ~accepted & ok & np.isfinite(Ft) & (Ft <= F + settings.armijo * step * slope + slack)
                if good.any():
                    Z[good] += step[good, None] * d[good]
                    Y[good], F[good], s[good] = Yt[good], Ft[good], st[good]
                    if cache is not None:
                        cache = red.family.merge_cache(cache, ct, good)
                    accepted |= good
                if accepted.all():
                    break
                step = np.where(accepted, step, step * settings.shrink)
            active &= accepted
            grad = _barrier_grad(red, x, Y, cache, mu, s)
    return Z, Y, np.abs(grad).max(axis=1)


def solve_reduced_barrier(family, x, settings: BarrierSettings | None = None) -> BarrierResult:
    """Log-barrier method over the partial variables z.

    Equalities hold by construction (completion); the barrier keeps ``g < 0``.
    Non-convex families get ``settings.starts`` perturbed starts and keep the
    best objective.  Raises :class:`SolverError` if some instance has no
    strictly feasible start.
    """
    s = settings or BarrierSettings()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    red = _Reduced(family)
    convex = getattr(family, "kind", None) == "quadratic"
    n_starts = 1 if convex else max(1, s.starts)
    rng = np.random.default_rng(s.seed)
    Z0 = red.start(x)
    best = None
    for k in range(n_starts):
        Zk = Z0 if k == 0 else Z0 + s.perturb * rng.standard_normal(Z0.shape) * np.maximum(1.0, np.abs(Z0))
        Zk = _nudge(red, x, Zk, s)
        Yk, _, ok = red.complete(x, Zk)
        feas = ok & ((red.h - Yk @ red.G.T).min(axis=1) > 0)
        if k == 0 and not feas.all():
            raise SolverError(f"no strictly feasible start for instances {np.flatnonzero(~feas).tolist()}")
        if not feas.all():
            Zk[~feas] = Z0[~feas] if best is None else best[0][~feas]
        Zk, Yk, stat = _barrier_from(red, x, Zk, s)
        obj = red.objective(x, Yk)
        if best is None:
            best = [Zk, Yk, stat, obj]
        else:
            better = obj < best[3]
            for slot, new in zip(best, (Zk, Yk, stat, obj)):
                slot[better] = new[better]
    Z, Y, stat, obj = best
    # stuck line searches near the boundary leave round-off sized gradients
    status = [OPTIMAL if st <= 10 * s.tol else MAX_ITER for st in stat]
    return BarrierResult(Y, Z, status, obj, stat)


# ------------------------------------------------------------------ labels

@dataclass
class Labels:
    Z: np.ndarray
    Y: np.ndarray
    objective: np.ndarray
    solver: str
    status: list = field(default_factory=list)


def make_labels(family, X, solver: str = "auto", admm: AdmmSettings | None = None,
                barrier: BarrierSettings | None = None, strict: bool = True) -> Labels:
    """Reference solutions for every row of ``X``; ``Z`` holds the partial variables.

    ``auto`` picks ADMM for convex quadratic families and the barrier method
    otherwise.  With ``strict`` any unsolved instance raises
    :class:`LabelingError` listing the failing rows.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if solver == "auto":
        solver = "admm" if getattr(family, "kind", None) == "quadratic" else "barrier"
    if solver == "admm":
        res = solve_qp_admm(family, X, admm)
        Y = res.Y
    elif solver == "barrier":
        res = solve_reduced_barrier(family, X, barrier)
        Y = res.Y
    else:
        raise ContractError(f"unknown solver {solver!r}")
    bad = [i for i, st in enumerate(res.status) if st != OPTIMAL]
    if bad and strict:
        raise LabelingError(f"{solver} failed on {len(bad)} instances", bad)
    return Labels(family.partial_of(Y), Y, family.objective_np(X, Y), solver, list(res.status))
