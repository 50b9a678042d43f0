"""AC optimal power flow as a problem family.

Decision vector (per instance)::

    y = [pg at generator buses, qg at generator buses, |v| at all buses, angle v at all buses]

where "generator buses" are the reference bus(es) R plus the other buses G
with an in-service generator, in bus order.  Generation at load buses D is
zero by construction and is not part of y.  All quantities are per-unit.

The partial variables are ``z = [pg_G, |v|_(B\\D)]``.  Completion first solves
the real-power balance at B\\R and the reactive balance at D for
``z1 = [|v|_D, angle_(B\\R)]`` by Newton's method, then reads off
``z2 = [pg_R, qg_(B\\D)]`` in closed form from the remaining balances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import CompletionError, ContractError, DimensionError
from ..problems import LinearInequalities, ProblemFamily
from .case import (GEN_BUS, PD, PMAX, PMIN, QD, QMAX, QMIN, VA, VM, VMAX, VMIN, PowerCase,
                   build_admittance, cost_coefficients, load_case)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
LOAD_SPREAD = 0.1


@dataclass
class CompletionTrace:
    """Per-instance Newton outcome plus the Jacobian blocks the backward pass needs.

    ``J1`` is the Step 1 Jacobian at the solution, ``J1b`` its sensitivity to
    ``|v|_(B\\D)`` and ``T = -J_Step2`` the sensitivity of z2 to all voltages
    ``[|v|, angle]``.  Rows that did not converge carry zeros.
    """
    x: np.ndarray
    z: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    J1: np.ndarray
    J1b: np.ndarray
    T: np.ndarray

    def solve(self, rhs, transpose=False):
        """``J1^-1 rhs`` (or ``J1^-T rhs``) per row; unconverged rows give zeros."""
        out = np.zeros_like(rhs)
        ok = self.converged
        if ok.any():
            A = self.J1[ok]
            if transpose:
                A = np.swapaxes(A, 1, 2)
            out[ok] = np.linalg.solve(A, rhs[ok][..., None])[..., 0]
        return out


class InjectionJacobian:
    """Sparse evaluation of ``S = V * conj(W V)`` and of blocks of its real voltage Jacobian.

    The full Jacobian ``[[dP/d|v|, dP/dangle], [dQ/d|v|, dQ/dangle]]`` is
    (2b, 2b) but only has entries where W does (plus the diagonal).  A block
    is requested by row indices into ``[P; Q]`` and column indices into
    ``[|v|; angle]`` and is scattered directly from the nonzeros.
    """

    def __init__(self, W: np.ndarray):
        self.W = W
        self.nb = nb = W.shape[0]
        mask = W != 0
        mask[np.diag_indices(nb)] = True
        self.i, self.k = np.nonzero(mask)
        self.w = W[self.i, self.k]
        self.diag = np.flatnonzero(self.i == self.k)
        self._plans = {}

    def values(self, V):
        """S and the four blocks' values on the nonzero pattern, each (B, nnz)."""
        I = V @ self.W.T
        S = V * np.conj(I)
        mag = np.abs(V)
        A = V[:, self.i] * np.conj(self.w * V[:, self.k])
        inv_mag_k = 1.0 / mag[:, self.k]
        p_vm, q_vm = A.real * inv_mag_k, A.imag * inv_mag_k
        p_va, q_va = A.imag.copy(), -A.real
        d, di = self.diag, self.i[self.diag]
        p_vm[:, d] += S.real[:, di] / mag[:, di]
        q_vm[:, d] += S.imag[:, di] / mag[:, di]
        p_va[:, d] -= S.imag[:, di]
        q_va[:, d] += S.real[:, di]
        return S, (p_vm, p_va, q_vm, q_va)

    def _plan(self, rows, cols):
        key = (rows.tobytes(), cols.tobytes())
        if key not in self._plans:
            nb = self.nb
            rpos = np.full(2 * nb, -1)
            rpos[rows] = np.arange(rows.size)
            cpos = np.full(2 * nb, -1)
            cpos[cols] = np.arange(cols.size)
            plan = []
            for blk, (roff, coff) in enumerate(((0, 0), (0, nb), (nb, 0), (nb, nb))):
                r, c = rpos[roff + self.i], cpos[coff + self.k]
                sel = np.flatnonzero((r >= 0) & (c >= 0))
                plan.append((blk, sel, r[sel], c[sel]))
            self._plans[key] = plan
        return self._plans[key]

    def block(self, vals, rows, cols, scale=1.0):
        out = np.zeros((vals[0].shape[0], rows.size, cols.size))
        for blk, sel, r, c in self._plan(rows, cols):
            out[:, r, c] = scale * vals[blk][:, sel]
        return out


def power_injection_jacobian(V: np.ndarray, W: np.ndarray):
    """``S = V * conj(W V)`` and the dense real Jacobian ``[[dP/d|v|, dP/dangle], [dQ/d|v|, dQ/dangle]]``."""
    jac = InjectionJacobian(W)
    S, vals = jac.values(V)
    full = np.arange(2 * jac.nb)
    return S, jac.block(vals, full, full)


class AcopfFamily(LinearInequalities, ProblemFamily):
    task = "acopf"
    partial_head = "sigmoid"

    def __init__(self, case: PowerCase, newton_tol: float = NEWTON_TOL,
                 newton_max_iter: int = NEWTON_MAX_ITER):
        self.case = case
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        base = case.baseMVA
        self.W = build_admittance(case).W
        self.injection = InjectionJacobian(self.W)
        D, R, Gb = case.bus_sets()
        nb = case.n_bus
        self.D, self.R, self.Gb = D, R, Gb
        self.gen_bus = np.sort(np.concatenate([R, Gb]))
        self.nonR = np.setdiff1d(np.arange(nb), R)
        ng = self.gen_bus.size
        self.posG = np.flatnonzero(np.isin(self.gen_bus, Gb))
        self.posR = np.flatnonzero(np.isin(self.gen_bus, R))

        # one in-service generator per generator bus
        bidx = case.bus_index()
        row_of = {}
        for g in case.online_gen():
            k = bidx[int(case.gen[g, GEN_BUS])]
            if k in row_of:
                raise ContractError(f"bus {int(case.bus[k, 0])} has several generators; not supported")
            row_of[k] = g
        rows = np.array([row_of[k] for k in self.gen_bus])
        gen = case.gen[rows]
        quad, lin = cost_coefficients(case)
        # cost in $/h divided by baseMVA^2, with pg in per-unit
        self.cost_quad = quad[rows]
        self.cost_lin = lin[rows] / base
        self.pmin, self.pmax = gen[:, PMIN] / base, gen[:, PMAX] / base
        self.qmin, self.qmax = gen[:, QMIN] / base, gen[:, QMAX] / base
        self.vmin, self.vmax = case.bus[:, VMIN].copy(), case.bus[:, VMAX].copy()
        self.pd_nom, self.qd_nom = case.bus[:, PD] / base, case.bus[:, QD] / base
        self.vm0 = case.bus[:, VM].copy()
        self.va0 = np.deg2rad(case.bus[:, VA])
        self.va_ref = self.va0[R].copy()

        self.nb, self.ng = nb, ng
        self.n = 2 * ng + 2 * nb
        self.n_eq = R.size + 2 * nb
        self.d = 2 * nb
        self.ypg = np.arange(ng)
        self.yqg = ng + np.arange(ng)
        self.yvm = 2 * ng + np.arange(nb)
        self.yva = 2 * ng + nb + np.arange(nb)
        self.z_idx = np.concatenate([self.ypg[self.posG], self.yvm[self.gen_bus]])
        self.z1_idx = np.concatenate([self.yvm[D], self.yva[self.nonR]])
        self.z2_idx = np.concatenate([self.ypg[self.posR], self.yqg])
        self.nG = self.posG.size
        # Step 1 rows: P balance at B\R then Q balance at D; pg_G enters the P rows with +1
        self.p_row_of_G = np.searchsorted(self.nonR, self.gen_bus[self.posG])

        # rows/columns of the voltage Jacobian used by Step 1 and Step 2
        self._r1 = np.concatenate([self.nonR, nb + D])
        self._c1 = np.concatenate([D, nb + self.nonR])
        self._r2 = np.concatenate([R, nb + self.gen_bus])

        self.z_lo = np.concatenate([self.pmin[self.posG], self.vmin[self.gen_bus]])
        self.z_hi = np.concatenate([self.pmax[self.posG], self.vmax[self.gen_bus]])
        box = np.concatenate([self.ypg, self.yqg, self.yvm])
        S = np.zeros((box.size, self.n))
        S[np.arange(box.size), box] = 1.0
        self.G = np.vstack([S, -S])
        self.h_rhs = np.concatenate([self.pmax, self.qmax, self.vmax, -self.pmin, -self.qmin, -self.vmin])
        self.n_ineq = self.G.shape[0]

    @classmethod
    def from_bundled(cls, name: str = "case57", **kw) -> "AcopfFamily":
        return cls(load_case(name), **kw)

    def __repr__(self):
        return f"AcopfFamily({self.case.name}, buses={self.nb}, n={self.n}, m={self.m})"

    # ------------------------------------------------------------ inputs
    def sample_inputs(self, count, rng):
        """Loads drawn uniformly within +-10% of nominal, independently per bus and for P and Q."""
        fp = rng.uniform(1 - LOAD_SPREAD, 1 + LOAD_SPREAD, size=(count, self.nb))
        fq = rng.uniform(1 - LOAD_SPREAD, 1 + LOAD_SPREAD, size=(count, self.nb))
        return np.hstack([self.pd_nom * fp, self.qd_nom * fq])

    sample_loads = sample_inputs

    def nominal_input(self) -> np.ndarray:
        return np.concatenate([self.pd_nom, self.qd_nom])[None]

    # ------------------------------------------------------------ partial variables
    def decode(self, raw):
        """Sigmoid outputs a -> ``a * lo + (1 - a) * hi`` per partial coordinate."""
        return ad.mul(raw, self.z_lo - self.z_hi) + self.z_hi

    def decode_np(self, a):
        return self.decode(ad.constant(np.atleast_2d(a))).data

    def decode_partial(self, raw):
        """Map unsquashed network outputs to z (applies the sigmoid first)."""
        return self.decode(ad.sigmoid(ad.constant(np.atleast_2d(raw)))).data

    def partial_of(self, Y):
        return np.asarray(Y)[:, self.z_idx]

    def initial_partial(self, x):
        return np.tile(0.5 * (self.z_lo + self.z_hi), (np.atleast_2d(x).shape[0], 1))

    # ------------------------------------------------------------ objective / residuals
    def objective(self, x, Y):
        pg = ad.take(Y, self.ypg, axis=1)
        return ad.sum(ad.mul(ad.square(pg), self.cost_quad) + ad.mul(pg, self.cost_lin), axis=1)

    def objective_grad_np(self, x, Y):
        g = np.zeros_like(Y)
        g[:, self.ypg] = 2.0 * self.cost_quad * Y[:, self.ypg] + self.cost_lin
        return g

    def objective_hess_diag_np(self, Y):
        H = np.zeros_like(Y)
        H[:, self.ypg] = 2.0 * self.cost_quad
        return H

    def _voltages(self, Y):
        return Y[:, self.yvm] * np.exp(1j * Y[:, self.yva])

    def _split_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise DimensionError(f"ACOPF input must have {self.d} columns, got {x.shape[1]}")
        return x[:, :self.nb], x[:, self.nb:]

    def eq_resid_np(self, x, Y):
        pd, qd = self._split_x(x)
        Y = np.atleast_2d(Y)
        S = self._voltages(Y)
        S = S * np.conj(S @ self.W.T)
        pg = np.zeros((Y.shape[0], self.nb))
        qg = np.zeros_like(pg)
        pg[:, self.gen_bus] = Y[:, self.ypg]
        qg[:, self.gen_bus] = Y[:, self.yqg]
        return np.hstack([Y[:, self.yva[self.R]] - self.va_ref, pg - pd - S.real, qg - qd - S.imag])

    def eq_jacobian(self, x, Y):
        """Dense ``d eq_resid / d y`` per row: (B, n_eq, n)."""
        Y = np.atleast_2d(Y)
        B, nR, nb = Y.shape[0], self.R.size, self.nb
        _, vals = self.injection.values(self._voltages(Y))
        full = np.arange(2 * nb)
        J = np.zeros((B, self.n_eq, self.n))
        J[:, np.arange(nR), self.yva[self.R]] = 1.0
        rp, rq = nR + np.arange(nb), nR + nb + np.arange(nb)
        J[:, rp[self.gen_bus], self.ypg] = 1.0
        J[:, rq[self.gen_bus], self.yqg] = 1.0
        J[:, nR:, 2 * self.ng:] = self.injection.block(vals, full, full, -1.0)  # yvm, yva trail y
        return J

    def eq_resid(self, x, Y):
        value = self.eq_resid_np(x, Y.data)

        def vjp(g):
            return (np.einsum("be,ben->bn", g, self.eq_jacobian(x, Y.data)),)

        return ad.custom("acopf_eq_resid", (Y,), value, vjp)

    def eq_grad(self, x, Y):
        """``2 J' h`` with the Jacobian held fixed in the backward pass."""
        J = self.eq_jacobian(x, Y.data)
        h = self.eq_resid_np(x, Y.data)
        value = 2.0 * np.einsum("be,ben->bn", h, J)

        def vjp(g):
            return (2.0 * np.einsum("be,ben->bn", np.einsum("ben,bn->be", J, g), J),)

        return ad.custom("acopf_eq_grad", (Y,), value, vjp)

    # ------------------------------------------------------------ completion
    def _step1_jac(self, vals):
        """Jacobian of the Step 1 residual in z1."""
        return self.injection.block(vals, self._r1, self._c1, -1.0)

    def _step1b_jac(self, vals):
        """Jacobian of the Step 1 residual in |v|_(B\\D)."""
        return self.injection.block(vals, self._r1, self.gen_bus, -1.0)

    def complete_np(self, x, Z):
        pd, qd = self._split_x(x)
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape != (pd.shape[0], self.m):
            raise DimensionError(f"complete_acopf: z {Z.shape} does not match ({pd.shape[0]}, {self.m})")
        B, nb, D, nonR = Z.shape[0], self.nb, self.D, self.nonR
        vm = np.tile(self.vm0, (B, 1))
        va = np.tile(self.va0, (B, 1))
        vm[:, self.gen_bus] = Z[:, self.nG:]
        va[:, self.R] = self.va_ref
        pg_bus = np.zeros((B, nb))
        pg_bus[:, self.gen_bus[self.posG]] = Z[:, :self.nG]

        def step1_resid(vm, va, rows=slice(None)):
            V = vm * np.exp(1j * va)
            S = V * np.conj(V @ self.W.T)
            hp = pg_bus[rows] - pd[rows] - S.real
            hq = -qd[rows] - S.imag
            return np.hstack([hp[:, nonR], hq[:, D]])

        done = np.zeros(B, dtype=bool)
        failed = np.zeros(B, dtype=bool)
        iters = np.zeros(B, dtype=int)
        with np.errstate(all="ignore"):
            h1 = step1_resid(vm, va)
            res = np.abs(h1).max(axis=1)
            for it in range(self.newton_max_iter + 1):
                failed |= ~np.isfinite(res)
                done |= (res < self.newton_tol) & ~failed
                act = np.flatnonzero(~done & ~failed)
                if act.size == 0 or it == self.newton_max_iter:
                    break
                _, vals = self.injection.values(vm[act] * np.exp(1j * va[act]))
                J1 = self._step1_jac(vals)
                step, ok = _batched_solve(J1, h1[act])
                failed[act[~ok]] = True
                act, step = act[ok], step[ok]
                new_vm, new_va = vm[act].copy(), va[act].copy()
                new_vm[:, D] -= step[:, :D.size]
                new_va[:, nonR] -= step[:, D.size:]
                bad = ~(np.isfinite(new_vm).all(axis=1) & np.isfinite(new_va).all(axis=1)) | (new_vm.min(axis=1) <= 0)
                failed[act[bad]] = True
                good = act[~bad]
                vm[good], va[good] = new_vm[~bad], new_va[~bad]
                iters[good] += 1
                h1[good] = step1_resid(vm[good], va[good], good)
                res[good] = np.abs(h1[good]).max(axis=1)
        converged = done & ~failed

        # Step 2 and the cached blocks, at the final voltages
        V = vm * np.exp(1j * va)
        S, vals = self.injection.values(V)
        Y = np.empty((B, self.n))
        Y[:, self.ypg[self.posG]] = Z[:, :self.nG]
        Y[:, self.ypg[self.posR]] = pd[:, self.R] + S.real[:, self.R]
        Y[:, self.yqg] = qd[:, self.gen_bus] + S.imag[:, self.gen_bus]
        Y[:, self.yvm] = vm
        Y[:, self.yva] = va
        J1 = self._step1_jac(vals)
        J1b = self._step1b_jac(vals)
        T = self.injection.block(vals, self._r2, np.arange(2 * nb))
        J1[~converged] = 0.0
        J1b[~converged] = 0.0
        T[~converged] = 0.0
        if not np.isfinite(Y).all():
            # keep failed rows finite so downstream tensors stay valid; they are masked out
            start = np.concatenate([self.vm0, self.va0])
            bad = ~np.isfinite(Y).all(axis=1)
            Y[bad] = 0.0
            Y[np.ix_(bad, np.concatenate([self.yvm, self.yva]))] = start
            converged &= ~bad
        res = np.where(np.isfinite(res), res, np.inf)
        return Y, CompletionTrace(np.hstack([pd, qd]), Z.copy(), converged, iters, res, J1, J1b, T)

    def complete(self, x, Z):
        Yv, trace = self.complete_np(x, Z.data)

        def vjp(g):
            return (self.pullback_np(trace, _masked(g, trace.converged)),)

        return ad.custom("complete_acopf", (Z,), Yv, vjp), trace

    def pullback_np(self, trace, dY):
        dY = np.atleast_2d(dY)
        return acopf_backward(self, trace, dY[:, self.z_idx], dY[:, self.z1_idx], dY[:, self.z2_idx])

    def jvp_np(self, trace, dz):
        """Tangent map ``dy = (dy/dz) dz`` from the cached blocks."""
        dz = np.atleast_2d(dz)
        B, nb, nG = dz.shape[0], self.nb, self.nG
        rhs = -np.einsum("brk,bk->br", trace.J1b, dz[:, nG:])
        rhs[:, self.p_row_of_G] -= dz[:, :nG]
        dz1 = trace.solve(rhs)
        dvolt = np.zeros((B, 2 * nb))
        dvolt[:, self.gen_bus] = dz[:, nG:]
        dvolt[:, self.D] = dz1[:, :self.D.size]
        dvolt[:, nb + self.nonR] = dz1[:, self.D.size:]
        dz2 = np.einsum("bqv,bv->bq", trace.T, dvolt)
        dy = np.zeros((B, self.n))
        dy[:, self.z_idx] = dz
        dy[:, self.z1_idx] = dz1
        dy[:, self.z2_idx] = dz2
        dy[~trace.converged] = 0.0
        return dy

    def partial_grad(self, cache, dY):
        value = self.pullback_np(cache, _masked(dY.data, cache.converged))
        return ad.custom("acopf_completion_vjp", (dY,), value, lambda a: (self.jvp_np(cache, a),))

    def merge_cache(self, cache, new, idx):
        for name in ("x", "z", "converged", "iterations", "residual", "J1", "J1b", "T"):
            getattr(cache, name)[idx] = getattr(new, name)[idx]
        return cache


def _masked(g, keep):
    g = np.array(g, dtype=np.float64)
    g[~keep] = 0.0
    return g


def _batched_solve(A, b):
    """Solve each ``A[i] s = b[i]``; rows with a singular matrix come back flagged."""
    ok = np.ones(A.shape[0], dtype=bool)
    try:
        return np.linalg.solve(A, b[..., None])[..., 0], ok
    except np.linalg.LinAlgError:
        out = np.zeros_like(b)
        for i in range(A.shape[0]):
            try:
                out[i] = np.linalg.solve(A[i], b[i])
            except np.linalg.LinAlgError:
                ok[i] = False
        return out, ok


def complete_acopf(family: AcopfFamily, x, z, strict: bool = True):
    """Two-step completion; with ``strict`` an unconverged row raises :class:`CompletionError`."""
    Y, trace = family.complete_np(x, z)
    if strict and not trace.converged.all():
        bad = np.flatnonzero(~trace.converged).tolist()
        raise CompletionError(f"Newton did not converge for rows {bad}", trace)
    return Y, trace


def acopf_backward(family: AcopfFamily, trace: CompletionTrace, dl_dz, dl_dz1, dl_dz2):
    """Total ``dl/dz`` from partials in z, z1 and z2, via ``K = (dl/dz1 + dl/dz2 dz2/dz1) J1^-1``.

    Never forms dz1/dz.  Rows whose completion did not converge must carry
    zero incoming gradient.
    """
    dl_dz, dl_dz1, dl_dz2 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (dl_dz, dl_dz1, dl_dz2))
    dead = ~trace.converged
    if dead.any() and (np.any(dl_dz1[dead]) or np.any(dl_dz2[dead]) or np.any(dl_dz[dead])):
        raise ContractError("backward through an unconverged completion")
    nb, nG, nD = family.nb, family.nG, family.D.size
    c_volt = np.einsum("bq,bqv->bv", dl_dz2, trace.T)  # dl/dz2 . dz2/d[|v|, angle]
    w = dl_dz1 + np.concatenate([c_volt[:, family.D], c_volt[:, nb + family.nonR]], axis=1)
    K = trace.solve(w, transpose=True)
    out = dl_dz.copy()
    out[:, :nG] -= K[:, family.p_row_of_G]
    out[:, nG:] += c_volt[:, family.gen_bus] - np.einsum("br,brk->bk", K, trace.J1b)
    return out
