"""Problem families: the contract the DC3 engine relies on, and the QP/sine tasks.

A family fixes the constraint data once; individual instances differ only in
the input ``x`` (one row per instance).  All tape-aware methods take ``x`` as a
plain array and ``Y``/``Z`` as :class:`~dc3.autodiff.Tensor` batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import autodiff as ad
from .errors import DimensionError, FormatError, GenerationError
from .serialization import read_arrays, read_manifest, write_arrays, write_manifest

FORMAT_VERSION = 1
COND_LIMIT = 1e8
KINDS = ("quadratic", "sine")


class ProblemFamily:
    """Interface shared by the QP, sine and ACOPF tasks.

    Subclasses set ``n`` (decision dim), ``d`` (input dim), ``n_eq``,
    ``n_ineq`` and ``m = n - n_eq``, and implement the methods below.
    """

    task = "abstract"
    partial_head = "linear"
    n: int
    d: int
    n_eq: int
    n_ineq: int

    @property
    def m(self) -> int:
        return self.n - self.n_eq

    # -- tape-level pieces -------------------------------------------------
    def objective(self, x, Y: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def eq_resid(self, x, Y: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def ineq_resid(self, x, Y: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def ineq_grad(self, x, Y: ad.Tensor) -> ad.Tensor:
        """Gradient in y of ``||relu(g(y))||^2``, itself differentiable."""
        raise NotImplementedError

    def eq_grad(self, x, Y: ad.Tensor) -> ad.Tensor:
        """Gradient in y of ``||h(y)||^2``."""
        raise NotImplementedError

    def decode(self, raw: ad.Tensor) -> ad.Tensor:
        """Map the network's partial head to partial variables z."""
        return raw

    def complete(self, x, Z: ad.Tensor):
        """Differentiable completion: returns ``(Y, cache)``."""
        raise NotImplementedError

    def partial_grad(self, cache, dY: ad.Tensor) -> ad.Tensor:
        """Pull a y-gradient back to z through the completion (Jacobian frozen at ``cache``)."""
        raise NotImplementedError

    def partial_of(self, Y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_inputs(self, count: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    # -- plain-array conveniences -------------------------------------------
    def objective_np(self, x, Y) -> np.ndarray:
        return self.objective(x, ad.constant(Y)).data

    def eq_resid_np(self, x, Y) -> np.ndarray:
        return self.eq_resid(x, ad.constant(Y)).data

    def ineq_resid_np(self, x, Y) -> np.ndarray:
        return self.ineq_resid(x, ad.constant(Y)).data


class LinearInequalities:
    """Mixin for constraints of the form ``G y <= h`` with fixed G, h."""

    G: np.ndarray
    h_rhs: np.ndarray

    def ineq_resid(self, x, Y):
        return ad.matmul(Y, self.G.T) - self.h_rhs

    def ineq_grad(self, x, Y):
        return ad.scale(ad.matmul(ad.relu(self.ineq_resid(x, Y)), self.G), 2.0)


@dataclass
class CompletionCache:
    x: np.ndarray
    z: np.ndarray
    phi: np.ndarray
    lu: tuple
    part: np.ndarray
    dep: np.ndarray
    converged: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.converged is None:
            self.converged = np.ones(self.z.shape[0], dtype=bool)


class QpFamily(LinearInequalities, ProblemFamily):
    """``min 1/2 y'Qy + p'y`` (or ``p' sin y``) s.t. ``Ay = x``, ``Gy <= h``.

    ``Q`` is diagonal and stored as the vector ``q``.  ``h_rhs`` is chosen so
    that ``y = pinv(A) x`` is feasible for every ``x`` in ``[-1, 1]^n_eq``.
    """

    task = "qp"

    def __init__(self, q, p, A, G, h_rhs, A_pinv, part, dep, kind="quadratic", seed=None):
        if kind not in KINDS:
            raise GenerationError(f"unknown objective kind {kind!r}")
        self.q = np.asarray(q, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        self.A = np.asarray(A, dtype=np.float64)
        self.G = np.asarray(G, dtype=np.float64)
        self.h_rhs = np.asarray(h_rhs, dtype=np.float64)
        self.A_pinv = np.asarray(A_pinv, dtype=np.float64)
        self.part = np.asarray(part, dtype=np.intp)
        self.dep = np.asarray(dep, dtype=np.intp)
        self.kind = kind
        self.seed = seed
        self.n_eq, self.n = self.A.shape
        self.n_ineq = self.G.shape[0]
        self.d = self.n_eq
        self.A_part = self.A[:, self.part]
        self.A_dep = self.A[:, self.dep]
        self.lu = sla.lu_factor(self.A_dep) if self.n_eq else None

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q)

    @property
    def perm(self) -> np.ndarray:
        return np.concatenate([self.part, self.dep])

    def __repr__(self):
        return f"QpFamily(kind={self.kind}, n={self.n}, n_eq={self.n_eq}, n_ineq={self.n_ineq})"

    # -- objective and residuals --------------------------------------------
    def objective(self, x, Y):
        quad = ad.mul(ad.square(Y), 0.5 * self.q)
        if self.kind == "quadratic":
            lin = ad.mul(Y, self.p)
        else:
            lin = ad.mul(ad.sin(Y), self.p)
        return ad.sum(quad + lin, axis=1)

    def eq_resid(self, x, Y):
        return ad.matmul(Y, self.A.T) - np.asarray(x, dtype=np.float64)

    def eq_grad(self, x, Y):
        return ad.scale(ad.matmul(self.eq_resid(x, Y), self.A), 2.0)

    def objective_grad_np(self, Y):
        if self.kind == "quadratic":
            return Y * self.q + self.p
        return Y * self.q + self.p * np.cos(Y)

    def objective_hess_diag_np(self, Y):
        if self.kind == "quadratic":
            return np.broadcast_to(self.q, Y.shape).copy()
        return self.q - self.p * np.sin(Y)

    # -- completion -----------------------------------------------------------
    def complete_linear(self, x, Z):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.m or x.shape[1] != self.n_eq or x.shape[0] != Z.shape[0]:
            raise DimensionError(f"complete: x {x.shape} / z {Z.shape} do not match family dims")
        rhs = x - Z @ self.A_part.T
        phi = sla.lu_solve(self.lu, rhs.T).T if self.n_eq else rhs
        Y = np.empty((Z.shape[0], self.n))
        Y[:, self.part] = Z
        Y[:, self.dep] = phi
        return Y, CompletionCache(x, Z, phi, self.lu, self.part, self.dep)

    def complete_backward(self, cache, dl_dz, dl_dphi):
        """``dl/dz = dl/dz_direct - (dl/dphi) A_dep^{-1} A_part`` without forming dphi/dz."""
        if not self.n_eq:
            return np.array(dl_dz, dtype=np.float64)
        w = sla.lu_solve(self.lu, np.atleast_2d(dl_dphi).T, trans=1).T
        return dl_dz - w @ self.A_part

    def complete_jvp(self, cache, dz):
        """Tangent map ``dy = (dy/dz) dz``."""
        dz = np.atleast_2d(dz)
        dy = np.empty((dz.shape[0], self.n))
        dy[:, self.part] = dz
        if self.n_eq:
            dy[:, self.dep] = -sla.lu_solve(self.lu, (dz @ self.A_part.T).T).T
        return dy

    def completion_matrix(self) -> np.ndarray:
        """Dense ``dy/dz`` (n x m); only for reference solvers and tests."""
        return self.complete_jvp(None, np.eye(self.m)).T

    def complete(self, x, Z):
        Yv, cache = self.complete_linear(x, Z.data)
        part, dep = self.part, self.dep

        def vjp(g):
            return (self.complete_backward(cache, g[:, part], g[:, dep]),)

        return ad.custom("complete_linear", (Z,), Yv, vjp), cache

    def partial_grad(self, cache, dY):
        value = self.complete_backward(cache, dY.data[:, self.part], dY.data[:, self.dep])
        return ad.custom("completion_vjp", (dY,), value,
                         lambda a: (self.complete_jvp(cache, a),))

    def partial_of(self, Y):
        return np.asarray(Y)[:, self.part]

    def feasible_point(self, x):
        return np.atleast_2d(x) @ self.A_pinv.T

    def sample_inputs(self, count, rng):
        return rng.uniform(-1.0, 1.0, size=(count, self.n_eq))


def _choose_split(A: np.ndarray):
    n_eq, n = A.shape
    if n_eq == 0:
        return np.arange(n), np.arange(0)
    dep = np.arange(n - n_eq, n)
    if np.linalg.cond(A[:, dep]) < COND_LIMIT:
        return np.arange(n - n_eq), dep
    _, _, piv = sla.qr(A, pivoting=True, mode="economic")
    dep = np.sort(piv[:n_eq])
    if np.linalg.cond(A[:, dep]) >= COND_LIMIT:
        raise GenerationError("no well-conditioned dependent column block; resample the family")
    return np.setdiff1d(np.arange(n), dep), dep


def generate_qp_family(seed: int, n: int, n_eq: int, n_ineq: int, kind: str = "quadratic") -> QpFamily:
    if not 0 < n_eq <= n or n_ineq < 0:
        raise GenerationError(f"invalid dims n={n}, n_eq={n_eq}, n_ineq={n_ineq}")
    if kind not in KINDS:
        raise GenerationError(f"unknown objective kind {kind!r}")
    rng = np.random.default_rng(seed)
    q = rng.uniform(0.0, 1.0, size=n)
    p = rng.uniform(0.0, 1.0, size=n)
    A = rng.standard_normal((n_eq, n))
    G = rng.standard_normal((n_ineq, n))
    A_pinv = np.linalg.pinv(A)
    h_rhs = np.abs(G @ A_pinv).sum(axis=1)
    part, dep = _choose_split(A)
    return QpFamily(q, p, A, G, h_rhs, A_pinv, part, dep, kind=kind, seed=seed)


# ---------------------------------------------------------------- instance sets

@dataclass
class InstanceSet:
    X: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    labels: np.ndarray | None = None
    seed: int | None = None

    def __len__(self):
        return self.X.shape[0]

    def split(self, name: str):
        idx = getattr(self, name)
        return self.X[idx], (None if self.labels is None else self.labels[idx])


def split_sizes(count: int) -> tuple[int, int, int]:
    """10:1:1 train/val/test split."""
    n_val = n_test = int(round(count / 12))
    return count - n_val - n_test, n_val, n_test


def split_indices(count: int):
    n_train, n_val, _ = split_sizes(count)
    idx = np.arange(count)
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


def sample_instances(family: ProblemFamily, count: int, seed: int) -> InstanceSet:
    if count < 1:
        raise GenerationError("count must be at least 1")
    rng = np.random.default_rng(seed)
    X = family.sample_inputs(count, rng)
    train, val, test = split_indices(count)
    return InstanceSet(X, train, val, test, seed=seed)


# ---------------------------------------------------------------- persistence

def save_family(directory, family: QpFamily) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_manifest(directory / "family.txt", {
        "format_version": FORMAT_VERSION, "task": family.task, "kind": family.kind,
        "n": family.n, "n_eq": family.n_eq, "n_ineq": family.n_ineq,
        "seed": "" if family.seed is None else family.seed,
    })
    write_arrays(directory / "family.bin", {
        "q": family.q, "p": family.p, "A": family.A, "G": family.G, "h_rhs": family.h_rhs,
        "A_pinv": family.A_pinv, "part": family.part, "dep": family.dep,
    }, kind="qp_family")


def load_family(directory) -> QpFamily:
    directory = Path(directory)
    meta = read_manifest(directory / "family.txt")
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{directory}: unsupported family format {meta.get('format_version')}")
    arr = read_arrays(directory / "family.bin", kind="qp_family")
    n, n_eq, n_ineq = int(meta["n"]), int(meta["n_eq"]), int(meta["n_ineq"])
    expect = {"q": (n,), "p": (n,), "A": (n_eq, n), "G": (n_ineq, n), "h_rhs": (n_ineq,),
              "A_pinv": (n, n_eq), "part": (n - n_eq,), "dep": (n_eq,)}
    for key, shape in expect.items():
        if key not in arr or arr[key].shape != shape:
            raise FormatError(f"{directory}: array {key} missing or not of shape {shape}")
    seed = int(meta["seed"]) if meta.get("seed") else None
    return QpFamily(arr["q"], arr["p"], arr["A"], arr["G"], arr["h_rhs"], arr["A_pinv"],
                    arr["part"].astype(np.intp), arr["dep"].astype(np.intp),
                    kind=meta["kind"], seed=seed)


def save_instances(directory, instances: InstanceSet, name: str = "dataset") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"X": instances.X, "train": instances.train, "val": instances.val, "test": instances.test}
    if instances.labels is not None:
        arrays["labels"] = instances.labels
    write_manifest(directory / f"{name}.txt", {
        "format_version": FORMAT_VERSION, "count": len(instances), "d": instances.X.shape[1],
        "seed": "" if instances.seed is None else instances.seed,
        "splits": (len(instances.train), len(instances.val), len(instances.test)),
        "labels": int(instances.labels is not None),
    })
    write_arrays(directory / f"{name}.bin", arrays, kind="instances")


def load_instances(directory, name: str = "dataset") -> InstanceSet:
    directory = Path(directory)
    meta = read_manifest(directory / f"{name}.txt")
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{directory}: unsupported dataset format {meta.get('format_version')}")
    arr = read_arrays(directory / f"{name}.bin", kind="instances")
    count, d = int(meta["count"]), int(meta["d"])
    if arr["X"].shape != (count, d):
        raise FormatError(f"{directory}: X has shape {arr['X'].shape}, manifest says {(count, d)}")
    sizes = tuple(int(s) for s in meta["splits"].split(","))
    got = tuple(arr[k].size for k in ("train", "val", "test"))
    if sizes != got:
        raise FormatError(f"{directory}: split sizes {got} disagree with manifest {sizes}")
    labels = arr.get("labels")
    if int(meta["labels"]) != (labels is not None):
        raise FormatError(f"{directory}: label presence disagrees with manifest")
    seed = int(meta["seed"]) if meta.get("seed") else None
    return InstanceSet(arr["X"], arr["train"].astype(np.intp), arr["val"].astype(np.intp),
                       arr["test"].astype(np.intp), labels=labels, seed=seed)
