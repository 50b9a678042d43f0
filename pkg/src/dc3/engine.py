"""Soft loss, completion, unrolled correction, and the train/test loops.

Every method in the comparison (DC3, its ablations, and the NN / Eq.NN
baselines) is a :class:`Variant`; they differ only in whether the network
outputs partial or full variables, whether correction runs at train and/or
test time, and which loss is minimized.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .errors import ContractError, CorrectionError, NumericError, TrainingError
from .nn import AdamState, MlpParams, adam_step, init_params, mlp_forward
from .problems import InstanceSet, ProblemFamily

log = logging.getLogger(__name__)


class Variant(str, Enum):
    DC3 = "DC3"
    DC3_NoCompletion = "DC3_NoCompletion"
    DC3_NoCorrTrain = "DC3_NoCorrTrain"
    DC3_NoCorrTrainTest = "DC3_NoCorrTrainTest"
    DC3_NoSoftLoss = "DC3_NoSoftLoss"
    NN = "NN"
    NN_CorrTest = "NN_CorrTest"
    EqNN = "EqNN"
    EqNN_CorrTest = "EqNN_CorrTest"

    @property
    def uses_completion(self) -> bool:
        return self not in (Variant.DC3_NoCompletion, Variant.NN, Variant.NN_CorrTest)

    @property
    def correct_train(self) -> bool:
        return self in (Variant.DC3, Variant.DC3_NoCompletion, Variant.DC3_NoSoftLoss)

    @property
    def correct_test(self) -> bool:
        return self not in (Variant.DC3_NoCorrTrainTest, Variant.NN, Variant.EqNN)

    @property
    def loss(self) -> str:
        if self is Variant.DC3_NoSoftLoss:
            return "objective"
        if self in (Variant.EqNN, Variant.EqNN_CorrTest):
            return "supervised"
        return "soft"

    @property
    def needs_labels(self) -> bool:
        return self.loss == "supervised"

    @property
    def training_key(self) -> str:
        """Variants with equal keys train identically and can share parameters."""
        shared = {Variant.DC3_NoCorrTrainTest: Variant.DC3_NoCorrTrain,
                  Variant.NN_CorrTest: Variant.NN,
                  Variant.EqNN_CorrTest: Variant.EqNN}
        return shared.get(self, self).value

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    Variant.DC3: "DC3",
    Variant.DC3_NoCompletion: "DC3, ≠",
    Variant.DC3_NoCorrTrain: "DC3, ≰ train",
    Variant.DC3_NoCorrTrainTest: "DC3, ≰ train/test",
    Variant.DC3_NoSoftLoss: "DC3, no soft loss",
    Variant.NN: "NN",
    Variant.NN_CorrTest: "NN, ≤ test",
    Variant.EqNN: "Eq.NN",
    Variant.EqNN_CorrTest: "Eq.NN, ≤ test",
}


@dataclass
class Dc3Config:
    lambda_g: float = 5.0
    lambda_h: float = 5.0
    corr_lr: float = 1e-7
    corr_momentum: float = 0.5
    t_train: int = 10
    t_test: int = 10
    corr_tol: float = 1e-4
    epochs: int = 1000
    batch_size: int = 200
    lr: float = 1e-4
    variant: str = Variant.DC3.value
    val_every: int = 1
    max_drop_frac: float = 0.05

    def __post_init__(self):
        if self.lambda_g < 0 or self.lambda_h < 0:
            raise ContractError("soft-loss weights must be non-negative")
        if self.corr_lr <= 0:
            raise ContractError("correction learning rate must be positive")
        if self.t_train < 0 or self.t_test < 0:
            raise ContractError("correction step counts must be non-negative")
        Variant(self.variant)

    def to_dict(self):
        return asdict(self)


def default_config(task: str, variant: Variant | str) -> Dc3Config:
    """Tuned hyperparameters per task and method."""
    variant = Variant(variant)
    nn_like = variant in (Variant.DC3_NoCompletion, Variant.NN, Variant.NN_CorrTest)
    lam = 50.0 if nn_like else 5.0
    if task in ("qp", "nonconvex"):
        return Dc3Config(lambda_g=lam, lambda_h=lam, corr_lr=1e-7, t_train=10, t_test=10,
                         lr=1e-4, variant=variant.value)
    if task == "acopf":
        if variant in (Variant.DC3, Variant.DC3_NoCorrTrain, Variant.DC3_NoCorrTrainTest,
                       Variant.DC3_NoSoftLoss):
            corr_lr = 1e-4
        else:
            corr_lr = 1e-5
        return Dc3Config(lambda_g=lam, lambda_h=lam, corr_lr=corr_lr, t_train=5, t_test=5,
                         lr=1e-3, variant=variant.value)
    raise ContractError(f"unknown task {task!r}")


# ---------------------------------------------------------------- losses

def soft_loss(family: ProblemFamily, x, Y, lambda_g: float, lambda_h: float) -> ad.Tensor:
    """Per-instance ``f(y) + lambda_g ||relu(g(y))||^2 + lambda_h ||h(y)||^2``."""
    Y = ad.constant(Y)
    loss = family.objective(x, Y)
    if lambda_g:
        loss = loss + ad.scale(ad.sq_hinge(family.ineq_resid(x, Y)), lambda_g)
    if lambda_h:
        loss = loss + ad.scale(ad.sum(ad.square(family.eq_resid(x, Y)), axis=1), lambda_h)
    return loss


# ---------------------------------------------------------------- completion

def complete_linear(family, x, Z):
    """Solve the equality block for the dependent variables; returns ``(Y, cache)``."""
    return family.complete_linear(x, Z)


def complete_backward(family, cache, dl_dz, dl_dphi):
    return family.complete_backward(cache, dl_dz, dl_dphi)


# ---------------------------------------------------------------- correction

@dataclass
class CorrectionResult:
    Y: ad.Tensor
    Z: ad.Tensor | None
    cache: object
    steps: int
    alive: np.ndarray
    violations: list = field(default_factory=list)


def _violation(family, x, Y, mode, alive):
    g = family.ineq_resid(x, ad.constant(Y.data)).data
    v = np.maximum(g, 0.0).max(axis=1) if g.shape[1] else np.zeros(g.shape[0])
    if mode == "full":
        h = family.eq_resid(x, ad.constant(Y.data)).data
        v = np.maximum(v, np.abs(h).max(axis=1))
    v = v[alive]
    return float(v.max()) if v.size else 0.0


def correct(family: ProblemFamily, x, Y, *, mode: str, lr: float, momentum: float,
            t_max: int, tol: float, Z=None, cache=None) -> CorrectionResult:
    """Unrolled gradient correction of inequality (and, in full mode, equality) violations.

    Partial mode moves the partial variables ``z`` along the negative gradient
    of ``||relu(g)||^2`` pulled back through the completion and re-completes,
    so every iterate stays on the equality manifold.  Full mode descends
    ``||relu(g)||^2 + ||h||^2`` over all of ``y``.  Iteration stops after
    ``t_max`` steps or once the largest violation in the batch is below ``tol``.
    All steps are recorded on the tape when the inputs are taped.
    """
    if mode not in ("partial", "full"):
        raise ContractError(f"unknown correction mode {mode!r}")
    if mode == "partial" and (Z is None or cache is None):
        raise ContractError("partial correction needs the partial variables and completion cache")
    Y = ad.constant(Y)
    alive = np.asarray(getattr(cache, "converged", np.ones(Y.shape[0], dtype=bool))).copy()
    prev = None
    history = []
    steps = 0
    for step in range(t_max):
        viol = _violation(family, x, Y, mode, alive)
        history.append(viol)
        if viol < tol:
            break
        try:
            if mode == "partial":
                dZ = family.partial_grad(cache, family.ineq_grad(x, Y))
                move = ad.scale(dZ, lr) if prev is None else ad.scale(dZ, lr) + ad.scale(prev, momentum)
                Z = Z - move
                Y, cache = family.complete(x, Z)
                alive &= cache.converged
            else:
                dY = family.ineq_grad(x, Y) + family.eq_grad(x, Y)
                move = ad.scale(dY, lr) if prev is None else ad.scale(dY, lr) + ad.scale(prev, momentum)
                Y = Y - move
        except NumericError as exc:
            raise CorrectionError(f"non-finite iterate at correction step {step}: {exc}", step=step) from exc
        prev = move
        steps = step + 1
    else:
        history.append(_violation(family, x, Y, mode, alive))
    return CorrectionResult(Y, Z, cache, steps, alive, history)


# ---------------------------------------------------------------- forward pipeline

@dataclass
class Prediction:
    Y: ad.Tensor
    Z: ad.Tensor | None
    alive: np.ndarray
    steps: int


def output_dim(variant: Variant, family: ProblemFamily) -> int:
    return family.m if variant.uses_completion else family.n


def build_network(variant: Variant, family: ProblemFamily, seed: int) -> MlpParams:
    head = family.partial_head if variant.uses_completion else "linear"
    return init_params(seed, family.d, output_dim(variant, family), head=head)


def predict(params: MlpParams, variant: Variant, family: ProblemFamily, x, config: Dc3Config,
            phase: str = "test", rng=None, tape=None) -> Prediction:
    """Network -> (completion) -> (correction) for one batch."""
    variant = Variant(variant)
    mode = "train" if phase == "train" else "eval"
    out = mlp_forward(params, x, mode=mode, rng=rng, tape=tape)
    do_correct = variant.correct_train if phase == "train" else variant.correct_test
    t_max = config.t_train if phase == "train" else config.t_test
    kwargs = dict(lr=config.corr_lr, momentum=config.corr_momentum, t_max=t_max, tol=config.corr_tol)
    if variant.uses_completion:
        Z = family.decode(out)
        Y, cache = family.complete(x, Z)
        alive = cache.converged.copy()
        steps = 0
        if do_correct and t_max > 0:
            res = correct(family, x, Y, mode="partial", Z=Z, cache=cache, **kwargs)
            Y, Z, alive, steps = res.Y, res.Z, alive & res.alive, res.steps
        return Prediction(Y, Z, alive, steps)
    Y = out
    alive = np.ones(Y.shape[0], dtype=bool)
    steps = 0
    if do_correct and t_max > 0:
        res = correct(family, x, Y, mode="full", **kwargs)
        Y, steps = res.Y, res.steps
    return Prediction(Y, None, alive, steps)


def _rows(t: ad.Tensor, alive: np.ndarray) -> ad.Tensor:
    return t if alive.all() else ad.take(t, np.flatnonzero(alive), axis=0)


def training_loss(params, variant, family, x, config, rng, tape, labels=None):
    """Scalar loss on one batch plus the number of dropped (unconverged) rows."""
    variant = Variant(variant)
    if variant.loss == "supervised":
        if labels is None:
            raise ContractError(f"{variant.value} needs labeled data")
        labels = np.asarray(labels)
        if labels.shape[1] == family.n and family.n != family.m:
            labels = family.partial_of(labels)  # full solutions -> partial variables
        out = mlp_forward(params, x, mode="train", rng=rng, tape=tape)
        Z = family.decode(out)
        return ad.mean(ad.sum(ad.square(Z - labels), axis=1)), 0
    pred = predict(params, variant, family, x, config, phase="train", rng=rng, tape=tape)
    keep = np.flatnonzero(pred.alive)
    if keep.size == 0:
        raise TrainingError("every instance in the batch failed to complete")
    x_keep = x[keep]
    Y = _rows(pred.Y, pred.alive)
    if variant.loss == "objective":
        per = family.objective(x_keep, Y)
    else:
        per = soft_loss(family, x_keep, Y, config.lambda_g, config.lambda_h)
    return ad.mean(per), int(x.shape[0] - keep.size)


# ---------------------------------------------------------------- train / evaluate

def train(variant, family: ProblemFamily, data: InstanceSet, config: Dc3Config, seed: int,
          on_epoch=None):
    """Fit the network for ``variant``; returns ``(params, history)``.

    ``history`` holds one dict per epoch with the mean training loss and, every
    ``config.val_every`` epochs, validation objective and violations.
    """
    variant = Variant(variant)
    X_train, y_train = data.split("train")
    X_val, _ = data.split("val")
    if variant.needs_labels and y_train is None:
        raise ContractError(f"{variant.value} needs labels in the training data")
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(seed).spawn(3)
    params = build_network(variant, family, int(init_seq.generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq)
    state = AdamState(lr=config.lr)
    history = []
    seen = dropped = 0
    n = X_train.shape[0]
    bs = min(config.batch_size, n)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            tape = ad.Tape()
            try:
                loss, n_drop = training_loss(params, variant, family, X_train[idx], config, drop_rng, tape,
                                             None if y_train is None else y_train[idx])
                grads = ad.backward(tape, loss)
                adam_step(params, {name: grads[t] for name, t in tape.leaves.items()}, state)
            except (NumericError, CorrectionError) as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
            finally:
                tape.clear()
            seen += idx.size
            dropped += n_drop
            total += float(loss.data)
            batches += 1
        if seen and dropped / seen > config.max_drop_frac:
            raise TrainingError(f"{dropped}/{seen} instances failed to complete by epoch {epoch}",
                                epoch=epoch)
        row = {"epoch": epoch, "train_loss": total / max(batches, 1)}
        if X_val.shape[0] and config.val_every and (epoch + 1) % config.val_every == 0:
            res = evaluate(params, variant, family, X_val, config)
            row.update(val_obj=res.summary["obj"], val_max_eq=res.summary["max_eq"],
                       val_max_ineq=res.summary["max_ineq"])
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return params, history


METRICS = ("obj", "max_eq", "mean_eq", "max_ineq", "mean_ineq", "time")


@dataclass
class EvalResult:
    """Per-instance test-path results and their summary.

    ``max_*`` / ``mean_*`` follow the table convention: per-instance max or
    mean violation, averaged over instances.  ``worst_*`` is the max over all
    instances.  Only instances whose completion converged enter the stats.
    """

    Y: np.ndarray
    objective: np.ndarray
    eq_max: np.ndarray
    eq_mean: np.ndarray
    ineq_max: np.ndarray
    ineq_mean: np.ndarray
    converged: np.ndarray
    time: float
    gap: np.ndarray | None = None
    summary: dict = field(default_factory=dict)


def evaluate(params, variant, family: ProblemFamily, X, config: Dc3Config, f_ref=None) -> EvalResult:
    """Algorithm TEST path on ``X`` with metrics and optional per-instance gaps."""
    variant = Variant(variant)
    X = np.asarray(X, dtype=np.float64)
    t0 = time.perf_counter()
    pred = predict(params, variant, family, X, config, phase="test")
    elapsed = time.perf_counter() - t0
    return summarize(family, X, pred.Y.data, pred.alive, elapsed, f_ref)


def summarize(family, X, Y, alive=None, elapsed=0.0, f_ref=None) -> EvalResult:
    Y = np.asarray(Y)
    if alive is None:
        alive = np.ones(Y.shape[0], dtype=bool)
    obj = family.objective_np(X, Y)
    h = np.abs(family.eq_resid_np(X, Y))
    g = np.maximum(family.ineq_resid_np(X, Y), 0.0)
    res = EvalResult(Y, obj, *_row_stats(h), *_row_stats(g), alive.copy(), elapsed)
    ok = alive
    count = max(int(ok.sum()), 1)
    s = {
        "obj": float(obj[ok].mean()) if ok.any() else float("nan"),
        "max_eq": float(res.eq_max[ok].mean()) if ok.any() else float("nan"),
        "mean_eq": float(res.eq_mean[ok].mean()) if ok.any() else float("nan"),
        "max_ineq": float(res.ineq_max[ok].mean()) if ok.any() else float("nan"),
        "mean_ineq": float(res.ineq_mean[ok].mean()) if ok.any() else float("nan"),
        "time": elapsed,
        "worst_eq": float(res.eq_max[ok].max()) if ok.any() else float("nan"),
        "worst_ineq": float(res.ineq_max[ok].max()) if ok.any() else float("nan"),
        "converged": float(ok.mean()),
        "time_per_instance": elapsed / max(Y.shape[0], 1),
    }
    if f_ref is not None:
        f_ref = np.asarray(f_ref, dtype=np.float64)
        res.gap = (obj - f_ref) / np.abs(f_ref)
        s["gap"] = float(res.gap[ok].sum() / count)
    res.summary = s
    return res


def _row_stats(v):
    if v.shape[1] == 0:
        return np.zeros(v.shape[0]), np.zeros(v.shape[0])
    return v.max(axis=1), v.mean(axis=1)


def with_overrides(config: Dc3Config, **kw) -> Dc3Config:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
