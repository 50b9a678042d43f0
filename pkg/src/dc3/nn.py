"""Fixed MLP used by every method: two hidden layers, batch norm, ReLU, dropout.

Layer order per hidden layer is Linear -> BatchNorm -> ReLU -> Dropout, then a
final Linear head that is either linear or squashed by a sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError, NumericError
from .serialization import read_arrays, write_arrays

HIDDEN = (200, 200)
DROPOUT_RATE = 0.2
HEADS = ("linear", "sigmoid")


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray]
    bn_shift: list[np.ndarray]
    bn_mean: list[np.ndarray]
    bn_var: list[np.ndarray]
    head: str = "linear"
    dropout: float = DROPOUT_RATE

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def m(self) -> int:
        return self.weights[-1].shape[1]

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        for i, (g, s) in enumerate(zip(self.bn_scale, self.bn_shift)):
            out[f"bn{i}_scale"] = g
            out[f"bn{i}_shift"] = s
        return out

    def copy(self) -> "MlpParams":
        dup = lambda xs: [x.copy() for x in xs]  # noqa: E731
        return MlpParams(dup(self.weights), dup(self.biases), dup(self.bn_scale),
                         dup(self.bn_shift), dup(self.bn_mean), dup(self.bn_var),
                         self.head, self.dropout)


def init_params(seed: int, d: int, m: int, hidden=HIDDEN, head: str = "linear",
                dropout: float = DROPOUT_RATE) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity batch norm."""
    if d < 1 or m < 1:
        raise ContractError(f"network dims must be positive, got d={d}, m={m}")
    if head not in HEADS:
        raise ContractError(f"unknown head {head!r}")
    rng = np.random.default_rng(seed)
    sizes = [d, *hidden, m]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(
        weights, biases,
        bn_scale=[np.ones(h) for h in hidden],
        bn_shift=[np.zeros(h) for h in hidden],
        bn_mean=[np.zeros(h) for h in hidden],
        bn_var=[np.ones(h) for h in hidden],
        head=head, dropout=dropout,
    )


def mlp_forward(params: MlpParams, X, mode: str = "eval", rng=None, tape: ad.Tape | None = None) -> ad.Tensor:
    """Run the network on a batch.

    With a ``tape`` the trainable parameters become named leaves on it, so a
    later :func:`autodiff.backward` yields their gradients.  Train mode uses
    batch statistics (updating the running ones) and samples dropout masks
    from ``rng``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise DimensionError(f"mlp_forward: expected input (batch, {params.d}), got {X.shape}")
    training = mode == "train"
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    if training:
        if X.shape[0] < 2:
            raise ContractError("train mode needs a batch of at least 2 rows")
        if rng is None:
            raise ContractError("train mode needs an rng for dropout masks")

    def p(name, value):
        return tape.leaf(value, name) if tape is not None else ad.constant(value)

    h = ad.constant(X)
    n_hidden = len(params.bn_scale)
    for i in range(n_hidden):
        h = h @ p(f"w{i}", params.weights[i]) + p(f"b{i}", params.biases[i])
        h = ad.batch_norm(h, p(f"bn{i}_scale", params.bn_scale[i]), p(f"bn{i}_shift", params.bn_shift[i]),
                          params.bn_mean[i], params.bn_var[i], training)
        h = ad.relu(h)
        if training and params.dropout > 0:
            mask = rng.random(h.shape) >= params.dropout
            h = ad.dropout(h, mask, params.dropout)
    out = h @ p(f"w{n_hidden}", params.weights[-1]) + p(f"b{n_hidden}", params.biases[-1])
    if params.head == "sigmoid":
        out = ad.sigmoid(out)
    return out


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: MlpParams, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    named = params.trainable()
    for name, g in grads.items():
        if name not in named:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != named[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {named[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        named[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_checkpoint(path, params: MlpParams) -> None:
    arrays = {"meta": np.array([len(params.bn_scale), HEADS.index(params.head), params.dropout])}
    arrays.update(params.trainable())
    for i, (mu, var) in enumerate(zip(params.bn_mean, params.bn_var)):
        arrays[f"bn{i}_mean"] = mu
        arrays[f"bn{i}_var"] = var
    write_arrays(path, arrays, kind="checkpoint")


def load_checkpoint(path) -> MlpParams:
    arrays = read_arrays(path, kind="checkpoint")
    try:
        n_hidden, head, rate = arrays["meta"]
        n_hidden = int(n_hidden)
        n_layers = n_hidden + 1
        return MlpParams(
            weights=[arrays[f"w{i}"] for i in range(n_layers)],
            biases=[arrays[f"b{i}"] for i in range(n_layers)],
            bn_scale=[arrays[f"bn{i}_scale"] for i in range(n_hidden)],
            bn_shift=[arrays[f"bn{i}_shift"] for i in range(n_hidden)],
            bn_mean=[arrays[f"bn{i}_mean"] for i in range(n_hidden)],
            bn_var=[arrays[f"bn{i}_var"] for i in range(n_hidden)],
            head=HEADS[int(head)], dropout=float(rate),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint missing tensor {exc}") from None
