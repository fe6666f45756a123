"""Feed-forward CV surrogate with a hand-written reverse-mode pass.

The network is a fixed stack::

    x -> wrap (PBC) -> [Linear -> ReLU -> Dropout] * H -> Linear -> output activation

``forward`` records a :class:`ForwardTape`; ``backward_weights`` sweeps it
once for parameter gradients and ``input_jacobian`` sweeps it once for the
gradient of the scalar output with respect to the raw input coordinates.
Weights are stored as ``(fan_in, fan_out)`` so a layer computes ``a @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cv import CVFunction, as_coords
from .geometry import SimBox, seam_mask, wrap_coordinate

HIDDEN_WIDTHS = (64, 128, 64, 32)
DROPOUT_RATE = 0.1
OUTPUT_ACTIVATIONS = ("identity", "abs")


class StaleTapeError(RuntimeError):
    """The tape was recorded before the model parameters last changed."""


@dataclass
class MLP:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    box: SimBox = field(default_factory=SimBox)
    output_activation: str = "identity"
    dropout: float = DROPOUT_RATE
    # bumped on every parameter update so old tapes can be rejected
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}, got {self.output_activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: fan-in {w.shape[0]} does not chain from {self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must produce a single value")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"layers[{i}].W", f"layers[{i}].b"]
        return names

    def copy(self) -> "MLP":
        return MLP(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            box=self.box,
            output_activation=self.output_activation,
            dropout=self.dropout,
        )

    def load_parameters(self, params: list[np.ndarray]) -> None:
        for dst, src in zip(self.parameters(), params):
            dst[...] = src
        self.version += 1


@dataclass
class ForwardTape:
    inputs: np.ndarray  # wrapped coordinates, (n, D)
    pre: list[np.ndarray]  # pre-activations of every linear layer; last is the raw output
    acts: list[np.ndarray]  # input to each linear layer (after ReLU and dropout)
    masks: list[np.ndarray] | None
    mode: str
    version: int
    single: bool

    def __len__(self):
        return len(self.pre)


def init_parameters(
    dims,
    seed: int,
    box: SimBox | None = None,
    output_activation: str = "identity",
    dropout: float = DROPOUT_RATE,
) -> MLP:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1 or dims[-1] != 1:
        raise ValueError(f"invalid layer dimensions {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases, box=box or SimBox(), output_activation=output_activation, dropout=dropout)


def build_surrogate(input_dim: int, seed: int, *, cv_name: str = "", box: SimBox | None = None,
                    hidden=HIDDEN_WIDTHS, dropout: float = DROPOUT_RATE) -> MLP:
    """The default architecture; distances get an ``|y|`` output activation."""
    act = "abs" if cv_name == "distance" else "identity"
    return init_parameters([input_dim, *hidden, 1], seed, box=box, output_activation=act, dropout=dropout)


def forward(model: MLP, x, mode: str = "eval", rng: np.random.Generator | None = None):
    """Evaluate the network and record the tape.

    ``x`` is ``(D,)`` or ``(n, D)``. In ``"train"`` mode dropout masks are
    drawn from ``rng`` (inverted dropout, survivors scaled by ``1/(1-p)``);
    ``"eval"`` mode is mask-free.

    Returns ``(y, tape)`` with ``y`` a float for a single input, else ``(n,)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != model.input_dim:
        raise ValueError(f"expected input of width {model.input_dim}, got shape {x.shape}")
    a = wrap_coordinate(x2, model.box)
    use_dropout = mode == "train" and model.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    keep = 1.0 - model.dropout

    inputs = a
    pre, acts, masks = [], [], [] if use_dropout else None
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        acts.append(a)
        z = a @ w + b
        pre.append(z)
        if i == last:
            break
        a = np.maximum(z, 0.0)
        if use_dropout:
            m = (rng.random(a.shape) < keep) / keep
            masks.append(m)
            a = a * m
    out = pre[-1][:, 0]
    y = np.abs(out) if model.output_activation == "abs" else out
    tape = ForwardTape(inputs, pre, acts, masks, mode, model.version, single)
    return (float(y[0]) if single else y), tape


def _output_slope(model: MLP, tape: ForwardTape) -> np.ndarray:
    out = tape.pre[-1]
    if model.output_activation == "abs":
        return np.where(out >= 0.0, 1.0, -1.0)  # subgradient +1 at 0
    return np.ones_like(out)


def _check_tape(model: MLP, tape: ForwardTape) -> None:
    if tape.version != model.version:
        raise StaleTapeError(f"tape recorded at model version {tape.version}, model is at {model.version}")


def _sweep(model: MLP, tape: ForwardTape, g: np.ndarray, weight_grads: bool):
    """Backpropagate the output seed ``g`` of shape ``(n, 1)``."""
    grads = []
    for i in range(model.n_layers - 1, -1, -1):
        if weight_grads:
            grads.append((tape.acts[i].T @ g, g.sum(axis=0)))
        g = g @ model.weights[i].T
        if i == 0:
            break
        if tape.masks is not None:
            g = g * tape.masks[i - 1]
        g = g * (tape.pre[i - 1] > 0.0)  # ReLU subgradient 0 at the kink
    return g, grads[::-1]


def backward_weights(model: MLP, tape: ForwardTape, d_loss_d_y) -> list[np.ndarray]:
    """Gradients of the loss with respect to every parameter.

    ``d_loss_d_y`` holds one upstream gradient per batch row (a scalar for a
    single-input tape). Returned in :meth:`MLP.parameters` order.
    """
    _check_tape(model, tape)
    n = tape.inputs.shape[0]
    dy = np.broadcast_to(np.asarray(d_loss_d_y, dtype=np.float64).reshape(-1), (n,))
    g = (dy[:, None] * _output_slope(model, tape))
    _, grads = _sweep(model, tape, g, weight_grads=True)
    out = []
    for dw, db in grads:
        out += [dw, db]
    return out


def input_jacobian(model: MLP, x, return_seam: bool = False):
    """Gradient of the scalar output with respect to the raw input.

    The wrap layer has unit slope away from its seam, so this is the
    gradient at the wrapped point. A coordinate exactly on the seam is
    wrapped to ``-L/2`` and therefore differentiated from the right; pass
    ``return_seam=True`` to also get a boolean mask of such entries.
    """
    x = np.asarray(x, dtype=np.float64)
    _, tape = forward(model, x, mode="eval")
    g = _output_slope(model, tape)
    jac, _ = _sweep(model, tape, g, weight_grads=False)
    if tape.single:
        jac = jac[0]
    if return_seam:
        return jac, seam_mask(x, model.box)
    return jac


def activation_pattern(model: MLP, x) -> np.ndarray:
    """Boolean signature of every ReLU (and the ``|y|`` sign) for each input row."""
    _, tape = forward(model, np.atleast_2d(np.asarray(x, dtype=np.float64)), mode="eval")
    parts = [z > 0.0 for z in tape.pre[:-1]]
    if model.output_activation == "abs":
        parts.append(tape.pre[-1] >= 0.0)
    return np.concatenate(parts, axis=1)


class SurrogateCV(CVFunction):
    """Expose a trained :class:`MLP` through the CV interface."""

    def __init__(self, model: MLP, name: str = "surrogate"):
        self.model = model
        self.name = name
        self.input_dim = model.input_dim

    def value(self, x):
        y, _ = forward(self.model, as_coords(x, self.input_dim), mode="eval")
        return y

    def jacobian(self, x):
        return input_jacobian(self.model, as_coords(x, self.input_dim))

    def piece_changes(self, x, h: float) -> np.ndarray:
        """For each row, whether a central difference of step ``h`` leaves the
        linear piece the row sits on (ReLU kink, ``|y|`` sign flip or wrap seam)."""
        x = np.atleast_2d(as_coords(x, self.input_dim))
        n, dim = x.shape
        steps = h * np.eye(dim)
        probes = np.concatenate([x[:, None, :] + steps, x[:, None, :] - steps], axis=1)
        base = activation_pattern(self.model, x)
        pats = activation_pattern(self.model, probes.reshape(-1, dim)).reshape(n, 2 * dim, -1)
        kink = np.any(pats != base[:, None, :], axis=(1, 2))
        box = self.model.box
        w0 = wrap_coordinate(x, box)
        wp = wrap_coordinate(x + h, box)
        wm = wrap_coordinate(x - h, box)
        seam = np.any((np.abs(wp - w0) > 2 * h) | (np.abs(w0 - wm) > 2 * h), axis=1)
        return kink | seam
