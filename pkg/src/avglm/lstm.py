"""Multi-layer LSTM cell without peepholes.

Each layer keeps its four gate blocks fused into one input matrix
``w_input`` (in_dim x 4H), one recurrent matrix ``w_recurrent`` (H x 4H)
and one bias (4H). Column blocks are ordered candidate, input gate,
forget gate, output gate; ``LstmLayerParams.block`` hands back a single
gate's H x in_dim matrix when the split view is needed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

GATES = ("candidate", "input", "forget", "output")
INIT_RANGE = 0.05
FORGET_BIAS = 1.0


@dataclass
class LstmLayerParams:
    w_input: Tensor
    w_recurrent: Tensor
    bias: Tensor

    @property
    def hidden(self):
        return self.w_recurrent.shape[0]

    @property
    def in_dim(self):
        return self.w_input.shape[0]

    def block(self, gate, kind="input"):
        """Return one gate's weights as an (H, in) array, or its bias as (H,)."""
        k = GATES.index(gate)
        h = self.hidden
        cols = slice(k * h, (k + 1) * h)
        if kind == "input":
            return self.w_input.data[:, cols].T
        if kind == "recurrent":
            return self.w_recurrent.data[:, cols].T
        if kind == "bias":
            return self.bias.data[cols]
        raise ValueError(f"unknown block kind {kind!r}")

    def tensors(self):
        return [self.w_input, self.w_recurrent, self.bias]


@dataclass
class LstmState:
    """Per-layer hidden and cell tensors, each (batch, hidden)."""

    h: list
    c: list

    @classmethod
    def zeros(cls, layers, batch, hidden, dtype=np.float32):
        return cls(
            h=[Tensor(np.zeros((batch, hidden), dtype=dtype)) for _ in range(layers)],
            c=[Tensor(np.zeros((batch, hidden), dtype=dtype)) for _ in range(layers)],
        )


@dataclass
class Gates:
    input: np.ndarray
    forget: np.ndarray
    output: np.ndarray
    candidate: np.ndarray
    cell: np.ndarray


@dataclass
class GateTrace:
    """Gate activations per executed step, ``steps[t][layer]``."""

    recording: bool = True
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def reset(self):
        self.steps.clear()

    def layer(self, index, name):
        """Stack one quantity of one layer into a (T, batch, hidden) array."""
        if not self.steps:
            raise ContractError("trace is empty")
        return np.stack([getattr(step[index], name) for step in self.steps])


def init_lstm(in_dim, hidden, layers, rng):
    """Uniform(-0.05, 0.05) weights, zero biases except forget biases of 1.0."""
    if min(in_dim, hidden, layers) < 1:
        raise ValueError("LSTM dimensions must be positive")
    stack = []
    for layer in range(layers):
        d = in_dim if layer == 0 else hidden
        w_in = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(d, 4 * hidden))
        w_rec = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[2 * hidden : 3 * hidden] = FORGET_BIAS
        stack.append(
            LstmLayerParams(
                Tensor(w_in.astype(np.float32), requires_grad=True, name=f"lstm{layer}.w_input"),
                Tensor(w_rec.astype(np.float32), requires_grad=True, name=f"lstm{layer}.w_recurrent"),
                Tensor(bias.astype(np.float32), requires_grad=True, name=f"lstm{layer}.bias"),
            )
        )
    return stack


def lstm_step(params, x, h_prev, c_prev, dropout_mask=None, record=False):
    """Advance one layer by one step; returns ``(h, c, gates)``.

    ``dropout_mask`` multiplies ``x`` only. ``gates`` is None unless
    ``record`` is set.
    """
    hdim = params.hidden
    if x.data.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"lstm_step: input {x.shape} does not fit in_dim {params.in_dim}")
    if h_prev.shape != (x.shape[0], hdim) or c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm_step: state {h_prev.shape}/{c_prev.shape} vs batch {x.shape[0]}, hidden {hdim}")
    if dropout_mask is not None:
        x = T.mul(x, dropout_mask)

    z = T.add_bias(T.add(T.matmul(x, params.w_input), T.matmul(h_prev, params.w_recurrent)), params.bias)
    cand = T.tanh(T.slice_cols(z, 0, hdim))
    ifo = T.sigmoid(T.slice_cols(z, hdim, 4 * hdim))
    i = T.slice_cols(ifo, 0, hdim)
    f = T.slice_cols(ifo, hdim, 2 * hdim)
    o = T.slice_cols(ifo, 2 * hdim, 3 * hdim)
    c = T.add(T.mul(f, c_prev), T.mul(i, cand))
    h = T.mul(o, T.tanh(c))
    gates = Gates(i.data, f.data, o.data, cand.data, c.data) if record else None
    return h, c, gates


def dropout_mask(rng, rate, shape, dtype=np.float32):
    """Inverted-dropout mask: kept units are scaled by 1 / (1 - rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = 1.0 - rate
    return Tensor(((rng.random(shape) < keep) / keep).astype(dtype))


def stack_step(stack, x, state, masks=None, record=False):
    """One timestep through every layer; returns (top h, new state, gates per layer)."""
    hs, cs, gates = [], [], []
    for layer, params in enumerate(stack):
        mask = masks[layer] if masks is not None else None
        h, c, g = lstm_step(params, x, state.h[layer], state.c[layer], mask, record)
        hs.append(h)
        cs.append(c)
        gates.append(g)
        x = h
    return x, LstmState(hs, cs), gates


def unroll(stack, inputs, init=None, dropout_rate=0.0, rng=None, record_gates=False):
    """Run the stack over a list of (batch, in_dim) inputs.

    Dropout is active only when ``rng`` is given and ``dropout_rate > 0``;
    masks are drawn once for the whole sequence at each layer input.
    Returns ``(outputs, final_state, trace)`` with ``outputs`` the top
    layer's hidden states.
    """
    if not inputs:
        raise ContractError("unroll needs at least one timestep")
    batch = inputs[0].shape[0]
    hidden = stack[0].hidden
    dtype = stack[0].w_input.dtype
    state = init if init is not None else LstmState.zeros(len(stack), batch, hidden, dtype)
    masks = None
    if rng is not None and dropout_rate > 0:
        masks = [dropout_mask(rng, dropout_rate, (batch, p.in_dim), dtype) for p in stack]
    trace = GateTrace(recording=record_gates)
    outputs = []
    for x in inputs:
        h, state, gates = stack_step(stack, x, state, masks, record_gates)
        outputs.append(h)
        if record_gates:
            trace.steps.append(gates)
    return outputs, state, trace
