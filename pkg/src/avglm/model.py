"""The averaging-memory LSTM language model.

At step t the top LSTM layer produces ``h_t``. The context vector is the
mean of every hidden state already in memory, where memory starts out
holding a zero vector for ``h_0`` that is counted in the mean. ``h_t`` and
the context are joined by a tanh concatenation layer, projected through the
transposed embedding matrix (tied weights) and normalised by a softmax.
``h_t`` is written to memory only after its own prediction.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .lstm import INIT_RANGE, LstmLayerParams, LstmState, dropout_mask, init_lstm, stack_step
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int
    layers: int = 2
    dropout: float = 0.0
    sequence_length: int = 35
    memory: bool = True

    def __post_init__(self):
        if self.vocab_size < 1 or self.dim < 1 or self.layers < 1:
            raise ValueError(f"invalid model dimensions in {self}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self):
        return asdict(self)


def param_count(config):
    """Exact number of trainable scalars; the embedding is counted once."""
    v, d = config.vocab_size, config.dim
    per_layer = 4 * d * d + 4 * d * d + 4 * d
    return v * d + config.layers * per_layer + (2 * d * d + d) + v


def expected_shapes(config):
    """Parameter name -> shape, in checkpoint order."""
    v, d = config.vocab_size, config.dim
    shapes = {"embedding": (v, d)}
    for k in range(config.layers):
        shapes[f"lstm{k}.w_input"] = (d, 4 * d)
        shapes[f"lstm{k}.w_recurrent"] = (d, 4 * d)
        shapes[f"lstm{k}.bias"] = (4 * d,)
    shapes.update({"concat.weight": (2 * d, d), "concat.bias": (d,), "softmax.bias": (v,)})
    return shapes


@dataclass
class ModelParams:
    embedding: Tensor  # (vocab, dim); also the softmax projection, transposed
    lstm: list
    w_concat: Tensor  # (2*dim, dim), rows for [h; context]
    b_concat: Tensor
    b_softmax: Tensor

    def named(self):
        out = [("embedding", self.embedding)]
        for layer, p in enumerate(self.lstm):
            out += [
                (f"lstm{layer}.w_input", p.w_input),
                (f"lstm{layer}.w_recurrent", p.w_recurrent),
                (f"lstm{layer}.bias", p.bias),
            ]
        out += [("concat.weight", self.w_concat), ("concat.bias", self.b_concat), ("softmax.bias", self.b_softmax)]
        return out

    def tensors(self):
        return [t for _, t in self.named()]

    @classmethod
    def from_named(cls, arrays, layers):
        def leaf(name):
            return Tensor(arrays[name], requires_grad=True, name=name)

        lstm = [
            LstmLayerParams(leaf(f"lstm{k}.w_input"), leaf(f"lstm{k}.w_recurrent"), leaf(f"lstm{k}.bias"))
            for k in range(layers)
        ]
        return cls(leaf("embedding"), lstm, leaf("concat.weight"), leaf("concat.bias"), leaf("softmax.bias"))


@dataclass(frozen=True)
class MemoryBuffer:
    """Running sum of stored hidden states and how many states it holds.

    A fresh buffer already counts the zero initial state, so ``count`` is 1.
    """

    running_sum: Tensor
    count: int

    @classmethod
    def reset(cls, batch, dim, dtype=np.float32):
        return cls(Tensor(np.zeros((batch, dim), dtype=dtype)), 1)

    def context(self):
        return T.scale(self.running_sum, 1.0 / self.count)

    def store(self, h):
        if h.shape != self.running_sum.shape:
            raise DimensionError(f"store: state {h.shape} does not match memory {self.running_sum.shape}")
        return MemoryBuffer(T.add(self.running_sum, h), self.count + 1)


def reset_memory(batch, dim, dtype=np.float32):
    return MemoryBuffer.reset(batch, dim, dtype)


def context_vector(mem):
    return mem.context()


def store(mem, h):
    return mem.store(h)


@dataclass
class StepOutput:
    log_probs: np.ndarray
    h: Tensor
    context: Tensor
    combined: Tensor
    gates: list = None


@dataclass
class SequenceOutput:
    loss: Tensor
    log_probs: np.ndarray  # (steps, batch, vocab)
    target_log_probs: np.ndarray  # (steps, batch)
    target_mask: np.ndarray  # (steps, batch)
    trace: list = None  # per step, per layer Gates when recorded

    @property
    def token_count(self):
        return int(self.target_mask.sum())

    @property
    def nll_sum(self):
        return float(-self.target_log_probs[self.target_mask].astype(np.float64).sum())

    def row_nll(self):
        """Mean negative log-likelihood per batch row (NaN for rows with no targets)."""
        lp = np.where(self.target_mask, self.target_log_probs, 0.0).astype(np.float64)
        n = self.target_mask.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return -lp.sum(axis=0) / n


class AveragingLM:
    """Averaging-memory LSTM LM. ``config.memory=False`` pins the context to zero."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config, rng, dtype=np.float32):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        d, v = config.dim, config.vocab_size

        def uniform(shape, name):
            data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(np.float32)
            return Tensor(data, requires_grad=True, name=name)

        embedding = uniform((v, d), "embedding")
        lstm = init_lstm(d, d, config.layers, rng)
        w_concat = uniform((2 * d, d), "concat.weight")
        params = ModelParams(
            embedding,
            lstm,
            w_concat,
            Tensor(np.zeros(d, dtype=np.float32), requires_grad=True, name="concat.bias"),
            Tensor(np.zeros(v, dtype=np.float32), requires_grad=True, name="softmax.bias"),
        )
        model = cls(config, params)
        return model if dtype == np.float32 else model.astype(dtype)

    @property
    def dtype(self):
        return self.params.embedding.dtype

    def parameters(self):
        return self.params.tensors()

    def named_parameters(self):
        return self.params.named()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        arrays = {name: t.data.astype(dtype) for name, t in self.named_parameters()}
        return AveragingLM(self.config, ModelParams.from_named(arrays, self.config.layers))

    def copy(self):
        return self.astype(self.dtype)

    def param_count(self):
        return int(np.sum([t.data.size for t in self.parameters()]))

    # -- building blocks -------------------------------------------------

    def initial_state(self, batch):
        return LstmState.zeros(self.config.layers, batch, self.config.dim, self.dtype)

    def reset_memory(self, batch):
        return MemoryBuffer.reset(batch, self.config.dim, self.dtype)

    def sample_masks(self, rng, batch):
        """Per-sequence masks for each layer input plus the head input."""
        if rng is None or self.config.dropout == 0:
            return None
        shape = (batch, self.config.dim)
        return [dropout_mask(rng, self.config.dropout, shape, self.dtype) for _ in range(self.config.layers + 1)]

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of {self.config.vocab_size}")
        return ids

    def _core(self, x, state, mem, masks, record):
        """LSTM stack, context lookup, concat layer; memory updated last."""
        if mem.running_sum.shape[0] != x.shape[0] or state.h[0].shape[0] != x.shape[0]:
            raise ContractError(
                f"batch mismatch: input {x.shape[0]}, state {state.h[0].shape[0]}, memory {mem.running_sum.shape[0]}"
            )
        p = self.params
        h, state, gates = stack_step(p.lstm, x, state, masks, record)
        if masks is not None:
            h = T.mul(h, masks[-1])
        if self.config.memory:
            context = mem.context()
        else:
            context = Tensor(np.zeros(h.shape, dtype=self.dtype))
        combined = T.tanh(T.add_bias(T.matmul(T.concat_cols(h, context), p.w_concat), p.b_concat))
        if self.config.memory:
            mem = mem.store(h)
        return h, context, combined, state, mem, gates

    def _logits(self, combined):
        p = self.params
        return T.add_bias(T.matmul(combined, T.transpose(p.embedding)), p.b_softmax)

    # -- public forward passes --------------------------------------------

    def forward_step(self, token_ids, state, mem, masks=None, record=False):
        """One prediction step; returns ``(StepOutput, state, mem)``.

        The context used here is built from the states stored before this
        call; the new top-layer state is appended afterwards.
        """
        ids = self._check_ids(token_ids).reshape(-1)
        x = T.take_rows(self.params.embedding, ids)
        h, context, combined, state, mem, gates = self._core(x, state, mem, masks, record)
        logits = self._logits(combined)
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return StepOutput(log_probs, h, context, combined, gates), state, mem

    def forward_sequence(self, tokens, mask=None, rng=None, record=False):
        """Mean next-token NLL over a (batch, T) token matrix.

        Inputs are columns 0..T-2, targets columns 1..T-1; targets whose
        ``mask`` entry is False are left out of the mean. Passing ``rng``
        switches on dropout (training mode).
        """
        tokens = self._check_ids(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (batch, T), got {tokens.shape}")
        batch, length = tokens.shape
        if length != self.config.sequence_length:
            raise ContractError(f"sequence length {length} != configured {self.config.sequence_length}")
        if length < 2:
            raise ContractError("need at least two tokens to form a prediction")
        mask = np.ones_like(tokens, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        steps = length - 1

        masks = self.sample_masks(rng, batch)
        emb = T.take_rows(self.params.embedding, tokens[:, :-1].T.reshape(-1))
        state = self.initial_state(batch)
        mem = self.reset_memory(batch)
        combined, trace = [], []
        for t in range(steps):
            x = T.slice_rows(emb, t * batch, (t + 1) * batch)
            _, _, out, state, mem, gates = self._core(x, state, mem, masks, record)
            combined.append(out)
            if record:
                trace.append(gates)

        logits = self._logits(T.concat_rows(combined))
        targets = tokens[:, 1:].T.reshape(-1)
        target_mask = mask[:, 1:].T.reshape(-1)
        loss, log_probs = T.softmax_cross_entropy(logits, targets, target_mask)
        lp = log_probs.data.reshape(steps, batch, -1)
        picked = lp.reshape(steps * batch, -1)[np.arange(steps * batch), targets].reshape(steps, batch)
        return SequenceOutput(loss, lp, picked, target_mask.reshape(steps, batch), trace if record else None)


def with_memory(model, enabled):
    """Same parameters, memory head switched on or off."""
    return AveragingLM(replace(model.config, memory=enabled), model.params)
