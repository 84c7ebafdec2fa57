"""Shared oracles: a straight-line numpy language model and gradient probes."""

import numpy as np

from avglm import tensor as T
from avglm.lstm import LstmLayerParams
from avglm.model import AveragingLM, ModelConfig
from avglm.tensor import Tensor


def tiny_model(vocab=11, dim=4, layers=2, length=6, seed=0, scale=None, memory=True):
    """Double-precision model; ``scale`` redraws every parameter from U(-scale, scale)."""
    config = ModelConfig(vocab, dim, layers, 0.0, length, memory)
    model = AveragingLM.initialize(config, seed, dtype=np.float64)
    if scale is not None:
        rng = np.random.default_rng(seed + 1000)
        for p in model.parameters():
            p.data[...] = rng.uniform(-scale, scale, p.shape)
    return model


def random_tokens(vocab, batch, length, seed):
    return np.random.default_rng(seed).integers(0, vocab, (batch, length))


def layer(w_in, w_rec, bias):
    return LstmLayerParams(
        Tensor(np.asarray(w_in, dtype=np.float64), requires_grad=True),
        Tensor(np.asarray(w_rec, dtype=np.float64), requires_grad=True),
        Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True),
    )


def random_stack(rng, in_dim, hidden, layers, scale=0.8):
    stack = []
    for k in range(layers):
        d = in_dim if k == 0 else hidden
        stack.append(
            layer(
                rng.uniform(-scale, scale, (d, 4 * hidden)),
                rng.uniform(-scale, scale, (hidden, 4 * hidden)),
                rng.uniform(-scale, scale, 4 * hidden),
            )
        )
    return stack


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_log_probs(model, tokens):
    """(steps, batch, vocab) log-probabilities computed without the tensor library.

    Keeps every top-layer state in a list and averages it from scratch at
    each step.
    """
    named = {name: t.data.astype(np.float64) for name, t in model.named_parameters()}
    cfg = model.config
    emb = named["embedding"]
    batch, length = tokens.shape
    d = cfg.dim
    h = [np.zeros((batch, d)) for _ in range(cfg.layers)]
    c = [np.zeros((batch, d)) for _ in range(cfg.layers)]
    memory = [np.zeros((batch, d))]
    out = []
    for t in range(length - 1):
        x = emb[tokens[:, t]]
        for k in range(cfg.layers):
            z = x @ named[f"lstm{k}.w_input"] + h[k] @ named[f"lstm{k}.w_recurrent"] + named[f"lstm{k}.bias"]
            cand, i, f, o = np.tanh(z[:, :d]), _sig(z[:, d : 2 * d]), _sig(z[:, 2 * d : 3 * d]), _sig(z[:, 3 * d :])
            c[k] = f * c[k] + i * cand
            h[k] = o * np.tanh(c[k])
            x = h[k]
        context = np.mean(memory, axis=0) if cfg.memory else np.zeros_like(x)
        combined = np.tanh(np.concatenate([x, context], axis=1) @ named["concat.weight"] + named["concat.bias"])
        logits = combined @ emb.T + named["softmax.bias"]
        logits = logits - logits.max(axis=1, keepdims=True)
        out.append(logits - np.log(np.exp(logits).sum(axis=1, keepdims=True)))
        memory.append(x)
    return np.stack(out)


def loss_fn(model, tokens, mask=None):
    return lambda _p: model.forward_sequence(tokens, mask).loss


def grad_errors(model, tokens, mask=None, eps=1e-4):
    """Per parameter ``grad_check`` error of the full sequence loss."""
    out = {}
    for name, p in model.named_parameters():
        out[name] = T.grad_check(loss_fn(model, tokens, mask), p, eps)
    return out


def grad_pairs(model, tokens, mask=None, eps=1e-4):
    """Autodiff and central-difference gradients for every parameter."""
    model.zero_grad()
    model.forward_sequence(tokens, mask).loss.backward()
    pairs = {}
    with T.no_grad():
        for name, p in model.named_parameters():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            numeric = np.empty_like(p.data)
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = model.forward_sequence(tokens, mask).loss.item()
                flat[k] = orig - eps
                down = model.forward_sequence(tokens, mask).loss.item()
                flat[k] = orig
                numeric.reshape(-1)[k] = (up - down) / (2 * eps)
            pairs[name] = (analytic, numeric)
    return pairs
