"""Cell-state contribution decomposition and forget-gate persistence runs.

With a zero initial cell, iterating ``c_t = f_t * c_{t-1} + i_t * g_t``
gives ``c_t = sum_{j<=t} (prod_{k=j+1..t} f_k) * i_j * g_j``. Each summand
is the share of ``c_t`` that was written at step ``j`` and survived the
forget gates since. Steps are 1-based in every exported file.
"""

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .lstm import GateTrace, LstmState, stack_step

DECOMPOSITION_HEADER = ("layer", "source_step", "target_step", "unit", "value")
PERSISTENCE_HEADER = ("layer", "unit", "run_start", "run_length")


@dataclass
class ContributionTensor:
    """``values[j, t, u]``: contribution written at step j to unit u of c_t (zero for j > t)."""

    values: np.ndarray  # (steps, steps, units)
    layer: int = 0

    @property
    def steps(self):
        return self.values.shape[0]

    @property
    def units(self):
        return self.values.shape[2]

    def cell(self):
        """Reconstructed cell states, (steps, units)."""
        return self.values.sum(axis=0)


@dataclass
class PersistenceStats:
    theta: float
    runs: list = field(default_factory=list)  # (layer, unit, start, length), start 1-based
    units: dict = field(default_factory=dict)  # layer -> unit count

    def histogram(self, layer=None):
        return Counter(length for lay, _, _, length in self.runs if layer is None or lay == layer)

    def mean_persistence(self):
        """Mean run length per layer (0.0 for a layer without runs)."""
        out = {}
        for layer in sorted(self.units):
            lengths = [n for lay, _, _, n in self.runs if lay == layer]
            out[layer] = float(np.mean(lengths)) if lengths else 0.0
        return out


def _as_trace(trace):
    if isinstance(trace, GateTrace):
        if not trace.recording:
            raise ContractError("trace was produced without gate recording")
        return trace
    if trace is None:
        raise ContractError("trace was produced without gate recording")
    return GateTrace(recording=True, steps=list(trace))


def decompose(trace, layer=0, row=0):
    trace = _as_trace(trace)
    if not trace.steps:
        return ContributionTensor(np.zeros((0, 0, 0)), layer)
    forget = trace.layer(layer, "forget")[:, row].astype(np.float64)
    written = trace.layer(layer, "input")[:, row].astype(np.float64) * trace.layer(layer, "candidate")[:, row]
    steps, units = forget.shape
    values = np.zeros((steps, steps, units))
    for t in range(steps):
        if t:
            values[:t, t] = values[:t, t - 1] * forget[t]
        values[t, t] = written[t]
    return ContributionTensor(values, layer)


def decomposition_residual(contrib, trace, row=0):
    """Largest |sum_j contribution(j, t) - c_t| over all steps and units."""
    trace = _as_trace(trace)
    if not trace.steps:
        return 0.0
    cells = trace.layer(contrib.layer, "cell")[:, row].astype(np.float64)
    return float(np.max(np.abs(contrib.cell() - cells)))


def _runs(flags):
    """(start, length) of maximal True runs, start 0-based."""
    runs, start = [], None
    for k, flag in enumerate(flags):
        if flag and start is None:
            start = k
        elif not flag and start is not None:
            runs.append((start, k - start))
            start = None
    if start is not None:
        runs.append((start, len(flags) - start))
    return runs


def persistence_lengths(trace, theta=0.9, row=0, layers=None):
    """Maximal runs of consecutive steps with forget gate >= ``theta``, per unit.

    A single qualifying step is a run of length 1.
    """
    if not 0 <= theta <= 1:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    trace = _as_trace(trace)
    stats = PersistenceStats(theta)
    if not trace.steps:
        return stats
    layers = range(len(trace.steps[0])) if layers is None else layers
    for layer in layers:
        forget = trace.layer(layer, "forget")[:, row]
        stats.units[layer] = forget.shape[1]
        for unit in range(forget.shape[1]):
            for start, length in _runs(forget[:, unit] >= theta):
                stats.runs.append((layer, unit, start + 1, length))
    return stats


def export_report(report, path):
    """Write a decomposition (one tensor or a list, one per layer) or persistence runs as CSV."""
    if isinstance(report, ContributionTensor):
        report = [report]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        if isinstance(report, list) and all(isinstance(r, ContributionTensor) for r in report):
            out.writerow(DECOMPOSITION_HEADER)
            for contrib in sorted(report, key=lambda c: c.layer):
                v = contrib.values
                for j in range(contrib.steps):
                    for t in range(j, contrib.steps):
                        for u in range(contrib.units):
                            out.writerow((contrib.layer, j + 1, t + 1, u, repr(float(v[j, t, u]))))
        elif isinstance(report, PersistenceStats):
            out.writerow(PERSISTENCE_HEADER)
            for row in sorted(report.runs):
                out.writerow(row)
        else:
            raise TypeError(f"cannot export {type(report).__name__}")


def read_decomposition(path):
    """Parse a decomposition CSV back into one ``ContributionTensor`` per layer."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_layer = {}
    for r in rows:
        by_layer.setdefault(int(r["layer"]), []).append(r)
    out = []
    for layer, layer_rows in sorted(by_layer.items()):
        steps = max(int(r["target_step"]) for r in layer_rows)
        units = max(int(r["unit"]) for r in layer_rows) + 1
        values = np.zeros((steps, steps, units))
        for r in layer_rows:
            values[int(r["source_step"]) - 1, int(r["target_step"]) - 1, int(r["unit"])] = float(r["value"])
        out.append(ContributionTensor(values, layer))
    return out


def read_persistence(path, theta=None):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    runs = [(int(r["layer"]), int(r["unit"]), int(r["run_start"]), int(r["run_length"])) for r in rows]
    return PersistenceStats(theta, runs)


def trace_sentence(model, ids):
    """Run ``model`` in double precision over ``ids`` (no dropout), recording gates.

    Returns a batch-of-one ``GateTrace`` with one step per id.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        return GateTrace(recording=True)
    model = model.astype(np.float64)
    trace = GateTrace(recording=True)
    state = LstmState.zeros(model.config.layers, 1, model.config.dim, np.float64)
    with T.no_grad():
        emb = T.take_rows(model.params.embedding, ids)
        for k in range(ids.size):
            x = T.slice_rows(emb, k, k + 1)
            _, state, gates = stack_step(model.params.lstm, x, state, None, True)
            trace.steps.append(gates)
    return trace
