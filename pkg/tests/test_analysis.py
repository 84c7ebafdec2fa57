import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avglm.analysis import (
    ContributionTensor,
    decompose,
    decomposition_residual,
    export_report,
    persistence_lengths,
    read_decomposition,
    read_persistence,
    trace_sentence,
)
from avglm.errors import ContractError
from avglm.lstm import Gates, GateTrace, unroll
from avglm.model import AveragingLM, ModelConfig
from avglm.tensor import Tensor
from helpers import random_stack


def synthetic_trace(forget, written=None, seed=0):
    """Trace for one layer and one batch row from explicit gate sequences, cells by iteration."""
    forget = np.asarray(forget, dtype=np.float64).reshape(len(forget), -1)
    rng = np.random.default_rng(seed)
    steps, units = forget.shape
    i = rng.uniform(0.05, 0.95, (steps, units))
    cand = rng.uniform(-0.95, 0.95, (steps, units)) if written is None else np.asarray(written, float).reshape(steps, units) / i
    c = np.zeros(units)
    trace = GateTrace(recording=True)
    for t in range(steps):
        c = forget[t] * c + i[t] * cand[t]
        g = Gates(i[t][None], forget[t][None], np.full((1, units), 0.5), cand[t][None], c[None].copy())
        trace.steps.append([g])
    return trace


def random_lstm_trace(seed, steps=35, units=5, layers=2, scale=2.0):
    rng = np.random.default_rng(seed)
    stack = random_stack(rng, 4, units, layers, scale)
    xs = [Tensor(rng.uniform(-2, 2, (2, 4))) for _ in range(steps)]
    _, _, trace = unroll(stack, xs, record_gates=True)
    return trace


def test_single_step_contribution_is_cell():
    trace = synthetic_trace([[0.4, 0.7]])
    contrib = decompose(trace)
    c1 = trace.layer(0, "cell")[0, 0]
    i, g = trace.layer(0, "input")[0, 0], trace.layer(0, "candidate")[0, 0]
    assert np.array_equal(contrib.values[0, 0], i * g)
    assert np.array_equal(contrib.values[0, 0], c1)


def test_three_step_scalar_oracle():
    f = [0.3, 0.8, 0.6]
    trace = synthetic_trace(f, seed=3)
    i = trace.layer(0, "input")[:, 0, 0]
    g = trace.layer(0, "candidate")[:, 0, 0]
    c = 0.0
    for t in range(3):
        c = f[t] * c + i[t] * g[t]
    contrib = decompose(trace)
    assert contrib.values[:, 2, 0].sum() == pytest.approx(c, abs=1e-6)
    assert contrib.values[0, 2, 0] == pytest.approx(f[1] * f[2] * i[0] * g[0], abs=1e-15)


def test_closed_forget_gates_keep_only_current_write():
    trace = synthetic_trace(np.full((6, 3), 1e-12), written=np.full((6, 3), 0.5), seed=4)
    v = decompose(trace).values
    for t in range(6):
        assert np.all(np.abs(v[:t, t]) < 1e-11)
        assert np.allclose(v[t, t], 0.5, rtol=1e-12)


def test_upper_triangle_is_zero():
    v = decompose(random_lstm_trace(0, steps=8)).values
    for j in range(8):
        assert np.all(v[j, :j] == 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_identity_on_random_parameterisations(seed):
    trace = random_lstm_trace(seed)
    for layer in range(2):
        for row in range(2):
            contrib = decompose(trace, layer, row)
            assert decomposition_residual(contrib, trace, row) < 1e-5


def test_magnitude_non_increasing_in_target_step():
    v = np.abs(decompose(random_lstm_trace(5)).values)
    for j in range(v.shape[0]):
        tail = v[j, j:]
        assert np.all(tail[1:] <= tail[:-1])


def test_non_recording_trace_rejected():
    with pytest.raises(ContractError):
        decompose(GateTrace(recording=False))
    with pytest.raises(ContractError):
        persistence_lengths(None)


def test_empty_trace():
    assert decompose(GateTrace()).values.shape == (0, 0, 0)
    assert persistence_lengths(GateTrace()).runs == []


def test_run_of_two():
    stats = persistence_lengths(synthetic_trace([0.95, 0.95, 0.3]), 0.9)
    assert stats.runs == [(0, 0, 1, 2)]
    assert stats.histogram() == {2: 1}


def test_all_below_threshold_has_no_runs():
    stats = persistence_lengths(synthetic_trace([0.2, 0.5, 0.89]), 0.9)
    assert stats.runs == []
    assert stats.mean_persistence() == {0: 0.0}


def test_lone_step_is_run_of_one():
    stats = persistence_lengths(synthetic_trace([0.2, 0.95, 0.3, 0.91]), 0.9)
    assert stats.runs == [(0, 0, 2, 1), (0, 0, 4, 1)]


def test_zero_threshold_gives_full_runs():
    trace = random_lstm_trace(6, steps=12, units=3)
    stats = persistence_lengths(trace, 0.0)
    assert sorted(stats.runs) == sorted((lay, u, 1, 12) for lay in range(2) for u in range(3))


def test_theta_range():
    with pytest.raises(ValueError):
        persistence_lengths(synthetic_trace([0.5]), 1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_runs_shrink_as_theta_grows(seed, a, b):
    lo, hi = sorted((a, b))
    trace = random_lstm_trace(seed, steps=15, units=3, layers=1)
    loose, tight = persistence_lengths(trace, lo), persistence_lengths(trace, hi)
    for unit in range(3):
        longest = lambda s: max((n for _, u, _, n in s.runs if u == unit), default=0)  # noqa: E731
        assert longest(tight) <= longest(loose)
        total = sum(n for _, u, _, n in loose.runs if u == unit)
        assert total <= 15
    assert all(n >= 1 for *_, n in loose.runs)


def test_export_decomposition_round_trip(tmp_path):
    trace = random_lstm_trace(7, steps=6, units=3)
    tensors = [decompose(trace, 0), decompose(trace, 1)]
    path = tmp_path / "d.csv"
    export_report(tensors, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,source_step,target_step,unit,value"
    assert len(lines) - 1 == 2 * (6 * 7 // 2) * 3
    back = read_decomposition(path)
    for a, b in zip(tensors, back):
        assert a.layer == b.layer and np.array_equal(a.values, b.values)


def test_export_persistence_round_trip(tmp_path):
    stats = persistence_lengths(random_lstm_trace(8, steps=20, units=4), 0.6)
    path = tmp_path / "p.csv"
    export_report(stats, path)
    assert path.read_text().splitlines()[0] == "layer,unit,run_start,run_length"
    assert sorted(read_persistence(path).runs) == sorted(stats.runs)


def test_export_empty(tmp_path):
    export_report(decompose(GateTrace()), tmp_path / "d.csv")
    export_report(persistence_lengths(GateTrace()), tmp_path / "p.csv")
    assert (tmp_path / "d.csv").read_text() == "layer,source_step,target_step,unit,value\n"
    assert (tmp_path / "p.csv").read_text() == "layer,unit,run_start,run_length\n"


def test_export_rejects_other_types(tmp_path):
    with pytest.raises(TypeError):
        export_report({"a": 1}, tmp_path / "x.csv")


def test_trace_sentence_on_model():
    model = AveragingLM.initialize(ModelConfig(20, 6, 2, 0.0, 35), 0)
    ids = np.random.default_rng(0).integers(0, 20, 35)
    trace = trace_sentence(model, ids)
    assert len(trace) == 35
    for layer in range(2):
        contrib = decompose(trace, layer)
        assert isinstance(contrib, ContributionTensor)
        assert decomposition_residual(contrib, trace) < 1e-5
