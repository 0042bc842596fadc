import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from tpcvit import controller as C
from tpcvit.errors import ContractError
from tpcvit.metrics import emit_trace, events_from_record
from tpcvit.tensor import Tensor

GOLDEN = Path(__file__).parent / "golden"


def scan_oracle(bs, delta):
    """Brute-force halting: returns (M, remainder, weights) for one token, last break forced to 1."""
    bs = list(bs[:-1]) + [1.0]
    total = 0.0
    for n, b in enumerate(bs, start=1):
        if total + b >= 1 - delta or n == len(bs):
            weights = list(bs[: n - 1]) + [1.0 - total] + [0.0] * (len(bs) - n)
            return n, 1.0 - total, weights
        total += b


def run_single(bs, delta, mode=C.SUM):
    bs = np.asarray(bs, dtype=float)[:, None]
    return C.run_controller(bs, np.zeros_like(bs), delta=delta, zeta=0.5, mode=mode)


@pytest.mark.parametrize("p,r,expected", [(0.5, 0.5, 0.25), (0.7, 1.0, 0.0), (1.0, 0.0, 1.0)])
def test_break_prob_examples(p, r, expected):
    assert C.break_prob(p, r) == pytest.approx(expected)


def test_break_prob_rejects_out_of_range():
    with pytest.raises(ContractError):
        C.break_prob(1.2, 0.0)
    with pytest.raises(ContractError):
        C.break_prob(0.5, -0.1)


def test_regularize_examples():
    b = np.array([0.2, 0.4])
    assert np.allclose(C.regularize(b, 0.5), [0.25, 0.35])
    assert np.allclose(C.regularize(b, 1.0), b)
    assert np.allclose(C.regularize(b, 0.0), [0.3, 0.3])


def test_regularize_preserves_active_mean_and_range(rng):
    for _ in range(100):
        b = rng.random(9)
        active = rng.random(9) < 0.6
        active[0] = True
        zeta = rng.random()
        out = C.regularize(b, zeta, active)
        assert out[active].mean() == pytest.approx(b[active].mean(), abs=1e-12)
        assert np.all((out >= 0) & (out <= 1))
        assert np.array_equal(out[~active], b[~active])


def test_regularize_empty_set_is_contract_error():
    with pytest.raises(ContractError):
        C.regularize(np.array([0.1, 0.2]), 0.5, np.zeros(2, bool))


def test_step_example_four_layers():
    run = run_single([0.3] * 6, 0.01)
    assert run.state.halting_layer[0] == 4
    assert run.state.remainder.data[0] == pytest.approx(0.1)
    assert np.allclose(run.weights[:, 0], [0.3, 0.3, 0.3, 0.1, 0.0, 0.0])


def test_zero_breaks_halt_at_last_layer_with_full_remainder():
    run = run_single([0.0] * 5, 0.01)
    assert run.state.halting_layer[0] == 5
    assert run.state.remainder.data[0] == 1.0
    assert np.allclose(run.weights[:, 0], [0, 0, 0, 0, 1])


def test_step_requires_consecutive_layers():
    state = C.TokenHaltState.initial(3)
    with pytest.raises(ContractError):
        C.step(state, np.zeros(3), 2, 4, 0.01)


@pytest.mark.parametrize(
    "bs,delta,mode,expected",
    [
        ([1.0, 0.2, 0.2], 0.01, C.SUM, 1),
        ([0.3, 0.3, 0.3, 0.3], 0.01, C.SUM, 4),
        ([0.5, 0.5], 0.5, C.PRODUCT, 2),
        ([0.9, 0.9, 0.9], 0.5, C.PRODUCT, 1),
    ],
)
def test_halting_layer_examples(bs, delta, mode, expected):
    assert C.halting_layer(bs, delta, mode) == expected


def test_product_mode_step_agrees_with_scan():
    run = run_single([0.5, 0.5], 0.5, C.PRODUCT)
    assert run.state.halting_layer[0] == C.halting_layer([0.5, 0.5], 0.5, C.PRODUCT) == 2


def test_step_agrees_with_oracle_on_random_sequences(rng):
    for _ in range(200):
        n = int(rng.integers(2, 12))
        bs = rng.random(n) * rng.choice([0.2, 0.6, 1.0])
        delta = float(rng.choice([0.5, 0.1, 0.01]))
        run = run_single(bs, delta)
        m, rem, w = scan_oracle(bs, delta)
        assert run.state.halting_layer[0] == m == C.halting_layer(bs, delta)
        assert run.state.remainder.data[0] == pytest.approx(rem, abs=1e-12)
        assert np.allclose(run.weights[:, 0], w, atol=1e-12)


def test_weights_sum_to_one_and_mask_is_monotone(rng):
    L, n = 6, 10
    run = C.run_controller(rng.random((L, n)), rng.random((L, n)) * 0.5, delta=0.1, zeta=0.5)
    assert np.allclose(run.weights.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(run.weights >= 0)
    masks = np.stack([r.mask_after for r in run.records])
    assert np.all(np.diff(masks.astype(int), axis=0) <= 0)
    cum = np.stack([r.cumulation for r in run.records])
    assert np.all(np.diff(cum, axis=0) >= 0)


def test_permuting_tokens_permutes_outputs(rng):
    p, r = rng.random((4, 7)), rng.random((4, 7))
    perm = rng.permutation(7)
    a = C.run_controller(p, r, 0.1, 0.5)
    b = C.run_controller(p[:, perm], r[:, perm], 0.1, 0.5)
    assert np.allclose(a.weights[:, perm], b.weights)
    assert np.array_equal(a.state.halting_layer[perm], b.state.halting_layer)


def test_halted_remainder_identity(rng):
    p = rng.random((5, 6))
    run = C.run_controller(p, np.zeros_like(p), 0.2, 0.5)
    b_reg = np.stack([r.b_reg.data for r in run.records])
    for k in range(6):
        m = run.state.halting_layer[k]
        assert run.state.remainder.data[k] == pytest.approx(1 - b_reg[: m - 1, k].sum())


def test_regularize_scope_cumulation_uses_raw_weights(rng):
    state = C.TokenHaltState.initial(4)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    _, rec = C.controller_layer(state, p, np.zeros(4), 1, 3, 0.01, 0.5, regularize_scope="cumulation")
    assert np.allclose(rec.weight.data, p)
    assert np.allclose(rec.cumulation, C.regularize(p, 0.5))


def test_aggregate_cls_examples(rng):
    states = [Tensor(rng.standard_normal(4)) for _ in range(3)]
    last = C.aggregate_cls(states, [0.0, 0.0, 1.0])
    assert np.allclose(last.data, states[-1].data)
    mean = C.aggregate_cls(states[:2], [0.5, 0.5])
    assert np.allclose(mean.data, (states[0].data + states[1].data) / 2)
    w = rng.dirichlet(np.ones(3))
    out = C.aggregate_cls(states, list(w)).data
    stacked = np.stack([s.data for s in states])
    assert np.all(out >= stacked.min(0) - 1e-12) and np.all(out <= stacked.max(0) + 1e-12)


def test_golden_hand_trace_matches_exactly():
    case = json.loads((GOLDEN / "hand_trace_inputs.json").read_text())
    run = C.run_controller(case["pause"], case["restart"], case["delta"], case["zeta"])
    events = [e for rec in run.records for e in events_from_record(0, rec)]
    buf = io.StringIO()
    emit_trace(events, buf)
    assert buf.getvalue() == (GOLDEN / "hand_trace.csv").read_text()
    assert run.state.halting_layer.tolist() == case["halting_layer"]
    assert run.weights.tolist() == case["weights"]


def test_forced_last_layer_records_certain_break():
    run = run_single([0.1, 0.1, 0.1], 0.01)
    last = run.records[-1]
    assert last.pause[0] == 1.0 and last.restart[0] == 0.0 and last.b_raw[0] == 1.0
    rows = list(csv.reader(io.StringIO((GOLDEN / "hand_trace.csv").read_text())))
    assert rows[-1][3:6] == ["1.0", "0.0", "1.0"]
