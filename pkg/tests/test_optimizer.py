import math

import numpy as np
import pytest

from dscsma import analytic as an
from dscsma import optimizer as opt
from dscsma.core import FrameTimings
from dscsma.errors import InfeasibleTarget, NonPositiveDiscriminant, TooLarge


@pytest.mark.parametrize("n, relaxed, cands, chosen", [
    (20, 99.3, (64, 128), 128),
    (100, 506.6, (256, 512), 512),
])
def test_optimal_w0_examples(timings, n, relaxed, cands, chosen):
    ch = opt.optimal_w0(n, timings)
    assert ch.relaxed == pytest.approx(relaxed, abs=0.05)
    assert ch.candidates == cands
    assert ch.chosen == chosen
    assert ch.c_values[chosen] == max(ch.c_values.values())


def test_gamma(timings):
    assert opt.gamma_of(timings) == pytest.approx(2.4)


def test_relaxed_w0_increasing():
    vals = [opt.relaxed_w0(n, 2.4) for n in (20, 50, 100, 200, 500)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_relaxed_w0_negative_radicand():
    with pytest.raises(NonPositiveDiscriminant):
        opt.relaxed_w0(2, 1.0)


def test_fallback_grid_search():
    t = FrameTimings(rts=25, difs=25)
    assert opt.gamma_of(t) == 1.0
    ch = opt.optimal_w0(2, t)
    assert ch.fallback and math.isnan(ch.relaxed)
    assert ch.candidates == tuple(2 ** k for k in range(1, 15))
    assert ch.chosen == max(ch.c_values, key=ch.c_values.get)


def test_full_evaluator_is_local_argmax(timings):
    ch = opt.optimal_w0(50, timings, evaluator="full")
    other = [w for w in ch.candidates if w != ch.chosen][0]
    assert opt.full_throughput(ch.chosen, 50, 4, timings) >= opt.full_throughput(other, 50, 4, timings)


def test_quadratic_root_w0_32(timings):
    eta = an.uniform_eta(32)
    assert eta == pytest.approx(31 / 357.5)
    root = opt.relaxed_n(eta, 288 / 50)
    assert root == pytest.approx(5.36, abs=0.01)
    a, b, c = opt.pair_count_quadratic(eta, 288 / 50)
    assert a * root ** 2 + b * root + c == pytest.approx(0, abs=1e-12)
    assert opt.closed_form_n(eta, 288 / 50) == pytest.approx(root, rel=1e-12)


@pytest.mark.parametrize("w0", [8, 64, 1024])
def test_quadratic_linear_limit(w0):
    # Tc equal to one slot kills the quadratic term
    eta = an.uniform_eta(w0)
    assert opt.relaxed_n(eta, 1.0) == pytest.approx(1 / (eta + eta ** 2 / 2), rel=1e-12)
    assert opt.relaxed_n(eta, 1.0 + 1e-9) == pytest.approx(1 / (eta + eta ** 2 / 2), rel=1e-6)


def test_printed_variant_differs(timings):
    eta = an.uniform_eta(32)
    assert abs(opt.closed_form_n(eta, 5.76, literal=True) - opt.relaxed_n(eta, 5.76)) > 1.0


def test_optimal_n_local_max(timings):
    ch = opt.optimal_n(32, timings)
    assert ch.candidates == (5, 6)
    c = ch.c_values
    assert c[ch.chosen] >= c[ch.chosen + 1] and c[ch.chosen] >= c[ch.chosen - 1]


def _star(leaves):
    s = np.zeros((leaves + 1, leaves + 1), dtype=int)
    s[0, 1:] = 1
    s[1:, 0] = 1
    return s


K3 = 1 - np.eye(3, dtype=int)


def test_greedy_k3():
    st = opt.greedy_partner_map(K3, 4)
    assert st.q_value == 6 == opt.brute_force_partner_map(K3, 4)[0]
    assert len(st.current_set) == 3
    for B in st.current_set:
        assert sorted(opt.degrees(B)) == [1, 1, 2]


def test_greedy_star():
    st = opt.greedy_partner_map(_star(4), 4)
    assert st.q_value == 6 == opt.brute_force_partner_map(_star(4), 4)[0]
    for B in st.current_set:
        assert sorted(opt.degrees(B).tolist()) == [0, 0, 1, 1, 2]


def test_greedy_first_only():
    st = opt.greedy_partner_map(K3, 2, first_only=True)
    assert len(st.current_set) == 1


def test_brute_force_edges_of_range():
    q, wit = opt.brute_force_partner_map(K3, 6)
    assert q == opt.q_value(K3) and len(wit) == 1 and np.array_equal(wit[0], K3)
    q, wit = opt.brute_force_partner_map(K3, 0)
    assert q == 0 and not wit[0].any()


@pytest.mark.parametrize("target", [-2, 3, 8])
def test_infeasible_targets(target):
    with pytest.raises(InfeasibleTarget):
        opt.greedy_partner_map(K3, target)


def test_brute_force_too_large():
    k8 = 1 - np.eye(8, dtype=int)
    with pytest.raises(TooLarge):
        opt.brute_force_partner_map(k8, 10)


def test_frontier_cap_truncates():
    k6 = 1 - np.eye(6, dtype=int)
    st = opt.greedy_partner_map(k6, 20, frontier_cap=2)
    assert st.truncated and len(st.current_set) <= 2


def test_history_tracks_q():
    st = opt.greedy_partner_map(_star(4), 2)
    qs = [opt.q_value(_star(4))] + [h["Q"] for h in st.history]
    for (q0, q1), h in zip(zip(qs, qs[1:]), st.history):
        assert q0 - q1 == 2 * h["g"] - 2
