"""Acceptance checks. Each test prints one ``CRITERION k: PASS|FAIL`` line."""

import itertools
import math
import time

import numpy as np
import pytest

from dscsma import analytic as an
from dscsma import cli, optimizer as opt, simulator as sim
from dscsma.chain_oracle import build_chain, eta_of, stationary
from dscsma.core import FrameTimings, ProtocolParams

T = FrameTimings()
SIM_W0 = (32, 64, 128, 256, 512)
SIM_N, SIM_M, SIM_REPS, SIM_SLOTS, SIM_SEED = 30, 4, 10, 1_000_000, 2024
GRID = list(itertools.product((2, 3), (2, 4), (0.0, 0.1, 0.3, 0.7)))


def report(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")


def test_criterion_1_oracle_equivalence(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for M, w0, p in GRID:
        params = ProtocolParams(w0, M)
        pi = stationary(build_chain(params, p))
        s = an.solve_summary(params, p)
        for (m, n, i, j), v in pi.items():
            worst = max(worst, abs(s.block_states(m, n)[i, j] - v))
        worst = max(worst, abs(s.eta - eta_of(pi)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-10 and dt < 30
    report(capsys, 1, ok, f"max state gap {worst:.2e}, {dt:.1f}s")
    assert worst < 1e-10
    assert dt < 30


def test_criterion_2_normalization_symmetry(capsys):
    mass = dmass = sym = 0.0
    for M, w0, p in GRID:
        params = ProtocolParams(w0, M)
        s = an.solve_summary(params, p)
        d = an.solve_derivatives(params, p, s)
        mass = max(mass, abs(s.pmn.sum() - 1))
        dmass = max(dmass, abs(d.dpmn.sum()))
        sym = max(sym, np.abs(s.eps - s.eps.T).max(), np.abs(s.pmn - s.pmn.T).max(),
                  np.abs(d.deps - d.deps.T).max(), np.abs(d.dpmn - d.dpmn.T).max())
        for m in range(M):
            for n in range(M):
                sym = max(sym, np.abs(s.r[m][n] - s.d[n][m]).max(initial=0),
                          np.abs(d.dr[m][n] - d.dd[n][m]).max(initial=0),
                          np.abs(s.block_states(m, n) - s.block_states(n, m).T).max())
    ok = mass < 1e-10 and dmass < 1e-9 and sym < 1e-14
    report(capsys, 2, ok, f"|sum P - 1| {mass:.1e}, |sum dP| {dmass:.1e}, asym {sym:.1e}")
    assert mass < 1e-10 and dmass < 1e-9 and sym < 1e-14


def test_criterion_3_gradient(capsys):
    worst = 0.0
    h = 1e-6
    for M, w0 in itertools.product((2, 3), (2, 4)):
        params = ProtocolParams(w0, M)
        for p in (0.1, 0.3, 0.5, 0.7, 0.9):
            g = an.solve_derivatives(params, p).deta
            fd = (an.eta_at(params, p + h) - an.eta_at(params, p - h)) / (2 * h)
            worst = max(worst, abs(g - fd) / abs(fd))
    report(capsys, 3, worst < 1e-6, f"max relative error {worst:.2e}")
    assert worst < 1e-6


def test_criterion_4_fixed_point(capsys):
    t0 = time.perf_counter()
    gap = resid = 0.0
    for n, w0 in itertools.product((2, 5, 10, 30), (16, 32, 64, 128)):
        params = ProtocolParams(w0, 4, n)
        pn = an.newton_collision_prob(params)
        pb = an.bisect_collision_prob(params)
        gap = max(gap, abs(pn - pb))
        resid = max(resid, abs(an.fixed_point_residual(params, pn)))
    single = [an.newton_collision_prob(ProtocolParams(w0, 4, 1)) for w0 in (16, 128)]
    dt = time.perf_counter() - t0
    ok = gap < 1e-9 and resid < 1e-9 and all(p == 0.0 for p in single) and dt < 120
    report(capsys, 4, ok, f"newton-bisection {gap:.1e}, residual {resid:.1e}, N=1 -> {single}, {dt:.1f}s")
    assert gap < 1e-9 and resid < 1e-9
    assert single == [0.0, 0.0]
    assert dt < 120


@pytest.fixture(scope="module")
def sim_grid():
    """Analytic and simulated values on the N=30, M=4 sweep, DS and baseline."""
    t0 = time.perf_counter()
    rows = {}
    for w0 in SIM_W0:
        params = ProtocolParams(w0, SIM_M, SIM_N)
        p, _, c = an.ds_throughput(params, T)
        ds = sim.replicate(sim.pairs_fn(params, T, SIM_SLOTS), SIM_REPS, SIM_SEED)
        base = sim.replicate(sim.baseline_fn(SIM_N, w0, SIM_M, T, SIM_SLOTS), SIM_REPS, SIM_SEED)
        rows[w0] = {"p": p, "C": c, "C_base": an.baseline_csma_throughput(SIM_N, w0, SIM_M, T),
                    "ds": ds, "base": base}
    return rows, time.perf_counter() - t0


def test_criterion_5_model_vs_simulation(sim_grid, capsys):
    rows, dt = sim_grid
    failures = []
    lines = []
    for w0, r in rows.items():
        ds = r["ds"]
        for name, a, s, se in (("p", r["p"], ds.collision_prob_hat, ds.stderr[0]),
                               ("C", r["C"], ds.throughput_hat, ds.stderr[1])):
            rel = abs(s - a) / a
            z = abs(s - a) / se if se > 0 else math.inf
            lines.append(f"W0={w0} {name}: analytic {a:.4f} sim {s:.4f} rel {rel:.2%} z {z:.1f}")
            if rel > 0.05:
                failures.append(f"W0={w0} {name} off by {rel:.2%}")
            if z > 3:
                failures.append(f"W0={w0} {name} analytic outside 3 sigma (z={z:.1f})")
    ok = not failures and dt < 600
    report(capsys, 5, ok, f"{dt:.0f}s; " + "; ".join(failures or ["all within 5% and 3 sigma"]))
    with capsys.disabled():
        print("\n".join("    " + ln for ln in lines))
    assert dt < 600
    assert not failures, failures


def test_criterion_6_superiority(sim_grid, capsys):
    rows, _ = sim_grid
    failures = []
    for w0, r in rows.items():
        if not r["C"] > r["C_base"]:
            failures.append(f"W0={w0} analytic {r['C']:.4f} <= baseline {r['C_base']:.4f}")
        if not r["ds"].throughput_hat > r["base"].throughput_hat:
            failures.append(f"W0={w0} simulated {r['ds'].throughput_hat:.4f} "
                            f"<= baseline {r['base'].throughput_hat:.4f}")
    report(capsys, 6, not failures, "; ".join(failures or ["DS above baseline everywhere"]))
    assert not failures, failures


def _relaxed_w0_direct(n):
    g = math.sqrt((T.rts + T.difs) / T.slot)
    x = n * g
    return 3 / (2 * math.sqrt(2)) * x - 3 / 4 + math.sqrt(9 / 8 * x ** 2 - 21 * math.sqrt(2) / 8 * x + 1 / 16)


def test_criterion_7_table_w0(capsys):
    t0 = time.perf_counter()
    table = {20: 128, 50: 256, 100: 512, 200: 1024, 500: 4096}
    picks, rgap = {}, 0.0
    for n in table:
        ch = opt.optimal_w0(n, T)
        picks[n] = ch.chosen
        rgap = max(rgap, abs(ch.relaxed - _relaxed_w0_direct(n)))
    spots = (opt.optimal_w0(20, T).relaxed, opt.optimal_w0(100, T).relaxed)
    dt = time.perf_counter() - t0
    ok = (picks == table and rgap < 0.5 and abs(spots[0] - 99.3) < 0.5
          and abs(spots[1] - 506.6) < 0.5 and dt < 120)
    report(capsys, 7, ok, f"picks {picks}, relaxed gap {rgap:.1e}, N=20 -> {spots[0]:.2f}, "
                          f"N=100 -> {spots[1]:.2f}")
    assert picks == table
    assert rgap < 0.5
    assert spots[0] == pytest.approx(99.3, abs=0.5) and spots[1] == pytest.approx(506.6, abs=0.5)
    assert dt < 120


def test_criterion_8_table_n(capsys):
    table = {32: 4, 64: 9, 128: 17, 256: 35, 1024: 138}
    g = (T.rts + T.difs) / T.slot
    bad, root_gap, cells = [], 0.0, []
    for w0, expect in table.items():
        ch = opt.optimal_n(w0, T)
        c = lambda n: opt.full_throughput(w0, n, 4, T)
        if not (c(ch.chosen) >= c(ch.chosen + 1) and (ch.chosen == 1 or c(ch.chosen) >= c(ch.chosen - 1))):
            bad.append(w0)
        eta = (w0 - 1) / (w0 * w0 / 3 + w0 / 2 + 1 / 6)
        a, b = (g - 1) * eta * eta / 2, eta + eta * eta / 2
        direct = (-b + math.sqrt(b * b + 4 * a)) / (2 * a)
        root_gap = max(root_gap, abs(ch.relaxed - direct))
        status = "MATCH" if ch.chosen == expect else "MISMATCH"
        cells.append(f"W0={w0}: table {expect}, root {ch.relaxed:.2f}, chosen {ch.chosen} {status}")
    ok = not bad and root_gap < 1e-6
    report(capsys, 8, ok, f"local-max failures {bad}, root gap {root_gap:.1e}")
    with capsys.disabled():
        print("\n".join("    " + ln for ln in cells))
    assert not bad
    assert root_gap < 1e-6


def _random_map(rng):
    ns = int(rng.integers(2, 7))
    upper = np.triu(rng.random((ns, ns)) < 0.6, 1).astype(int)
    return upper + upper.T


def test_criterion_9_partner_map(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    violations, gaps = [], []
    done = 0
    while done < 200:
        S = _random_map(rng)
        total = int(S.sum())
        if total == 0:
            continue
        target = 2 * int(rng.integers(0, total // 2 + 1))
        st = opt.greedy_partner_map(S, target)
        for B in st.current_set:
            if not (np.array_equal(B, B.T) and (B <= S).all() and int(B.sum()) == target
                    and not np.diag(B).any()):
                violations.append("constraint")
        q_prev = opt.q_value(S)
        for h in st.history:
            if q_prev - h["Q"] != 2 * h["g"] - 2:
                violations.append("q-step")
            q_prev = h["Q"]
        gaps.append(st.q_value - opt.brute_force_partner_map(S, target)[0])
        done += 1
    k3 = 1 - np.eye(3, dtype=int)
    star = np.zeros((5, 5), dtype=int)
    star[0, 1:] = star[1:, 0] = 1
    exact = all(opt.greedy_partner_map(S, 4).q_value == opt.brute_force_partner_map(S, 4)[0]
                for S in (k3, star))
    dt = time.perf_counter() - t0
    gaps = np.array(gaps)
    ok = not violations and exact and dt < 60
    report(capsys, 9, ok, f"{done} instances, violations {len(violations)}, "
                          f"optimal in {int((gaps == 0).sum())}, max Q gap {int(gaps.max())}, "
                          f"K3/star exact {exact}, {dt:.1f}s")
    assert not violations
    assert exact
    assert (gaps >= 0).all()
    assert dt < 60


def test_criterion_10_determinism(sim_grid, tmp_path, capsys):
    rows, _ = sim_grid
    r = rows[32]
    params = ProtocolParams(32, SIM_M, SIM_N)
    again = sim.simulate_pairs(params, T, SIM_SLOTS, SIM_SEED)
    base_again = sim.simulate_baseline(SIM_N, 32, SIM_M, T, SIM_SLOTS, SIM_SEED)
    same_sim = again == r["ds"].reps[0] and base_again == r["base"].reps[0]
    files_equal = True
    for cmd in (["simulate", "--w0", "32", "--n", "5", "--reps", "2", "--horizon", "20000"],
                ["compare", "--w0", "32", "--n", "5", "--reps", "2", "--horizon", "20000"],
                ["analytic", "--w0", "32,64"], ["optimize-w0", "--n", "20,50"],
                ["optimize-n", "--w0", "32"], ["reproduce-table5"]):
        outs = []
        for k in range(2):
            d = tmp_path / f"{cmd[0]}{k}"
            assert cli.run(cmd + ["--out", str(d)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        files_equal &= outs[0] == outs[1]
    report(capsys, 10, same_sim and files_equal,
           f"simulation rerun identical {same_sim}, CLI outputs identical {files_equal}")
    assert same_sim
    assert files_equal
