import io

import numpy as np
import pytest

from coordbf.cli import ExperimentConfig, build_instance
from coordbf.model import ChannelSet, Scenario
from coordbf.powermin import (
    POWERMIN_SCHEMA, ObjectiveMode, SinrTargets, build_powermin, interference_margin,
    solve_powermin, write_powermin_csv,
)
from coordbf.wsrm import spca_solve

from conftest import random_channels, single_link

TOTAL, MINMAX = ObjectiveMode.TOTAL_POWER, ObjectiveMode.MIN_MAX_CELL_POWER


def test_targets_validation():
    with pytest.raises(ValueError):
        SinrTargets([1.0, 0.0])
    with pytest.raises(ValueError):
        SinrTargets([np.inf])


def test_missing_target_is_error():
    sc, ch = single_link([1, 0], n_sub=2)
    with pytest.raises(ValueError, match="targets"):
        build_powermin(sc, ch, SinrTargets([1.0]))


def test_single_cell_closed_form():
    sc, ch = single_link([1, 0])
    res = solve_powermin(sc, ch, SinrTargets([4.0]))
    assert res.feasible
    np.testing.assert_allclose(res.beams.f[0, 0], [2, 0], atol=1e-6)
    assert res.objective == pytest.approx(4.0, rel=1e-6)


def test_tiny_targets_need_tiny_power():
    sc, ch = single_link([0.3, 0.4j])
    res = solve_powermin(sc, ch, SinrTargets([1e-9]))
    assert res.objective == pytest.approx(1e-9 / 0.25, rel=1e-6)


def decoupled_pair():
    sc = Scenario(2, 1, 1, 2, 10.0, 1.0, np.zeros((2, 1), int))
    h = np.zeros((2, 1, 2, 1, 2), complex)
    h[0, 0, 0, 0] = [1, 0]
    h[1, 0, 1, 0] = [0, 1]
    return sc, ChannelSet(h)


def test_decoupled_modes():
    sc, ch = decoupled_pair()
    t = SinrTargets([4.0, 9.0])
    assert solve_powermin(sc, ch, t, TOTAL).objective == pytest.approx(13.0, rel=1e-6)
    assert solve_powermin(sc, ch, t, MINMAX).objective == pytest.approx(3.0, rel=1e-6)


def test_program_structure():
    sc, ch = decoupled_pair()
    counts = build_powermin(sc, ch, SinrTargets([1.0, 1.0]), TOTAL).counts()
    assert counts["sinr"] == 2 and counts["zero_imag"] == 2
    assert counts["cell_power"] == 2 and counts["power_epigraph"] == 2
    counts = build_powermin(sc, ch, SinrTargets([1.0, 1.0]), MINMAX).counts()
    assert counts["cell_power"] == 2 and "power_epigraph" not in counts


# Optima computed independently with cvxpy (complex variables) and CVXOPT on
# CN(0,1) channels drawn from default_rng(seed): 3 cells, 2 subcarriers, 2
# antennas, common target gamma. None marks an infeasible target.
FROZEN = {
    (100, 1.0): (17.56093402, 2.466237262),
    (101, 1.0): (60.5949541, 5.021885107),
    (102, 1.0): (8.695791943, 2.000481996),
    (102, 3.0): (94.41755438, 6.946637627),
    (100, 3.0): None,
    (101, 3.0): None,
}


def frozen_instance(seed):
    rng = np.random.default_rng(seed)
    sc = Scenario(3, 1, 2, 2, 1.0, 1.0, np.zeros((3, 2), int))
    h = (rng.standard_normal((3, 1, 3, 2, 2)) + 1j * rng.standard_normal((3, 1, 3, 2, 2))) / np.sqrt(2)
    return sc, ChannelSet(h)


@pytest.mark.parametrize("key", sorted(FROZEN))
def test_frozen_optima(key):
    seed, gamma = key
    sc, ch = frozen_instance(seed)
    t = SinrTargets(np.full(sc.n_links, gamma))
    total, minmax = solve_powermin(sc, ch, t, TOTAL), solve_powermin(sc, ch, t, MINMAX)
    if FROZEN[key] is None:
        assert total.status == minmax.status == "Infeasible"
        return
    assert total.objective == pytest.approx(FROZEN[key][0], rel=1e-6)
    assert minmax.objective == pytest.approx(FROZEN[key][1], rel=1e-6)


def test_matches_cvxpy_live():
    cp = pytest.importorskip("cvxpy")
    if "CVXOPT" not in cp.installed_solvers():
        pytest.skip("CVXOPT backend not installed")
    sc, ch = frozen_instance(7)
    gamma = np.linspace(0.5, 1.5, sc.n_links)
    F = [cp.Variable(2, complex=True) for _ in range(sc.n_links)]
    cons = []
    for j in range(sc.n_links):
        k, m, n = sc.link(j)
        s = ch.h[m, k, m, n] @ F[j]
        terms = [ch.h[m, k, b, n] @ F[b * sc.n_sub + n] for b in range(sc.n_cells) if b != m]
        v = cp.hstack([cp.Constant(1.0)] + [cp.real(x) for x in terms] + [cp.imag(x) for x in terms])
        cons += [cp.imag(s) == 0, cp.norm(v) <= cp.real(s) / np.sqrt(gamma[j])]
    ref = cp.Problem(cp.Minimize(sum(cp.sum_squares(f) for f in F)), cons)
    ref.solve(solver="CVXOPT")
    ours = solve_powermin(sc, ch, SinrTargets(gamma))
    assert ours.objective == pytest.approx(ref.value, rel=1e-6)


def test_constraints_active_and_met():
    rng = np.random.default_rng(4)
    sc = Scenario(3, 1, 3, 2, 1.0, 1.0, np.zeros((3, 3), int))
    ch = random_channels(rng, 3, 3, 2)
    t = SinrTargets(rng.uniform(0.2, 1.0, sc.n_links))
    res = solve_powermin(sc, ch, t)
    np.testing.assert_allclose(res.sinr, t.gamma_target, rtol=1e-5)
    assert np.all(res.sinr >= t.gamma_target - 1e-6)


def test_raising_one_target_never_lowers_power():
    sc, ch = frozen_instance(102)
    gamma = np.full(sc.n_links, 1.0)
    base = solve_powermin(sc, ch, SinrTargets(gamma)).objective
    for j in range(sc.n_links):
        g = gamma.copy()
        g[j] *= 1.5
        assert solve_powermin(sc, ch, SinrTargets(g)).objective >= base * (1 - 1e-7)


@pytest.mark.parametrize("s", [0.5, 3.0])
def test_channel_scaling_on_noise_limited_instance(s):
    sc, ch = decoupled_pair()
    t = SinrTargets([2.0, 5.0])
    base = solve_powermin(sc, ch, t).objective
    assert solve_powermin(sc, ch.scaled(s), t).objective == pytest.approx(base / s**2, rel=1e-6)


def test_interference_limited_targets_infeasible():
    # single antenna, strong cross gains: the SINR product is capped
    sc = Scenario(2, 1, 1, 1, 1.0, 1.0, np.zeros((2, 1), int))
    h = np.ones((2, 1, 2, 1, 1), complex)
    ch = ChannelSet(h)
    ok = SinrTargets([0.5, 0.5])
    assert solve_powermin(sc, ch, ok).feasible
    assert interference_margin(sc, ch, ok) > 0
    bad = ok.scaled(1e6)
    res = solve_powermin(sc, ch, bad)
    assert res.status == "Infeasible" and res.beams is None
    assert interference_margin(sc, ch, bad) <= 1e-6


def test_roundtrip_on_desk_seed():
    sc, ch = build_instance(ExperimentConfig(), 0, 20.0)
    w = spca_solve(sc, ch)
    t = SinrTargets(w.report.sinr)
    total = solve_powermin(sc, ch, t, TOTAL)
    minmax = solve_powermin(sc, ch, t, MINMAX)
    assert total.objective <= w.report.per_cell_power.sum() + 1e-6
    assert minmax.objective**2 <= w.report.per_cell_power.max() + 1e-6
    assert solve_powermin(sc, ch, t.scaled(1e6)).status == "Infeasible"


def test_decoupled_roundtrip_matches_wsrm_power():
    sc, ch = decoupled_pair()
    w = spca_solve(sc, ch)
    res = solve_powermin(sc, ch, SinrTargets(w.report.sinr))
    np.testing.assert_allclose(res.per_cell_power, w.report.per_cell_power, rtol=1e-6)


def test_csv_report():
    sc, ch = decoupled_pair()
    res = solve_powermin(sc, ch, SinrTargets([4.0, 9.0]))
    buf = io.StringIO()
    write_powermin_csv(sc, res, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == POWERMIN_SCHEMA
    assert lines[1].split(",") == ["link", "cell", "subcarrier", "target_sinr",
                                   "achieved_sinr", "cell_power", "status"]
    assert len(lines) == 4 and lines[2].endswith("Optimal")
