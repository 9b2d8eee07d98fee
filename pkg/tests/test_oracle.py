import math

import numpy as np
import pytest

from coordbf.chanlab import GeometryConfig, generate_channels
from coordbf.model import ChannelSet, Scenario
from coordbf.oracle import GridSpec, closed_form_single_link, grid_wsrm

from conftest import decouple, single_link


def tiny(seed, p=100.0):
    sc = Scenario(2, 1, 1, 2, p, 1.0, np.zeros((2, 1), int))
    return sc, generate_channels(GeometryConfig(seed=seed, complex_fading=False), sc)


def test_closed_form_examples():
    f, r = closed_form_single_link([1, 0], 4.0)
    np.testing.assert_allclose(f, [2, 0])
    assert r == pytest.approx(2.3219, abs=1e-4)
    assert closed_form_single_link([1, 0], 0.0)[1] == 0.0
    assert closed_form_single_link([0.6, 0.8j], 8.0)[1] == pytest.approx(math.log2(9))
    with pytest.raises(ValueError):
        closed_form_single_link([0, 0], 1.0)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(angle_steps=1)


def test_grid_single_link_within_one_cell():
    sc, ch = single_link([1, 0], p_max=4.0)
    res = grid_wsrm(sc, ch)
    # one angle step of pi/1000 costs at most cos^2 of that step
    assert res.wsr == pytest.approx(math.log2(5), abs=math.log2(5) * (1 - math.cos(math.pi / 1000) ** 2) + 1e-12)
    assert res.wsr <= math.log2(5) + 1e-12


def test_grid_rejects_large_or_complex():
    sc = Scenario(3, 1, 1, 2, 1.0, 1.0, np.zeros((3, 1), int))
    with pytest.raises(ValueError, match="at most 2 cells"):
        grid_wsrm(sc, ChannelSet(np.ones((3, 1, 3, 1, 2))))
    sc2, ch2 = single_link([1, 1j])
    with pytest.raises(ValueError, match="real"):
        grid_wsrm(sc2, ch2)
    sc3, ch3 = tiny(0)
    with pytest.raises(ValueError, match="limit"):
        grid_wsrm(sc3, ch3, GridSpec(max_points=1000))


def test_symmetric_instance_has_equal_powers():
    sc = Scenario(2, 1, 1, 2, 10.0, 1.0, np.zeros((2, 1), int))
    h = np.zeros((2, 1, 2, 1, 2))
    h[0, 0, 0, 0] = [1.0, 0.3]
    h[1, 0, 1, 0] = [0.3, 1.0]
    h[0, 0, 1, 0] = [0.5, 0.2]
    h[1, 0, 0, 0] = [0.2, 0.5]
    res = grid_wsrm(sc, ChannelSet(h))
    assert res.powers[0] == pytest.approx(res.powers[1])


@pytest.mark.parametrize("seed", range(3))
def test_refinement_self_consistent(seed):
    sc, ch = tiny(seed)
    coarse = grid_wsrm(sc, ch, GridSpec(100, 100, coarse_factor=1))
    fine = grid_wsrm(sc, ch, GridSpec(1000, 1000, coarse_factor=10))
    assert abs(fine.wsr - coarse.wsr) <= 0.005 * fine.wsr
    assert fine.wsr >= coarse.wsr - 1e-12


def test_decoupled_never_beats_closed_form():
    for seed in range(5):
        sc, ch = tiny(seed)
        ch = decouple(ch)
        res = grid_wsrm(sc, ch)
        bound = sum(closed_form_single_link(ch.h[m, 0, m, 0], sc.p_max[m])[1] for m in range(2))
        assert res.wsr <= bound + 1e-12


def test_deterministic():
    sc, ch = tiny(4)
    a, b = grid_wsrm(sc, ch), grid_wsrm(sc, ch)
    assert a.wsr == b.wsr and np.array_equal(a.beams.f, b.beams.f)
