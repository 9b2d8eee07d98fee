import numpy as np
import pytest

from coordbf.chanlab import (
    GeometryConfig, base_station_positions, drop_users, generate_channels, pathloss_amplitude,
    rayleigh, read_channels_csv, shadowing_db, write_channels_csv,
)
from coordbf.model import Scenario


def scen(n_cells=3, n_users=2, n_sub=4, n_tx=2):
    return Scenario(n_cells, n_users, n_sub, n_tx, 1.0, 1.0, np.zeros((n_cells, n_sub), int))


def test_geometry_validation():
    with pytest.raises(ValueError):
        GeometryConfig(inner_radius=600, outer_radius=500)
    with pytest.raises(ValueError):
        GeometryConfig(pathloss_exp=2.0)
    with pytest.raises(ValueError):
        GeometryConfig(pathloss_domain="db")


def test_bs_spacing():
    pos = base_station_positions(3, 1000.0)
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    np.testing.assert_allclose(d[np.triu_indices(3, 1)], 1000.0)


def test_collapsed_annulus_pins_distance():
    g = GeometryConfig(inner_radius=500, outer_radius=500)
    l = drop_users(g, scen())
    np.testing.assert_allclose(l[np.arange(3), :, np.arange(3)], 500.0)


def test_drop_is_deterministic():
    g = GeometryConfig(seed=42)
    np.testing.assert_array_equal(drop_users(g, scen()), drop_users(g, scen()))
    assert not np.array_equal(drop_users(g, scen()), drop_users(g.with_seed(43), scen()))


def test_drop_squared_radius_moment():
    g = GeometryConfig(seed=1)
    l = drop_users(g, scen(n_cells=1, n_users=10_000))
    r_i, r_o = g.inner_radius, g.outer_radius
    area = np.pi * (r_o**2 - r_i**2)
    want = (r_o**4 - r_i**4) * 2 * np.pi / 4 / area
    assert np.mean(l[0, :, 0] ** 2) == pytest.approx(want, rel=0.02)


@pytest.mark.parametrize("l, amp", [(200.0, 1.0), (400.0, 2 ** -3.5)])
def test_pathloss_spot_values(l, amp):
    g = GeometryConfig(shadowing_std_db=0.0, fading=False)
    sc = scen(n_cells=1, n_users=1, n_sub=1, n_tx=2)
    ch = generate_channels(g, sc, distances=np.full((1, 1, 1), l))
    np.testing.assert_allclose(ch.h[0, 0, 0, 0], amp, rtol=1e-15)
    assert pathloss_amplitude(l, g) == (200.0 / l) ** 3.5


def test_pathloss_power_domain():
    g = GeometryConfig(pathloss_domain="power")
    assert pathloss_amplitude(400.0, g) == pytest.approx(np.sqrt(2 ** -3.5))


def test_pathloss_rejects_nonpositive_distance():
    with pytest.raises(ValueError):
        pathloss_amplitude([100.0, 0.0], GeometryConfig())
    with pytest.raises(ValueError):
        generate_channels(GeometryConfig(), scen(1, 1, 1, 1), distances=np.zeros((1, 1, 1)))


def test_amplitude_decreases_with_distance():
    g = GeometryConfig(seed=3)
    sc = scen(n_cells=1, n_users=1, n_sub=2)
    near = generate_channels(g, sc, distances=np.full((1, 1, 1), 300.0))
    far = generate_channels(g, sc, distances=np.full((1, 1, 1), 301.0))
    assert np.all(np.abs(far.h) < np.abs(near.h))


def test_shadowing_and_fading_moments():
    rng = np.random.default_rng(9)
    s = shadowing_db(rng, 100_000, 8.0)
    assert np.std(s) == pytest.approx(8.0, rel=0.02)
    assert abs(np.mean(s)) < 0.02 * 8.0
    lam = rayleigh(rng, 100_000)
    assert np.mean(np.abs(lam) ** 2) == pytest.approx(1.0, rel=0.02)
    real = rayleigh(rng, 100_000, complex_valued=False)
    assert np.all(real.imag == 0) and np.var(real.real) == pytest.approx(1.0, rel=0.02)


def test_channel_determinism_and_shape():
    g = GeometryConfig(seed=11)
    a, b = generate_channels(g, scen()), generate_channels(g, scen())
    assert a.h.shape == (3, 2, 3, 4, 2)
    np.testing.assert_array_equal(a.h, b.h)


def test_frequency_flat_shadowing_shares_factor():
    g = GeometryConfig(seed=2, frequency_flat_shadowing=True, fading=False)
    h = generate_channels(g, scen()).h
    np.testing.assert_allclose(np.abs(h[..., 0]), np.abs(h[..., :1, 0]).repeat(4, axis=-1))


def test_csv_roundtrip(tmp_path):
    ch = generate_channels(GeometryConfig(seed=5), scen(2, 1, 2, 2))
    path = tmp_path / "h.csv"
    write_channels_csv(ch, path)
    np.testing.assert_array_equal(read_channels_csv(path).h, ch.h)
