"""Seeded channel generation for the multicell layout.

Base stations sit on the vertices of a regular polygon whose adjacent
vertices are ``inter_bs_distance`` apart (three cells form an equilateral
triangle). Users are dropped uniformly in area inside an annulus around their
serving base station. Each channel entry is

    h = pathloss(l) * Phi * Lambda,   pathloss(l) = (ref / l) ** exp

with ``10 log10(Phi) ~ N(0, std_db^2)`` drawn per (user, BS, subcarrier) and
``Lambda ~ CN(0, 1)`` drawn per antenna.

Random streams come from ``numpy.random.Generator`` with the PCG64 bit
generator. Draw order per call is fixed: user radii, user angles, shadowing,
fading real part, fading imaginary part. Ports to other languages reproduce
the statistics, not the bits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .model import ChannelSet, Scenario

__all__ = [
    "GeometryConfig",
    "base_station_positions",
    "drop_users",
    "generate_channels",
    "pathloss_amplitude",
    "shadowing_db",
    "rayleigh",
    "write_channels_csv",
    "read_channels_csv",
]


@dataclass(frozen=True)
class GeometryConfig:
    inter_bs_distance: float = 1000.0
    inner_radius: float = 500.0
    outer_radius: float = 1000.0
    pathloss_ref: float = 200.0
    pathloss_exp: float = 3.5
    shadowing_std_db: float = 8.0
    seed: int = 0
    pathloss_domain: str = "amplitude"
    frequency_flat_shadowing: bool = False
    fading: bool = True
    complex_fading: bool = True

    def __post_init__(self):
        if not 0 < self.inner_radius <= self.outer_radius:
            raise ValueError("need 0 < inner_radius <= outer_radius")
        if self.pathloss_exp <= 2:
            raise ValueError("pathloss_exp must exceed 2")
        if self.shadowing_std_db < 0:
            raise ValueError("shadowing_std_db must be nonnegative")
        if self.pathloss_domain not in ("amplitude", "power"):
            raise ValueError("pathloss_domain must be 'amplitude' or 'power'")

    def with_seed(self, seed: int) -> "GeometryConfig":
        return replace(self, seed=int(seed))


def base_station_positions(n_cells: int, spacing: float) -> np.ndarray:
    """BS coordinates on a regular polygon with adjacent spacing ``spacing``."""
    if n_cells == 1:
        return np.zeros((1, 2))
    if n_cells == 2:
        return np.array([[-spacing / 2, 0.0], [spacing / 2, 0.0]])
    radius = spacing / (2.0 * np.sin(np.pi / n_cells))
    ang = 2.0 * np.pi * np.arange(n_cells) / n_cells + np.pi / 2
    return radius * np.column_stack([np.cos(ang), np.sin(ang)])


def _rng(geometry: GeometryConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(geometry.seed) & 0xFFFFFFFFFFFFFFFF, stream])


def drop_users(geometry: GeometryConfig, scenario: Scenario) -> np.ndarray:
    """Distances ``l[c, k, m]`` from user ``k`` of cell ``c`` to base station ``m``."""
    rng = _rng(geometry, 0)
    shape = (scenario.n_cells, scenario.n_users_per_cell)
    r_in, r_out = geometry.inner_radius, geometry.outer_radius
    # uniform in area: r^2 uniform on [r_in^2, r_out^2]
    r = np.sqrt(rng.uniform(r_in**2, r_out**2, size=shape))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    bs = base_station_positions(scenario.n_cells, geometry.inter_bs_distance)
    users = bs[:, None, :] + np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)
    diff = users[:, :, None, :] - bs[None, None, :, :]
    return np.linalg.norm(diff, axis=-1)


def pathloss_amplitude(distance, geometry: GeometryConfig) -> np.ndarray:
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("distances must be positive")
    gain = (geometry.pathloss_ref / distance) ** geometry.pathloss_exp
    return np.sqrt(gain) if geometry.pathloss_domain == "power" else gain


def shadowing_db(rng: np.random.Generator, shape, std_db: float) -> np.ndarray:
    return rng.normal(0.0, std_db, size=shape) if std_db > 0 else np.zeros(shape)


def rayleigh(rng: np.random.Generator, shape, complex_valued: bool = True) -> np.ndarray:
    """Unit-variance fading samples: CN(0, 1), or N(0, 1) when real."""
    if not complex_valued:
        return rng.standard_normal(shape).astype(complex)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def generate_channels(geometry: GeometryConfig, scenario: Scenario, distances=None) -> ChannelSet:
    """Channel set for ``scenario``; users are dropped first when no distances are given."""
    if distances is None:
        distances = drop_users(geometry, scenario)
    distances = np.asarray(distances, dtype=float)
    expected = (scenario.n_cells, scenario.n_users_per_cell, scenario.n_cells)
    if distances.shape != expected:
        raise ValueError(f"distances have shape {distances.shape}, expected {expected}")
    amp = pathloss_amplitude(distances, geometry)
    rng = _rng(geometry, 1)
    if geometry.frequency_flat_shadowing:
        sh = shadowing_db(rng, expected, geometry.shadowing_std_db)[..., None]
    else:
        sh = shadowing_db(rng, expected + (scenario.n_sub,), geometry.shadowing_std_db)
    phi = 10.0 ** (sh / 10.0)
    shape = expected + (scenario.n_sub, scenario.n_tx)
    lam = rayleigh(rng, shape, geometry.complex_fading) if geometry.fading else np.ones(shape, complex)
    h = (amp[..., None] * phi)[..., None] * lam
    return ChannelSet(h)


_CSV_HEADER = ["cell", "user", "bs", "sub", "antenna", "re", "im"]


def write_channels_csv(channels: ChannelSet, path) -> None:
    """One row per (cell, user, bs, subcarrier, antenna)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_HEADER)
        for idx in np.ndindex(*channels.h.shape):
            v = channels.h[idx]
            w.writerow([*idx, repr(float(v.real)), repr(float(v.imag))])


def read_channels_csv(path, shape=None) -> ChannelSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([[int(r[c]) for c in _CSV_HEADER[:5]] for r in rows])
    if shape is None:
        shape = tuple(idx.max(axis=0) + 1)
    h = np.zeros(shape, complex)
    for i, r in zip(idx, rows):
        h[tuple(i)] = float(r["re"]) + 1j * float(r["im"])
    return ChannelSet(h)
