"""Brute-force and closed-form references for tiny instances.

``grid_wsrm`` searches real beams ``f_m = sqrt(p_m) (cos a_m, sin a_m)`` for
networks of at most two cells on one subcarrier with two real-valued transmit
antennas. Two facts keep the search exhaustive yet small:

* the WSR does not depend on the sign of a beam, so angles span ``[0, pi)``;
* scaling every beam by ``t > 1`` raises every SINR (noise is positive), so a
  maximizer has at least one cell at full power. Powers are searched on that
  boundary only, parametrized by ``s in [0, 2]``: ``s <= 1`` puts cell 0 at full
  power and cell 1 at ``s * P_1``; ``s >= 1`` puts cell 1 at full power and
  cell 0 at ``(2 - s) * P_0``.

A coarse pass covers the whole box; the best coarse points are then refined by
exhaustive local grids at full resolution until the best point stops moving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BeamformerSet, ChannelSet, Scenario, evaluate

__all__ = ["GridResult", "GridSpec", "closed_form_single_link", "grid_wsrm"]


@dataclass(frozen=True)
class GridSpec:
    angle_steps: int = 1000
    power_steps: int = 1000
    coarse_factor: int = 10
    top_k: int = 16
    max_points: int = 10**7

    def __post_init__(self):
        if self.angle_steps < 2 or self.power_steps < 2:
            raise ValueError("grid needs at least 2 steps per dimension")
        if self.coarse_factor < 1:
            raise ValueError("coarse_factor must be >= 1")


@dataclass
class GridResult:
    wsr: float
    beams: BeamformerSet
    angles: np.ndarray
    powers: np.ndarray
    evaluated: int


def closed_form_single_link(h, p: float) -> tuple[np.ndarray, float]:
    """Matched beam and rate of an interference-free link with budget ``p``."""
    h = np.asarray(h, dtype=complex).ravel()
    norm = np.linalg.norm(h)
    if norm == 0:
        raise ValueError("zero channel")
    if p < 0:
        raise ValueError("power must be nonnegative")
    f = np.sqrt(p) * h.conj() / norm
    return f, float(np.log2(1.0 + p * norm**2))


def _check_tiny(scenario: Scenario, channels: ChannelSet) -> None:
    channels.check(scenario)
    if scenario.n_cells > 2 or scenario.n_sub != 1 or scenario.n_tx != 2:
        raise ValueError(
            "grid oracle handles at most 2 cells, 1 subcarrier and 2 antennas; got "
            f"{scenario.n_cells} cells, {scenario.n_sub} subcarriers, {scenario.n_tx} antennas"
        )
    if np.any(np.abs(channels.h.imag) > 0):
        raise ValueError("grid oracle needs real-valued channels")


class _Objective:
    """Vectorized exact WSR over (angle_0, angle_1, boundary position)."""

    def __init__(self, scenario: Scenario, channels: ChannelSet):
        self.n = scenario.n_cells
        self.P = scenario.p_max
        self.w = scenario.link_weights()
        # g[m, b]: real channel from BS b to the user served by cell m
        self.g = np.array([[channels.h[m, scenario.assignment[m, 0], b, 0].real
                            for b in range(self.n)] for m in range(self.n)])

    def gain(self, m: int, b: int, ang: np.ndarray) -> np.ndarray:
        return (self.g[m, b, 0] * np.cos(ang) + self.g[m, b, 1] * np.sin(ang)) ** 2

    def powers(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.n == 1:
            return np.full_like(s, self.P[0]), np.zeros_like(s)
        p0 = np.where(s <= 1.0, self.P[0], (2.0 - s) * self.P[0])
        p1 = np.where(s <= 1.0, s * self.P[1], self.P[1])
        return p0, p1

    def __call__(self, a0, a1, s) -> np.ndarray:
        """WSR on the outer grid ``a0 x a1 x s``."""
        p0, p1 = self.powers(s)
        sig0 = self.gain(0, 0, a0)[:, None, None] * p0[None, None, :]
        if self.n == 1:
            return np.broadcast_to(self.w[0] * np.log2(1.0 + sig0), (len(a0), len(a1), len(s)))
        int0 = self.gain(0, 1, a1)[None, :, None] * p1[None, None, :]
        sig1 = self.gain(1, 1, a1)[None, :, None] * p1[None, None, :]
        int1 = self.gain(1, 0, a0)[:, None, None] * p0[None, None, :]
        return (self.w[0] * np.log2(1.0 + sig0 / (1.0 + int0))
                + self.w[1] * np.log2(1.0 + sig1 / (1.0 + int1)))


def grid_wsrm(scenario: Scenario, channels: ChannelSet, grid: GridSpec | None = None) -> GridResult:
    """Grid maximum of the exact WSR over real beams and boundary powers."""
    grid = grid or GridSpec()
    _check_tiny(scenario, channels)
    obj = _Objective(scenario, channels)
    n_ang, n_pow = grid.angle_steps, 2 * grid.power_steps
    d_ang, d_pow = np.pi / n_ang, 2.0 / n_pow
    ang1_steps = n_ang if scenario.n_cells == 2 else 1

    cf = grid.coarse_factor
    ca, cs = max(2, n_ang // cf), max(2, n_pow // cf)
    ca1 = ca if scenario.n_cells == 2 else 1
    n_coarse = ca * ca1 * (cs + 1)
    if n_coarse > grid.max_points:
        raise ValueError(f"grid has {n_coarse} points, limit is {grid.max_points}")

    # coarse indices live on the fine lattice: fine index = round(coarse * n/c)
    i0 = np.unique(np.round(np.arange(ca) * n_ang / ca).astype(int))
    i1 = np.unique(np.round(np.arange(ca1) * ang1_steps / ca1).astype(int))
    i2 = np.unique(np.round(np.arange(cs + 1) * n_pow / cs).astype(int))
    vals = obj(i0 * d_ang, i1 * d_ang, i2 * d_pow)
    evaluated = vals.size

    order = np.argsort(vals, axis=None)[::-1][: grid.top_k]
    best_val, best_idx = -np.inf, None
    if cf > 1:
        radius = cf
        for flat in order:
            a, b, c = np.unravel_index(flat, vals.shape)
            idx = (int(i0[a]), int(i1[b]), int(i2[c]))
            val = vals[a, b, c]
            for _ in range(100):
                w0 = np.arange(idx[0] - radius, idx[0] + radius + 1) % n_ang
                w1 = (np.arange(idx[1] - radius, idx[1] + radius + 1) % n_ang
                      if scenario.n_cells == 2 else np.array([0]))
                w2 = np.arange(max(0, idx[2] - radius), min(n_pow, idx[2] + radius) + 1)
                local = obj(w0 * d_ang, w1 * d_ang, w2 * d_pow)
                evaluated += local.size
                la, lb, lc = np.unravel_index(np.argmax(local), local.shape)
                new = (int(w0[la]), int(w1[lb]), int(w2[lc]))
                if local[la, lb, lc] <= val or new == idx:
                    break
                idx, val = new, local[la, lb, lc]
            if val > best_val:
                best_val, best_idx = val, idx
    else:
        flat = order[0]
        a, b, c = np.unravel_index(flat, vals.shape)
        best_val, best_idx = vals[a, b, c], (int(i0[a]), int(i1[b]), int(i2[c]))

    angles = np.array([best_idx[0] * d_ang, best_idx[1] * d_ang])[: scenario.n_cells]
    p0, p1 = obj.powers(np.array([best_idx[2] * d_pow]))
    powers = np.array([p0[0], p1[0]])[: scenario.n_cells]
    f = np.zeros((scenario.n_cells, 1, 2), complex)
    for m in range(scenario.n_cells):
        f[m, 0] = np.sqrt(powers[m]) * np.array([np.cos(angles[m]), np.sin(angles[m])])
    beams = BeamformerSet(f)
    wsr = evaluate(scenario, channels, beams).weighted_sum_rate
    return GridResult(wsr, beams, angles, powers, evaluated)
