"""Network model: scenario topology, channels, beamformers and exact rates.

Indexing conventions used throughout the package:

* a *link* is a triple ``(k, m, n)``: user ``k`` of cell ``m`` served by base
  station ``m`` on subcarrier ``n``, with ``k = assignment[m, n]``;
* links are enumerated row-major over ``(cell, subcarrier)``, so link ``j`` is
  cell ``j // n_sub``, subcarrier ``j % n_sub``;
* ``ChannelSet.h[c, k, m, n]`` is the ``n_tx`` row vector from base station
  ``m`` to user ``k`` of cell ``c`` on subcarrier ``n``;
* ``BeamformerSet.f[m, n]`` is the ``n_tx`` beam base station ``m`` uses on
  subcarrier ``n`` (one scheduled user per cell and subcarrier).

Noise power is normalized to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BeamformerSet",
    "ChannelSet",
    "DimensionError",
    "RateReport",
    "Scenario",
    "compute_sinr",
    "evaluate",
    "link_gains",
]


class DimensionError(ValueError):
    """Array shapes disagree with the scenario."""


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scenario:
    n_cells: int
    n_users_per_cell: int
    n_sub: int
    n_tx: int
    p_max: np.ndarray
    weights: np.ndarray
    assignment: np.ndarray

    def __post_init__(self):
        for name in ("n_cells", "n_users_per_cell", "n_sub", "n_tx"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        p_max = np.broadcast_to(np.asarray(self.p_max, dtype=float), (self.n_cells,))
        weights = np.broadcast_to(
            np.asarray(self.weights, dtype=float), (self.n_cells, self.n_users_per_cell)
        )
        assignment = np.asarray(self.assignment)
        if assignment.shape != (self.n_cells, self.n_sub):
            raise DimensionError(
                f"assignment has shape {assignment.shape}, expected {(self.n_cells, self.n_sub)}"
            )
        if not np.all(p_max > 0):
            raise ValueError(f"p_max must be positive, got {p_max}")
        if np.any(weights < 0) or not np.any(weights > 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite, nonnegative, with one positive entry")
        if assignment.dtype.kind not in "iu" or assignment.min() < 0 or assignment.max() >= self.n_users_per_cell:
            raise ValueError("assignment entries must be user indices of the serving cell")
        object.__setattr__(self, "p_max", _frozen(p_max, float))
        object.__setattr__(self, "weights", _frozen(weights, float))
        object.__setattr__(self, "assignment", _frozen(assignment, int))

    @property
    def n_links(self) -> int:
        """Number of scheduled links J = n_cells * n_sub."""
        return self.n_cells * self.n_sub

    def link(self, j: int) -> tuple[int, int, int]:
        """``(k, m, n)`` of link ``j``."""
        if not 0 <= j < self.n_links:
            raise IndexError(f"link index {j} outside 0..{self.n_links - 1}")
        m, n = divmod(j, self.n_sub)
        return int(self.assignment[m, n]), m, n

    def links(self) -> list[tuple[int, int, int]]:
        return [self.link(j) for j in range(self.n_links)]

    def link_weights(self) -> np.ndarray:
        """Per-link objective weight: the weight of the scheduled user."""
        m = np.repeat(np.arange(self.n_cells), self.n_sub)
        return self.weights[m, self.assignment.ravel()]

    def with_p_max(self, p_max) -> "Scenario":
        return Scenario(self.n_cells, self.n_users_per_cell, self.n_sub, self.n_tx,
                        p_max, self.weights, self.assignment)

    def with_weights(self, weights) -> "Scenario":
        return Scenario(self.n_cells, self.n_users_per_cell, self.n_sub, self.n_tx,
                        self.p_max, weights, self.assignment)

    def to_dict(self) -> dict:
        return {
            "n_cells": self.n_cells,
            "n_users_per_cell": self.n_users_per_cell,
            "n_sub": self.n_sub,
            "n_tx": self.n_tx,
            "p_max": self.p_max.tolist(),
            "weights": self.weights.tolist(),
            "assignment": self.assignment.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            int(d["n_cells"]), int(d["n_users_per_cell"]), int(d["n_sub"]), int(d["n_tx"]),
            np.asarray(d["p_max"], dtype=float), np.asarray(d["weights"], dtype=float),
            np.asarray(d["assignment"], dtype=int),
        )


@dataclass(frozen=True, eq=False)
class ChannelSet:
    h: np.ndarray

    def __post_init__(self):
        h = _frozen(self.h, complex)
        if h.ndim != 5:
            raise DimensionError(f"channel array must be 5-D, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(h))[0])
            raise ValueError(f"non-finite channel entry at index {bad}")
        object.__setattr__(self, "h", h)

    def check(self, scenario: Scenario) -> None:
        expected = (scenario.n_cells, scenario.n_users_per_cell, scenario.n_cells,
                    scenario.n_sub, scenario.n_tx)
        if self.h.shape != expected:
            raise DimensionError(f"channels have shape {self.h.shape}, expected {expected}")

    def own(self, scenario: Scenario, j: int) -> np.ndarray:
        """Channel of link ``j`` from its serving base station."""
        k, m, n = scenario.link(j)
        return self.h[m, k, m, n]

    def cross(self, scenario: Scenario, j: int, bs: int) -> np.ndarray:
        """Channel from base station ``bs`` to the user of link ``j``."""
        k, m, n = scenario.link(j)
        return self.h[m, k, bs, n]

    def scaled(self, s: float) -> "ChannelSet":
        return ChannelSet(self.h * s)


@dataclass(frozen=True, eq=False)
class BeamformerSet:
    f: np.ndarray

    def __post_init__(self):
        f = _frozen(self.f, complex)
        if f.ndim != 3:
            raise DimensionError(f"beamformer array must be 3-D, got shape {f.shape}")
        object.__setattr__(self, "f", f)

    @classmethod
    def zeros(cls, scenario: Scenario) -> "BeamformerSet":
        return cls(np.zeros((scenario.n_cells, scenario.n_sub, scenario.n_tx), complex))

    def check(self, scenario: Scenario) -> None:
        expected = (scenario.n_cells, scenario.n_sub, scenario.n_tx)
        if self.f.shape != expected:
            raise DimensionError(f"beamformers have shape {self.f.shape}, expected {expected}")

    def per_cell_power(self) -> np.ndarray:
        return np.sum(np.abs(self.f) ** 2, axis=(1, 2))

    def link_beam(self, scenario: Scenario, j: int) -> np.ndarray:
        _, m, n = scenario.link(j)
        return self.f[m, n]


@dataclass(frozen=True, eq=False)
class RateReport:
    sinr: np.ndarray
    rate_bits: np.ndarray
    weighted_sum_rate: float
    per_cell_power: np.ndarray


def link_gains(scenario: Scenario, channels: ChannelSet, beams: BeamformerSet) -> np.ndarray:
    """``G[m, n, b] = |h f|^2`` from base station ``b`` to the user of link (m, n)."""
    channels.check(scenario)
    beams.check(scenario)
    m_idx = np.arange(scenario.n_cells)[:, None]
    n_idx = np.arange(scenario.n_sub)[None, :]
    # hh[m, n, b, :] = channel from BS b to the user scheduled on (m, n)
    hh = channels.h[m_idx, scenario.assignment, :, n_idx]
    # f[b, n, :] -> align as [n, b, :]
    amp = np.einsum("mnbt,nbt->mnb", hh, np.transpose(beams.f, (1, 0, 2)))
    return np.abs(amp) ** 2


def _sinr_from_gains(g: np.ndarray) -> np.ndarray:
    n_cells = g.shape[0]
    own = g[np.arange(n_cells), :, np.arange(n_cells)]
    interference = g.sum(axis=2) - own
    return own / (1.0 + interference)


def compute_sinr(scenario: Scenario, channels: ChannelSet, beams: BeamformerSet, j: int) -> float:
    """SINR of link ``j`` with unit noise power."""
    k, m, n = scenario.link(j)
    channels.check(scenario)
    beams.check(scenario)
    signal = abs(channels.h[m, k, m, n] @ beams.f[m, n]) ** 2
    interference = sum(
        abs(channels.h[m, k, b, n] @ beams.f[b, n]) ** 2
        for b in range(scenario.n_cells) if b != m
    )
    return float(signal / (1.0 + interference))


def evaluate(scenario: Scenario, channels: ChannelSet, beams: BeamformerSet) -> RateReport:
    """Exact SINR, rates (bits per channel use) and weighted sum-rate."""
    g = link_gains(scenario, channels, beams)
    sinr = _sinr_from_gains(g).ravel()
    rate = np.log2(1.0 + sinr)
    wsr = float(np.dot(scenario.link_weights(), rate))
    return RateReport(_frozen(sinr, float), _frozen(rate, float), wsr,
                      _frozen(beams.per_cell_power(), float))
