"""Weighted sum-rate maximization by sequential parametric convex approximation.

Each link ``j`` carries auxiliary variables

* ``c_j``: rate surrogate, ``c_j <= (1 + sinr_j) ** alpha_j``;
* ``zeta_j``: bound on the interference-plus-noise amplitude;
* ``p_j``: SINR surrogate with ``sqrt(p_j) * zeta_j <= Re(h_j f_j)``.

The bilinear term ``sqrt(p) * zeta`` is replaced by its convex upper estimate
``U = (p / theta + theta * zeta**2) / 2`` (tight at ``theta = sqrt(p) / zeta``)
and ``c ** q`` by its tangent at the previous iterate. Every iteration is a
single SOCP; ``theta`` and the tangent point are refreshed from its solution.

The product of the ``c_j`` is maximized through a binary tree of hyperbolic
constraints, either padded with constant ones (``HYPERBOLIC_TREE``) or as the
exact geometric mean of the leaves (``GEOMETRIC_MEAN``). Inside the program the
leaves are ``c_j / c_j_prev``, which have the same maximizer as ``c_j`` and stay
close to one regardless of the rate scale.
"""

from __future__ import annotations

import contextlib
import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .conic import Affine, ComplexVar, ConicProgram, SolveStatus, lift_complex, solve
from .model import BeamformerSet, ChannelSet, RateReport, Scenario, evaluate, link_gains

__all__ = [
    "InitInfeasible",
    "Method",
    "SpcaConfig",
    "SpcaProgram",
    "SpcaResult",
    "SpcaState",
    "TraceRow",
    "build_iteration_program",
    "hyperbolic_tree",
    "init_theta",
    "scale_exponents",
    "spca_solve",
    "surrogate_upper",
    "write_trace_csv",
]

log = logging.getLogger(__name__)

C_CLIP = 1e-9


class Method(str, enum.Enum):
    GEOMETRIC_MEAN = "geometric_mean"
    HYPERBOLIC_TREE = "hyperbolic_tree"


class InitInfeasible(RuntimeError):
    """The first SPCA program could not be solved."""


@dataclass(frozen=True)
class SpcaConfig:
    method: Method = Method.HYPERBOLIC_TREE
    n_iter_max: int = 20
    stop_delta: float = 0.01
    p_floor: float = 1e-4
    floor_fraction: float = 1e-2
    q_scale_margin: float = 1.1
    tol: float = 1e-8
    tol_fallback_max: float = 1e-6
    normalize_cones: bool = True
    solver_max_iter: int = 200

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.n_iter_max < 1:
            raise ValueError("n_iter_max must be >= 1")
        if not self.stop_delta > 0:
            raise ValueError("stop_delta must be positive")
        if not self.p_floor > 0:
            raise ValueError("p_floor must be positive")
        if not 0 < self.floor_fraction < 1:
            raise ValueError("floor_fraction must lie in (0, 1)")
        if not self.q_scale_margin > 1:
            raise ValueError("q_scale_margin must exceed 1")

    def with_(self, **kw) -> "SpcaConfig":
        return replace(self, **kw)


@dataclass
class TraceRow:
    iteration: int
    wsr: float
    per_cell_power: np.ndarray
    surrogate_gap: float
    status: str


@dataclass
class SpcaState:
    c: np.ndarray
    zeta: np.ndarray
    p: np.ndarray
    theta: np.ndarray
    q: np.ndarray
    p_floor: np.ndarray
    active: np.ndarray
    iter: int = 0
    trace: list[TraceRow] = field(default_factory=list)


def scale_exponents(weights: Sequence[float], margin: float = 1.1) -> np.ndarray:
    """Per-link exponents ``q = 1 / (kappa * w)`` with every finite ``q < 1``.

    ``kappa = margin / min positive weight``. Zero-weight links get ``q = inf``;
    they take no part in the objective.
    """
    w = np.asarray(weights, dtype=float)
    pos = w > 0
    if not pos.any():
        raise ValueError("at least one weight must be positive")
    if margin <= 1:
        raise ValueError("margin must exceed 1")
    kappa = margin / w[pos].min()
    q = np.full(w.shape, np.inf)
    q[pos] = 1.0 / (kappa * w[pos])
    return q


def surrogate_upper(zeta, p, theta):
    """Convex upper estimate of ``sqrt(p) * zeta``."""
    zeta, p, theta = map(np.asarray, (zeta, p, theta))
    return 0.5 * (p / theta + theta * zeta**2)


def _matched_beams(scenario: Scenario, channels: ChannelSet) -> BeamformerSet:
    f = np.zeros((scenario.n_cells, scenario.n_sub, scenario.n_tx), complex)
    for j in range(scenario.n_links):
        k, m, n = scenario.link(j)
        h = channels.h[m, k, m, n]
        norm = np.linalg.norm(h)
        if norm == 0:
            raise ValueError(f"zero channel on link {j} (cell {m}, subcarrier {n}); cannot match")
        f[m, n] = np.sqrt(scenario.p_max[m] / scenario.n_sub) * h.conj() / norm
    return BeamformerSet(f)


def init_theta(
    scenario: Scenario, channels: ChannelSet, config: SpcaConfig | None = None
) -> tuple[BeamformerSet, SpcaState]:
    """Channel-matched starting point with a feasible first program.

    The matched beams spend each cell's budget evenly over its subcarriers. The
    interference bound is taken with equality, ``p`` is the resulting SINR and
    ``theta = sqrt(p) / zeta`` makes the upper estimate tight, so the starting
    point satisfies every constraint of the first program.
    """
    config = config or SpcaConfig()
    channels.check(scenario)
    beams = _matched_beams(scenario, channels)
    g = link_gains(scenario, channels, beams)
    own = g[np.arange(scenario.n_cells), :, np.arange(scenario.n_cells)].ravel()
    interference = g.sum(axis=2).ravel() - own
    zeta = np.sqrt(1.0 + interference)
    amp = np.sqrt(own)
    p = (amp / zeta) ** 2
    q = scale_exponents(scenario.link_weights(), config.q_scale_margin)
    active = np.isfinite(q)
    c = np.ones(scenario.n_links)
    c[active] = (1.0 + p[active]) ** (1.0 / q[active])
    # Links weaker than the floor at the start get a floor strictly below their
    # starting SINR; otherwise the start is infeasible or the only feasible point.
    floor = np.minimum(config.p_floor, config.floor_fraction * p)
    theta = np.sqrt(p) / zeta
    if np.any(theta <= 0):
        j = int(np.argmin(theta))
        raise ValueError(f"link {j} has no useful signal at the matched start")
    state = SpcaState(c=c, zeta=zeta, p=p, theta=theta, q=q, p_floor=floor, active=active)
    return beams, state


def hyperbolic_tree(prog: ConicProgram, leaves: Sequence, pad=1.0, label: str = "tree"):
    """Root of a binary tree with ``root**(2**u) <= prod(leaves)``.

    Leaves are padded with ``pad`` up to ``2**u``; each parent ``psi`` of a pair
    ``(a, b)`` obeys ``psi**2 <= a*b``. Returns the root expression.
    """
    level = [Affine.wrap(v) for v in leaves]
    if not level:
        raise ValueError("tree needs at least one leaf")
    size = 1 << (len(level) - 1).bit_length()
    level += [Affine.wrap(pad)] * (size - len(level))
    depth = size.bit_length() - 1
    while len(level) > 1:
        depth -= 1
        parents = []
        for i in range(len(level) // 2):
            psi = prog.add_var(f"psi[{depth}][{i}]")
            prog.add_ineq(psi, "psi_nonneg")
            prog.hyperbolic([psi], level[2 * i], level[2 * i + 1], label)
            parents.append(psi)
        level = parents
    return level[0]


class SpcaProgram(ConicProgram):
    """One SPCA iteration; keeps handles to the link variables."""

    def __init__(self):
        super().__init__()
        self.beams: list[ComplexVar] = []
        self.unit_beams: list[ComplexVar] = []
        self.c_ratio: dict[int, Affine] = {}
        self.zeta: list[Affine] = []
        self.p: dict[int, Affine] = {}
        self.root: Affine | None = None


def build_iteration_program(
    scenario: Scenario, channels: ChannelSet, state: SpcaState, config: SpcaConfig | None = None
) -> SpcaProgram:
    config = config or SpcaConfig()
    channels.check(scenario)
    if np.any(~(state.theta[state.active] > 0)):
        raise ValueError("theta must be strictly positive on every active link")

    prog = SpcaProgram()
    J = scenario.n_links
    # Beams are stored as f / sqrt(P_m) so every cell has a unit power ball.
    amp = np.sqrt(scenario.p_max)
    for j in range(J):
        m = j // scenario.n_sub
        unit = prog.add_complex_var(f"f[{j}]/sqrt(P)", scenario.n_tx)
        prog.unit_beams.append(unit)
        prog.beams.append(ComplexVar(tuple(v * amp[m] for v in unit.re),
                                     tuple(v * amp[m] for v in unit.im)))

    for m in range(scenario.n_cells):
        tail = []
        for n in range(scenario.n_sub):
            tail += prog.unit_beams[m * scenario.n_sub + n].real_parts()
        prog.add_soc(1.0, tail, "power")

    for j in range(J):
        k, m, n = scenario.link(j)
        signal, imag = lift_complex(channels.h[m, k, m, n], prog.beams[j])
        prog.add_eq(imag, "zero_imag")

        zeta = prog.add_var(f"zeta[{j}]")
        prog.zeta.append(zeta)
        tail = [Affine(const=1.0)]
        for b in range(scenario.n_cells):
            if b != m:
                tail += list(lift_complex(channels.h[m, k, b, n], prog.beams[b * scenario.n_sub + n]))
        prog.add_soc(zeta, tail, "interference")

        if not state.active[j]:
            continue
        theta = float(state.theta[j])
        q = float(state.q[j])
        floor = float(state.p_floor[j])
        p_ref = max(float(state.p[j]), floor)
        p = p_ref * prog.add_var(f"p[{j}]/p_ref")
        # c = c_prev * (1 + delta); the tree leaf is 1 + delta
        ratio = 1.0 + prog.add_var(f"delta[{j}]")
        prog.add_ineq(ratio, "c_nonneg")
        prog.p[j] = p
        prog.c_ratio[j] = ratio

        # U(zeta, p, theta) <= Re(hf): theta*zeta^2/2 <= x with x = Re(hf) - p/(2 theta).
        # As a cone ||[2 z; x - 1]|| <= x + 1, after dividing z^2 <= x by its
        # size at the expansion point, rho^2 = theta*zeta_prev^2/2.
        x = signal - p / (2.0 * theta)
        rho2 = theta * float(state.zeta[j]) ** 2 / 2.0 if config.normalize_cones else 1.0
        z = math.sqrt(theta / 2.0 / rho2) * zeta
        xn = x / rho2
        prog.add_soc(xn + 1.0, [2.0 * z, xn - 1.0], "spca")

        # p >= q c_i^(q-1) (c - c_i) + c_i^q - 1, scaled by 1/p_ref
        cq_m1 = math.expm1(q * math.log(float(state.c[j])))
        cq = 1.0 + cq_m1
        prog.add_ineq((p - q * cq * (ratio - 1.0) - cq_m1) / p_ref, "linearization")
        prog.add_ineq((p - floor) / p_ref, "floor")

    leaves = [prog.c_ratio[j] for j in sorted(prog.c_ratio)]
    if config.method is Method.HYPERBOLIC_TREE:
        prog.root = hyperbolic_tree(prog, leaves, pad=1.0)
    else:
        size = 1 << (len(leaves) - 1).bit_length()
        if size == len(leaves):
            prog.root = hyperbolic_tree(prog, leaves)
        else:
            chi = prog.add_var("chi")
            prog.add_ineq(chi, "psi_nonneg")
            top = hyperbolic_tree(prog, leaves, pad=chi)
            prog.add_ineq(top - chi, "geometric_mean")
            prog.root = chi
    prog.maximize(prog.root)
    return prog


@dataclass
class SpcaResult:
    beams: BeamformerSet
    report: RateReport
    trace: list[TraceRow]
    state: SpcaState
    converged: bool
    status: str


def _clip_to_budget(scenario: Scenario, f: np.ndarray) -> np.ndarray:
    power = np.sum(np.abs(f) ** 2, axis=(1, 2))
    scale = np.where(power > scenario.p_max, np.sqrt(scenario.p_max / np.maximum(power, 1e-300)), 1.0)
    return f * scale[:, None, None]


def _solve_with_fallback(prog: ConicProgram, config: SpcaConfig):
    tol = config.tol
    while True:
        res = solve(prog, tol, tol, tol, config.solver_max_iter)
        res.residuals["tol"] = tol
        if res.status is not SolveStatus.NUMERICAL_FAILURE or tol >= config.tol_fallback_max:
            return res
        tol = min(tol * 10.0, config.tol_fallback_max)
        log.info("solver stalled; relaxing tolerance to %.0e", tol)


def spca_solve(
    scenario: Scenario, channels: ChannelSet, config: SpcaConfig | None = None
) -> SpcaResult:
    """Run SPCA iterations from the matched start until the WSR gain stalls."""
    config = config or SpcaConfig()
    beams, state = init_theta(scenario, channels, config)
    report = evaluate(scenario, channels, beams)
    state.trace.append(TraceRow(0, report.weighted_sum_rate, report.per_cell_power, 0.0, "init"))
    converged = False
    status = "max_iter"

    for it in range(1, config.n_iter_max + 1):
        prog = build_iteration_program(scenario, channels, state, config)
        res = _solve_with_fallback(prog, config)
        if res.status is not SolveStatus.OPTIMAL:
            if it == 1:
                raise InitInfeasible(f"first SPCA program returned {res.status.value}")
            log.warning("iteration %d: solver returned %s; keeping iterate %d",
                        it, res.status.value, it - 1)
            status = f"solver_{res.status.value}"
            break

        f = np.stack([v.value(res.x) for v in prog.beams])
        f = _clip_to_budget(scenario, f.reshape(scenario.n_cells, scenario.n_sub, scenario.n_tx))
        new_beams = BeamformerSet(f)
        new_report = evaluate(scenario, channels, new_beams)

        zeta = np.array([res.value(z) for z in prog.zeta])
        p = np.full(scenario.n_links, np.nan)
        c = np.array(state.c, dtype=float)
        for j, pv in prog.p.items():
            p[j] = res.value(pv)
            c[j] = state.c[j] * res.value(prog.c_ratio[j])
        act = state.active
        gap = surrogate_upper(zeta[act], p[act], state.theta[act]) - np.sqrt(np.maximum(p[act], 0)) * zeta[act]
        max_gap = float(np.max(gap)) if gap.size else 0.0

        theta = np.array(state.theta, dtype=float)
        theta[act] = np.sqrt(np.maximum(p[act], state.p_floor[act])) / zeta[act]
        state.theta = theta
        state.c = np.maximum(c, 1.0 + C_CLIP)
        state.zeta, state.p, state.iter = zeta, p, it

        gain = new_report.weighted_sum_rate - report.weighted_sum_rate
        beams, report = new_beams, new_report
        label = res.status.value
        if res.residuals["tol"] > config.tol:
            label += f"@tol={res.residuals['tol']:.0e}"
        state.trace.append(TraceRow(it, report.weighted_sum_rate, report.per_cell_power, max_gap, label))
        if gain <= config.stop_delta:
            converged = True
            status = "converged"
            break

    return SpcaResult(beams, report, state.trace, state, converged, status)


def _sink(target):
    """Open ``target`` for writing, or pass an open text stream through."""
    if hasattr(target, "write"):
        return contextlib.nullcontext(target)
    return open(target, "w", newline="")


TRACE_SCHEMA = "# coordbf trace v1"


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    n_cells = len(trace[0].per_cell_power) if trace else 0
    with _sink(path) as fh:
        fh.write(TRACE_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["iteration", "wsr"] + [f"power_cell{m}" for m in range(n_cells)]
                   + ["max_surrogate_gap", "status"])
        for row in trace:
            w.writerow([row.iteration, repr(row.wsr)] + [repr(float(v)) for v in row.per_cell_power]
                       + [repr(row.surrogate_gap), row.status])
