"""Transmit-power minimization under per-link SINR targets, as one SOCP.

With the common phase of each beam fixed so that ``h_j f_j`` is real, the
SINR target ``gamma_j >= Gamma_j`` becomes the cone

    || [1, h_jb f_b for b != m] || <= Re(h_j f_j) / sqrt(Gamma_j).

``TOTAL_POWER`` minimizes the summed cell powers through per-cell epigraphs
``||vec F_m|| <= s_m``, ``s_m**2 <= t_m``. ``MIN_MAX_CELL_POWER`` minimizes a
single bound ``xi`` on every cell amplitude ``||vec F_m||``, so the optimal
value is the square root of the largest cell power.
"""

from __future__ import annotations

import contextlib
import csv
import enum
import math
from dataclasses import dataclass

import numpy as np

from .conic import Affine, ComplexVar, ConicProgram, SolveStatus, lift_complex, solve
from .model import BeamformerSet, ChannelSet, Scenario, evaluate

__all__ = [
    "ObjectiveMode",
    "PowerminProgram",
    "PowerminResult",
    "SinrTargets",
    "build_powermin",
    "interference_margin",
    "solve_powermin",
    "write_powermin_csv",
]


class ObjectiveMode(str, enum.Enum):
    TOTAL_POWER = "TotalPower"
    MIN_MAX_CELL_POWER = "MinMaxCellPower"


@dataclass(frozen=True, eq=False)
class SinrTargets:
    """Linear-scale SINR target per link, in link order."""

    gamma_target: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma_target, dtype=float).ravel()
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise ValueError("SINR targets must be finite and strictly positive")
        g.setflags(write=False)
        object.__setattr__(self, "gamma_target", g)

    def scaled(self, factor: float) -> "SinrTargets":
        return SinrTargets(self.gamma_target * factor)


class PowerminProgram(ConicProgram):
    def __init__(self):
        super().__init__()
        self.beams: list[ComplexVar] = []
        self.cell_amplitude: list[Affine] = []
        self.mode = ObjectiveMode.TOTAL_POWER


def _check_targets(scenario: Scenario, targets: SinrTargets) -> np.ndarray:
    g = targets.gamma_target
    if g.size != scenario.n_links:
        raise ValueError(f"{g.size} SINR targets given for {scenario.n_links} links")
    return g


def build_powermin(
    scenario: Scenario,
    channels: ChannelSet,
    targets: SinrTargets,
    mode: ObjectiveMode = ObjectiveMode.TOTAL_POWER,
    hint: BeamformerSet | None = None,
) -> PowerminProgram:
    """Power-min SOCP. ``hint``, a previous solution, only rescales variables and rows."""
    channels.check(scenario)
    gamma = _check_targets(scenario, targets)
    mode = ObjectiveMode(mode)
    prog = PowerminProgram()
    prog.mode = mode
    J, S = scenario.n_links, scenario.n_sub

    # Each beam is stored in units of its interference-free requirement
    # sqrt(Gamma)/||h||, or of its norm in the hint, so unit values are of order one.
    own_norm = np.array([np.linalg.norm(channels.own(scenario, j)) for j in range(J)])
    if np.any(own_norm == 0):
        raise ValueError("a link has a zero direct channel; its SINR target is unreachable")
    amp = np.sqrt(gamma) / own_norm
    if hint is not None:
        hinted = np.linalg.norm(hint.f, axis=2).ravel()
        amp = np.where(hinted > 0, np.maximum(hinted, amp), amp)
    for j in range(J):
        u = prog.add_complex_var(f"f[{j}]/a", scenario.n_tx)
        prog.beams.append(ComplexVar(tuple(v * amp[j] for v in u.re),
                                     tuple(v * amp[j] for v in u.im)))

    for j in range(J):
        k, m, n = scenario.link(j)
        signal, imag = lift_complex(channels.h[m, k, m, n], prog.beams[j])
        prog.add_eq(imag / amp[j], "zero_imag")
        tail = [Affine(const=1.0)]
        for b in range(scenario.n_cells):
            if b != m:
                tail += list(lift_complex(channels.h[m, k, b, n], prog.beams[b * S + n]))
        prog.add_soc(signal / math.sqrt(gamma[j]), tail, "sinr")

    # ref[m]: cell power with every link at its unit, so the objective is of order one
    ref = (amp.reshape(scenario.n_cells, S) ** 2).sum(axis=1)
    tails = [sum((prog.beams[m * S + n].real_parts() for n in range(S)), [])
             for m in range(scenario.n_cells)]
    if mode is ObjectiveMode.TOTAL_POWER:
        t_all = []
        for m in range(scenario.n_cells):
            s = math.sqrt(ref[m]) * prog.add_var(f"s[{m}]/sqrt(ref)")
            t = ref[m] * prog.add_var(f"t[{m}]/ref")
            r = math.sqrt(ref[m])
            prog.add_soc(s / r, [v / r for v in tails[m]], "cell_power")
            prog.hyperbolic([s / math.sqrt(ref[m])], t / ref[m], 1.0, "power_epigraph")
            prog.cell_amplitude.append(s)
            t_all.append(t)
        prog.maximize((-1.0 / float(ref.sum())) * sum(t_all, Affine()))
    else:
        xi_ref = math.sqrt(float(ref.max()))
        xi = xi_ref * prog.add_var("xi/ref")
        for m in range(scenario.n_cells):
            prog.add_soc(xi / xi_ref, [v / xi_ref for v in tails[m]], "cell_power")
            prog.cell_amplitude.append(xi)
        prog.maximize((-1.0 / xi_ref) * xi)
    return prog


def interference_margin(scenario: Scenario, channels: ChannelSet, targets: SinrTargets) -> float:
    """Smallest over subcarriers of the largest common margin ``t`` with

        w_j (Re(h_j f_j) - sqrt(Gamma_j) ||I_j(f)||) / ||h_j|| >= t

    for every link ``j`` on the subcarrier, over beams of unit total norm.
    ``I_j`` collects the interfering amplitudes and ``w_j <= 1`` caps the row
    coefficients at one. Noise is absent, so the targets are reachable with
    enough power exactly when every margin is positive; positive row weights
    preserve that sign. Subcarriers do not interact without a power budget, so
    each gets its own small program, bounded and feasible at ``f = 0, t = 0``.
    When no solve reaches full accuracy the solver's dual bound is used.
    """
    channels.check(scenario)
    gamma = _check_targets(scenario, targets)
    S = scenario.n_sub
    worst = math.inf
    for n in range(S):
        prog = ConicProgram()
        beams = [prog.add_complex_var(f"f[{m}]", scenario.n_tx) for m in range(scenario.n_cells)]
        t = prog.add_var("t")
        for m in range(scenario.n_cells):
            j = m * S + n
            k = int(scenario.assignment[m, n])
            norm = np.linalg.norm(channels.h[m, k, m, n])
            cross = max((np.linalg.norm(channels.h[m, k, b, n])
                         for b in range(scenario.n_cells) if b != m), default=0.0)
            w = 1.0 / max(1.0, math.sqrt(gamma[j]) * cross / norm)
            signal, imag = lift_complex(channels.h[m, k, m, n] * (w / norm), beams[m])
            prog.add_eq(imag, "zero_imag")
            tail = []
            for b in range(scenario.n_cells):
                if b != m:
                    h = channels.h[m, k, b, n] * (w * math.sqrt(gamma[j]) / norm)
                    tail += list(lift_complex(h, beams[b]))
            prog.add_soc(signal - t, tail, "margin")
        prog.add_soc(1.0, sum((f.real_parts() for f in beams), []), "unit_norm")
        prog.maximize(t)
        for tol in (1e-9, 1e-8, 1e-7):
            res = solve(prog, tol, tol, tol)
            if res.ok:
                value = res.objective_value
                break
        else:
            value = res.residuals.get("dual_bound", math.nan)
        worst = min(worst, value)
    return worst


def _polish(scenario: Scenario, channels: ChannelSet, gamma: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Keep the beam directions and solve for the powers meeting every target with equality.

    For fixed directions the tight powers solve one linear system per
    subcarrier. When the SOCP point is feasible that system has a positive
    solution no larger than the SOCP powers, so the polish never costs power.
    """
    S = scenario.n_sub
    norms = np.linalg.norm(f, axis=2)
    if np.any(norms == 0):
        return f
    u = f / norms[..., None]
    out = np.array(f)
    for n in range(S):
        links = [m * S + n for m in range(scenario.n_cells)]
        A = np.zeros((scenario.n_cells, scenario.n_cells))
        for row, j in enumerate(links):
            k, m, _ = scenario.link(j)
            for b in range(scenario.n_cells):
                g = abs(channels.h[m, k, b, n] @ u[b, n]) ** 2
                A[row, b] = g / gamma[j] if b == m else -g
        try:
            p = np.linalg.solve(A, np.ones(scenario.n_cells))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(p)) and np.all(p > 0) and np.all(p <= norms[:, n] ** 2):
            out[:, n] = np.sqrt(p)[:, None] * u[:, n]
    return out


@dataclass
class PowerminResult:
    status: str
    beams: BeamformerSet | None
    per_cell_power: np.ndarray | None
    objective: float
    sinr: np.ndarray | None
    targets: SinrTargets
    mode: ObjectiveMode

    @property
    def feasible(self) -> bool:
        return self.status == "Optimal"


def solve_powermin(
    scenario: Scenario,
    channels: ChannelSet,
    targets: SinrTargets,
    mode: ObjectiveMode = ObjectiveMode.TOTAL_POWER,
    tol: float = 1e-9,
    tol_fallback_max: float = 1e-7,
    margin_tol: float = 1e-6,
) -> PowerminResult:
    """Minimum-power beams meeting ``targets``, or a result with status ``Infeasible``.

    The reported objective is recomputed from the returned beams: the total
    power in ``TOTAL_POWER`` mode, the largest cell amplitude ``xi`` otherwise.
    A stalled solve is retried with the tolerance relaxed tenfold, up to
    ``tol_fallback_max``. If it still stalls, a margin at or below
    ``margin_tol`` from :func:`interference_margin` marks the targets
    infeasible; otherwise the solver status is returned. An optimal solve is
    repeated once in the units of its own solution and the better point kept.
    Optimal beams are polished so every SINR target holds with equality.
    """
    mode = ObjectiveMode(mode)
    res, beams = _solve_once(scenario, channels, targets, mode, tol, tol_fallback_max, None)
    if res.status is SolveStatus.PRIMAL_INFEASIBLE:
        return PowerminResult("Infeasible", None, None, math.inf, None, targets, mode)
    if res.status is not SolveStatus.OPTIMAL:
        if interference_margin(scenario, channels, targets) <= margin_tol:
            return PowerminResult("Infeasible", None, None, math.inf, None, targets, mode)
        return PowerminResult(res.status.value, None, None, math.nan, None, targets, mode)
    best = _result(scenario, channels, targets, mode, beams)
    # A second solve in the units of the first solution is better conditioned
    # when the interference-free units are far off.
    res2, beams2 = _solve_once(scenario, channels, targets, mode, tol, tol_fallback_max, beams)
    if res2.status is SolveStatus.OPTIMAL:
        second = _result(scenario, channels, targets, mode, beams2)
        if second.objective < best.objective:
            best = second
    return best


def _solve_once(scenario, channels, targets, mode, tol, tol_max, hint):
    prog = build_powermin(scenario, channels, targets, mode, hint)
    while True:
        res = solve(prog, tol, tol, tol)
        if res.status is not SolveStatus.NUMERICAL_FAILURE or tol >= tol_max:
            break
        tol = min(10.0 * tol, tol_max)
    if res.status is not SolveStatus.OPTIMAL:
        return res, None
    f = np.stack([v.value(res.x) for v in prog.beams])
    f = f.reshape(scenario.n_cells, scenario.n_sub, scenario.n_tx)
    return res, BeamformerSet(_polish(scenario, channels, targets.gamma_target, f))


def _result(scenario, channels, targets, mode, beams) -> PowerminResult:
    report = evaluate(scenario, channels, beams)
    power = report.per_cell_power
    objective = float(power.sum()) if mode is ObjectiveMode.TOTAL_POWER else math.sqrt(power.max())
    return PowerminResult("Optimal", beams, power, objective, report.sinr, targets, mode)


def _sink(target):
    """Open ``target`` for writing, or pass an open text stream through."""
    if hasattr(target, "write"):
        return contextlib.nullcontext(target)
    return open(target, "w", newline="")


POWERMIN_SCHEMA = "# coordbf powermin v1"


def write_powermin_csv(scenario: Scenario, result: PowerminResult, path) -> None:
    """One row per link: target, achieved SINR, serving-cell power, status."""
    with _sink(path) as fh:
        fh.write(POWERMIN_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["link", "cell", "subcarrier", "target_sinr", "achieved_sinr", "cell_power", "status"])
        for j in range(scenario.n_links):
            _, m, n = scenario.link(j)
            sinr = repr(float(result.sinr[j])) if result.sinr is not None else ""
            power = repr(float(result.per_cell_power[m])) if result.per_cell_power is not None else ""
            w.writerow([j, m, n, repr(float(result.targets.gamma_target[j])), sinr, power, result.status])
