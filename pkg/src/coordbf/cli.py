"""Experiment harness: seeded sweeps, power-min round trips and oracle checks.

Configs are YAML files; see ``configs/desk.yaml`` for every key. Each command
writes CSV files whose first line is a schema comment, and exits with status 1
when a run fails or an invariant is violated.

Worker processes are capped by the ``COORDBF_WORKERS`` environment variable
(default 1). Results are collected in job order, so outputs do not depend on
the worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .chanlab import GeometryConfig, generate_channels
from .model import ChannelSet, Scenario
from .oracle import GridSpec, grid_wsrm
from .powermin import ObjectiveMode, SinrTargets, solve_powermin, write_powermin_csv
from .wsrm import Method, SpcaConfig, spca_solve, write_trace_csv

__all__ = [
    "ExperimentConfig",
    "OracleConfig",
    "WeightRule",
    "build_instance",
    "dbw_to_watts",
    "load_config",
    "main",
    "run_oracle_check",
    "roundtrip_targets",
    "run_roundtrip",
    "run_wsrm_sweep",
]

log = logging.getLogger(__name__)

WORKERS_ENV = "COORDBF_WORKERS"
SWEEP_SCHEMA = "# coordbf wsrm-sweep v1"
RUNS_SCHEMA = "# coordbf wsrm-runs v1"
ROUNDTRIP_SCHEMA = "# coordbf roundtrip v1"
ORACLE_SCHEMA = "# coordbf oracle-check v1"

# RNG streams derived from the run seed; chanlab owns streams 0 and 1.
_ASSIGN_STREAM, _WEIGHT_STREAM = 2, 3

MONOTONE_TOL = 1e-6
POWER_TOL = 1e-8
ROUNDTRIP_TOL = 1e-6
INFLATE = 1e6
# stands in for an exactly zero achieved SINR, which is not a valid target
TARGET_FLOOR = 1e-12


def dbw_to_watts(dbw) -> np.ndarray:
    return 10.0 ** (np.asarray(dbw, dtype=float) / 10.0)


@dataclass(frozen=True)
class WeightRule:
    """``uniform`` (all ones), ``random`` (uniform in [low, high]) or ``explicit``."""

    rule: str = "uniform"
    low: float = 0.1
    high: float = 0.6
    values: list | None = None

    def __post_init__(self):
        if self.rule not in ("uniform", "random", "explicit"):
            raise ValueError(f"unknown weight rule {self.rule!r}")
        if self.rule == "random" and not 0 <= self.low <= self.high:
            raise ValueError("weight range needs 0 <= low <= high")
        if self.rule == "explicit" and self.values is None:
            raise ValueError("explicit weights need 'values'")

    def draw(self, seed: int, n_cells: int, n_users: int) -> np.ndarray:
        if self.rule == "uniform":
            return np.ones((n_cells, n_users))
        if self.rule == "explicit":
            return np.broadcast_to(np.asarray(self.values, dtype=float), (n_cells, n_users)).copy()
        rng = np.random.default_rng([seed, _WEIGHT_STREAM])
        return rng.uniform(self.low, self.high, size=(n_cells, n_users))


@dataclass(frozen=True)
class OracleConfig:
    seeds: list = field(default_factory=lambda: list(range(20)))
    power_dbw: float = 20.0
    angle_steps: int = 1000
    power_steps: int = 1000
    coarse_factor: int = 10
    min_ratio: float = 0.98


@dataclass(frozen=True)
class ExperimentConfig:
    n_cells: int = 3
    n_users_per_cell: int = 2
    n_sub: int = 4
    n_tx: int = 2
    power_dbw: list = field(default_factory=lambda: [0.0, 10.0, 20.0])
    seeds: list = field(default_factory=lambda: [0])
    assignment: str = "random"
    weights: WeightRule = field(default_factory=WeightRule)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    spca: SpcaConfig = field(default_factory=SpcaConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.assignment not in ("random", "round_robin"):
            raise ValueError(f"unknown assignment rule {self.assignment!r}")
        if not self.power_dbw or not self.seeds:
            raise ValueError("power_dbw and seeds must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        scen = d.pop("scenario", {}) or {}
        kw = {k: scen.pop(k) for k in ("n_cells", "n_users_per_cell", "n_sub", "n_tx") if k in scen}
        _no_extra("scenario", scen)
        for key in ("power_dbw", "seeds", "assignment"):
            if key in d:
                kw[key] = d.pop(key)
        if "weights" in d:
            kw["weights"] = _build(WeightRule, "weights", d.pop("weights"))
        if "geometry" in d:
            kw["geometry"] = _build(GeometryConfig, "geometry", d.pop("geometry"))
        if "spca" in d:
            spca = dict(d.pop("spca") or {})
            if "method" in spca:
                spca["method"] = Method(str(spca["method"]).lower())
            kw["spca"] = _build(SpcaConfig, "spca", spca)
        if "oracle" in d:
            kw["oracle"] = _build(OracleConfig, "oracle", d.pop("oracle"))
        _no_extra("config", d)
        kw["power_dbw"] = [float(p) for p in np.atleast_1d(kw.get("power_dbw", [0.0, 10.0, 20.0]))]
        kw["seeds"] = [int(s) for s in np.atleast_1d(kw.get("seeds", [0]))]
        return cls(**kw)


def _no_extra(section: str, d: dict) -> None:
    if d:
        raise ValueError(f"unknown keys in {section}: {sorted(d)}")


def _build(cls, section: str, d):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    _no_extra(section, {k: v for k, v in d.items() if k not in names})
    return cls(**d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh))


def build_instance(cfg: ExperimentConfig, seed: int, power_dbw: float) -> tuple[Scenario, ChannelSet]:
    """Scenario and channels for one run; depends only on (config, seed, power)."""
    if cfg.assignment == "random":
        rng = np.random.default_rng([seed, _ASSIGN_STREAM])
        assignment = rng.integers(0, cfg.n_users_per_cell, size=(cfg.n_cells, cfg.n_sub))
    else:
        assignment = np.tile(np.arange(cfg.n_sub) % cfg.n_users_per_cell, (cfg.n_cells, 1))
    weights = cfg.weights.draw(seed, cfg.n_cells, cfg.n_users_per_cell)
    scenario = Scenario(cfg.n_cells, cfg.n_users_per_cell, cfg.n_sub, cfg.n_tx,
                        dbw_to_watts(power_dbw), weights, assignment)
    channels = generate_channels(cfg.geometry.with_seed(seed), scenario)
    return scenario, channels


def _num(x) -> str:
    return repr(float(x))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(schema: str, header: list, rows: list) -> str:
    buf = io.StringIO()
    buf.write(schema + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _map(fn, jobs: list) -> list:
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def _trace_name(seed: int, power_dbw: float) -> str:
    return f"trace_seed{seed}_p{power_dbw:g}dBW.csv"


def _sweep_job(job):
    cfg, seed, power_dbw = job
    try:
        scenario, channels = build_instance(cfg, seed, power_dbw)
        res = spca_solve(scenario, channels, cfg.spca)
    except Exception as exc:  # recorded per row; the sweep continues
        return {"seed": seed, "power_dbw": power_dbw, "error": f"{type(exc).__name__}: {exc}"}
    buf = io.StringIO()
    write_trace_csv(res.trace, buf)
    wsr = [row.wsr for row in res.trace]
    power = np.array([row.per_cell_power for row in res.trace])
    return {
        "seed": seed, "power_dbw": power_dbw, "error": None,
        "wsr": res.report.weighted_sum_rate, "iterations": len(res.trace) - 1,
        "status": res.status, "cell_power": res.report.per_cell_power.tolist(),
        "trace_csv": buf.getvalue(),
        "monotone": bool(np.all(np.diff(wsr) >= -MONOTONE_TOL)),
        "power_ok": bool(np.all(power <= scenario.p_max + POWER_TOL)),
    }


def run_wsrm_sweep(cfg: ExperimentConfig, out: Path) -> list[str]:
    """Run every (seed, power) point; returns the list of failed checks."""
    out = Path(out)
    jobs = [(cfg, s, p) for s in cfg.seeds for p in cfg.power_dbw]
    results = _map(_sweep_job, jobs)
    failures = []
    run_rows = []
    for r in results:
        if r["error"]:
            failures.append(f"seed {r['seed']} at {r['power_dbw']:g} dBW: {r['error']}")
            run_rows.append([r["seed"], r["power_dbw"], "", "", "error", r["error"]]
                            + [""] * cfg.n_cells)
            continue
        _atomic_write(out / "traces" / _trace_name(r["seed"], r["power_dbw"]), r["trace_csv"])
        if not r["monotone"]:
            failures.append(f"seed {r['seed']} at {r['power_dbw']:g} dBW: WSR trace decreased")
        if not r["power_ok"]:
            failures.append(f"seed {r['seed']} at {r['power_dbw']:g} dBW: power budget exceeded")
        if r["status"].startswith("solver_"):
            failures.append(f"seed {r['seed']} at {r['power_dbw']:g} dBW: {r['status']}")
        run_rows.append([r["seed"], r["power_dbw"], _num(r["wsr"]), r["iterations"], r["status"], ""]
                        + [_num(v) for v in r["cell_power"]])

    # per-seed WSR must not fall as the budget grows
    ok = {(r["seed"], r["power_dbw"]): r["wsr"] for r in results if not r["error"]}
    order = sorted(cfg.power_dbw)
    for s in cfg.seeds:
        vals = [ok.get((s, p)) for p in order]
        for (p0, a), (p1, b) in zip(zip(order, vals), zip(order[1:], vals[1:])):
            if a is not None and b is not None and b < a - MONOTONE_TOL:
                failures.append(f"seed {s}: WSR fell from {a:.6g} at {p0:g} dBW to {b:.6g} at {p1:g} dBW")

    summary = []
    for p in cfg.power_dbw:
        vals = np.array([ok[(s, p)] for s in cfg.seeds if (s, p) in ok])
        n_failed = len(cfg.seeds) - len(vals)
        mean = _num(vals.mean()) if len(vals) else ""
        std = _num(vals.std()) if len(vals) else ""
        summary.append([p, len(vals), n_failed, mean, std])

    _atomic_write(out / "summary.csv", _csv_text(
        SWEEP_SCHEMA, ["power_dbw", "n_runs", "n_failed", "mean_wsr", "std_wsr"], summary))
    _atomic_write(out / "runs.csv", _csv_text(
        RUNS_SCHEMA,
        ["seed", "power_dbw", "wsr", "iterations", "status", "error"]
        + [f"power_cell{m}" for m in range(cfg.n_cells)],
        run_rows))
    return failures


def roundtrip_targets(sinr) -> SinrTargets:
    """Achieved SINRs as targets; only exact zeros are raised to ``TARGET_FLOOR``."""
    sinr = np.asarray(sinr, dtype=float)
    return SinrTargets(np.where(sinr > 0, sinr, TARGET_FLOOR))


def _roundtrip_job(job):
    cfg, seed, power_dbw = job
    try:
        scenario, channels = build_instance(cfg, seed, power_dbw)
        wsrm = spca_solve(scenario, channels, cfg.spca)
        targets = roundtrip_targets(wsrm.report.sinr)
        results = {mode: solve_powermin(scenario, channels, targets, mode) for mode in ObjectiveMode}
        inflated = solve_powermin(scenario, channels, targets.scaled(INFLATE))
    except Exception as exc:
        return {"seed": seed, "power_dbw": power_dbw, "error": f"{type(exc).__name__}: {exc}"}
    buf = io.StringIO()
    write_powermin_csv(scenario, results[ObjectiveMode.TOTAL_POWER], buf)
    return {"seed": seed, "power_dbw": power_dbw, "error": None,
            "wsrm_power": wsrm.report.per_cell_power, "results": results,
            "inflated": inflated.status, "links_csv": buf.getvalue()}


def run_roundtrip(cfg: ExperimentConfig, out: Path) -> list[str]:
    """WSRM, then power-min with the achieved SINRs as targets, in both modes."""
    out = Path(out)
    jobs = [(cfg, s, p) for s in cfg.seeds for p in cfg.power_dbw]
    failures = []
    rows = []
    for r in _map(_roundtrip_job, jobs):
        seed, p = r["seed"], r["power_dbw"]
        if r["error"]:
            failures.append(f"seed {seed} at {p:g} dBW: {r['error']}")
            rows.append([seed, p, "", "error", "", "", ""])
            continue
        _atomic_write(out / "links" / f"powermin_seed{seed}_p{p:g}dBW.csv", r["links_csv"])
        wp = r["wsrm_power"]
        for mode, res in r["results"].items():
            if not res.feasible:
                failures.append(f"seed {seed} at {p:g} dBW: {mode.value} returned {res.status}")
                rows.append([seed, p, mode.value, res.status, "", "", ""])
                continue
            for m in range(cfg.n_cells):
                rows.append([seed, p, mode.value, res.status, m, _num(wp[m]), _num(res.per_cell_power[m])])
            if mode is ObjectiveMode.TOTAL_POWER:
                excess = res.per_cell_power.sum() - wp.sum()
            else:
                excess = res.objective**2 - wp.max()
            if excess > ROUNDTRIP_TOL:
                failures.append(f"seed {seed} at {p:g} dBW: {mode.value} exceeds WSRM power by {excess:.3g}")
        rows.append([seed, p, f"TotalPower x{INFLATE:g}", r["inflated"], "", "", ""])
    _atomic_write(out / "roundtrip.csv", _csv_text(
        ROUNDTRIP_SCHEMA, ["seed", "power_dbw", "mode", "status", "cell", "wsrm_power", "min_power"], rows))
    return failures


def _oracle_job(job):
    cfg, seed = job
    oc = cfg.oracle
    scenario = Scenario(2, 1, 1, 2, dbw_to_watts(oc.power_dbw), 1.0, np.zeros((2, 1), int))
    geometry = GeometryConfig(**{**asdict(cfg.geometry), "seed": seed, "complex_fading": False})
    channels = generate_channels(geometry, scenario)
    grid = grid_wsrm(scenario, channels, GridSpec(oc.angle_steps, oc.power_steps, oc.coarse_factor))
    spca = spca_solve(scenario, channels, cfg.spca)
    return seed, spca.report.weighted_sum_rate, grid.wsr


def run_oracle_check(cfg: ExperimentConfig, out: Path | None = None) -> list[str]:
    """SPCA against the grid optimum on tiny two-cell instances."""
    failures = []
    rows = []
    for seed, spca, grid in _map(_oracle_job, [(cfg, s) for s in cfg.oracle.seeds]):
        ratio = spca / grid if grid > 0 else 1.0
        ok = ratio >= cfg.oracle.min_ratio
        print(f"seed {seed}: spca {spca:.6g} grid {grid:.6g} ratio {ratio:.4f} {'ok' if ok else 'LOW'}")
        rows.append([seed, _num(spca), _num(grid), _num(ratio), "ok" if ok else "low"])
        if not ok:
            failures.append(f"seed {seed}: SPCA reaches {ratio:.4f} of the grid optimum")
    if out is not None:
        _atomic_write(Path(out) / "oracle.csv", _csv_text(
            ORACLE_SCHEMA, ["seed", "spca_wsr", "grid_wsr", "ratio", "check"], rows))
    return failures


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="coordbf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("wsrm-sweep", "roundtrip"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
    p = sub.add_parser("oracle-check")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, TypeError, yaml.YAMLError) as exc:
        print(f"error: bad config {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.command == "wsrm-sweep":
        failures = run_wsrm_sweep(cfg, Path(args.out))
    elif args.command == "roundtrip":
        failures = run_roundtrip(cfg, Path(args.out))
    else:
        failures = run_oracle_check(cfg, Path(args.out) if args.out else None)
    for f in failures:
        print(f"FAILED: {f}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
