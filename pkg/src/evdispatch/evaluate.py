"""Schedule validation against the nonlinear sweep and the metric suite.

Violations are counted per (step, element) pair; a persistent violation
across k steps counts k times.  EV charging is modelled at unity power
factor, split equally over the bus phases.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .fleet import ChargeSchedule
from .grid import Network, aggregate_base_series
from .powerflow import ConvergenceError, solve_sweep
from .tariff import StackedTariff, network_cost


class ValidationError(RuntimeError):
    pass


@dataclass
class ViolationCounts:
    line_congestion: int = 0
    transformer_line: int = 0
    transformer: int = 0
    undervoltage: int = 0
    overvoltage: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ValidationResult:
    counts: ViolationCounts
    losses_w: np.ndarray  # (horizon,)
    trafo_power_va: np.ndarray  # (horizon,) complex
    line_over: np.ndarray  # bool (horizon, n_lines): any-phase ampacity exceedance
    v_min_pu: np.ndarray  # (horizon, n_bus)
    v_max_pu: np.ndarray  # (horizon, n_bus)

    def line_congestion_on(self, line_indices) -> int:
        return int(self.line_over[:, list(line_indices)].sum())


@dataclass
class StakeholderMetrics:
    power_loss_kwh: float
    rms_trafo_load_w: float
    cpo_cost: float  # EUR, energy + network components
    cpo_cost_energy: float
    cpo_cost_network: float
    full_soc_pct: float

    def as_dict(self) -> dict:
        return asdict(self)


def validate(
    net: Network,
    schedule: ChargeSchedule,
    points,
    overload_allowance: float = 1.2,
    voltage_band: float = 0.05,
) -> ValidationResult:
    """Run per-step sweeps with EV powers added at their buses and count
    violations against raw ratings (no correction factor)."""
    horizon = net.horizon
    if schedule.power.shape[0] != horizon:
        raise ValidationError(
            f"schedule horizon {schedule.power.shape[0]} != network horizon {horizon}")
    topo = net.topology()
    ph = net.phases
    bus_of_point = {p.id: net.bus_index(p.bus) for p in points}
    amp = np.array([ln.ampacity_a for ln in net.lines])
    v_nom = np.array([b.v_nom for b in net.buses])
    rated = net.transformer.rated_va
    tf_line_limit = rated / (ph * net.buses[topo.root].v_nom)

    counts = ViolationCounts()
    losses = np.zeros(horizon)
    s_tf = np.zeros(horizon, dtype=complex)
    line_over = np.zeros((horizon, net.n_lines), dtype=bool)
    v_min = np.zeros((horizon, net.n_bus))
    v_max = np.zeros((horizon, net.n_bus))
    head_lines = [li for li in range(net.n_lines) if topo.line_up[li] == topo.root]

    for t in range(horizon):
        inj = net.base_injections(t)
        for pid, p in enumerate(schedule.power[t]):
            if p != 0.0 and pid in bus_of_point:
                inj[bus_of_point[pid]] += p / ph
        try:
            sol = solve_sweep(net, inj)
        except ConvergenceError as exc:
            raise ValidationError(f"sweep failed at step {t}: {exc}") from exc
        losses[t] = sol.losses
        s_tf[t] = sol.transformer_power
        imag = sol.current_magnitudes()
        if net.n_lines:
            line_over[t] = (imag > amp[:, None]).any(axis=1)
        counts.line_congestion += int(line_over[t].sum())
        # aggregate secondary current per phase plays the "transformer line"
        if head_lines:
            root_i = np.abs(np.sum(sol.line_currents[head_lines], axis=0))
            if np.any(root_i > tf_line_limit):
                counts.transformer_line += 1
        if abs(sol.transformer_power) > rated * overload_allowance:
            counts.transformer += 1
        vpu = sol.voltage_magnitudes() / v_nom[:, None]
        v_min[t] = vpu.min(axis=1)
        v_max[t] = vpu.max(axis=1)
        counts.undervoltage += int(np.sum(v_min[t] < 1.0 - voltage_band))
        counts.overvoltage += int(np.sum(v_max[t] > 1.0 + voltage_band))
    return ValidationResult(counts=counts, losses_w=losses, trafo_power_va=s_tf,
                            line_over=line_over, v_min_pu=v_min, v_max_pu=v_max)


def cpo_costs(
    schedule: ChargeSchedule,
    prices: np.ndarray,
    dt_hours: float,
    tariff: StackedTariff | None = None,
) -> tuple[float, float]:
    """(energy, network) cost components in EUR."""
    energy = float(np.sum(prices * schedule.total_ev_power()) * dt_hours / 1e3)
    network = 0.0
    if tariff is not None and np.any(schedule.band_power):
        network = network_cost(tariff, schedule.band_power, dt_hours)
    return energy, network


def full_soc_share(schedule: ChargeSchedule, sessions, dt_hours: float,
                   slack_pp: float = 0.5) -> float:
    """Share of sessions whose departure SOC reaches the reachable maximum."""
    if not sessions:
        return 100.0
    ok = 0
    for k, s in enumerate(sessions):
        last = min(s.departure, schedule.soc.shape[0]) - 1
        reached = schedule.soc[last, k] if last >= s.arrival else s.soc_init
        if reached >= s.reachable_soc(dt_hours) - slack_pp:
            ok += 1
    return 100.0 * ok / len(sessions)


def stakeholder_metrics(
    net: Network,
    schedule: ChargeSchedule,
    validation: ValidationResult,
    sessions,
    prices: np.ndarray,
    tariff: StackedTariff | None = None,
) -> StakeholderMetrics:
    dt = net.step_hours
    energy, network = cpo_costs(schedule, prices, dt, tariff)
    return StakeholderMetrics(
        power_loss_kwh=float(np.sum(validation.losses_w) * dt / 1e3),
        rms_trafo_load_w=float(np.sqrt(np.mean(validation.trafo_power_va.real ** 2))),
        cpo_cost=energy + network,
        cpo_cost_energy=energy,
        cpo_cost_network=network,
        full_soc_pct=full_soc_share(schedule, sessions, dt),
    )


def stakeholder_table(metrics_by_scenario: dict) -> dict:
    """Absolute metrics plus relative-to-S0 percentages (losses, RMS, costs);
    full-SOC stays absolute."""
    if "S0" not in metrics_by_scenario:
        raise ValidationError("baseline scenario S0 missing from runs")
    base = metrics_by_scenario["S0"]
    out = {}

    def rel(v, v0):
        return 100.0 * (v - v0) / v0 if v0 != 0 else float("nan")

    for label, m in metrics_by_scenario.items():
        out[label] = {
            **m.as_dict(),
            "power_loss_rel_pct": rel(m.power_loss_kwh, base.power_loss_kwh),
            "rms_trafo_rel_pct": rel(m.rms_trafo_load_w, base.rms_trafo_load_w),
            "cpo_cost_rel_pct": rel(m.cpo_cost, base.cpo_cost),
        }
    return out


def transformer_trace(net: Network, schedule: ChargeSchedule) -> np.ndarray:
    """No-loss aggregate transformer power per step: base load + EV total."""
    return aggregate_base_series(net) + schedule.total_ev_power()


# -- report files ------------------------------------------------------------

METRIC_COLUMNS = (
    "scenario", "power_loss_kwh", "rms_trafo_load_w", "cpo_cost",
    "cpo_cost_energy", "cpo_cost_network", "full_soc_pct",
    "power_loss_rel_pct", "rms_trafo_rel_pct", "cpo_cost_rel_pct",
)


def write_reports(
    outdir,
    net: Network,
    runs: dict,  # label -> dict(schedule, validation, metrics)
) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    labels = sorted(runs)
    with open(outdir / "violations.csv", "w", newline="") as fh:
        fh.write("scenario,category,count\n")
        for label in labels:
            for cat, cnt in runs[label]["validation"].counts.as_dict().items():
                fh.write(f"{label},{cat},{cnt}\n")
    table = stakeholder_table({l: runs[l]["metrics"] for l in labels}) \
        if "S0" in runs else {l: runs[l]["metrics"].as_dict() for l in labels}
    with open(outdir / "metrics.csv", "w", newline="") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for label in labels:
            row = table[label]
            cells = [label] + [
                f"{row.get(c, float('nan')):.6f}" for c in METRIC_COLUMNS[1:]]
            fh.write(",".join(cells) + "\n")
    for label in labels:
        trace = transformer_trace(net, runs[label]["schedule"])
        with open(outdir / f"trace_{label}.csv", "w", newline="") as fh:
            fh.write("step,aggregate_w\n")
            for t, v in enumerate(trace):
                fh.write(f"{t},{v:.6f}\n")
    summary = {
        "violations": {l: runs[l]["validation"].counts.as_dict() for l in labels},
        "metrics": {l: {k: (None if isinstance(v, float) and np.isnan(v) else v)
                        for k, v in table[l].items()} for l in labels},
    }
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
