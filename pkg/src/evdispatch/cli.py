"""Scenario runner: parses a config file, executes S0-S4, writes reports.

Scenario defaults:
    S0  uncontrolled charging baseline
    S1  day-ahead tariff, objective I+IV, transformer limit, 80% V2G
    S2  stacked tariff, objective I+II+IV, transformer limit, 80% V2G
    S3  as S2 with V2G disabled
    S4  as S2 plus loss proxy (III) and line/voltage rows on the modelled feeder
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import demo as demo_mod
from .dispatch import DispatchConfig, build_grid_rows, run_rho
from .evaluate import stakeholder_metrics, validate, write_reports
from .fleet import (ChargingPoint, SessionProfile, assign_points,
                    generate_sessions, load_sessions, uncontrolled_schedule)
from .grid import NetworkError, aggregate_base_series, load_network
from .powerflow import (build_linear_map, calibrate_correction,
                        sample_injection_scenarios)
from .tariff import StackedTariff, TariffError, load_prices

log = logging.getLogger(__name__)

ALL_SCENARIOS = ("S0", "S1", "S2", "S3", "S4")

SCENARIO_DEFAULTS = {
    "S0": {"mode": "uncontrolled"},
    "S1": {"tariff_mode": "day_ahead", "objective": ["I", "IV"],
           "constraint_set": "transformer", "v2g": True},
    "S2": {"tariff_mode": "stacked", "objective": ["I", "II", "IV"],
           "constraint_set": "transformer", "v2g": True},
    "S3": {"tariff_mode": "stacked", "objective": ["I", "II", "IV"],
           "constraint_set": "transformer", "v2g": False},
    "S4": {"tariff_mode": "stacked", "objective": ["I", "II", "III", "IV"],
           "constraint_set": "transformer+pf", "v2g": True},
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if "network" not in cfg:
        raise ConfigError("config is missing 'network'")
    if "prices" not in cfg:
        raise ConfigError("config is missing 'prices'")
    cfg["_dir"] = str(Path(path).parent)
    return cfg


def _resolve(cfg: dict, key: str) -> Path:
    p = Path(cfg[key])
    return p if p.is_absolute() else Path(cfg["_dir"]) / p


class Experiment:
    """Immutable inputs shared by every scenario of one run."""

    def __init__(self, cfg: dict, seed: int | None = None):
        self.cfg = cfg
        net_path = _resolve(cfg, "network")
        if not net_path.exists():
            raise ConfigError(f"network file not found: {net_path}")
        self.net = load_network(net_path)
        prices_path = _resolve(cfg, "prices")
        if not prices_path.exists():
            raise ConfigError(f"prices file not found: {prices_path}")
        self.prices = load_prices(prices_path, self.net.horizon)
        fleet_cfg = cfg.get("fleet", {})
        self.seed = seed if seed is not None else int(fleet_cfg.get("seed", 1))
        if "points" in cfg:
            self.points = [ChargingPoint(id=int(p["id"]), bus=int(p["bus"]),
                                         rated_power=float(p.get("rated_kw", 11.0)) * 1e3)
                           for p in cfg["points"]]
        else:
            self.points = assign_points(self.net, int(fleet_cfg.get("points", 8)))
        if cfg.get("sessions"):
            sess_path = _resolve(cfg, "sessions")
            if not sess_path.exists():
                raise ConfigError(f"sessions file not found: {sess_path}")
            self.sessions = load_sessions(sess_path)
        else:
            profile = SessionProfile(v2g_share=float(fleet_cfg.get("v2g_share", 0.8)))
            days = int(fleet_cfg.get("days", round(self.net.horizon * self.net.step_hours / 24)))
            self.sessions = generate_sessions(self.net, self.points, days,
                                              self.seed, profile)
        known = {p.id for p in self.points}
        for s in self.sessions:
            if s.point not in known:
                raise ConfigError(f"session references unknown charging point {s.point}")
        t_cfg = cfg.get("tariff", {})
        self.tariff = StackedTariff.from_forecast(
            self.net, aggregate_base_series(self.net),
            fractions=t_cfg.get("fractions", (0.6, 0.8, 1.0)),
            prices=t_cfg.get("prices", (0.01, 0.05, 0.15)))
        self.dispatch_cfg = cfg.get("dispatch", {})
        self.modelled = cfg.get("modelled_feeder", {})
        self._grid_rows = None

    def grid_rows(self):
        """Linear map + correction factor rows, built lazily (S4 only)."""
        if self._grid_rows is None:
            cal = self.cfg.get("calibration", {})
            base = self.net.base_injections(
                int(np.argmax(self.net.bus_p_matrix().sum(axis=1))))
            linmap = build_linear_map(self.net, base)
            scenarios = sample_injection_scenarios(
                self.net,
                count=int(cal.get("count", 20)),
                seed=int(cal.get("seed", 7)),
                scale_range=tuple(cal.get("scale_range", (0.4, 1.2))),
                ev_buses=[p.bus for p in self.points],
                ev_max_w=float(cal.get("ev_max_kw", 11.0)) * 1e3)
            kappa = calibrate_correction(self.net, scenarios, linmap)
            log.info("calibrated current correction factor: %.4f", kappa.kappa)
            self._grid_rows = build_grid_rows(
                self.net, linmap, kappa,
                modelled_lines=self.modelled.get("lines"),
                modelled_buses=self.modelled.get("buses"))
        return self._grid_rows

    def scenario_config(self, label: str) -> dict:
        spec = dict(SCENARIO_DEFAULTS.get(label, SCENARIO_DEFAULTS["S2"]))
        spec.update(self.cfg.get("scenarios", {}).get(label, {}))
        return spec

    def run_scenario(self, label: str) -> dict:
        spec = self.scenario_config(label)
        n_points = max(p.id for p in self.points) + 1
        if spec.get("mode") == "uncontrolled":
            schedule = uncontrolled_schedule(self.sessions, n_points,
                                             self.net.horizon, self.net.step_hours)
            tariff_used = None
        else:
            use_pf = spec.get("constraint_set") == "transformer+pf"
            dcfg = DispatchConfig(
                window_steps=int(self.dispatch_cfg.get("window_steps", 96)),
                tariff_mode=spec.get("tariff_mode", "stacked"),
                objective=frozenset(spec.get("objective", ["I", "II", "IV"])),
                use_powerflow=use_pf,
                v2g_enabled=bool(spec.get("v2g", True)),
                w_loss=float(self.dispatch_cfg.get("w_loss", 1.0)),
                epsilon_ramp=float(self.dispatch_cfg.get("epsilon_ramp", 1e-9)),
            )
            tariff_used = self.tariff if dcfg.tariff_mode == "stacked" else None
            rows = self.grid_rows() if use_pf else None
            result = run_rho(self.net, self.prices, self.sessions, self.points,
                             dcfg, tariff=tariff_used, grid_rows=rows)
            schedule = result.schedule
            for ev in result.events:
                log.warning("%s: %s", label, ev)
        validation = validate(self.net, schedule, self.points)
        metrics = stakeholder_metrics(self.net, schedule, validation,
                                      self.sessions, self.prices, tariff_used)
        return {"schedule": schedule, "validation": validation, "metrics": metrics}


def _worker(args):
    config_path, label, seed = args
    exp = Experiment(load_config(config_path), seed=seed)
    return label, exp.run_scenario(label)


def run(config_path, labels, outdir, seed=None, parallel=1) -> dict:
    cfg = load_config(config_path)
    runs = {}
    if parallel > 1 and len(labels) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for label, result in pool.map(
                    _worker, [(config_path, l, seed) for l in labels]):
                runs[label] = result
    else:
        exp = Experiment(cfg, seed=seed)
        for label in labels:
            log.info("running scenario %s", label)
            runs[label] = exp.run_scenario(label)
    net = Experiment(cfg, seed=seed).net if parallel > 1 else exp.net
    write_reports(outdir, net, runs)
    return runs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="evdispatch",
        description="Smart EV charging dispatch and grid-impact evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute scenarios from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--scenarios", default=",".join(ALL_SCENARIOS),
                       help="comma-separated labels (default: all)")
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--parallel", type=int, default=1)
    p_demo = sub.add_parser("make-demo", help="write the bundled demo fixture")
    p_demo.add_argument("directory")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=os.environ.get("EVDISPATCH_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "make-demo":
        cfg_path = demo_mod.write_demo(args.directory)
        print(f"demo fixture written; config at {cfg_path}")
        return 0
    labels = [l.strip() for l in args.scenarios.split(",") if l.strip()]
    try:
        run(args.config, labels, args.out, seed=args.seed, parallel=args.parallel)
    except (ConfigError, NetworkError, TariffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"reports written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
