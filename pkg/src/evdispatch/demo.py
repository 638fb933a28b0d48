"""Bundled desk-scale fixture: a synthetic 13-bus, two-feeder LV network
with a 400 kVA transformer, two simulated days at 15-minute resolution,
eight charging points and a deliberately evening-peaked base load.

Feeder A (buses 1-8) is the "modelled feeder" carrying the daytime
charging cluster; feeder B (buses 9-12) carries the evening residential
peak.  The day-ahead price dips at midday while feeder A load peaks, so
price-only dispatch piles charging onto the congested midday hours while
the stacked tariff pushes it to the cheap-band morning.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fleet import ChargingPoint, EvSession, save_sessions
from .grid import Bus, Line, Network, Transformer, save_network
from .tariff import save_prices

HORIZON = 192  # two days at 0.25 h
STEP_HOURS = 0.25
V_NOM = 230.0
PHASES = 3

# (start_hour, end_hour, feeder_A_kW, feeder_B_kW, price_eur_per_kwh)
_DAY_BLOCKS = (
    (0, 6, 60.0, 40.0, 0.12),
    (6, 9, 90.0, 80.0, 0.22),
    (9, 12, 100.0, 80.0, 0.10),
    (12, 15, 150.0, 100.0, 0.08),
    (15, 17, 110.0, 120.0, 0.20),
    (17, 21, 120.0, 260.0, 0.40),
    (21, 24, 80.0, 90.0, 0.18),
)

_A_BUSES = (1, 2, 3, 4, 5, 6, 7, 8)
_A_WEIGHTS = (1.5, 1.25, 1.25, 1.0, 1.0, 1.0, 0.5, 0.5)
_B_BUSES = (9, 10, 11, 12)
_B_WEIGHTS = (1.5, 1.0, 0.75, 0.75)

# from, to, r_ohm, x_ohm, ampacity_a  (per phase)
_LINES = (
    (0, 1, 0.012, 0.006, 239.0),
    (1, 2, 0.012, 0.006, 400.0),
    (2, 3, 0.015, 0.007, 400.0),
    (3, 4, 0.015, 0.007, 400.0),
    (2, 5, 0.020, 0.008, 200.0),
    (3, 6, 0.020, 0.008, 200.0),
    (4, 7, 0.025, 0.009, 200.0),
    (4, 8, 0.025, 0.009, 200.0),
    (0, 9, 0.008, 0.004, 600.0),
    (9, 10, 0.010, 0.005, 600.0),
    (10, 11, 0.012, 0.005, 400.0),
    (11, 12, 0.015, 0.006, 400.0),
)

MODELLED_FEEDER_LINES = tuple((f, t) for f, t, *_ in _LINES[:8])
MODELLED_FEEDER_BUSES = _A_BUSES


def _hourly_series(column: int, days: int = 2) -> np.ndarray:
    day = np.empty(96)
    for start, end, a_kw, b_kw, price in _DAY_BLOCKS:
        value = (a_kw, b_kw, price)[column]
        day[int(start * 4):int(end * 4)] = value
    return np.tile(day, days)


def demo_prices(days: int = 2) -> np.ndarray:
    return _hourly_series(2, days)


def demo_network(days: int = 2) -> Network:
    horizon = 96 * days
    a_total = _hourly_series(0, days) * 1e3
    b_total = _hourly_series(1, days) * 1e3
    buses = [Bus(id=0, phases=PHASES, v_nom=V_NOM,
                 p_load=np.zeros((horizon, PHASES)),
                 q_load=np.zeros((horizon, PHASES)))]
    for bus_set, weights, total in ((_A_BUSES, _A_WEIGHTS, a_total),
                                    (_B_BUSES, _B_WEIGHTS, b_total)):
        wsum = sum(weights)
        for bid, w in zip(bus_set, weights):
            p = total * (w / wsum)
            per_phase = np.repeat(p[:, None] / PHASES, PHASES, axis=1)
            buses.append(Bus(id=bid, phases=PHASES, v_nom=V_NOM,
                             p_load=per_phase, q_load=0.2 * per_phase))
    lines = [Line(from_bus=f, to_bus=t,
                  r_ohm=np.full(PHASES, r), x_ohm=np.full(PHASES, x),
                  ampacity_a=amp)
             for f, t, r, x, amp in _LINES]
    return Network(buses=buses, lines=lines,
                   transformer=Transformer(rated_va=400e3, bus=0),
                   horizon=horizon, step_hours=STEP_HOURS)


def demo_points() -> list[ChargingPoint]:
    spots = (4, 5, 6, 7, 8, 10, 11, 12)
    return [ChargingPoint(id=i, bus=b) for i, b in enumerate(spots)]


def demo_sessions() -> list[EvSession]:
    """Three daytime commuter sessions on feeder A plus five overnight
    sessions, repeated on both days (overnight day-2 departures clamp to
    the horizon)."""
    # point, arrival, departure, soc_init, capacity, v2g   (steps in-day)
    daily = (
        (0, 36, 68, 30.0, 55.0, True),
        (1, 37, 66, 40.0, 40.0, True),
        (2, 38, 68, 25.0, 75.0, False),
        (3, 70, 126, 30.0, 55.0, True),
        (4, 72, 128, 45.0, 55.0, True),
        (5, 68, 124, 35.0, 75.0, True),
        (6, 74, 122, 50.0, 40.0, False),
        (7, 76, 130, 20.0, 55.0, True),
    )
    sessions = []
    for day in range(HORIZON // 96):
        for point, arr, dep, soc0, cap, v2g in daily:
            arrival = arr + 96 * day
            departure = min(dep + 96 * day, HORIZON)
            if departure <= arrival + 1:
                continue
            sessions.append(EvSession(
                point=point, arrival=arrival, departure=departure,
                soc_init=soc0, soc_max=100.0, soc_min=0.0,
                capacity_kwh=cap, rated_power=11e3, v2g=v2g))
    return sessions


def demo_config(workdir: str | Path = ".") -> dict:
    return {
        "network": "network.json",
        "prices": "prices.csv",
        "sessions": "sessions.csv",
        "points": [{"id": p.id, "bus": p.bus, "rated_kw": p.rated_power / 1e3}
                   for p in demo_points()],
        "tariff": {"fractions": [0.6, 0.8, 1.0], "prices": [0.01, 0.05, 0.15]},
        "dispatch": {"window_steps": 96, "w_loss": 1.0, "epsilon_ramp": 1e-9},
        "calibration": {"count": 20, "seed": 7, "scale_range": [0.4, 1.2],
                        "ev_max_kw": 11.0},
        "modelled_feeder": {
            "buses": list(MODELLED_FEEDER_BUSES),
            "lines": [list(l) for l in MODELLED_FEEDER_LINES],
        },
    }


def write_demo(directory: str | Path) -> Path:
    """Write the demo fixture files; returns the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_network(demo_network(), directory / "network.json")
    save_prices(demo_prices(), directory / "prices.csv")
    save_sessions(demo_sessions(), directory / "sessions.csv")
    cfg_path = directory / "config.json"
    with open(cfg_path, "w") as fh:
        json.dump(demo_config(directory), fh, indent=2)
    return cfg_path
