"""EV sessions, synthetic session generation and the uncontrolled baseline.

SOC is carried in percent, battery capacity in kWh, power in watts.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import Network


@dataclass(frozen=True)
class ChargingPoint:
    id: int
    bus: int
    rated_power: float = 11e3  # W


@dataclass(frozen=True)
class EvSession:
    point: int
    arrival: int  # step index, inclusive
    departure: int  # step index, exclusive (first step the EV is gone)
    soc_init: float  # percent
    soc_max: float = 100.0
    soc_min: float = 0.0
    capacity_kwh: float = 55.0
    rated_power: float = 11e3  # W, min of EV and point rating
    v2g: bool = True

    def __post_init__(self):
        if not self.arrival < self.departure:
            raise ValueError("session must arrive before it departs")
        if not self.soc_min <= self.soc_init <= self.soc_max <= 100.0:
            raise ValueError("SOC bounds must satisfy min <= init <= max <= 100")
        if self.capacity_kwh <= 0:
            raise ValueError("capacity must be > 0")

    def reachable_soc(self, dt_hours: float) -> float:
        """Best SOC attainable charging flat-out for the whole connection."""
        steps = self.departure - self.arrival
        gain = self.rated_power * steps * dt_hours / (10.0 * self.capacity_kwh)
        return min(self.soc_max, self.soc_init + gain)


def soc_step(soc_prev: float, power_w: float, dt_hours: float, capacity_kwh: float) -> float:
    """One SOC update in percent points; discharge (negative power) decreases SOC."""
    if capacity_kwh <= 0:
        raise ValueError("capacity must be > 0")
    return soc_prev + power_w * dt_hours / (10.0 * capacity_kwh)


@dataclass
class ChargeSchedule:
    """Committed powers and SOC trajectories over the full horizon."""

    power: np.ndarray  # (horizon, n_points) W, signed
    soc: np.ndarray  # (horizon, n_sessions) percent, 0 outside the session
    alpha: np.ndarray  # (n_sessions,) fraction of soc_max reached at departure
    band_power: np.ndarray = None  # (horizon, 3) W, zero when no stacked tariff

    def __post_init__(self):
        if self.band_power is None:
            self.band_power = np.zeros((self.power.shape[0], 3))

    def total_ev_power(self) -> np.ndarray:
        return self.power.sum(axis=1)


def sessions_active_at(sessions, t: int):
    return [(k, s) for k, s in enumerate(sessions) if s.arrival <= t < s.departure]


def uncontrolled_schedule(
    sessions,
    n_points: int,
    horizon: int,
    dt_hours: float,
) -> ChargeSchedule:
    """Charge at rated power from arrival until soc_max, one partial final
    step so the SOC lands exactly on soc_max; never discharges."""
    power = np.zeros((horizon, n_points))
    soc = np.zeros((horizon, len(sessions)))
    alpha = np.zeros(len(sessions))
    for k, s in enumerate(sessions):
        need_kwh = (s.soc_max - s.soc_init) * s.capacity_kwh / 100.0
        v = s.soc_init
        for t in range(s.arrival, min(s.departure, horizon)):
            step_kwh = s.rated_power * dt_hours / 1e3
            p = s.rated_power if need_kwh >= step_kwh else need_kwh * 1e3 / dt_hours
            p = max(0.0, p)
            power[t, s.point] += p
            need_kwh -= p * dt_hours / 1e3
            v = soc_step(v, p, dt_hours, s.capacity_kwh)
            soc[t, k] = v
        alpha[k] = min(1.0, v / s.soc_max)
    return ChargeSchedule(power=power, soc=soc, alpha=alpha)


@dataclass(frozen=True)
class SessionProfile:
    """Arrival-pattern configuration for the synthetic generator."""

    v2g_share: float = 0.8
    morning_share: float = 0.35  # commuter sessions arriving around 09:00
    morning_hour: float = 9.0
    morning_std: float = 0.6
    evening_hour: float = 18.0
    evening_std: float = 1.0
    day_duration_h: float = 7.5  # median, log-normal
    night_duration_h: float = 13.0
    duration_sigma: float = 0.2
    min_duration_h: float = 2.5
    soc_init_range: tuple = (20.0, 60.0)
    capacities_kwh: tuple = (40.0, 55.0, 75.0)
    rated_power_w: float = 11e3


def assign_points(net: Network, count: int, buses=None) -> list[ChargingPoint]:
    """Round-robin placement of charging points on the given buses
    (default: every non-root bus)."""
    if buses is None:
        root = net.transformer.bus
        buses = [b.id for b in net.buses if b.id != root]
    if not buses:
        raise ValueError("no buses available for charging points")
    return [ChargingPoint(id=i, bus=buses[i % len(buses)]) for i in range(count)]


def generate_sessions(
    net: Network,
    points,
    days: int,
    seed: int,
    profile: SessionProfile = SessionProfile(),
) -> list[EvSession]:
    """Deterministic synthetic sessions: two-peak daily arrivals, log-normal
    durations, at most one session per point at a time."""
    if isinstance(points, int):
        points = assign_points(net, points)
    rng = np.random.default_rng(seed)
    steps_per_day = round(24.0 / net.step_hours)
    horizon = net.horizon
    sessions: list[EvSession] = []
    for cp in points:
        prev_dep = 0
        for day in range(days):
            morning = rng.random() < profile.morning_share
            if morning:
                hour = rng.normal(profile.morning_hour, profile.morning_std)
                dur_h = np.exp(rng.normal(np.log(profile.day_duration_h), profile.duration_sigma))
            else:
                hour = rng.normal(profile.evening_hour, profile.evening_std)
                dur_h = np.exp(rng.normal(np.log(profile.night_duration_h), profile.duration_sigma))
            dur_h = max(profile.min_duration_h, dur_h)
            arrival = day * steps_per_day + int(round(hour / net.step_hours))
            arrival = max(arrival, prev_dep + 1)
            departure = min(arrival + int(round(dur_h / net.step_hours)), horizon)
            if departure - arrival < int(round(profile.min_duration_h / net.step_hours)):
                continue
            if arrival >= horizon:
                continue
            sessions.append(
                EvSession(
                    point=cp.id,
                    arrival=arrival,
                    departure=departure,
                    soc_init=float(rng.uniform(*profile.soc_init_range)),
                    soc_max=100.0,
                    soc_min=0.0,
                    capacity_kwh=float(rng.choice(profile.capacities_kwh)),
                    rated_power=min(profile.rated_power_w, cp.rated_power),
                    v2g=bool(rng.random() < profile.v2g_share),
                )
            )
            prev_dep = departure
    return sessions


# -- sessions file -----------------------------------------------------------

SESSION_COLUMNS = (
    "point_id", "arrival_step", "departure_step", "soc_init_pct",
    "soc_max_pct", "capacity_kwh", "pmax_kw", "v2g_flag",
)


def load_sessions(path) -> list[EvSession]:
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][0] == SESSION_COLUMNS[0]:
        rows = rows[1:]
    out = []
    for r in rows:
        out.append(
            EvSession(
                point=int(r[0]),
                arrival=int(r[1]),
                departure=int(r[2]),
                soc_init=float(r[3]),
                soc_max=float(r[4]),
                capacity_kwh=float(r[5]),
                rated_power=float(r[6]) * 1e3,
                v2g=bool(int(r[7])),
            )
        )
    return out


def save_sessions(sessions, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SESSION_COLUMNS)
        for s in sessions:
            w.writerow([
                s.point, s.arrival, s.departure, f"{s.soc_init:.2f}",
                f"{s.soc_max:.2f}", f"{s.capacity_kwh:.2f}",
                f"{s.rated_power / 1e3:.2f}", int(s.v2g),
            ])
