"""Per-window LP dispatch and the receding-horizon controller.

Each window minimises day-ahead energy cost, stacked network fees, an
optional loss proxy on the transformer power, and a big-M reward on the
fraction of maximum SOC reached at departure, subject to SOC dynamics,
charger power limits, band capacity/balance, the transformer limit and
(optionally) affine line-current and node-voltage rows.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .fleet import ChargeSchedule, EvSession, soc_step
from .grid import Network, aggregate_base_series
from .powerflow import CorrectionFactor, LinearGridMap
from .tariff import StackedTariff

log = logging.getLogger(__name__)


class DispatchError(RuntimeError):
    pass


class InfeasibleWindow(DispatchError):
    def __init__(self, start: int, detail: str):
        super().__init__(f"window starting at step {start} is infeasible ({detail})")
        self.start = start
        self.detail = detail


@dataclass(frozen=True)
class DispatchConfig:
    window_steps: int = 96
    tariff_mode: str = "stacked"  # "stacked" | "day_ahead"
    objective: frozenset = frozenset({"I", "II", "IV"})
    use_powerflow: bool = False
    v2g_enabled: bool = True  # False forces mono-directional charging
    w_loss: float = 1.0  # EUR/kWh on the transformer-power proxy (component III)
    big_m: float | None = None  # None: derived from prices and ratings
    epsilon_ramp: float = 1e-9  # EUR/kWh/step tie-break toward earlier steps
    feasibility_tol: float = 1e-7
    modelled_lines: tuple | None = None  # ((from, to), ...) subset for pf rows
    modelled_buses: tuple | None = None


@dataclass
class ActiveSession:
    session: EvSession
    soc_now: float
    index: int  # position in the global session list


@dataclass
class DispatchWindow:
    start: int
    length: int
    sessions: list  # ActiveSession
    base_load: np.ndarray  # (length,) W, aggregate no-loss forecast
    prices: np.ndarray  # (length,) EUR/kWh


@dataclass
class LpProblem:
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    meta: dict


@dataclass
class WindowSolution:
    status: str  # optimal | infeasible | unbounded | error
    objective: float
    x: np.ndarray | None
    meta: dict

    def session_powers(self, k: int) -> np.ndarray:
        return self.x[self.meta["p_idx"][k]]

    def band_powers(self) -> np.ndarray | None:
        idx = self.meta.get("band_idx")
        return None if idx is None else self.x[idx]

    def alphas(self) -> np.ndarray:
        return self.x[self.meta["alpha_idx"]]


@dataclass
class GridConstraintData:
    """Precomputed affine current/voltage rows for the modelled feeder."""

    line_idx: np.ndarray  # modelled line indices
    bus_idx: np.ndarray  # modelled bus indices
    coef_i: np.ndarray  # (n_mod_lines, ph, n_bus) d|I|/dP_bus
    coef_v: np.ndarray  # (n_mod_bus, ph, n_bus)
    const_i: np.ndarray  # (horizon, n_mod_lines, ph) base-load |I| estimate
    const_v: np.ndarray  # (horizon, n_mod_bus, ph)
    i_limit: np.ndarray  # (n_mod_lines,) kappa * ampacity
    v_lo: np.ndarray  # (n_mod_bus,)
    v_hi: np.ndarray
    tf_coef: np.ndarray  # (n_bus,) d P_tf* / dP_bus


def build_grid_rows(
    net: Network,
    linmap: LinearGridMap,
    kappa: CorrectionFactor,
    modelled_lines=None,
    modelled_buses=None,
    voltage_band: float = 0.05,
) -> GridConstraintData:
    topo = net.topology()
    if modelled_lines is None:
        line_idx = np.arange(net.n_lines)
    else:
        wanted = {tuple(l) for l in modelled_lines}
        line_idx = np.array([k for k, ln in enumerate(net.lines)
                             if ln.id in wanted or ln.id[::-1] in wanted])
    if modelled_buses is None:
        bus_idx = np.arange(net.n_bus)
    else:
        bus_idx = np.array(sorted(net.bus_index(b) for b in modelled_buses))
    ci = linmap.current_coeff_active()[line_idx]
    cv = linmap.voltage_coeff_active()[bus_idx]
    const_i = np.empty((net.horizon, len(line_idx), net.phases))
    const_v = np.empty((net.horizon, len(bus_idx), net.phases))
    for t in range(net.horizon):
        inj = net.base_injections(t)
        const_i[t] = linmap.predict_current_magnitudes(inj)[line_idx]
        const_v[t] = linmap.predict_voltage_magnitudes(inj)[bus_idx]
    amp = np.array([net.lines[k].ampacity_a for k in line_idx])
    v_nom = np.array([net.buses[k].v_nom for k in bus_idx])
    return GridConstraintData(
        line_idx=line_idx,
        bus_idx=bus_idx,
        coef_i=ci,
        coef_v=cv,
        const_i=const_i,
        const_v=const_v,
        i_limit=kappa.kappa * amp,
        v_lo=(1.0 - voltage_band) * v_nom,
        v_hi=(1.0 + voltage_band) * v_nom,
        tf_coef=linmap.transformer_coeff_active(),
    )


def default_big_m(prices: np.ndarray, tariff: StackedTariff | None,
                  p_max_w: float, window_steps: int) -> float:
    c_hl = tariff.band_prices[2] if tariff is not None else 0.0
    return 10.0 * (float(np.max(np.abs(prices))) + c_hl) * (p_max_w / 1e3) * window_steps


def assemble(
    window: DispatchWindow,
    net: Network,
    cfg: DispatchConfig,
    tariff: StackedTariff | None = None,
    grid_rows: GridConstraintData | None = None,
    point_bus_index: dict | None = None,
    include_pf_rows: bool = True,
) -> LpProblem:
    """Build the window LP.  Variable order: per-session P blocks, then
    per-session V blocks, then alphas, then band powers, then net discharge."""
    T = window.length
    if T < 1:
        raise ValueError("window length must be >= 1")
    stacked = cfg.tariff_mode == "stacked"
    if stacked and tariff is None:
        raise DispatchError("stacked tariff mode requires a StackedTariff")
    if cfg.use_powerflow and include_pf_rows and grid_rows is None:
        raise DispatchError("power-flow constraints requested without a linear map")
    dt = net.step_hours
    start = window.start
    nC = len(window.sessions)

    # variable layout
    p_idx, v_idx, loc_steps = [], [], []
    n = 0
    for a in window.sessions:
        s = a.session
        lo = max(s.arrival, start) - start
        hi = min(s.departure, start + T) - start
        if hi <= lo:
            raise DispatchError("inactive session passed to assemble")
        m = hi - lo
        p_idx.append(np.arange(n, n + m))
        n += m
        loc_steps.append(np.arange(lo, hi))
    for k in range(nC):
        v_idx.append(np.arange(n, n + len(p_idx[k])))
        n += len(p_idx[k])
    alpha_idx = np.arange(n, n + nC)
    n += nC
    band_idx = dis_idx = None
    if stacked:
        band_idx = np.arange(n, n + 3 * T).reshape(T, 3)
        n += 3 * T
        dis_idx = np.arange(n, n + T)
        n += T

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    c = np.zeros(n)
    p_max = max((a.session.rated_power for a in window.sessions), default=11e3)
    big_m = cfg.big_m if cfg.big_m is not None else default_big_m(
        window.prices, tariff if stacked else None, p_max, cfg.window_steps)

    tf_coef = grid_rows.tf_coef if grid_rows is not None else None
    for k, a in enumerate(window.sessions):
        s = a.session
        mu = 1.0 if (s.v2g and cfg.v2g_enabled) else 0.0
        lb[p_idx[k]] = -mu * s.rated_power
        ub[p_idx[k]] = s.rated_power
        floor = min(s.soc_min, a.soc_now)
        lb[v_idx[k]] = floor
        ub[v_idx[k]] = s.soc_max
        # objective on powers
        coef = np.zeros(len(p_idx[k]))
        if "I" in cfg.objective:
            coef += window.prices[loc_steps[k]] * dt / 1e3
        if "III" in cfg.objective:
            g = tf_coef[point_bus_index[s.point]] if (
                tf_coef is not None and point_bus_index is not None) else 1.0
            coef += cfg.w_loss * g * dt / 1e3
        coef += cfg.epsilon_ramp * (loc_steps[k] + 1) * dt / 1e3
        c[p_idx[k]] = coef
        if "IV" in cfg.objective:
            c[alpha_idx[k]] = -big_m * dt * T
    lb[alpha_idx] = 0.0
    ub[alpha_idx] = 1.0
    if stacked:
        lb[band_idx.ravel()] = 0.0
        ub[band_idx.ravel()] = tariff.envelopes[start:start + T].ravel()
        if "II" in cfg.objective:
            c[band_idx.ravel()] = (np.broadcast_to(
                np.asarray(tariff.band_prices), (T, 3)) * dt / 1e3).ravel()
        dis_cap = sum(a.session.rated_power for a in window.sessions
                      if a.session.v2g and cfg.v2g_enabled)
        lb[dis_idx] = -dis_cap
        ub[dis_idx] = 0.0

    eq_r, eq_c, eq_v, b_eq = [], [], [], []
    ub_r, ub_c, ub_v, b_ub = [], [], [], []
    row_kind = []
    n_eq = n_ub = 0

    # SOC recursion: V_k - V_{k-1} - gamma * P_k = 0
    for k, a in enumerate(window.sessions):
        s = a.session
        gamma = dt / (10.0 * s.capacity_kwh)
        m = len(p_idx[k])
        for j in range(m):
            eq_r += [n_eq, n_eq]
            eq_c += [int(v_idx[k][j]), int(p_idx[k][j])]
            eq_v += [1.0, -gamma]
            if j == 0:
                b_eq.append(a.soc_now)
            else:
                eq_r.append(n_eq)
                eq_c.append(int(v_idx[k][j - 1]))
                eq_v.append(-1.0)
                b_eq.append(0.0)
            n_eq += 1

    # band balance: sum_c P_{t,c} - sum_p band - dis = 0
    if stacked:
        for tau in range(T):
            for k in range(nC):
                pos = np.searchsorted(loc_steps[k], tau)
                if pos < len(loc_steps[k]) and loc_steps[k][pos] == tau:
                    eq_r.append(n_eq)
                    eq_c.append(int(p_idx[k][pos]))
                    eq_v.append(1.0)
            for p in range(3):
                eq_r.append(n_eq)
                eq_c.append(int(band_idx[tau, p]))
                eq_v.append(-1.0)
            eq_r.append(n_eq)
            eq_c.append(int(dis_idx[tau]))
            eq_v.append(-1.0)
            b_eq.append(0.0)
            n_eq += 1

    # transformer limit: sum_c P_{t,c} <= rated - L_t
    rated = net.transformer.rated_va
    for tau in range(T):
        any_var = False
        for k in range(nC):
            pos = np.searchsorted(loc_steps[k], tau)
            if pos < len(loc_steps[k]) and loc_steps[k][pos] == tau:
                ub_r.append(n_ub)
                ub_c.append(int(p_idx[k][pos]))
                ub_v.append(1.0)
                any_var = True
        if any_var:
            b_ub.append(rated - window.base_load[tau])
            row_kind.append("transformer")
            n_ub += 1

    # departure / interim SOC target: alpha * target - V_last <= 0
    for k, a in enumerate(window.sessions):
        s = a.session
        last = int(v_idx[k][-1])
        if s.departure <= start + T:
            target = s.soc_max
            lb[last] = max(lb[last], s.soc_min)
            kind = "departure"
        else:
            m = len(p_idx[k])
            remaining = s.departure - (start + int(loc_steps[k][0]))
            frac = m / remaining
            target = min(s.soc_max, a.soc_now + (s.soc_max - a.soc_now) * frac)
            kind = "interim"
        ub_r += [n_ub, n_ub]
        ub_c += [int(alpha_idx[k]), last]
        ub_v += [target, -1.0]
        b_ub.append(0.0)
        row_kind.append(kind)
        n_ub += 1

    # affine current / voltage rows on the modelled feeder
    if cfg.use_powerflow and include_pf_rows and grid_rows is not None and nC:
        g = grid_rows
        bus_of = np.array([point_bus_index[a.session.point] for a in window.sessions])
        pmax_c = np.array([a.session.rated_power for a in window.sessions])
        # rows that cannot bind at full fleet power are pruned below
        for tau in range(T):
            t = start + tau
            cells = []
            for k in range(nC):
                pos = np.searchsorted(loc_steps[k], tau)
                if pos < len(loc_steps[k]) and loc_steps[k][pos] == tau:
                    cells.append((k, pos))
            if not cells:
                continue
            kk = [k for k, _ in cells]
            var = [int(p_idx[k][pos]) for k, pos in cells]
            bo = bus_of[kk]
            pm = pmax_c[kk]
            for li in range(len(g.line_idx)):
                for phi in range(net.phases):
                    a_row = g.coef_i[li, phi, bo]
                    up = float(np.sum(np.maximum(a_row, 0.0) * pm))
                    rhs = g.i_limit[li] - g.const_i[t, li, phi]
                    if up <= rhs:  # cannot bind
                        continue
                    ub_r += [n_ub] * len(var)
                    ub_c += var
                    ub_v += a_row.tolist()
                    b_ub.append(rhs)
                    row_kind.append("current")
                    n_ub += 1
            for bi in range(len(g.bus_idx)):
                for phi in range(net.phases):
                    a_row = g.coef_v[bi, phi, bo]
                    const = g.const_v[t, bi, phi]
                    down = float(np.sum(np.minimum(a_row, 0.0) * pm))
                    up = float(np.sum(np.maximum(a_row, 0.0) * pm))
                    if const + down < g.v_lo[bi]:  # undervoltage can bind
                        ub_r += [n_ub] * len(var)
                        ub_c += var
                        ub_v += (-a_row).tolist()
                        b_ub.append(const - g.v_lo[bi])
                        row_kind.append("voltage")
                        n_ub += 1
                    if const + up > g.v_hi[bi]:  # overvoltage can bind
                        ub_r += [n_ub] * len(var)
                        ub_c += var
                        ub_v += a_row.tolist()
                        b_ub.append(g.v_hi[bi] - const)
                        row_kind.append("voltage")
                        n_ub += 1

    A_eq = sp.csr_matrix((eq_v, (eq_r, eq_c)), shape=(n_eq, n))
    A_ub = sp.csr_matrix((ub_v, (ub_r, ub_c)), shape=(n_ub, n))
    meta = {
        "p_idx": p_idx,
        "v_idx": v_idx,
        "alpha_idx": alpha_idx,
        "band_idx": band_idx,
        "dis_idx": dis_idx,
        "loc_steps": loc_steps,
        "row_kind": row_kind,
        "start": start,
        "length": T,
    }
    return LpProblem(c=c, A_ub=A_ub, b_ub=np.array(b_ub), A_eq=A_eq,
                     b_eq=np.array(b_eq), lb=lb, ub=ub, meta=meta)


def solve(lp: LpProblem, tol: float = 1e-7) -> WindowSolution:
    if lp.c.size == 0:
        return WindowSolution(status="optimal", objective=0.0,
                              x=np.zeros(0), meta=lp.meta)
    res = linprog(
        lp.c,
        A_ub=lp.A_ub if lp.A_ub.shape[0] else None,
        b_ub=lp.b_ub if lp.A_ub.shape[0] else None,
        A_eq=lp.A_eq if lp.A_eq.shape[0] else None,
        b_eq=lp.b_eq if lp.A_eq.shape[0] else None,
        bounds=list(zip(lp.lb, lp.ub)),
        method="highs",
        options={"primal_feasibility_tolerance": tol,
                 "dual_feasibility_tolerance": tol},
    )
    status = {0: "optimal", 2: "infeasible", 3: "unbounded"}.get(res.status, "error")
    x = res.x if res.status == 0 else None
    if x is not None:
        x = np.clip(x, lp.lb, lp.ub)
    return WindowSolution(status=status,
                          objective=float(res.fun) if res.status == 0 else np.nan,
                          x=x, meta=lp.meta)


@dataclass
class RhoResult:
    schedule: ChargeSchedule
    events: list = field(default_factory=list)


def run_rho(
    net: Network,
    prices: np.ndarray,
    sessions: list,
    points: list,
    cfg: DispatchConfig,
    tariff: StackedTariff | None = None,
    grid_rows: GridConstraintData | None = None,
) -> RhoResult:
    """Roll a window over the horizon, committing only the first interval."""
    horizon = net.horizon
    dt = net.step_hours
    base = aggregate_base_series(net)
    pb_index = {p.id: net.bus_index(p.bus) for p in points}
    n_points = max((p.id for p in points), default=-1) + 1
    power = np.zeros((horizon, n_points))
    soc = np.zeros((horizon, len(sessions)))
    band = np.zeros((horizon, 3))
    alpha = np.zeros(len(sessions))
    state = {k: s.soc_init for k, s in enumerate(sessions)}
    events = []
    for t in range(horizon):
        active = [ActiveSession(session=s, soc_now=min(state[k], s.soc_max), index=k)
                  for k, s in enumerate(sessions) if s.arrival <= t < s.departure]
        if not active:
            continue
        T = min(cfg.window_steps, horizon - t)
        window = DispatchWindow(
            start=t, length=T, sessions=active,
            base_load=base[t:t + T], prices=prices[t:t + T])
        sol = _solve_with_fallback(window, net, cfg, tariff, grid_rows,
                                   pb_index, events)
        for k, a in enumerate(active):
            p = float(sol.session_powers(k)[0])
            power[t, a.session.point] += p
            state[a.index] = soc_step(state[a.index], p, dt, a.session.capacity_kwh)
            soc[t, a.index] = state[a.index]
            if a.session.departure == t + 1:
                alpha[a.index] = min(1.0, state[a.index] / a.session.soc_max)
        bp = sol.band_powers()
        if bp is not None:
            band[t] = bp[0]
    # sessions clipped by the horizon never depart; report the reached fraction
    for k, s in enumerate(sessions):
        if s.departure > horizon:
            alpha[k] = min(1.0, state[k] / s.soc_max)
    return RhoResult(
        schedule=ChargeSchedule(power=power, soc=soc, alpha=alpha, band_power=band),
        events=events,
    )


def _solve_with_fallback(window, net, cfg, tariff, grid_rows, pb_index, events):
    lp = assemble(window, net, cfg, tariff, grid_rows, pb_index)
    sol = solve(lp, cfg.feasibility_tol)
    if sol.status == "optimal":
        return sol
    if cfg.use_powerflow:
        # drop line/voltage rows, keep the transformer limit
        events.append({"step": window.start, "event": "pf_rows_dropped",
                       "status": sol.status})
        log.warning("step %d: %s with pf rows, retrying without them",
                    window.start, sol.status)
        lp = assemble(window, net, cfg, tariff, grid_rows, pb_index,
                      include_pf_rows=False)
        sol = solve(lp, cfg.feasibility_tol)
        if sol.status == "optimal":
            return sol
    raise InfeasibleWindow(window.start, sol.status)
