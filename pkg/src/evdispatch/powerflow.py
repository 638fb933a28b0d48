"""Backward/forward-sweep power flow and its affine surrogate.

The sweep solver is the nonlinear validation oracle; the LinearGridMap
provides affine voltage- and current-magnitude estimates used as LP
constraint rows.  Phases are decoupled: each phase is solved against its
own series impedance with a common angle reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Network

SWEEP_TOL = 1e-6  # pu voltage update
SWEEP_MAX_ITER = 100


class ConvergenceError(RuntimeError):
    """Sweep failed to converge (collapsed or infeasible operating point)."""


@dataclass
class PowerFlowSolution:
    bus_voltages: np.ndarray  # complex (n_bus, phases), order of net.buses
    line_currents: np.ndarray  # complex (n_lines, phases)
    losses: float  # W, sum of |I|^2 R over lines and phases
    transformer_power: complex  # VA into the network at the root
    iterations: int

    def voltage_magnitudes(self) -> np.ndarray:
        return np.abs(self.bus_voltages)

    def current_magnitudes(self) -> np.ndarray:
        return np.abs(self.line_currents)


def solve_sweep(
    net: Network,
    injections: np.ndarray,
    tol: float = SWEEP_TOL,
    max_iter: int = SWEEP_MAX_ITER,
) -> PowerFlowSolution:
    """Solve the radial network for constant-power injections.

    injections: complex VA, (n_bus, phases), consumption positive.
    Converges when the largest voltage update falls below tol (relative to
    the root nominal voltage).
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    topo = net.topology()
    n, ph = net.n_bus, net.phases
    S = np.asarray(injections, dtype=complex)
    if S.shape != (n, ph):
        raise ValueError(f"injections shape {S.shape} != ({n}, {ph})")
    v_root = net.buses[topo.root].v_nom
    z = np.stack([ln.z_ohm for ln in net.lines]) if net.n_lines else np.zeros((0, ph), complex)
    V = np.full((n, ph), v_root, dtype=complex)
    I_line = np.zeros((net.n_lines, ph), dtype=complex)
    order = topo.order
    parent_line = topo.parent_line
    line_up = topo.line_up
    it = 0
    for it in range(1, max_iter + 1):
        # backward: accumulate load currents up the tree
        I_bus = np.conj(S / V)
        I_line[:] = 0
        for v in order[::-1]:
            li = parent_line[v]
            if li < 0:
                continue
            I_line[li] += I_bus[v]
            up_li = parent_line[line_up[li]]
            if up_li >= 0:
                I_line[up_li] += I_line[li]
        # forward: propagate voltage drops from the root
        V_new = np.empty_like(V)
        V_new[topo.root] = v_root
        for v in order:
            li = parent_line[v]
            if li >= 0:
                V_new[v] = V_new[line_up[li]] - z[li] * I_line[li]
        dv = np.max(np.abs(V_new - V)) / v_root
        V = V_new
        if dv < tol:
            break
        if not np.all(np.isfinite(V)) or np.min(np.abs(V)) < 0.3 * v_root:
            raise ConvergenceError("voltage collapsed during sweep")
    else:
        raise ConvergenceError(f"no convergence in {max_iter} iterations")
    losses = float(np.sum(np.abs(I_line) ** 2 * np.stack([ln.r_ohm for ln in net.lines]))) if net.n_lines else 0.0
    I_root = np.conj(S[topo.root] / V[topo.root]).copy()
    for li in range(net.n_lines):
        if line_up[li] == topo.root:
            I_root += I_line[li]
    s_tf = complex(np.sum(V[topo.root] * np.conj(I_root)))
    return PowerFlowSolution(
        bus_voltages=V,
        line_currents=I_line,
        losses=losses,
        transformer_power=s_tf,
        iterations=it,
    )


@dataclass
class LinearGridMap:
    """Affine surrogate of the sweep around a converged base point.

    Injection deltas are converted to currents at the base-point voltages,
    accumulated down-up into line currents, propagated up-down into voltage
    drops, and magnitudes are taken by projecting onto the base phasor
    angles.  Exact at the base point, affine everywhere.
    """

    base_injections: np.ndarray  # complex (n_bus, phases)
    base_vmag: np.ndarray  # (n_bus, phases)
    base_imag: np.ndarray  # (n_lines, phases)
    base_ptf: float  # W, real part of base transformer power
    _inv_conj_v: np.ndarray  # 1/conj(V_base), (n_bus, phases)
    _u_i: np.ndarray  # unit phasor per line current, (n_lines, phases)
    _u_v: np.ndarray  # unit phasor per bus voltage, (n_bus, phases)
    _subtree: np.ndarray  # bool (n_lines, n_bus)
    _z: np.ndarray  # complex (n_lines, phases)
    _path_mask: np.ndarray  # bool (n_bus, n_lines): line on path root->bus
    _v_root: np.ndarray  # complex (phases,)

    @property
    def n_lines(self) -> int:
        return self._z.shape[0]

    def _delta_line_currents(self, injections: np.ndarray) -> np.ndarray:
        dS = np.asarray(injections, complex) - self.base_injections
        dI_bus = np.conj(dS) * self._inv_conj_v
        # (n_lines, phases): sum of downstream bus injection currents
        return np.einsum("lb,bp->lp", self._subtree.astype(float), dI_bus)

    def predict_current_magnitudes(self, injections: np.ndarray) -> np.ndarray:
        dI = self._delta_line_currents(injections)
        return self.base_imag + np.real(np.conj(self._u_i) * dI)

    def predict_voltage_magnitudes(self, injections: np.ndarray) -> np.ndarray:
        dI = self._delta_line_currents(injections)
        dV = -np.einsum("bl,lp->bp", self._path_mask.astype(float) * 1.0, self._z * dI)
        return self.base_vmag + np.real(np.conj(self._u_v) * dV)

    def predict_transformer_power(self, injections: np.ndarray) -> float:
        dS = np.asarray(injections, complex) - self.base_injections
        dI_tot = (np.conj(dS) * self._inv_conj_v).sum(axis=0)
        return self.base_ptf + float(np.real(np.sum(self._v_root * np.conj(dI_tot))))

    # -- LP coefficient views (unity-pf active power, split over phases) ----

    def current_coeff_active(self) -> np.ndarray:
        """d est|I|_{l,phi} / dP_b for 1 W of bus active power, (n_lines, ph, n_bus)."""
        ph = self._inv_conj_v.shape[1]
        coef = np.einsum(
            "lp,lb,bp->lpb",
            np.conj(self._u_i),
            self._subtree.astype(float),
            self._inv_conj_v,
        )
        return np.real(coef) / ph

    def voltage_coeff_active(self) -> np.ndarray:
        """d est|V|_{b,phi} / dP_b' for 1 W of bus active power, (n_bus, ph, n_bus)."""
        ph = self._inv_conj_v.shape[1]
        # dV_b = -sum_{l in path(b)} z_l * dI_l ; dI_l = sum_{b' in subtree(l)} invV_{b'} / ph
        zmask = self._path_mask[:, None, :] * self._z.T[None, :, :]  # (n_bus, ph, n_lines)
        inner = np.einsum("lb,bp->lpb", self._subtree.astype(float), self._inv_conj_v)
        coef = -np.einsum("bpl,lpc->bpc", zmask, inner)
        return np.real(np.conj(self._u_v)[:, :, None] * coef) / ph

    def transformer_coeff_active(self) -> np.ndarray:
        """d est P_tf / dP_b for 1 W of bus active power, (n_bus,)."""
        ph = self._inv_conj_v.shape[1]
        return np.real(np.sum(self._v_root[None, :] * self._inv_conj_v, axis=1)) / ph


def build_linear_map(net: Network, base_injections: np.ndarray) -> LinearGridMap:
    """Build the affine surrogate around the sweep solution at base_injections."""
    sol = solve_sweep(net, base_injections)
    topo = net.topology()
    V, I = sol.bus_voltages, sol.line_currents
    u_v = V / np.abs(V)
    i_abs = np.abs(I)
    # in-phase fallback where the base current vanishes: project onto the
    # upstream bus voltage angle (unity-pf currents align with it)
    if net.n_lines:
        up_u = u_v[topo.line_up]
        u_i = np.where(i_abs > 1e-9, I / np.where(i_abs > 0, i_abs, 1.0), up_u)
    else:
        u_i = np.zeros((0, net.phases), complex)
    path_mask = np.zeros((net.n_bus, net.n_lines), dtype=bool)
    for b in range(net.n_bus):
        v = b
        while topo.parent_line[v] >= 0:
            path_mask[b, topo.parent_line[v]] = True
            v = topo.parent[v]
    z = np.stack([ln.z_ohm for ln in net.lines]) if net.n_lines else np.zeros((0, net.phases), complex)
    return LinearGridMap(
        base_injections=np.asarray(base_injections, complex).copy(),
        base_vmag=np.abs(V),
        base_imag=i_abs,
        base_ptf=float(sol.transformer_power.real),
        _inv_conj_v=1.0 / np.conj(V),
        _u_i=u_i,
        _u_v=u_v,
        _subtree=topo.subtree.copy(),
        _z=z,
        _path_mask=path_mask,
        _v_root=V[topo.root].copy(),
    )


@dataclass(frozen=True)
class CorrectionFactor:
    """Scalar multiplied with rated currents in the optimizer's current rows."""

    kappa: float

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ValueError(f"kappa must be in (0, 1], got {self.kappa}")


def calibrate_correction(
    net: Network,
    load_scenarios,
    linmap,
    current_floor_a: float = 1.0,
) -> CorrectionFactor:
    """Worst-case ratio of linear current estimate to sweep current.

    Enforcing linear-estimate <= kappa * rating then implies the sweep
    current stays within rating on the calibration set.  Lines carrying
    less than current_floor_a amps in the sweep are skipped (their relative
    error is meaningless).
    """
    scenarios = list(load_scenarios)
    if not scenarios:
        raise ValueError("empty calibration scenario set")
    worst = np.inf
    for inj in scenarios:
        sol = solve_sweep(net, inj)
        true_mag = sol.current_magnitudes()
        est = linmap.predict_current_magnitudes(inj)
        mask = true_mag > current_floor_a
        if not mask.any():
            continue
        ratios = est[mask] / true_mag[mask]
        worst = min(worst, float(ratios.min()))
    if not np.isfinite(worst):
        raise ValueError("no scenario produced measurable line currents")
    return CorrectionFactor(kappa=min(1.0, worst))


def sample_injection_scenarios(
    net: Network,
    count: int,
    seed: int,
    scale_range: tuple[float, float] = (0.4, 1.2),
    ev_buses=None,
    ev_max_w: float = 11e3,
):
    """Deterministic calibration scenarios: scaled base loads plus random
    unity-pf EV-like draws at the given buses."""
    rng = np.random.default_rng(seed)
    peak_t = int(np.argmax(net.bus_p_matrix().sum(axis=1)))
    base = net.base_injections(peak_t)
    ev_idx = [net.bus_index(b) for b in ev_buses] if ev_buses else []
    out = []
    for _ in range(count):
        u = rng.uniform(*scale_range)
        inj = base * u
        for k in ev_idx:
            inj[k] += rng.uniform(0.0, ev_max_w) / net.phases
        out.append(inj)
    return out
