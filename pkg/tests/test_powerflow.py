import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evdispatch.powerflow import (ConvergenceError, CorrectionFactor,
                                  build_linear_map, calibrate_correction,
                                  sample_injection_scenarios, solve_sweep)

from conftest import chain_network


def two_bus_reference(p_w, r, v_nom=230.0, iters=60):
    """Independent fixed-point solution of V = v_nom - r * conj(p / V)."""
    v = complex(v_nom)
    for _ in range(iters):
        v = v_nom - r * np.conj(p_w / v)
    return v, p_w / np.conj(v)  # voltage, current phasor


def test_two_bus_against_fixed_point():
    net = chain_network([2.3e3], r=0.1)
    sol = solve_sweep(net, net.base_injections(0))
    v_ref, i_ref = two_bus_reference(2.3e3, 0.1)
    assert abs(sol.bus_voltages[1, 0] - v_ref) < 1e-6
    assert abs(sol.line_currents[0, 0] - i_ref) < 1e-6
    # frozen reference values for this operating point
    assert abs(v_ref) == pytest.approx(228.99556, abs=1e-4)
    assert abs(i_ref) == pytest.approx(10.04386, abs=1e-4)


def test_zero_load_is_flat():
    net = chain_network([0.0, 0.0, 0.0])
    sol = solve_sweep(net, np.zeros((4, 1), complex))
    assert np.allclose(np.abs(sol.bus_voltages), 230.0)
    assert sol.losses == 0.0
    assert abs(sol.transformer_power) < 1e-9


def test_energy_balance_and_losses():
    net = chain_network([3e3, 5e3, 2e3], r=0.08, x=0.03, q_frac=0.3)
    inj = net.base_injections(0)
    sol = solve_sweep(net, inj)
    r = np.stack([ln.r_ohm for ln in net.lines])
    assert sol.losses == pytest.approx(
        float(np.sum(np.abs(sol.line_currents) ** 2 * r)), rel=1e-12)
    # active power at the root covers loads plus series losses
    assert sol.transformer_power.real == pytest.approx(
        inj.real.sum() + sol.losses, rel=1e-6)


def test_voltage_drops_monotone_down_a_loaded_chain():
    net = chain_network([2e3, 2e3, 2e3], r=0.1)
    sol = solve_sweep(net, net.base_injections(0))
    vmag = np.abs(sol.bus_voltages[:, 0])
    assert np.all(np.diff(vmag) < 0)


def test_collapse_raises():
    net = chain_network([5e6], r=0.5)
    with pytest.raises(ConvergenceError):
        solve_sweep(net, net.base_injections(0))


@settings(max_examples=30, deadline=None)
@given(loads=st.lists(st.floats(0.0, 20e3), min_size=1, max_size=5),
       q_frac=st.floats(0.0, 0.4))
def test_sweep_converges_on_moderate_chains(loads, q_frac):
    net = chain_network(loads, r=0.05, x=0.02, q_frac=q_frac)
    sol = solve_sweep(net, net.base_injections(0))
    total = sum(loads)
    assert sol.losses >= 0.0
    assert sol.transformer_power.real == pytest.approx(
        total + sol.losses, rel=1e-5, abs=1e-3)
    assert np.all(np.abs(sol.bus_voltages) <= 230.0 + 1e-9)


# -- affine surrogate --------------------------------------------------------


def test_linear_map_exact_at_base(net13):
    base = net13.base_injections(72)
    linmap = build_linear_map(net13, base)
    sol = solve_sweep(net13, base)
    assert np.allclose(linmap.predict_current_magnitudes(base),
                       sol.current_magnitudes(), atol=1e-9)
    assert np.allclose(linmap.predict_voltage_magnitudes(base),
                       sol.voltage_magnitudes(), atol=1e-9)
    assert linmap.predict_transformer_power(base) == pytest.approx(
        sol.transformer_power.real, abs=1e-6)


def test_lp_coefficients_match_directional_derivative(net13):
    """The LP coefficient views must agree with finite differences of the
    map's own predictions for a unity-pf bus power increment."""
    base = net13.base_injections(48)
    linmap = build_linear_map(net13, base)
    ph = net13.phases
    dp = 1e3
    ci = linmap.current_coeff_active()
    cv = linmap.voltage_coeff_active()
    ct = linmap.transformer_coeff_active()
    for b in (net13.bus_index(4), net13.bus_index(11)):
        pert = base.copy()
        pert[b] += dp / ph
        di = (linmap.predict_current_magnitudes(pert)
              - linmap.predict_current_magnitudes(base)) / dp
        dv = (linmap.predict_voltage_magnitudes(pert)
              - linmap.predict_voltage_magnitudes(base)) / dp
        dtf = (linmap.predict_transformer_power(pert)
               - linmap.predict_transformer_power(base)) / dp
        assert np.allclose(ci[:, :, b], di, atol=1e-12)
        assert np.allclose(cv[:, :, b], dv, atol=1e-12)
        assert ct[b] == pytest.approx(dtf, abs=1e-9)


def test_linear_map_tracks_sweep_under_load_changes(net13):
    peak_t = int(np.argmax(net13.bus_p_matrix().sum(axis=1)))
    base = net13.base_injections(peak_t)
    linmap = build_linear_map(net13, base)
    worst = 0.0
    for u in (0.3, 0.6, 0.9, 1.1, 1.2):
        inj = base * u
        sol = solve_sweep(net13, inj)
        est = linmap.predict_current_magnitudes(inj)
        mask = sol.current_magnitudes() > 1.0
        rel = np.abs(est[mask] - sol.current_magnitudes()[mask]) \
            / sol.current_magnitudes()[mask]
        worst = max(worst, float(rel.max()))
    assert worst <= 0.07


def test_correction_factor_bounds():
    with pytest.raises(ValueError):
        CorrectionFactor(kappa=0.0)
    with pytest.raises(ValueError):
        CorrectionFactor(kappa=1.2)
    assert CorrectionFactor(kappa=1.0).kappa == 1.0


def test_calibration_with_exact_map_gives_unity(net13):
    base = net13.base_injections(72)
    linmap = build_linear_map(net13, base)
    kappa = calibrate_correction(net13, [base], linmap)
    assert kappa.kappa == pytest.approx(1.0, abs=1e-9)


class _UnderestimatingMap:
    """Synthetic map whose current estimates sit 6.5% below the sweep."""

    def __init__(self, net):
        self.net = net

    def predict_current_magnitudes(self, inj):
        return solve_sweep(self.net, inj).current_magnitudes() / 1.065


def test_calibration_against_synthetic_error(net13):
    scenarios = sample_injection_scenarios(
        net13, count=5, seed=11, ev_buses=(4, 10))
    kappa = calibrate_correction(net13, scenarios, _UnderestimatingMap(net13))
    assert kappa.kappa == pytest.approx(1.0 / 1.065, abs=1e-9)


def test_scenario_sampling_is_deterministic(net13):
    a = sample_injection_scenarios(net13, count=4, seed=3, ev_buses=(5,))
    b = sample_injection_scenarios(net13, count=4, seed=3, ev_buses=(5,))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = sample_injection_scenarios(net13, count=4, seed=4, ev_buses=(5,))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
