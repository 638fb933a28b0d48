import numpy as np
import pytest

from evdispatch.grid import Bus, Line, Network, Transformer
from evdispatch import demo


def chain_network(loads_w, r=0.1, x=0.0, horizon=4, v_nom=230.0,
                  ampacity=50.0, rated_va=100e3, q_frac=0.0, phases=1):
    """Single-feeder chain: bus 0 (root) - 1 - 2 - ...; loads_w gives the
    constant total load of buses 1..n (bus 0 unloaded)."""
    n = len(loads_w) + 1
    buses = []
    for k in range(n):
        p = 0.0 if k == 0 else float(loads_w[k - 1])
        series = np.full((horizon, phases), p / phases)
        buses.append(Bus(id=k, phases=phases, v_nom=v_nom,
                         p_load=series.copy(), q_load=q_frac * series))
    lines = [Line(from_bus=k, to_bus=k + 1,
                  r_ohm=np.full(phases, r), x_ohm=np.full(phases, x),
                  ampacity_a=ampacity)
             for k in range(n - 1)]
    return Network(buses=buses, lines=lines,
                   transformer=Transformer(rated_va=rated_va, bus=0),
                   horizon=horizon, step_hours=0.25)


@pytest.fixture(scope="session")
def net13():
    return demo.demo_network()


@pytest.fixture(scope="session")
def demo_prices_arr():
    return demo.demo_prices()


@pytest.fixture(scope="session")
def demo_points_list():
    return demo.demo_points()


@pytest.fixture(scope="session")
def demo_sessions_list():
    return demo.demo_sessions()
