"""Radial LV network data model, validation and file I/O.

All quantities are SI at the module boundary: watts, vars, ohms, volts.
Loads are stored per bus, per phase, per step; a scalar load entry in a
network file is interpreted as the bus total and split equally over the
bus phases.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class NetworkError(ValueError):
    """Malformed network data or a topology that is not a radial tree."""


@dataclass
class Bus:
    id: int
    phases: int
    v_nom: float  # line-to-neutral volts
    p_load: np.ndarray  # (horizon, phases) W, generation negative
    q_load: np.ndarray  # (horizon, phases) var


@dataclass
class Line:
    from_bus: int
    to_bus: int
    r_ohm: np.ndarray  # (phases,) series resistance per phase
    x_ohm: np.ndarray  # (phases,) series reactance per phase
    ampacity_a: float  # rated RMS amps per phase

    @property
    def id(self):
        return (self.from_bus, self.to_bus)

    @property
    def z_ohm(self) -> np.ndarray:
        return self.r_ohm + 1j * self.x_ohm


@dataclass
class Transformer:
    rated_va: float
    bus: int  # secondary bus, the tree root
    ratio: float = 25.0  # primary/secondary voltage ratio


@dataclass
class Network:
    buses: list[Bus]
    lines: list[Line]
    transformer: Transformer
    horizon: int
    step_hours: float = 0.25
    _topo: "Topology | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        if not self.buses:
            raise NetworkError("network has no buses")
        phase_counts = {b.phases for b in self.buses}
        if not phase_counts <= {1, 3}:
            raise NetworkError("bus phase count must be 1 or 3")
        if len(phase_counts) > 1:
            raise NetworkError("mixed phase counts are not supported")
        id_set = set(ids)
        for b in self.buses:
            if b.v_nom <= 0:
                raise NetworkError(f"bus {b.id}: nominal voltage must be > 0")
            for arr in (b.p_load, b.q_load):
                if arr.shape != (self.horizon, b.phases):
                    raise NetworkError(
                        f"bus {b.id}: load series shape {arr.shape} does not "
                        f"match (horizon, phases) = ({self.horizon}, {b.phases})"
                    )
        for ln in self.lines:
            if ln.from_bus == ln.to_bus:
                raise NetworkError(f"line {ln.id}: endpoints coincide")
            if ln.from_bus not in id_set or ln.to_bus not in id_set:
                raise NetworkError(f"line {ln.id}: unknown endpoint")
            if np.any(ln.r_ohm < 0):
                raise NetworkError(f"line {ln.id}: negative resistance")
            if ln.ampacity_a <= 0:
                raise NetworkError(f"line {ln.id}: ampacity must be > 0")
        if self.transformer is None:
            raise NetworkError("missing transformer")
        if self.transformer.rated_va <= 0:
            raise NetworkError("transformer rating must be > 0")
        if self.transformer.bus not in id_set:
            raise NetworkError("transformer bus not in network")
        if self.step_hours <= 0:
            raise NetworkError("step_hours must be > 0")
        self._topo = None
        self.topology()  # raises on cycles / disconnection

    # -- derived structure --------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def phases(self) -> int:
        return self.buses[0].phases

    def bus_index(self, bus_id: int) -> int:
        return self.topology().idx_of[bus_id]

    def topology(self) -> "Topology":
        if self._topo is None:
            self._topo = Topology.build(self)
        return self._topo

    # -- queries ------------------------------------------------------------

    def base_injections(self, t: int) -> np.ndarray:
        """Complex per-bus per-phase base load (VA, consumption positive) at t."""
        if not 0 <= t < self.horizon:
            raise IndexError(f"step {t} outside horizon {self.horizon}")
        out = np.zeros((self.n_bus, self.phases), dtype=complex)
        for k, b in enumerate(self.buses):
            out[k] = b.p_load[t] + 1j * b.q_load[t]
        return out

    def bus_p_matrix(self) -> np.ndarray:
        """Total active base load per bus per step, shape (horizon, n_bus)."""
        return np.stack([b.p_load.sum(axis=1) for b in self.buses], axis=1)


@dataclass
class Topology:
    """BFS orientation of a radial network, root = transformer bus."""

    idx_of: dict  # bus id -> array index
    order: np.ndarray  # bus indices, root first, parents before children
    parent: np.ndarray  # parent bus index per bus (-1 at root)
    parent_line: np.ndarray  # line index feeding each bus (-1 at root)
    line_up: np.ndarray  # upstream bus index per line
    line_down: np.ndarray  # downstream bus index per line
    subtree: np.ndarray  # bool (n_lines, n_bus): bus fed through line
    root: int

    @staticmethod
    def build(net: Network) -> "Topology":
        n = net.n_bus
        if net.n_lines != n - 1:
            raise NetworkError(
                f"{net.n_lines} lines for {n} buses: not a tree "
                "(cycle or disconnected)"
            )
        idx_of = {b.id: k for k, b in enumerate(net.buses)}
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for li, ln in enumerate(net.lines):
            i, j = idx_of[ln.from_bus], idx_of[ln.to_bus]
            adj[i].append((j, li))
            adj[j].append((i, li))
        root = idx_of[net.transformer.bus]
        parent = np.full(n, -1, dtype=int)
        parent_line = np.full(n, -1, dtype=int)
        order = [root]
        seen = np.zeros(n, dtype=bool)
        seen[root] = True
        head = 0
        while head < len(order):
            u = order[head]
            head += 1
            for v, li in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    parent[v] = u
                    parent_line[v] = li
                    order.append(v)
        if not seen.all():
            raise NetworkError("network is disconnected")
        line_up = np.zeros(n - 1, dtype=int)
        line_down = np.zeros(n - 1, dtype=int)
        for v in range(n):
            li = parent_line[v]
            if li >= 0:
                line_up[li] = parent[v]
                line_down[li] = v
        subtree = np.zeros((n - 1, n), dtype=bool)
        for v in range(n):
            if parent_line[v] >= 0:
                subtree[parent_line[v], v] = True
        # fold child subtrees into parents, leaves first
        for v in reversed(order):
            li = parent_line[v]
            if li < 0:
                continue
            up_li = parent_line[line_up[li]]
            if up_li >= 0:
                subtree[up_li] |= subtree[li]
        return Topology(
            idx_of=idx_of,
            order=np.array(order),
            parent=parent,
            parent_line=parent_line,
            line_up=line_up,
            line_down=line_down,
            subtree=subtree,
            root=root,
        )


# -- operations -------------------------------------------------------------


def aggregate_base_load(net: Network, t: int) -> float:
    """Signed sum of all bus active base loads at step t (generation negative).

    No-loss convention: line losses are not part of the aggregate.
    """
    if not 0 <= t < net.horizon:
        raise IndexError(f"step {t} outside horizon {net.horizon}")
    return float(sum(b.p_load[t].sum() for b in net.buses))


def aggregate_base_series(net: Network) -> np.ndarray:
    """aggregate_base_load for every step, shape (horizon,)."""
    return np.array([aggregate_base_load(net, t) for t in range(net.horizon)])


# -- file I/O ----------------------------------------------------------------


def _load_series(raw, horizon: int, phases: int, what: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 1:
        if len(arr) != horizon:
            raise NetworkError(f"{what}: length {len(arr)} != horizon {horizon}")
        return np.repeat(arr[:, None] / phases, phases, axis=1)
    if arr.ndim == 2 and arr.shape == (horizon, phases):
        return arr
    raise NetworkError(f"{what}: bad shape {arr.shape}")


def _per_phase(raw, phases: int) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 0:
        return np.full(phases, float(arr))
    if arr.shape == (phases,):
        return arr
    raise NetworkError(f"bad per-phase value shape {arr.shape}")


def network_from_dict(data: dict) -> Network:
    try:
        horizon = int(data["horizon"])
        step_hours = float(data.get("step_hours", 0.25))
        tf = data["transformer"]
        buses = []
        for b in data["buses"]:
            phases = int(b.get("phases", 1))
            buses.append(
                Bus(
                    id=int(b["id"]),
                    phases=phases,
                    v_nom=float(b["v_nom"]),
                    p_load=_load_series(b["p_load"], horizon, phases, f"bus {b['id']} p_load"),
                    q_load=_load_series(b.get("q_load", [0.0] * horizon), horizon, phases, f"bus {b['id']} q_load"),
                )
            )
        phases = buses[0].phases if buses else 1
        lines = []
        for ln in data["lines"]:
            lines.append(
                Line(
                    from_bus=int(ln["from"]),
                    to_bus=int(ln["to"]),
                    r_ohm=_per_phase(ln["r_ohm"], phases),
                    x_ohm=_per_phase(ln.get("x_ohm", 0.0), phases),
                    ampacity_a=float(ln["ampacity_a"]),
                )
            )
        transformer = Transformer(
            rated_va=float(tf["rated_kva"]) * 1e3,
            bus=int(tf["bus"]),
            ratio=float(tf.get("ratio", 25.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkError(f"bad network data: {exc}") from exc
    return Network(buses=buses, lines=lines, transformer=transformer,
                   horizon=horizon, step_hours=step_hours)


def network_to_dict(net: Network) -> dict:
    return {
        "horizon": net.horizon,
        "step_hours": net.step_hours,
        "transformer": {
            "rated_kva": net.transformer.rated_va / 1e3,
            "bus": net.transformer.bus,
            "ratio": net.transformer.ratio,
        },
        "buses": [
            {
                "id": b.id,
                "phases": b.phases,
                "v_nom": b.v_nom,
                "p_load": b.p_load.tolist(),
                "q_load": b.q_load.tolist(),
            }
            for b in net.buses
        ],
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "r_ohm": ln.r_ohm.tolist(),
                "x_ohm": ln.x_ohm.tolist(),
                "ampacity_a": ln.ampacity_a,
            }
            for ln in net.lines
        ],
    }


def load_network(path) -> Network:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise NetworkError(f"cannot read network file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise NetworkError(f"network file {path} is not valid JSON: {exc}") from exc
    return network_from_dict(data)


def save_network(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh)
