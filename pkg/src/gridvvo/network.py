"""Per-unit network model.

Records are plain frozen dataclasses holding Python scalars and tuples so
that two networks compare equal field by field. Vectorised numpy views used
by the physics and optimisation code are derived lazily from the records.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


@dataclass(frozen=True)
class Bus:
    """Bus with demand and voltage limits.

    ``vm0``/``va0`` carry the voltage found in the case file; they only seed
    the starting point of the reference ACOPF.
    """

    id: int
    base_kv: float
    vmin: float
    vmax: float
    pd: float
    qd: float
    is_slack: bool = False
    vm0: float = 1.0
    va0: float = 0.0


@dataclass(frozen=True)
class Generator:
    """Generator with a quadratic cost ``c2*p**2 + c1*p + c0`` ($/h, p in p.u.)."""

    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: tuple[float, float, float] = (0.0, 0.0, 0.0)
    p_ref: float = 0.0
    q_ref: float = 0.0
    in_service: bool = True

    def cost_value(self, p: float) -> float:
        c2, c1, c0 = self.cost
        return c2 * p * p + c1 * p + c0


@dataclass(frozen=True)
class Branch:
    """Pi-model branch.

    The admittances are the tap-independent parts of the 2x2 branch matrix:
    the effective matrix at tap ratio ``t`` is
    ``[[yff/t**2, yft/t], [ytf/t, ytt]]``. A fixed phase shift is already
    folded into ``yft`` and ``ytf``.
    """

    from_bus: int
    to_bus: int
    yff: complex
    yft: complex
    ytf: complex
    ytt: complex
    tap_ref: float = 1.0
    tap_set: tuple[float, ...] = (1.0,)
    s_max: float = 0.0
    angle_min: float = -math.inf
    angle_max: float = math.inf
    is_transformer: bool = False

    @property
    def tap_position(self) -> int:
        """Index of ``tap_ref`` inside ``tap_set``."""
        return self.tap_set.index(self.tap_ref)


@dataclass(frozen=True)
class ShuntDevice:
    """Bus shunt with an optional switchable capacitor bank.

    Total admittance is ``gs + 1j*(bs0 + cb)`` with ``cb`` drawn from
    ``cb_set``. Fixed shunts have ``cb_set == (0.0,)``.
    """

    bus: int
    gs: float
    bs0: float
    module_step: float = 0.0
    module_count: int = 0
    b_ref: float = 0.0
    cb_set: tuple[float, ...] = (0.0,)

    @property
    def has_cb(self) -> bool:
        return len(self.cb_set) > 1


def module_levels(step: float, count: int) -> tuple[float, ...]:
    """Admissible capacitor-bank susceptances ``{0, step, ..., count*step}``."""
    return tuple(round(k * step, 12) for k in range(count + 1))


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    shunts: tuple[ShuntDevice, ...] = ()
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        for name in ("buses", "generators", "branches", "shunts"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def slack(self) -> int:
        slacks = [b.id for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            raise ValueError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    # -- adjacency ---------------------------------------------------------

    @cached_property
    def adjacency(self) -> dict[str, list[list[int]]]:
        """Per-bus index lists: ``out`` (E+), ``in`` (E-), ``gens``, ``shunts``."""
        adj = {k: [[] for _ in range(self.n_bus)] for k in ("out", "in", "gens", "shunts")}
        for k, br in enumerate(self.branches):
            adj["out"][br.from_bus].append(k)
            adj["in"][br.to_bus].append(k)
        for k, g in enumerate(self.generators):
            adj["gens"][g.bus].append(k)
        for k, sh in enumerate(self.shunts):
            adj["shunts"][sh.bus].append(k)
        return adj

    def is_connected(self) -> bool:
        if self.n_bus == 0:
            return False
        f = np.array([b.from_bus for b in self.branches], dtype=int)
        t = np.array([b.to_bus for b in self.branches], dtype=int)
        graph = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(self.n_bus, self.n_bus))
        n_comp, _ = connected_components(graph, directed=False)
        return n_comp == 1

    # -- array views -------------------------------------------------------

    @cached_property
    def arrays(self) -> "NetworkArrays":
        return NetworkArrays.from_network(self)

    @property
    def transformer_index(self) -> np.ndarray:
        return self.arrays.transformers

    @property
    def cb_index(self) -> np.ndarray:
        return self.arrays.cb_shunts

    # -- derived values ----------------------------------------------------

    def with_references(self, p_ref, q_ref) -> "Network":
        """Copy of the network with generator reference dispatch replaced."""
        gens = tuple(
            _replace(g, p_ref=float(p), q_ref=float(q))
            for g, p, q in zip(self.generators, p_ref, q_ref)
        )
        return _replace(self, generators=gens)

    def reference_state(self) -> "OperatingState":
        """Flat state at the reference devices (vm=1, va=0, pg=p_ref, qg=q_ref)."""
        arr = self.arrays
        vm = np.clip(np.ones(self.n_bus), arr.vmin, arr.vmax)
        return OperatingState(
            vm=vm,
            va=np.zeros(self.n_bus),
            pg=arr.p_ref.copy(),
            qg=arr.q_ref.copy(),
            tap=arr.tap_ref.copy(),
            cb=arr.b_ref.copy(),
        )

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_mva": self.base_mva,
            "buses": [asdict(b) for b in self.buses],
            "generators": [_record_to_json(g) for g in self.generators],
            "branches": [_record_to_json(b) for b in self.branches],
            "shunts": [_record_to_json(s) for s in self.shunts],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], name: str = "") -> "Network":
        return cls(
            buses=tuple(_record_from_json(Bus, d) for d in data["buses"]),
            generators=tuple(_record_from_json(Generator, d) for d in data["generators"]),
            branches=tuple(_record_from_json(Branch, d) for d in data["branches"]),
            shunts=tuple(_record_from_json(ShuntDevice, d) for d in data["shunts"]),
            base_mva=float(data["base_mva"]),
            name=name,
        )

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))


def _replace(obj, **changes):
    from dataclasses import replace

    return replace(obj, **changes)


def _record_to_json(rec) -> dict[str, Any]:
    out = {}
    for f in fields(rec):
        value = getattr(rec, f.name)
        if isinstance(value, complex):
            value = [value.real, value.imag]
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _record_from_json(cls, data: dict[str, Any]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        ftype = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if ftype == "complex":
            value = complex(value[0], value[1])
        elif isinstance(value, list):
            value = tuple(float(v) for v in value)
        elif ftype == "float":
            value = float(value)
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class NetworkArrays:
    """Vectorised column view of a :class:`Network`."""

    vmin: np.ndarray
    vmax: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gen_bus: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    cost: np.ndarray  # (n_gen, 3) columns c2, c1, c0
    p_ref: np.ndarray
    q_ref: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    tap_ref: np.ndarray
    s_max: np.ndarray
    angle_min: np.ndarray
    angle_max: np.ndarray
    transformers: np.ndarray  # branch indices with len(tap_set) > 1 or is_transformer
    sh_bus: np.ndarray
    gs: np.ndarray
    bs0: np.ndarray
    b_ref: np.ndarray
    cb_shunts: np.ndarray  # shunt indices hosting a capacitor bank

    @classmethod
    def from_network(cls, net: Network) -> "NetworkArrays":
        def col(items, attr, dtype=float):
            return np.array([getattr(x, attr) for x in items], dtype=dtype)

        gens, brs, shs = net.generators, net.branches, net.shunts
        return cls(
            vmin=col(net.buses, "vmin"),
            vmax=col(net.buses, "vmax"),
            pd=col(net.buses, "pd"),
            qd=col(net.buses, "qd"),
            gen_bus=col(gens, "bus", int),
            pmin=col(gens, "pmin"),
            pmax=col(gens, "pmax"),
            qmin=col(gens, "qmin"),
            qmax=col(gens, "qmax"),
            cost=np.array([g.cost for g in gens], dtype=float).reshape(-1, 3),
            p_ref=col(gens, "p_ref"),
            q_ref=col(gens, "q_ref"),
            f_bus=col(brs, "from_bus", int),
            t_bus=col(brs, "to_bus", int),
            yff=col(brs, "yff", complex),
            yft=col(brs, "yft", complex),
            ytf=col(brs, "ytf", complex),
            ytt=col(brs, "ytt", complex),
            tap_ref=col(brs, "tap_ref"),
            s_max=col(brs, "s_max"),
            angle_min=col(brs, "angle_min"),
            angle_max=col(brs, "angle_max"),
            transformers=np.array(
                [k for k, b in enumerate(brs) if b.is_transformer], dtype=int
            ),
            sh_bus=col(shs, "bus", int),
            gs=col(shs, "gs"),
            bs0=col(shs, "bs0"),
            b_ref=col(shs, "b_ref"),
            cb_shunts=np.array([k for k, s in enumerate(shs) if s.has_cb], dtype=int),
        )


@dataclass(frozen=True)
class OperatingState:
    """Full AC operating point.

    Branch flows are optional; :func:`gridvvo.acpf.with_flows` recomputes
    them from voltages and taps.
    """

    vm: np.ndarray
    va: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    tap: np.ndarray
    cb: np.ndarray
    pf: np.ndarray | None = None
    qf: np.ndarray | None = None
    pt: np.ndarray | None = None
    qt: np.ndarray | None = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                arr = np.array(value, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, f.name, arr)

    def replace(self, **changes) -> "OperatingState":
        return _replace(self, **changes)

    def to_dict(self) -> dict[str, list[float] | None]:
        return {
            f.name: (None if getattr(self, f.name) is None else getattr(self, f.name).tolist())
            for f in fields(self)
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "OperatingState":
        return cls(**{f.name: data.get(f.name) for f in fields(cls)})


def validate(network: Network) -> list[str]:
    """Check the model invariants; returns one message per violation."""
    out: list[str] = []
    n = network.n_bus

    slacks = [b.id for b in network.buses if b.is_slack]
    if len(slacks) == 0:
        out.append("network: no slack bus")
    elif len(slacks) > 1:
        out.append(f"network: multiple slack buses {slacks}")

    for k, b in enumerate(network.buses):
        if b.id != k:
            out.append(f"bus {k}: id {b.id} is not the dense index")
        if not 0 < b.vmin <= b.vmax:
            out.append(f"bus {k}: voltage bounds must satisfy 0 < vmin <= vmax")

    for k, g in enumerate(network.generators):
        if not 0 <= g.bus < n:
            out.append(f"generator {k}: unknown bus {g.bus}")
        if g.pmin > g.pmax:
            out.append(f"generator {k}: pmin > pmax")
        if g.qmin > g.qmax:
            out.append(f"generator {k}: qmin > qmax")
        if len(g.cost) != 3 or g.cost[0] < 0:
            out.append(f"generator {k}: cost must be quadratic with c2 >= 0")

    for k, br in enumerate(network.branches):
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            out.append(f"branch {k}: unknown endpoint")
        if any(t <= 0 for t in br.tap_set):
            out.append(f"branch {k}: tap_set entries must be positive")
        if br.tap_ref not in br.tap_set:
            out.append(f"branch {k}: tap_ref not in tap_set")
        if not br.is_transformer and br.tap_set != (1.0,):
            out.append(f"branch {k}: line tap_set must equal {{1}}")
        if not br.angle_min <= 0 <= br.angle_max:
            out.append(f"branch {k}: angle bounds must bracket 0")
        if br.s_max < 0:
            out.append(f"branch {k}: negative s_max")

    for k, sh in enumerate(network.shunts):
        if not 0 <= sh.bus < n:
            out.append(f"shunt {k}: unknown bus {sh.bus}")
        levels = set(module_levels(sh.module_step, sh.module_count))
        if not set(sh.cb_set) <= levels:
            out.append(f"shunt {k}: cb_set is not a subset of the module levels")
        if sh.b_ref not in sh.cb_set:
            out.append(f"shunt {k}: b_ref not in cb_set")

    if n and not network.is_connected():
        out.append("network: graph is not connected")
    return out
