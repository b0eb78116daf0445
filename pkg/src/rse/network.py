"""Network topology, bus admittance matrix and the Hermitian measurement matrices.

Buses are numbered 1..N everywhere in the public API (case files, plans,
function arguments); arrays indexed by bus are 0-based, so bus ``n`` lives
at position ``n - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class CaseFormatError(ValueError):
    """Raised for malformed or unsupported case files."""


# Fields that would describe transformers/phase shifters; the model has none.
_TRANSFORMER_KEYS = {"ratio", "tap", "angle", "shift", "phase_shift"}
_BRANCH_KEYS = {"from", "to", "r", "x", "b", "b_from", "b_to"}


@dataclass(frozen=True)
class Line:
    """A pi-model branch between two buses.

    ``shunt_from``/``shunt_to`` are the line-end shunt admittances at the
    from and to buses respectively.
    """

    from_bus: int
    to_bus: int
    series_admittance: complex
    shunt_from: complex = 0j
    shunt_to: complex = 0j

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise CaseFormatError(f"self-loop line at bus {self.from_bus}")
        if self.series_admittance == 0:
            raise CaseFormatError(
                f"line ({self.from_bus}, {self.to_bus}) has zero series admittance"
            )

    def shunt_at(self, bus: int) -> complex:
        if bus == self.from_bus:
            return self.shunt_from
        if bus == self.to_bus:
            return self.shunt_to
        raise ValueError(f"bus {bus} is not an end of line ({self.from_bus}, {self.to_bus})")


@dataclass(frozen=True)
class Network:
    n_buses: int
    lines: tuple[Line, ...]
    ground_shunts: np.ndarray = field(repr=False)
    ref_bus: int = 1
    name: str = ""

    def __post_init__(self):
        if self.n_buses < 1:
            raise CaseFormatError("network needs at least one bus")
        shunts = np.asarray(self.ground_shunts, dtype=complex)
        if shunts.shape != (self.n_buses,):
            raise CaseFormatError("ground_shunts must have one entry per bus")
        shunts.setflags(write=False)
        object.__setattr__(self, "ground_shunts", shunts)
        object.__setattr__(self, "lines", tuple(self.lines))
        seen = set()
        for line in self.lines:
            for bus in (line.from_bus, line.to_bus):
                if not 1 <= bus <= self.n_buses:
                    raise CaseFormatError(f"line references unknown bus {bus}")
            pair = frozenset((line.from_bus, line.to_bus))
            if pair in seen:
                raise CaseFormatError(
                    f"duplicate line between buses {line.from_bus} and {line.to_bus}"
                )
            seen.add(pair)
        if not 1 <= self.ref_bus <= self.n_buses:
            raise CaseFormatError(f"reference bus {self.ref_bus} out of range")

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def find_line(self, m: int, n: int) -> Line:
        for line in self.lines:
            if {line.from_bus, line.to_bus} == {m, n}:
                return line
        raise KeyError(f"no line between buses {m} and {n}")

    def is_connected(self) -> bool:
        adj = {b: set() for b in range(1, self.n_buses + 1)}
        for line in self.lines:
            adj[line.from_bus].add(line.to_bus)
            adj[line.to_bus].add(line.from_bus)
        stack, seen = [1], {1}
        while stack:
            for nb in adj[stack.pop()] - seen:
                seen.add(nb)
                stack.append(nb)
        return len(seen) == self.n_buses


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise CaseFormatError(f"{where}: missing field '{key}'")
    return record[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise CaseFormatError(f"{where}: expected an integer, got {value!r}")
    return int(value)


def _as_float(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseFormatError(f"{where}: expected a number, got {value!r}")
    return float(value)


def parse_case(text: str) -> Network:
    """Parse a JSON case string into a :class:`Network`.

    Schema (per-unit)::

        {"n_buses": int,
         "bus_shunts": [{"bus": int, "gs": float, "bs": float}],
         "branches": [{"from": int, "to": int, "r": float, "x": float, "b": float}]}

    ``b`` is the total line-charging susceptance, split evenly between the two
    ends. Optional per-end overrides ``b_from``/``b_to`` allow asymmetric
    charging. Optional top-level keys: ``ref_bus`` (default 1) and ``name``.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CaseFormatError("case must be a JSON object")

    n_buses = _as_int(_require(data, "n_buses", "case"), "n_buses")
    if n_buses < 1:
        raise CaseFormatError("n_buses must be positive")

    shunts = np.zeros(n_buses, dtype=complex)
    for i, rec in enumerate(data.get("bus_shunts", [])):
        where = f"bus_shunts[{i}]"
        if not isinstance(rec, dict):
            raise CaseFormatError(f"{where}: expected an object")
        bus = _as_int(_require(rec, "bus", where), where)
        if not 1 <= bus <= n_buses:
            raise CaseFormatError(f"{where}: unknown bus {bus}")
        gs = _as_float(rec.get("gs", 0.0), where)
        bs = _as_float(rec.get("bs", 0.0), where)
        shunts[bus - 1] += complex(gs, bs)

    lines = []
    for i, rec in enumerate(_require(data, "branches", "case")):
        where = f"branches[{i}]"
        if not isinstance(rec, dict):
            raise CaseFormatError(f"{where}: expected an object")
        bad = set(rec) & _TRANSFORMER_KEYS
        if bad:
            raise CaseFormatError(f"{where}: transformer fields not supported: {sorted(bad)}")
        unknown = set(rec) - _BRANCH_KEYS
        if unknown:
            raise CaseFormatError(f"{where}: unknown fields {sorted(unknown)}")
        f = _as_int(_require(rec, "from", where), where)
        t = _as_int(_require(rec, "to", where), where)
        r = _as_float(_require(rec, "r", where), where)
        x = _as_float(_require(rec, "x", where), where)
        if r == 0 and x == 0:
            raise CaseFormatError(f"{where}: zero series impedance")
        b = _as_float(rec.get("b", 0.0), where)
        b_from = _as_float(rec.get("b_from", b / 2), where)
        b_to = _as_float(rec.get("b_to", b / 2), where)
        lines.append(Line(f, t, 1 / complex(r, x), 1j * b_from, 1j * b_to))

    ref_bus = _as_int(data.get("ref_bus", 1), "ref_bus")
    return Network(n_buses, tuple(lines), shunts, ref_bus=ref_bus, name=str(data.get("name", "")))


def load_case(path: str | Path) -> Network:
    return parse_case(Path(path).read_text())


def builtin_case(name: str = "ieee30") -> Network:
    """Load a case shipped with the package (currently only ``ieee30``)."""
    try:
        text = resources.files("rse.data").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise KeyError(f"no builtin case named {name!r}") from None
    return parse_case(text)


def build_admittance(net: Network) -> np.ndarray:
    """Bus admittance matrix Y (complex symmetric, not Hermitian).

    Off-diagonals are ``-y_mn``; the diagonal collects the ground shunt, the
    series admittances of incident lines and the line-end shunts at that bus.
    """
    Y = np.diag(net.ground_shunts.astype(complex))
    for line in net.lines:
        m, n = line.from_bus - 1, line.to_bus - 1
        y = line.series_admittance
        Y[m, m] += y + line.shunt_from
        Y[n, n] += y + line.shunt_to
        Y[m, n] -= y
        Y[n, m] -= y
    return Y


def _check_bus(net_or_n, bus: int) -> int:
    n_buses = net_or_n if isinstance(net_or_n, int) else net_or_n.n_buses
    if not 1 <= bus <= n_buses:
        raise IndexError(f"bus {bus} out of range 1..{n_buses}")
    return bus - 1


def _hermitian_parts(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Ah = A.conj().T
    return (A + Ah) / 2, 1j * (A - Ah) / 2


def build_injection_matrices(net: Network, Y: np.ndarray, bus: int) -> tuple[np.ndarray, np.ndarray]:
    """(H_P, H_Q) with Tr(H_P vv^H) + j Tr(H_Q vv^H) = V_n conj((Yv)_n)."""
    k = _check_bus(net, bus)
    Yn = np.zeros_like(Y, dtype=complex)
    Yn[k, :] = Y[k, :]
    return _hermitian_parts(Yn)


def build_flow_matrices(net: Network, line: Line, direction: str = "from") -> tuple[np.ndarray, np.ndarray]:
    """(H_P, H_Q) for the power flow metered at one end of ``line``.

    ``direction="from"`` meters P_mn + jQ_mn at the from bus m; ``"to"`` meters
    the reverse flow at the to bus.
    """
    if line not in net.lines:
        raise KeyError(f"line ({line.from_bus}, {line.to_bus}) is not in the network")
    if direction == "from":
        m, n = line.from_bus, line.to_bus
    elif direction == "to":
        m, n = line.to_bus, line.from_bus
    else:
        raise ValueError(f"direction must be 'from' or 'to', got {direction!r}")
    y, ybar = line.series_admittance, line.shunt_at(m)
    Ymn = np.zeros((net.n_buses, net.n_buses), dtype=complex)
    Ymn[m - 1, m - 1] = ybar + y
    Ymn[m - 1, n - 1] = -y
    return _hermitian_parts(Ymn)


def build_voltage_matrix(n_buses: int, bus: int) -> np.ndarray:
    """Elementary matrix e_n e_n^T, so Tr(H vv^H) = |V_n|^2."""
    k = _check_bus(n_buses, bus)
    H = np.zeros((n_buses, n_buses), dtype=complex)
    H[k, k] = 1.0
    return H
