"""Measurement plans, the quadratic measurement map h(v) and its polar Jacobian.

Every metered quantity is a Hermitian quadratic form of the complex voltage
vector, ``h_l(v) = v^H H_l v = Tr(H_l v v^H)``. Meter indices are 0-based
positions in the plan; bus numbers are 1-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from rse.network import (
    Network,
    build_admittance,
    build_flow_matrices,
    build_injection_matrices,
    build_voltage_matrix,
)

KINDS = ("inj_p", "inj_q", "flow_p", "flow_q", "vmagsq")
POWER_KINDS = frozenset({"inj_p", "inj_q", "flow_p", "flow_q"})
FLOW_KINDS = frozenset({"flow_p", "flow_q"})


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Meter:
    """One metered quantity.

    Injections and ``vmagsq`` use ``bus``; flows use ``bus`` as the metered
    (sending) end and ``to`` as the far end.
    """

    kind: str
    bus: int
    to: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlanError(f"unknown measurement kind {self.kind!r}")
        if (self.kind in FLOW_KINDS) != (self.to is not None):
            raise PlanError(f"{self.kind} meter needs {'a' if self.kind in FLOW_KINDS else 'no'} 'to' bus")

    def label(self) -> str:
        if self.to is None:
            return f"{self.kind}[{self.bus}]"
        return f"{self.kind}[{self.bus}->{self.to}]"

    def to_json(self) -> dict:
        if self.to is None:
            return {"kind": self.kind, "bus": self.bus}
        return {"kind": self.kind, "from": self.bus, "to": self.to}


@dataclass(frozen=True)
class MeasurementPlan:
    meters: tuple[Meter, ...]
    sigmas: np.ndarray = field(repr=False)

    def __post_init__(self):
        sigmas = np.array(self.sigmas, dtype=float)
        object.__setattr__(self, "meters", tuple(self.meters))
        if len(self.meters) < 1:
            raise PlanError("plan needs at least one meter")
        if sigmas.shape != (len(self.meters),):
            raise PlanError("one sigma per meter required")
        if not np.all(sigmas > 0):
            raise PlanError("all sigmas must be positive")
        sigmas.setflags(write=False)
        object.__setattr__(self, "sigmas", sigmas)

    def __len__(self) -> int:
        return len(self.meters)

    def indices(self, kinds) -> np.ndarray:
        kinds = {kinds} if isinstance(kinds, str) else set(kinds)
        return np.array([i for i, m in enumerate(self.meters) if m.kind in kinds], dtype=int)

    def concat(self, other: "MeasurementPlan") -> "MeasurementPlan":
        return MeasurementPlan(self.meters + other.meters, np.concatenate([self.sigmas, other.sigmas]))

    def validate(self, net: Network) -> None:
        for m in self.meters:
            if not 1 <= m.bus <= net.n_buses:
                raise PlanError(f"{m.label()}: unknown bus {m.bus}")
            if m.to is not None:
                try:
                    net.find_line(m.bus, m.to)
                except KeyError:
                    raise PlanError(f"{m.label()}: no such line") from None

    def to_json(self) -> str:
        rows = [dict(m.to_json(), sigma=float(s)) for m, s in zip(self.meters, self.sigmas)]
        return "[\n" + ",\n".join("  " + json.dumps(r) for r in rows) + "\n]\n"


def parse_plan(text: str) -> MeasurementPlan:
    """Parse a JSON plan: a list of ``{"kind", "bus" | "from"+"to", "sigma"}``."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise PlanError("plan must be a JSON list")
    meters, sigmas = [], []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict) or "kind" not in rec or "sigma" not in rec:
            raise PlanError(f"plan[{i}]: need 'kind' and 'sigma'")
        kind = rec["kind"]
        try:
            if kind in FLOW_KINDS:
                meter = Meter(kind, int(rec["from"]), int(rec["to"]))
            else:
                meter = Meter(kind, int(rec["bus"]))
        except KeyError as exc:
            raise PlanError(f"plan[{i}]: missing field {exc}") from None
        meters.append(meter)
        sigmas.append(float(rec["sigma"]))
    return MeasurementPlan(tuple(meters), np.array(sigmas))


def load_plan(path: str | Path) -> MeasurementPlan:
    return parse_plan(Path(path).read_text())


def flows_and_voltages_plan(net: Network, sigma_power: float = 0.02, sigma_voltage: float = 0.01) -> MeasurementPlan:
    """P and Q flow at the from-end of every line plus |V|^2 at every bus.

    Ordering: all P flows, then all Q flows, then the voltage meters.
    """
    meters = [Meter("flow_p", l.from_bus, l.to_bus) for l in net.lines]
    meters += [Meter("flow_q", l.from_bus, l.to_bus) for l in net.lines]
    meters += [Meter("vmagsq", n) for n in range(1, net.n_buses + 1)]
    sigmas = [sigma_power] * (2 * net.n_lines) + [sigma_voltage] * net.n_buses
    return MeasurementPlan(tuple(meters), np.array(sigmas))


@dataclass(frozen=True)
class HermitianCoeffs:
    """Stack of Hermitian matrices H_l, shape (M, N, N)."""

    H: np.ndarray

    def __post_init__(self):
        H = np.ascontiguousarray(self.H, dtype=complex)
        H.setflags(write=False)
        object.__setattr__(self, "H", H)
        # Tr(H_l V) = sum_ij H_l[i, j] V[j, i]
        object.__setattr__(self, "_flat", H.reshape(H.shape[0], -1))

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    def trace(self, V: np.ndarray) -> np.ndarray:
        """Tr(H_l V) for every l (real part)."""
        return (self._flat @ V.T.ravel()).real

    def quad(self, v: np.ndarray) -> np.ndarray:
        """v^H H_l v for every l."""
        return (self._flat @ np.outer(v, v.conj()).T.ravel()).real

    def combine(self, y: np.ndarray) -> np.ndarray:
        """sum_l y_l H_l (Hermitian when y is real)."""
        return (np.asarray(y, dtype=float) @ self._flat).reshape(self.n, self.n)


def measurement_matrices(net: Network, plan: MeasurementPlan, Y: np.ndarray | None = None) -> HermitianCoeffs:
    plan.validate(net)
    if Y is None:
        Y = build_admittance(net)
    out = np.empty((len(plan), net.n_buses, net.n_buses), dtype=complex)
    cache = {}
    for i, m in enumerate(plan.meters):
        if m.kind == "vmagsq":
            out[i] = build_voltage_matrix(net.n_buses, m.bus)
            continue
        key = (m.kind[:-2], m.bus, m.to)
        if key not in cache:
            if m.to is None:
                cache[key] = build_injection_matrices(net, Y, m.bus)
            else:
                line = net.find_line(m.bus, m.to)
                direction = "from" if line.from_bus == m.bus else "to"
                cache[key] = build_flow_matrices(net, line, direction)
        out[i] = cache[key][0 if m.kind.endswith("_p") else 1]
    return HermitianCoeffs(out)


def to_polar(v: np.ndarray) -> np.ndarray:
    """[|V_1..N|, angle V_1..N] with angles in (-pi, pi]."""
    v = np.asarray(v, dtype=complex)
    ang = np.angle(v)
    ang = np.where(ang <= -np.pi, np.pi, ang)
    return np.concatenate([np.abs(v), ang])


def from_polar(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size // 2
    return x[:n] * np.exp(1j * x[n:])


def eval_h(coeffs: HermitianCoeffs, v: np.ndarray) -> np.ndarray:
    return coeffs.quad(np.asarray(v, dtype=complex))


def jacobian_polar(coeffs: HermitianCoeffs, x: np.ndarray) -> np.ndarray:
    """Analytic Jacobian dh/dx at polar state x = [|V|, angle V], shape (M, 2N).

    Signed magnitudes (as produced by unconstrained Gauss-Newton steps) are
    accepted; only an exactly zero magnitude, where the chart is singular,
    is rejected.
    """
    x = np.asarray(x, dtype=float)
    n = coeffs.n
    mag = x[:n]
    if np.any(mag == 0):
        raise ValueError("polar Jacobian undefined at a zero-magnitude bus")
    phase = np.exp(1j * x[n:])
    v = mag * phase
    g = coeffs.H @ v  # (M, N): g_l = H_l v
    d_mag = 2 * (g.conj() * phase).real
    d_ang = -2 * (g.conj() * v).imag
    return np.hstack([d_mag, d_ang])


@dataclass(frozen=True)
class MeasurementSet:
    z: np.ndarray
    w: np.ndarray
    true_outliers: np.ndarray
    v_true: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        w = np.asarray(self.w, dtype=float)
        a = np.asarray(self.true_outliers, dtype=float)
        if not (z.shape == w.shape == a.shape) or z.ndim != 1:
            raise ValueError("z, w and true_outliers must be equal-length vectors")
        if not np.all(w > 0):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "true_outliers", a)

    @property
    def m(self) -> int:
        return self.z.size

    def to_json(self) -> str:
        rec = {"z": self.z.tolist(), "w": self.w.tolist(), "true_outliers": self.true_outliers.tolist()}
        if self.v_true is not None:
            rec["v_true"] = {"re": self.v_true.real.tolist(), "im": self.v_true.imag.tolist()}
        return json.dumps(rec)

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSet":
        rec = json.loads(text)
        v = rec.get("v_true")
        if v is not None:
            v = np.array(v["re"]) + 1j * np.array(v["im"])
        z = np.array(rec["z"], dtype=float)
        return cls(z, np.array(rec["w"], dtype=float), np.array(rec.get("true_outliers", np.zeros_like(z))), v)


def voltage_weight(z: np.ndarray, sigma_v: np.ndarray) -> np.ndarray:
    """Weight of a squared-magnitude reading, 1 / (4 |V|^2 sigma_V^2)."""
    return 1.0 / (4.0 * np.maximum(z, 1e-12) * sigma_v**2)


def simulate(coeffs: HermitianCoeffs, plan: MeasurementPlan, v_true: np.ndarray, seed: int, noise_scale: float = 1.0) -> MeasurementSet:
    """Noisy readings z = h(v_true) + noise.

    Power meters get additive N(0, sigma^2) noise. Voltage meters read the
    magnitude with N(0, sigma_V^2) noise and report its square. Weights always
    follow the plan's sigmas; ``noise_scale=0`` gives exact readings.
    """
    rng = np.random.default_rng(seed)
    h = eval_h(coeffs, v_true)
    eps = rng.standard_normal(len(plan)) * plan.sigmas * noise_scale
    volt = plan.indices("vmagsq")
    z = h + eps
    z[volt] = (np.sqrt(h[volt]) + eps[volt]) ** 2
    w = 1.0 / plan.sigmas**2
    w[volt] = voltage_weight(z[volt], plan.sigmas[volt])
    return MeasurementSet(z, w, np.zeros(len(plan)), np.asarray(v_true, dtype=complex))


@dataclass(frozen=True)
class ScaleBy:
    factor: float

    def apply(self, z):
        return z * self.factor


@dataclass(frozen=True)
class SetTo:
    value: float

    def apply(self, z):
        return np.full_like(z, self.value)


@dataclass(frozen=True)
class AddOffset:
    delta: float

    def apply(self, z):
        return z + self.delta


def inject_outliers(ms: MeasurementSet, indices, mode) -> MeasurementSet:
    """Corrupt the readings at ``indices``; the perturbation is added to true_outliers.

    Weights are left untouched.
    """
    idx = np.unique(np.asarray(list(indices), dtype=int))
    if idx.size and (idx.min() < 0 or idx.max() >= ms.m):
        raise IndexError(f"meter index out of range 0..{ms.m - 1}")
    z = ms.z.copy()
    z[idx] = mode.apply(ms.z[idx])
    a = ms.true_outliers + (z - ms.z)
    return replace(ms, z=z, true_outliers=a)


def random_state(n_buses: int, seed: int, ref_bus: int = 1, mag_std: float = 0.1, max_angle: float = np.pi / 2, min_mag: float = 0.5) -> np.ndarray:
    """Random complex voltages: |V| ~ N(1, mag_std^2) clamped at ``min_mag``,
    angle ~ U[-max_angle, max_angle]; the reference bus is pinned to 1+0j."""
    if not 1 <= ref_bus <= n_buses:
        raise IndexError(f"reference bus {ref_bus} out of range")
    rng = np.random.default_rng(seed)
    mag = np.maximum(1.0 + mag_std * rng.standard_normal(n_buses), min_mag)
    ang = rng.uniform(-max_angle, max_angle, n_buses)
    v = mag * np.exp(1j * ang)
    v[ref_bus - 1] = 1.0
    return v
