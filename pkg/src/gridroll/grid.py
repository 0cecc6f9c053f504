"""Radial feeder model: AC power flow, linear voltage sensitivities, and
the security check applied to aggregate EV schedules.

Loads are taken at unity power factor.  The full Newton-Raphson solve is
the reference; scheduling stages use the linear model built from the
inverse power-flow Jacobian at the hourly base-load operating point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PF_TOL = 1e-8
PF_MAX_ITERS = 50


class PowerFlowDiverged(RuntimeError):
    """Newton iteration failed to reach the mismatch tolerance."""


class SingularJacobian(RuntimeError):
    """Power-flow Jacobian is singular at the operating point."""


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float


@dataclass(frozen=True)
class Violation:
    """One security-limit breach.  bus is None for the transformer check.
    excess is kW for transformer rows, p.u. for voltage rows."""

    kind: str
    hour: int
    bus: int | None
    value: float
    limit: float
    excess: float


@dataclass
class NetworkModel:
    """Feeder data plus the hourly linearisation around base load.

    u0[b, h] is the voltage with base load only; sensitivity[h][b, g] maps
    one kW of extra consumption at bus g to the voltage drop at bus b, so
    predicted voltage is u0 - sensitivity @ load_kw.
    """

    n_bus: int
    slack: int
    branches: tuple[Branch, ...]
    s_base_kva: float
    slack_voltage: float
    v_min: float
    v_max: float
    transformer_limit_kw: float
    base_load_kw: np.ndarray            # (n_bus, horizon)
    u0: np.ndarray = field(default=None, repr=False)
    sensitivity: np.ndarray = field(default=None, repr=False)  # (horizon, n_bus, n_bus)

    @property
    def horizon(self) -> int:
        return self.base_load_kw.shape[1]

    def prepare(self) -> "NetworkModel":
        """Solve the hourly base cases and freeze the linearisation."""
        H = self.horizon
        self.u0 = np.zeros((self.n_bus, H))
        self.sensitivity = np.zeros((H, self.n_bus, self.n_bus))
        for h in range(H):
            u, sens = voltage_sensitivity(self, self.base_load_kw[:, h])
            self.u0[:, h] = u
            self.sensitivity[h] = sens
        return self

    def admittance(self) -> np.ndarray:
        Y = np.zeros((self.n_bus, self.n_bus), dtype=complex)
        for br in self.branches:
            y = 1.0 / complex(br.r_pu, br.x_pu)
            Y[br.from_bus, br.from_bus] += y
            Y[br.to_bus, br.to_bus] += y
            Y[br.from_bus, br.to_bus] -= y
            Y[br.to_bus, br.from_bus] -= y
        return Y

    def predicted_voltages(self, ev_load_kw: np.ndarray) -> np.ndarray:
        """Linearised voltages for an EV load profile (n_bus, horizon)."""
        out = np.empty_like(self.u0)
        for h in range(self.horizon):
            out[:, h] = self.u0[:, h] - self.sensitivity[h] @ ev_load_kw[:, h]
        return out


def solve_power_flow(model: NetworkModel, load_kw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full Newton-Raphson solve for one hour of bus loads (kW, consumption
    positive, unity power factor).  Returns (voltage magnitudes, angles)."""
    n = model.n_bus
    Y = model.admittance()
    G, B = Y.real, Y.imag
    pq = [i for i in range(n) if i != model.slack]
    npq = len(pq)
    p_inj = -np.asarray(load_kw, dtype=float) / model.s_base_kva

    V = np.full(n, model.slack_voltage)
    theta = np.zeros(n)

    for _ in range(PF_MAX_ITERS):
        p_calc = np.zeros(n)
        q_calc = np.zeros(n)
        for i in range(n):
            dth = theta[i] - theta
            cos, sin = np.cos(dth), np.sin(dth)
            p_calc[i] = V[i] * np.sum(V * (G[i] * cos + B[i] * sin))
            q_calc[i] = V[i] * np.sum(V * (G[i] * sin - B[i] * cos))
        mis = np.concatenate([p_inj[pq] - p_calc[pq], -q_calc[pq]])
        if np.max(np.abs(mis)) < PF_TOL:
            return V, theta
        J = _jacobian(V, theta, G, B, p_calc, q_calc, pq)
        try:
            step = np.linalg.solve(J, mis)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        theta[pq] += step[:npq]
        V[pq] += step[npq:]
        if np.any(V <= 0) or np.any(~np.isfinite(V)):
            raise PowerFlowDiverged("voltage magnitudes left the physical region")
    raise PowerFlowDiverged(f"no convergence within {PF_MAX_ITERS} iterations")


def _jacobian(V, theta, G, B, p_calc, q_calc, pq) -> np.ndarray:
    npq = len(pq)
    J = np.zeros((2 * npq, 2 * npq))
    for a, i in enumerate(pq):
        for b, j in enumerate(pq):
            if i == j:
                J[a, b] = -q_calc[i] - B[i, i] * V[i] ** 2
                J[a, npq + b] = p_calc[i] / V[i] + G[i, i] * V[i]
                J[npq + a, b] = p_calc[i] - G[i, i] * V[i] ** 2
                J[npq + a, npq + b] = q_calc[i] / V[i] - B[i, i] * V[i]
            else:
                dth = theta[i] - theta[j]
                cos, sin = np.cos(dth), np.sin(dth)
                J[a, b] = V[i] * V[j] * (G[i, j] * sin - B[i, j] * cos)
                J[a, npq + b] = V[i] * (G[i, j] * cos + B[i, j] * sin)
                J[npq + a, b] = -V[i] * V[j] * (G[i, j] * cos + B[i, j] * sin)
                J[npq + a, npq + b] = V[i] * (G[i, j] * sin - B[i, j] * cos)
    return J


def voltage_sensitivity(model: NetworkModel, load_kw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Operating-point voltages plus the kW-to-voltage sensitivity matrix.

    The sensitivity is the voltage-magnitude block of the inverse Jacobian
    mapping active-power injections, converted to the load convention:
    U = u - sens @ extra_load_kw, entries nonnegative on a radial feeder.
    """
    n = model.n_bus
    V, theta = solve_power_flow(model, load_kw)
    Y = model.admittance()
    G, B = Y.real, Y.imag
    pq = [i for i in range(n) if i != model.slack]
    npq = len(pq)
    p_calc = np.zeros(n)
    q_calc = np.zeros(n)
    for i in range(n):
        dth = theta[i] - theta
        cos, sin = np.cos(dth), np.sin(dth)
        p_calc[i] = V[i] * np.sum(V * (G[i] * cos + B[i] * sin))
        q_calc[i] = V[i] * np.sum(V * (G[i] * sin - B[i] * cos))
    J = _jacobian(V, theta, G, B, p_calc, q_calc, pq)
    try:
        J_inv = np.linalg.inv(J)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian(str(exc)) from exc
    dv_dp_inj = J_inv[npq:, :npq]       # p.u. voltage per p.u. injection
    sens = np.zeros((n, n))
    for a, i in enumerate(pq):
        for b, j in enumerate(pq):
            # load = -injection, so one kW of load drops voltage by this much
            sens[i, j] = dv_dp_inj[a, b] / model.s_base_kva
    return V, sens


def check_constraints(model: NetworkModel, ev_load_kw: np.ndarray,
                      *, kw_tol: float = 1e-6, v_tol: float = 1e-9) -> list[Violation]:
    """Security screen of an aggregate EV schedule (n_bus, horizon).

    Transformer: |sum of bus powers| per hour against the kW limit.
    Voltage: linearised magnitudes against the [v_min, v_max] band.
    """
    if ev_load_kw.shape != (model.n_bus, model.horizon):
        raise ValueError(f"schedule shape {ev_load_kw.shape} != {(model.n_bus, model.horizon)}")
    out: list[Violation] = []
    flows = ev_load_kw.sum(axis=0)
    for h in range(model.horizon):
        if abs(flows[h]) > model.transformer_limit_kw + kw_tol:
            out.append(Violation("transformer", h, None, float(flows[h]),
                                 model.transformer_limit_kw,
                                 float(abs(flows[h]) - model.transformer_limit_kw)))
    volts = model.predicted_voltages(ev_load_kw)
    for h in range(model.horizon):
        for b in range(model.n_bus):
            if b == model.slack:
                continue
            u = volts[b, h]
            if u < model.v_min - v_tol:
                out.append(Violation("undervoltage", h, b, float(u), model.v_min,
                                     float(model.v_min - u)))
            elif u > model.v_max + v_tol:
                out.append(Violation("overvoltage", h, b, float(u), model.v_max,
                                     float(u - model.v_max)))
    return out
