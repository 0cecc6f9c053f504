"""Balancing-market re-optimisation on a rolling window.

Each window solves, per vehicle, a MILP that prices deviations from the
day-ahead baseline.  Up-regulation sells energy back at the balancing
price, down-regulation buys more; four binaries select the regulation
direction and the operating mode (net charging or net discharging), and
the direction-mode cross products are linearised with big-M families.
Only the first step of every window is committed; the state of charge
carries into the next window unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dam import DamSchedule
from .fleet import EvSpec, battery_operating_cost, step_soc
from .kernel import EQ, LE, LpBuilder, MilpProblem, SolveStatus, solve_milp

log = logging.getLogger(__name__)

Forecaster = Callable[[int, Sequence[int]], np.ndarray]


class MissingBaseline(KeyError):
    """Day-ahead schedule lacks a vehicle that is being re-optimised."""


class ForecastGap(ValueError):
    """Forecaster returned the wrong shape or non-finite prices."""


@dataclass(frozen=True)
class RollingConfig:
    window_hours: int = 3
    step_hours: int = 1
    include_boc: bool = True
    # Keep the literal sign of the wear term (a discharge credit) instead
    # of charging wear on discharged energy.
    boc_printed_sign: bool = False

    def validate(self) -> None:
        if not 1 <= self.step_hours <= self.window_hours:
            raise ValueError("need 1 <= step_hours <= window_hours")


@dataclass(frozen=True)
class BmWindowVars:
    """Variable indices of one vehicle's window model, by local slot."""

    hours: tuple[int, ...]
    d_up: tuple[int, ...]
    d_down: tuple[int, ...]
    d_ch_mode: tuple[int, ...]
    d_dis_mode: tuple[int, ...]
    p_up: tuple[int, ...]
    p_down: tuple[int, ...]
    # Regulation magnitudes gated by mode: up_ch is up-regulation landing
    # while charging, down_dis is down-regulation landing while discharging.
    up_ch: tuple[int, ...]
    down_ch: tuple[int, ...]
    up_dis: tuple[int, ...]
    down_dis: tuple[int, ...]
    soc: tuple[int, ...]
    m_up: np.ndarray
    m_down: np.ndarray


@dataclass
class BmWindowModel:
    """All per-vehicle window problems for one rolling step."""

    index: int
    start_hour: int
    hours: tuple[int, ...]
    problems: dict[str, MilpProblem]
    vars: dict[str, BmWindowVars]
    baseline_objective: dict[str, float]


@dataclass
class WindowLog:
    index: int
    start_hour: int
    committed_hours: tuple[int, ...]
    soc_in: dict[str, float]
    soc_out: dict[str, float]
    fallback: dict[str, bool]
    objective: dict[str, float]


@dataclass
class BmSchedule:
    """Committed balancing-market plan over the full horizon."""

    horizon: int
    up_kw: dict[str, np.ndarray]
    down_kw: dict[str, np.ndarray]
    mode: dict[str, np.ndarray]               # +1 charging, -1 discharging, 0 idle
    charge_mode_kw: dict[str, np.ndarray]     # delivered power while in charging mode (>= 0)
    discharge_mode_kw: dict[str, np.ndarray]  # delivered power while in discharging mode (<= 0)
    soc: dict[str, np.ndarray]
    windows: list[WindowLog] = field(default_factory=list)

    def delivered_kw(self, ev_id: str) -> np.ndarray:
        return self.charge_mode_kw[ev_id] + self.discharge_mode_kw[ev_id]

    def bus_profile(self, fleet: list[EvSpec], n_bus: int) -> np.ndarray:
        out = np.zeros((n_bus, self.horizon))
        for ev in fleet:
            if ev.ev_id in self.charge_mode_kw:
                out[ev.bus] += self.delivered_kw(ev.ev_id)
        return out


def _add_product_family(b: LpBuilder, z: int, p: int, da: int, db: int, m: float) -> None:
    """Rows forcing z = da * db * p for binaries da, db and 0 <= p <= m."""
    b.add_row([(z, 1.0), (p, -1.0)], LE, 0.0)
    b.add_row([(z, -1.0), (p, 1.0)], LE, m)
    b.add_row([(z, -1.0), (p, 1.0), (da, m), (db, m)], LE, 2.0 * m)
    b.add_row([(z, 1.0), (da, -m)], LE, 0.0)
    b.add_row([(z, 1.0), (db, -m)], LE, 0.0)


def build_ev_window_model(ev: EvSpec, soc_now: float, baseline_ch: np.ndarray,
                          baseline_dis: np.ndarray, prices: dict[int, float],
                          hours: Sequence[int], cfg: RollingConfig, *,
                          terminal_soc_floor: float | None = None,
                          ) -> tuple[MilpProblem, BmWindowVars, float]:
    """Window MILP for one vehicle.

    hours are the absolute hours modelled (window clipped to the
    connection interval); prices maps each of them to a balancing price.
    Windows not containing the departure must end at or above
    terminal_soc_floor (the day-ahead trajectory's value there), so a
    window can never push recovery costs past its own end.  Returns the
    problem, its variable map, and the objective value of the do-nothing
    baseline used for tie-breaking and fallback.
    """
    wear = battery_operating_cost(ev).cost_per_kwh if cfg.include_boc else 0.0
    b = LpBuilder()
    W = len(hours)
    b_up, b_down, b_ch, b_dis = [], [], [], []
    p_up, p_down, up_ch, down_ch, up_dis, down_dis, soc = [], [], [], [], [], [], []
    m_up_arr = np.zeros(W)
    m_down_arr = np.zeros(W)

    for t, h in enumerate(hours):
        f = float(baseline_ch[h] - baseline_dis[h])
        m_up = max(0.0, ev.p_max_ch_kw + f)
        m_down = max(0.0, ev.p_max_ch_kw - f)
        m_up_arr[t] = m_up
        m_down_arr[t] = m_down
        lam = float(prices[h])
        b_up.append(b.add_var(0, 1, binary=True))
        b_down.append(b.add_var(0, 1, binary=True))
        b_ch.append(b.add_var(0, 1, binary=True))
        b_dis.append(b.add_var(0, 1, binary=True))
        p_up.append(b.add_var(0.0, m_up))
        p_down.append(b.add_var(0.0, m_down))
        # Objective: deviations settle at the balancing price, wear falls
        # on discharging-mode energy.
        up_ch.append(b.add_var(0.0, m_up, obj=-lam))
        down_ch.append(b.add_var(0.0, m_down, obj=lam))
        up_dis.append(b.add_var(0.0, m_up, obj=-lam))
        down_dis.append(b.add_var(0.0, m_down, obj=lam))
        if cfg.boc_printed_sign:
            b.add_objective(up_dis[-1], -wear)
            b.add_objective(down_dis[-1], wear)
            b.add_objective(b_dis[-1], wear * f)
        else:
            b.add_objective(up_dis[-1], wear)
            b.add_objective(down_dis[-1], -wear)
            b.add_objective(b_dis[-1], -wear * f)

    departs_inside = ev.departure_hour - 1 == hours[-1]
    floor = ev.soc_min if terminal_soc_floor is None else \
        min(max(terminal_soc_floor, ev.soc_min), ev.soc_max)
    for t, h in enumerate(hours):
        if t == W - 1:
            if departs_inside:
                soc.append(b.add_var(ev.soc_desired, ev.soc_desired))
            else:
                soc.append(b.add_var(floor, ev.soc_max))
        else:
            soc.append(b.add_var(ev.soc_min, ev.soc_max))

    for t, h in enumerate(hours):
        f = float(baseline_ch[h] - baseline_dis[h])
        b.add_row([(b_up[t], 1.0), (b_down[t], 1.0)], LE, 1.0)
        b.add_row([(b_ch[t], 1.0), (b_dis[t], 1.0)], EQ, 1.0)
        # Charging-mode delivery stays inside [0, p_max_ch].
        b.add_row([(b_ch[t], -f), (up_ch[t], 1.0), (down_ch[t], -1.0)], LE, 0.0)
        b.add_row([(b_ch[t], f), (up_ch[t], -1.0), (down_ch[t], 1.0)], LE, ev.p_max_ch_kw)
        # Discharging-mode delivery stays inside [-p_max_dis, 0].
        b.add_row([(b_dis[t], f), (up_dis[t], -1.0), (down_dis[t], 1.0)], LE, 0.0)
        b.add_row([(b_dis[t], -f), (up_dis[t], 1.0), (down_dis[t], -1.0)], LE, ev.p_max_dis_kw)
        _add_product_family(b, up_ch[t], p_up[t], b_up[t], b_ch[t], m_up_arr[t])
        _add_product_family(b, down_ch[t], p_down[t], b_down[t], b_ch[t], m_down_arr[t])
        _add_product_family(b, up_dis[t], p_up[t], b_up[t], b_dis[t], m_up_arr[t])
        _add_product_family(b, down_dis[t], p_down[t], b_down[t], b_dis[t], m_down_arr[t])
        # SOC recursion on delivered power, split by operating mode.
        kch = ev.eta_ch / ev.capacity_kwh
        kdis = 1.0 / (ev.eta_dis * ev.capacity_kwh)
        coeffs = [(soc[t], 1.0),
                  (b_ch[t], -f * kch), (up_ch[t], kch), (down_ch[t], -kch),
                  (b_dis[t], -f * kdis), (up_dis[t], kdis), (down_dis[t], -kdis)]
        if t == 0:
            b.add_row(coeffs, EQ, soc_now)
        else:
            b.add_row(coeffs + [(soc[t - 1], -1.0)], EQ, 0.0)

    baseline_obj = 0.0
    for h in hours:
        f = float(baseline_ch[h] - baseline_dis[h])
        if f < 0:
            baseline_obj += wear * (f if cfg.boc_printed_sign else -f)

    idx = BmWindowVars(hours=tuple(hours), d_up=tuple(b_up), d_down=tuple(b_down),
                       d_ch_mode=tuple(b_ch), d_dis_mode=tuple(b_dis),
                       p_up=tuple(p_up), p_down=tuple(p_down),
                       up_ch=tuple(up_ch), down_ch=tuple(down_ch),
                       up_dis=tuple(up_dis), down_dis=tuple(down_dis),
                       soc=tuple(soc), m_up=m_up_arr, m_down=m_down_arr)
    return b.build_milp(), idx, baseline_obj


def build_bm_window_model(fleet: list[EvSpec], soc_state: dict[str, float],
                          dam: DamSchedule, prices: dict[int, float],
                          window_index: int, start_hour: int, hours: Sequence[int],
                          cfg: RollingConfig) -> BmWindowModel:
    problems: dict[str, MilpProblem] = {}
    vars_: dict[str, BmWindowVars] = {}
    base: dict[str, float] = {}
    for ev in sorted(fleet, key=lambda e: e.ev_id):
        ev_hours = [h for h in hours if ev.connected(h)]
        if not ev_hours:
            continue
        if ev.ev_id not in dam.charge_kw:
            raise MissingBaseline(f"no day-ahead baseline for {ev.ev_id}")
        prob, idx, base_obj = build_ev_window_model(
            ev, soc_state[ev.ev_id], dam.charge_kw[ev.ev_id], dam.discharge_kw[ev.ev_id],
            prices, ev_hours, cfg,
            terminal_soc_floor=float(dam.soc[ev.ev_id][ev_hours[-1] + 1]))
        problems[ev.ev_id] = prob
        vars_[ev.ev_id] = idx
        base[ev.ev_id] = base_obj
    return BmWindowModel(index=window_index, start_hour=start_hour, hours=tuple(hours),
                         problems=problems, vars=vars_, baseline_objective=base)


def _baseline_window_feasible(ev: EvSpec, soc_now: float, baseline_ch: np.ndarray,
                              baseline_dis: np.ndarray, hours: Sequence[int],
                              terminal_soc_floor: float) -> bool:
    """Whether deviating nowhere in this window keeps the plan feasible.

    Committed deviations in earlier windows shift the state off the
    day-ahead trajectory, after which the do-nothing plan may no longer
    hold its target; it must not win tie-breaks then.
    """
    soc = soc_now
    for h in hours:
        soc = step_soc(ev, soc, float(baseline_ch[h]), float(baseline_dis[h]))
        if not ev.soc_min - 1e-9 <= soc <= ev.soc_max + 1e-9:
            return False
    if ev.departure_hour - 1 == hours[-1]:
        return abs(soc - ev.soc_desired) <= 1e-9
    return soc >= min(terminal_soc_floor, ev.soc_max) - 1e-9


def _commit_baseline(ev: EvSpec, dam: DamSchedule, sched: BmSchedule, h: int) -> None:
    f = float(dam.charge_kw[ev.ev_id][h] - dam.discharge_kw[ev.ev_id][h])
    sched.charge_mode_kw[ev.ev_id][h] = max(f, 0.0)
    sched.discharge_mode_kw[ev.ev_id][h] = min(f, 0.0)
    sched.mode[ev.ev_id][h] = 1 if f > 0 else (-1 if f < 0 else 0)


def run_rolling(fleet: list[EvSpec], dam: DamSchedule, forecaster: Forecaster,
                cfg: RollingConfig = RollingConfig()) -> BmSchedule:
    """Roll the balancing-market windows over the horizon.

    Each step re-forecasts prices, re-solves every connected vehicle's
    window, and commits only the first step_hours.  A window with no
    profitable deviation, or an infeasible window, commits the day-ahead
    baseline for its step.
    """
    cfg.validate()
    H = dam.horizon
    fleet = sorted(fleet, key=lambda e: e.ev_id)
    sched = BmSchedule(
        horizon=H,
        up_kw={ev.ev_id: np.zeros(H) for ev in fleet},
        down_kw={ev.ev_id: np.zeros(H) for ev in fleet},
        mode={ev.ev_id: np.zeros(H, dtype=np.int8) for ev in fleet},
        charge_mode_kw={ev.ev_id: np.zeros(H) for ev in fleet},
        discharge_mode_kw={ev.ev_id: np.zeros(H) for ev in fleet},
        soc={ev.ev_id: np.full(H + 1, np.nan) for ev in fleet},
    )
    soc_state = {ev.ev_id: ev.soc_init for ev in fleet}
    for ev in fleet:
        sched.soc[ev.ev_id][: ev.arrival_hour + 1] = ev.soc_init

    for r, start in enumerate(range(0, H, cfg.step_hours)):
        hours = tuple(range(start, min(start + cfg.window_hours, H)))
        raw = np.asarray(forecaster(start, hours), dtype=float)
        if raw.shape != (len(hours),) or not np.all(np.isfinite(raw)):
            raise ForecastGap(f"window {r}: forecast shape {raw.shape} for {len(hours)} hours")
        prices = {h: float(raw[t]) for t, h in enumerate(hours)}
        model = build_bm_window_model(fleet, soc_state, dam, prices, r, start, hours, cfg)
        commit = tuple(h for h in hours if h < start + cfg.step_hours)
        wlog = WindowLog(index=r, start_hour=start, committed_hours=commit,
                         soc_in={}, soc_out={}, fallback={}, objective={})

        for ev in fleet:
            if ev.ev_id not in model.problems:
                continue
            idx = model.vars[ev.ev_id]
            wlog.soc_in[ev.ev_id] = soc_state[ev.ev_id]
            sol = solve_milp(model.problems[ev.ev_id])
            base_obj = model.baseline_objective[ev.ev_id]
            ev_hours = model.vars[ev.ev_id].hours
            base_ok = _baseline_window_feasible(
                ev, soc_state[ev.ev_id], dam.charge_kw[ev.ev_id],
                dam.discharge_kw[ev.ev_id], ev_hours,
                float(dam.soc[ev.ev_id][ev_hours[-1] + 1]))
            if sol.status is SolveStatus.OPTIMAL:
                # Prefer the do-nothing baseline unless deviating strictly
                # pays, but never when the baseline itself has drifted
                # infeasible.
                use_baseline = base_ok and sol.objective_value >= base_obj - 1e-9
            else:
                use_baseline = True
                log.warning("window %d: %s has no feasible deviation plan (%s); "
                            "keeping the day-ahead baseline", r, ev.ev_id, sol.status.value)
            wlog.fallback[ev.ev_id] = use_baseline
            wlog.objective[ev.ev_id] = base_obj if use_baseline else float(sol.objective_value)

            for h in idx.hours:
                if h not in commit:
                    continue
                t = idx.hours.index(h)
                if use_baseline:
                    _commit_baseline(ev, dam, sched, h)
                else:
                    x = sol.values
                    f = float(dam.charge_kw[ev.ev_id][h] - dam.discharge_kw[ev.ev_id][h])
                    up = float(x[idx.up_ch[t]] + x[idx.up_dis[t]])
                    down = float(x[idx.down_ch[t]] + x[idx.down_dis[t]])
                    cm = f * float(x[idx.d_ch_mode[t]]) - float(x[idx.up_ch[t]]) + float(x[idx.down_ch[t]])
                    dm = f * float(x[idx.d_dis_mode[t]]) - float(x[idx.up_dis[t]]) + float(x[idx.down_dis[t]])
                    sched.up_kw[ev.ev_id][h] = up
                    sched.down_kw[ev.ev_id][h] = down
                    sched.charge_mode_kw[ev.ev_id][h] = max(0.0, cm)
                    sched.discharge_mode_kw[ev.ev_id][h] = min(0.0, dm)
                    sched.mode[ev.ev_id][h] = 1 if x[idx.d_ch_mode[t]] > 0.5 else -1
                soc_state[ev.ev_id] = step_soc(
                    ev, soc_state[ev.ev_id],
                    sched.charge_mode_kw[ev.ev_id][h],
                    -sched.discharge_mode_kw[ev.ev_id][h])
                sched.soc[ev.ev_id][h + 1] = soc_state[ev.ev_id]
            wlog.soc_out[ev.ev_id] = soc_state[ev.ev_id]
        sched.windows.append(wlog)

    for ev in fleet:
        dep = ev.departure_hour
        sched.soc[ev.ev_id][dep:] = sched.soc[ev.ev_id][dep]
    return sched


@dataclass(frozen=True)
class Settlement:
    """Realized balancing-market result: deviation cashflow (positive is a
    cost) and wear cost on discharging-mode energy, per vehicle."""

    cashflow: dict[str, float]
    wear: dict[str, float]

    @property
    def total(self) -> float:
        return sum(self.cashflow.values()) + sum(self.wear.values())

    @property
    def total_cashflow(self) -> float:
        return sum(self.cashflow.values())


def settle(sched: BmSchedule, fleet: list[EvSpec], realized: np.ndarray,
           *, include_boc: bool = True, boc_printed_sign: bool = False) -> Settlement:
    """Value a committed schedule at realized balancing prices."""
    realized = np.asarray(realized, dtype=float)
    if len(realized) < sched.horizon:
        raise ForecastGap(f"realized prices cover {len(realized)} of {sched.horizon} hours")
    cash: dict[str, float] = {}
    wear: dict[str, float] = {}
    for ev in sorted(fleet, key=lambda e: e.ev_id):
        cd = battery_operating_cost(ev).cost_per_kwh if include_boc else 0.0
        up = sched.up_kw[ev.ev_id]
        down = sched.down_kw[ev.ev_id]
        cash[ev.ev_id] = float(np.sum((down - up) * realized[: sched.horizon]))
        dis = -sched.discharge_mode_kw[ev.ev_id].sum()
        wear[ev.ev_id] = float(cd * (-dis if boc_printed_sign else dis))
    return Settlement(cashflow=cash, wear=wear)
