"""EV fleet primitives: per-vehicle parameters, battery wear cost,
state-of-charge stepping, and the bus-level virtual storage used by the
network negotiation stage."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class NonPositiveParameter(ValueError):
    """A physical parameter that must be positive is not."""


class UnknownBus(KeyError):
    """An EV references a bus absent from the network."""


class InfeasibleAllocation(RuntimeError):
    """A bus schedule cannot be split across members without breaking
    per-EV state-of-charge constraints."""


@dataclass(frozen=True)
class EvSpec:
    """Static description of one EV and its connection window.

    Hours are absolute indices on the scenario horizon; the vehicle is
    plugged in during [arrival_hour, departure_hour).  SOC values are
    fractions of capacity_kwh.
    """

    ev_id: str
    bus: int
    capacity_kwh: float
    soc_min: float
    soc_max: float
    soc_init: float
    soc_desired: float
    p_max_ch_kw: float
    p_max_dis_kw: float
    eta_ch: float
    eta_dis: float
    cycle_life: float
    dod: float
    battery_cost: float
    arrival_hour: int
    departure_hour: int

    def validate(self) -> None:
        for name in ("capacity_kwh", "p_max_ch_kw", "p_max_dis_kw", "cycle_life", "dod", "battery_cost"):
            if getattr(self, name) <= 0:
                raise NonPositiveParameter(f"{self.ev_id}: {name} must be positive")
        for name in ("eta_ch", "eta_dis"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise NonPositiveParameter(f"{self.ev_id}: {name} must lie in (0, 1]")
        if not 0 <= self.soc_min <= self.soc_max <= 1:
            raise NonPositiveParameter(f"{self.ev_id}: need 0 <= soc_min <= soc_max <= 1")
        for name in ("soc_init", "soc_desired"):
            v = getattr(self, name)
            if not self.soc_min - 1e-9 <= v <= self.soc_max + 1e-9:
                raise NonPositiveParameter(f"{self.ev_id}: {name}={v} outside [soc_min, soc_max]")
        if self.departure_hour <= self.arrival_hour:
            raise NonPositiveParameter(f"{self.ev_id}: empty connection window")

    def connected(self, hour: int) -> bool:
        return self.arrival_hour <= hour < self.departure_hour


@dataclass(frozen=True)
class BatteryCost:
    """Wear cost of cycling: lifetime energy throughput and the per-kWh
    operating cost charged on discharged energy."""

    throughput_kwh: float
    cost_per_kwh: float


def battery_operating_cost(ev: EvSpec) -> BatteryCost:
    """Battery operating cost from cycle life, capacity and depth of
    discharge: throughput = cycles * capacity * DoD, cost = price / throughput."""
    ev.validate()
    throughput = ev.cycle_life * ev.capacity_kwh * ev.dod
    return BatteryCost(throughput_kwh=throughput, cost_per_kwh=ev.battery_cost / throughput)


def step_soc(ev: EvSpec, soc: float, p_ch_kw: float, p_dis_kw: float, dt_h: float = 1.0) -> float:
    """One-step SOC update: charging is derated by eta_ch, discharging
    inflated by 1/eta_dis.  Pure arithmetic, no clipping."""
    return soc + (p_ch_kw * ev.eta_ch - p_dis_kw / ev.eta_dis) * dt_h / ev.capacity_kwh


def required_soc(ev: EvSpec, hour: int) -> float:
    """Lowest SOC at the end of `hour` from which soc_desired is still
    reachable by charging flat out until departure."""
    remaining = max(ev.departure_hour - 1 - hour, 0)
    ramp = ev.soc_desired - remaining * ev.p_max_ch_kw * ev.eta_ch / ev.capacity_kwh
    return max(ev.soc_min, ramp)


@dataclass
class BusVirtualStorage:
    """Aggregate battery seen by the network stage for one bus.

    Energies are kWh.  arrivals_kwh[i] is energy connecting at the start
    of hour i (EVs plug in at soc_init); departures_kwh[i] leaves at the
    start of hour i carrying soc_desired.  e_min ramps each member up to
    its desired energy just before departure, so any trajectory inside
    the envelope can deliver every vehicle on target.
    """

    bus: int
    horizon: int
    member_ids: tuple[str, ...]
    capacity_kwh: float
    p_max_ch_kw: np.ndarray
    p_max_dis_kw: np.ndarray
    e_min_kwh: np.ndarray
    e_max_kwh: np.ndarray
    arrivals_kwh: np.ndarray
    departures_kwh: np.ndarray
    initial_energy_kwh: float
    desired_energy_kwh: float
    eta_ch: float
    eta_dis: float

    def energy_after(self, net_kw: np.ndarray) -> np.ndarray:
        """Energy trajectory for a net charge/discharge profile (kW, +charge)."""
        e = np.zeros(self.horizon)
        level = self.initial_energy_kwh
        for i in range(self.horizon):
            level += self.arrivals_kwh[i] - self.departures_kwh[i]
            p = net_kw[i]
            level += p * self.eta_ch if p >= 0 else p / self.eta_dis
            e[i] = level
        return e


def aggregate_to_bus(fleet: list[EvSpec], horizon: int) -> dict[int, BusVirtualStorage]:
    """Group a fleet by bus into per-bus virtual storages over `horizon`."""
    by_bus: dict[int, list[EvSpec]] = {}
    for ev in fleet:
        ev.validate()
        if ev.departure_hour > horizon:
            raise NonPositiveParameter(f"{ev.ev_id}: departure hour {ev.departure_hour} beyond horizon {horizon}")
        by_bus.setdefault(ev.bus, []).append(ev)

    out: dict[int, BusVirtualStorage] = {}
    for bus in sorted(by_bus):
        evs = sorted(by_bus[bus], key=lambda e: e.ev_id)
        pch = np.zeros(horizon)
        pdis = np.zeros(horizon)
        emin = np.zeros(horizon)
        emax = np.zeros(horizon)
        arr = np.zeros(horizon)
        dep = np.zeros(horizon)
        for ev in evs:
            arr[ev.arrival_hour] += ev.soc_init * ev.capacity_kwh
            if ev.departure_hour < horizon:
                dep[ev.departure_hour] += ev.soc_desired * ev.capacity_kwh
            for h in range(ev.arrival_hour, ev.departure_hour):
                pch[h] += ev.p_max_ch_kw
                pdis[h] += ev.p_max_dis_kw
                emin[h] += required_soc(ev, h) * ev.capacity_kwh
                emax[h] += ev.soc_max * ev.capacity_kwh
        etas_ch = {ev.eta_ch for ev in evs}
        etas_dis = {ev.eta_dis for ev in evs}
        if len(etas_ch) > 1 or len(etas_dis) > 1:
            log.warning("bus %d mixes efficiencies; virtual storage uses the mean", bus)
        out[bus] = BusVirtualStorage(
            bus=bus,
            horizon=horizon,
            member_ids=tuple(ev.ev_id for ev in evs),
            capacity_kwh=sum(ev.capacity_kwh for ev in evs),
            p_max_ch_kw=pch,
            p_max_dis_kw=pdis,
            e_min_kwh=emin,
            e_max_kwh=emax,
            arrivals_kwh=arr,
            departures_kwh=dep,
            initial_energy_kwh=0.0,
            desired_energy_kwh=sum(ev.soc_desired * ev.capacity_kwh for ev in evs),
            eta_ch=float(np.mean(sorted(etas_ch))),
            eta_dis=float(np.mean(sorted(etas_dis))),
        )
    return out


@dataclass
class AllocationResult:
    """Per-EV split of a bus schedule.  residual_kw is power the members
    could not absorb or supply in some hour (zero when the split is exact)."""

    charge_kw: dict[str, np.ndarray]
    discharge_kw: dict[str, np.ndarray]
    soc: dict[str, np.ndarray]
    residual_kw: np.ndarray


def _waterfill(total: float, caps: np.ndarray) -> np.ndarray:
    """Split `total` across slots proportionally to caps, never exceeding
    a cap; iterates until the residual stops shrinking."""
    total = float(total)
    give = np.zeros_like(caps)
    for _ in range(len(caps) + 1):
        room = caps - give
        open_idx = room > 1e-12
        if total <= 1e-12 or not np.any(open_idx):
            break
        share = total * room[open_idx] / room[open_idx].sum()
        add = np.minimum(share, room[open_idx])
        give[open_idx] += add
        total -= float(add.sum())
    return give


def disaggregate(bus_net_kw: np.ndarray, storage: BusVirtualStorage,
                 fleet: list[EvSpec], *, tol_kw: float = 1e-6,
                 extra_cap_kw: np.ndarray | None = None) -> AllocationResult:
    """Split one bus's net schedule (kW, +charge) into per-EV schedules.

    Chronological proportional split with per-EV caps: charging headroom
    is limited by soc_max and the charger rating; discharging is throttled
    so each EV can still reach soc_desired by departure.  A repair pass
    then shifts charge between hours when some EV misses its target while
    another holds surplus allocation.  Raises InfeasibleAllocation if a
    vehicle still cannot reach its target.

    extra_cap_kw, when given, limits how much the repair may charge above
    the requested schedule at each hour, so retimed energy stays inside
    whatever grid headroom the caller still has.
    """
    members = {ev.ev_id: ev for ev in fleet if ev.ev_id in storage.member_ids}
    if set(members) != set(storage.member_ids):
        missing = set(storage.member_ids) - set(members)
        raise UnknownBus(f"fleet is missing storage members {sorted(missing)}")
    order = sorted(members)
    H = storage.horizon
    charge = {m: np.zeros(H) for m in order}
    discharge = {m: np.zeros(H) for m in order}
    soc = {m: np.full(H + 1, np.nan) for m in order}
    state = {m: members[m].soc_init for m in order}
    residual = np.zeros(H)

    for h in range(H):
        live = [m for m in order if members[m].connected(h)]
        target = float(bus_net_kw[h])
        if live:
            if target >= 0:
                caps = np.array([
                    min(members[m].p_max_ch_kw,
                        max(0.0, (members[m].soc_max - state[m]) * members[m].capacity_kwh / members[m].eta_ch))
                    for m in live
                ])
                got = _waterfill(target, caps)
                for m, g in zip(live, got):
                    charge[m][h] = g
                residual[h] = target - float(got.sum())
            else:
                caps = np.array([
                    min(members[m].p_max_dis_kw,
                        max(0.0, (state[m] - required_soc(members[m], h)) * members[m].capacity_kwh * members[m].eta_dis))
                    for m in live
                ])
                got = _waterfill(-target, caps)
                for m, g in zip(live, got):
                    discharge[m][h] = g
                residual[h] = target + float(got.sum())
        else:
            residual[h] = target
        for m in order:
            ev = members[m]
            if ev.connected(h):
                state[m] = step_soc(ev, state[m], charge[m][h], discharge[m][h])
            soc[m][h + 1] = state[m]

    for m in order:
        soc[m][0] = members[m].soc_init

    # Repair: move charge toward EVs short of target from members with
    # surplus allocation in the same hour.  Move sizes are gated only by
    # numerical noise; tol_kw judges the final shortfall.
    eps = 1e-9
    for m in order:
        ev = members[m]
        if ev.departure_hour > H:
            continue
        short = (ev.soc_desired - soc[m][ev.departure_hour]) * ev.capacity_kwh / ev.eta_ch
        if short <= eps:
            continue
        for h in range(ev.arrival_hour, ev.departure_hour):
            if short <= eps:
                break
            room = min(ev.p_max_ch_kw - charge[m][h],
                       (ev.soc_max - soc[m][h]) * ev.capacity_kwh / ev.eta_ch)
            if room <= eps:
                continue
            for donor in order:
                if donor == m or short <= eps or room <= eps:
                    continue
                dv = members[donor]
                # Only take from a donor that stays above its own ramp.
                slack = min(charge[donor][h],
                            (soc[donor][h + 1] - required_soc(dv, h)) * dv.capacity_kwh / dv.eta_ch
                            if dv.connected(h) else 0.0)
                move = max(0.0, min(room, short, slack))
                if move <= eps:
                    continue
                charge[m][h] += move
                charge[donor][h] -= move
                for mm in (m, donor):
                    s = members[mm].soc_init
                    for hh in range(H):
                        if members[mm].connected(hh):
                            s = step_soc(members[mm], s, charge[mm][hh], discharge[mm][hh])
                        soc[mm][hh + 1] = s
                short = (ev.soc_desired - soc[m][ev.departure_hour]) * ev.capacity_kwh / ev.eta_ch
                room = min(ev.p_max_ch_kw - charge[m][h],
                           (ev.soc_max - soc[m][h]) * ev.capacity_kwh / ev.eta_ch)

    # Second repair: power the bus profile could not place anywhere keeps
    # its energy in a pool; re-time it onto still-short members at hours
    # with headroom.  Both hourly deviations stay documented in residual.
    pool = float(residual[residual > 0.0].sum())
    if extra_cap_kw is None:
        remaining = np.full(H, np.inf)
    else:
        remaining = np.maximum(0.0, np.asarray(extra_cap_kw, dtype=float).copy())
    for m in order:
        ev = members[m]
        if ev.departure_hour > H or pool <= eps:
            continue
        short = (ev.soc_desired - soc[m][ev.departure_hour]) * ev.capacity_kwh / ev.eta_ch
        for h in range(ev.arrival_hour, ev.departure_hour):
            if short <= eps or pool <= eps:
                break
            # extra charge at h lifts the whole SOC suffix; cap by the
            # tightest later-hour ceiling
            suffix = soc[m][h + 1: ev.departure_hour + 1]
            room = min(ev.p_max_ch_kw - charge[m][h],
                       (ev.soc_max - float(np.max(suffix))) * ev.capacity_kwh / ev.eta_ch)
            take = min(max(0.0, room), short, pool, float(remaining[h]))
            if take <= eps:
                continue
            charge[m][h] += take
            residual[h] -= take
            remaining[h] -= take
            pool -= take
            s = ev.soc_init
            for hh in range(H):
                if ev.connected(hh):
                    s = step_soc(ev, s, charge[m][hh], discharge[m][hh])
                soc[m][hh + 1] = s
            short = (ev.soc_desired - soc[m][ev.departure_hour]) * ev.capacity_kwh / ev.eta_ch

    def _refresh(mm: str) -> None:
        s = members[mm].soc_init
        for hh in range(H):
            if members[mm].connected(hh):
                s = step_soc(members[mm], s, charge[mm][hh], discharge[mm][hh])
            soc[mm][hh + 1] = s

    # Third repair: a member with surplus at departure hands charge back at
    # one hour so a short member can take the energy at another hour where
    # it has room.  Handled last because it changes two hourly totals.
    for m in order:
        ev = members[m]
        if ev.departure_hour > H:
            continue
        short = (ev.soc_desired - soc[m][ev.departure_hour]) * ev.capacity_kwh / ev.eta_ch
        if short <= eps:
            continue
        for donor in order:
            if donor == m or short <= eps:
                continue
            dv = members[donor]
            if dv.departure_hour > H:
                continue
            for hd in range(dv.arrival_hour, min(dv.departure_hour, H)):
                if short <= eps:
                    break
                surplus = (soc[donor][dv.departure_hour] - dv.soc_desired) * dv.capacity_kwh / dv.eta_ch
                floor_margin = (float(np.min(soc[donor][hd + 1: dv.departure_hour + 1]))
                                - dv.soc_min) * dv.capacity_kwh / dv.eta_ch
                give = min(charge[donor][hd], surplus, floor_margin)
                if give <= eps:
                    continue
                for hr in range(ev.arrival_hour, min(ev.departure_hour, H)):
                    if give <= eps or short <= eps:
                        break
                    suffix = soc[m][hr + 1: ev.departure_hour + 1]
                    room = min(ev.p_max_ch_kw - charge[m][hr],
                               (ev.soc_max - float(np.max(suffix))) * ev.capacity_kwh / ev.eta_ch)
                    move = min(max(0.0, room), give, short, float(remaining[hr]))
                    if move <= eps:
                        continue
                    charge[donor][hd] -= move
                    charge[m][hr] += move
                    residual[hd] += move
                    residual[hr] -= move
                    remaining[hr] -= move
                    give -= move
                    _refresh(donor)
                    _refresh(m)
                    short = (ev.soc_desired - soc[m][ev.departure_hour]) * ev.capacity_kwh / ev.eta_ch

    for m in order:
        ev = members[m]
        if ev.departure_hour > H:
            continue
        short = (ev.soc_desired - soc[m][ev.departure_hour]) * ev.capacity_kwh / ev.eta_ch
        if short > max(tol_kw, 1e-4):
            raise InfeasibleAllocation(
                f"{m}: short {short:.4f} kW-h of its departure target after repair")

    return AllocationResult(charge_kw=charge, discharge_kw=discharge, soc=soc, residual_kw=residual)
