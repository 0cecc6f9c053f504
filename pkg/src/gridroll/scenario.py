"""Scenario files: fleet, feeder, prices, and stage configuration.

A scenario is one JSON document.  Loading validates the whole file and
reports every problem at once with its JSON path, so a config typo does
not turn into a mid-run solver error.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .bm import RollingConfig
from .fleet import EvSpec
from .grid import Branch, NetworkModel
from .negotiation import NegotiationConfig


class ParseError(ValueError):
    """Scenario or price file is not readable as structured data."""


class ValidationError(ValueError):
    """Scenario content is inconsistent; .problems lists every finding."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("scenario validation failed:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class RunFlags:
    include_boc: bool = True   # battery wear priced into both market stages
    use_rwo: bool = True       # rolling re-optimisation (False = one shot)
    force_te: bool = False     # negotiate even without predicted violations


@dataclass
class Scenario:
    name: str
    horizon: int
    seed: int
    forecast_error_rate: float
    dam_prices: np.ndarray
    bm_prices: np.ndarray
    network: NetworkModel
    fleet: list[EvSpec]
    aggregators: dict[str, tuple[str, ...]]
    rolling: RollingConfig
    negotiation: NegotiationConfig
    flags: RunFlags

    def fleet_of(self, aggregator: str) -> list[EvSpec]:
        ids = set(self.aggregators[aggregator])
        return [ev for ev in self.fleet if ev.ev_id in ids]


_EV_TYPE_FIELDS = {
    "capacity_kwh", "soc_min", "soc_max", "p_max_ch_kw", "p_max_dis_kw",
    "eta_ch", "eta_dis", "cycle_life", "dod", "battery_cost",
}
_EV_FIELDS = {"id", "type", "bus", "arrival_hour", "departure_hour",
              "soc_init", "soc_desired"}


def _num(problems: list[str], obj: dict, key: str, path: str, *, default=None,
         kind=float, minimum=None, maximum=None):
    if key not in obj:
        if default is not None:
            return default
        problems.append(f"{path}.{key}: missing")
        return None
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        problems.append(f"{path}.{key}: expected a number, got {type(v).__name__}")
        return None
    if kind is int and int(v) != v:
        problems.append(f"{path}.{key}: expected an integer, got {v}")
        return None
    v = kind(v)
    if minimum is not None and v < minimum:
        problems.append(f"{path}.{key}: {v} below minimum {minimum}")
        return None
    if maximum is not None and v > maximum:
        problems.append(f"{path}.{key}: {v} above maximum {maximum}")
        return None
    return v


def _price_list(problems: list[str], raw: Any, path: str, horizon: int) -> np.ndarray:
    if not isinstance(raw, list):
        problems.append(f"{path}: expected a list of {horizon} prices")
        return np.zeros(horizon)
    if len(raw) != horizon:
        problems.append(f"{path}: expected {horizon} values, got {len(raw)}")
        return np.zeros(horizon)
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        problems.append(f"{path}: non-numeric entry")
        return np.zeros(horizon)
    if not np.all(np.isfinite(arr)):
        problems.append(f"{path}: non-finite entry")
    return arr


def _build_network(problems: list[str], raw: Any, horizon: int) -> NetworkModel | None:
    if not isinstance(raw, dict):
        problems.append("network: missing or not an object")
        return None
    n = _num(problems, raw, "n_bus", "network", kind=int, minimum=2)
    slack = _num(problems, raw, "slack", "network", default=0, kind=int, minimum=0)
    s_base = _num(problems, raw, "s_base_kva", "network", minimum=1e-9)
    v_slack = _num(problems, raw, "slack_voltage", "network", default=1.0, minimum=0.5)
    v_min = _num(problems, raw, "v_min", "network", default=0.9, minimum=0.0)
    v_max = _num(problems, raw, "v_max", "network", default=1.1)
    limit = _num(problems, raw, "transformer_limit_kw", "network", minimum=1e-9)
    if None in (n, slack, s_base, v_slack, v_min, v_max, limit):
        return None
    if v_min >= v_max:
        problems.append(f"network: v_min {v_min} must stay below v_max {v_max}")
    if slack >= n:
        problems.append(f"network.slack: {slack} outside 0..{n - 1}")
        return None

    branches = []
    raw_branches = raw.get("branches")
    if not isinstance(raw_branches, list) or not raw_branches:
        problems.append("network.branches: missing or empty")
        return None
    for i, rb in enumerate(raw_branches):
        path = f"network.branches[{i}]"
        if not isinstance(rb, dict):
            problems.append(f"{path}: expected an object")
            continue
        f = _num(problems, rb, "from_bus", path, kind=int, minimum=0, maximum=n - 1)
        t = _num(problems, rb, "to_bus", path, kind=int, minimum=0, maximum=n - 1)
        r = _num(problems, rb, "r_pu", path, minimum=1e-12)
        x = _num(problems, rb, "x_pu", path, minimum=0.0)
        if None in (f, t, r, x):
            continue
        if f == t:
            problems.append(f"{path}: from_bus equals to_bus ({f})")
            continue
        branches.append(Branch(f, t, r, x))

    # every bus must be reachable from the slack or the power flow is singular
    if branches:
        seen = {slack}
        frontier = [slack]
        adj: dict[int, list[int]] = {}
        for br in branches:
            adj.setdefault(br.from_bus, []).append(br.to_bus)
            adj.setdefault(br.to_bus, []).append(br.from_bus)
        while frontier:
            b = frontier.pop()
            for nb in adj.get(b, []):
                if nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        unreachable = sorted(set(range(n)) - seen)
        if unreachable:
            problems.append(f"network.branches: buses {unreachable} not connected to the slack")

    base = np.zeros((n, horizon))
    raw_base = raw.get("base_load_kw", {})
    if not isinstance(raw_base, dict):
        problems.append("network.base_load_kw: expected an object keyed by bus")
    else:
        for key, vals in raw_base.items():
            try:
                bus = int(key)
            except ValueError:
                problems.append(f"network.base_load_kw.{key}: key is not a bus index")
                continue
            if not 0 <= bus < n:
                problems.append(f"network.base_load_kw.{key}: bus outside 0..{n - 1}")
                continue
            arr = _price_list(problems, vals, f"network.base_load_kw.{key}", horizon)
            base[bus] = arr

    return NetworkModel(n_bus=n, slack=slack, branches=tuple(branches),
                        s_base_kva=s_base, slack_voltage=v_slack, v_min=v_min,
                        v_max=v_max, transformer_limit_kw=limit, base_load_kw=base)


def _build_fleet(problems: list[str], raw_types: Any, raw_aggs: Any, horizon: int,
                 network: NetworkModel | None) -> tuple[list[EvSpec], dict[str, tuple[str, ...]]]:
    types: dict[str, dict] = {}
    if not isinstance(raw_types, dict) or not raw_types:
        problems.append("ev_types: missing or empty")
    else:
        for name, spec in raw_types.items():
            path = f"ev_types.{name}"
            if not isinstance(spec, dict):
                problems.append(f"{path}: expected an object")
                continue
            missing = _EV_TYPE_FIELDS - set(spec)
            extra = set(spec) - _EV_TYPE_FIELDS
            if missing:
                problems.append(f"{path}: missing fields {sorted(missing)}")
            if extra:
                problems.append(f"{path}: unknown fields {sorted(extra)}")
            if not missing:
                types[name] = spec

    fleet: list[EvSpec] = []
    aggregators: dict[str, tuple[str, ...]] = {}
    seen_ids: set[str] = set()
    if not isinstance(raw_aggs, list) or not raw_aggs:
        problems.append("aggregators: missing or empty")
        return fleet, aggregators
    for i, agg in enumerate(raw_aggs):
        apath = f"aggregators[{i}]"
        if not isinstance(agg, dict) or "name" not in agg:
            problems.append(f"{apath}: expected an object with a name")
            continue
        name = str(agg["name"])
        if name in aggregators:
            problems.append(f"{apath}.name: duplicate aggregator {name!r}")
            continue
        evs = agg.get("evs")
        if not isinstance(evs, list) or not evs:
            problems.append(f"{apath}.evs: missing or empty")
            aggregators[name] = ()
            continue
        ids = []
        for j, ev in enumerate(evs):
            path = f"{apath}.evs[{j}]"
            if not isinstance(ev, dict):
                problems.append(f"{path}: expected an object")
                continue
            extra = set(ev) - _EV_FIELDS
            if extra:
                problems.append(f"{path}: unknown fields {sorted(extra)}")
            ev_id = ev.get("id")
            if not isinstance(ev_id, str) or not ev_id:
                problems.append(f"{path}.id: missing")
                continue
            if ev_id in seen_ids:
                problems.append(f"{path}.id: duplicate vehicle id {ev_id!r}")
                continue
            tname = ev.get("type")
            if tname not in types:
                problems.append(f"{path}.type: unknown ev type {tname!r}")
                continue
            t = types[tname]
            bus = _num(problems, ev, "bus", path, kind=int, minimum=0)
            arr = _num(problems, ev, "arrival_hour", path, kind=int, minimum=0)
            dep = _num(problems, ev, "departure_hour", path, kind=int, minimum=1)
            s0 = _num(problems, ev, "soc_init", path, minimum=0.0, maximum=1.0)
            sd = _num(problems, ev, "soc_desired", path, minimum=0.0, maximum=1.0)
            if None in (bus, arr, dep, s0, sd):
                continue
            if network is not None:
                if not 0 <= bus < network.n_bus:
                    problems.append(f"{path}.bus: {bus} outside 0..{network.n_bus - 1}")
                    continue
                if bus == network.slack:
                    problems.append(f"{path}.bus: {bus} is the slack bus")
                    continue
            if dep > horizon:
                problems.append(f"{path}.departure_hour: {dep} beyond horizon {horizon}")
                continue
            spec = EvSpec(ev_id=ev_id, bus=bus, capacity_kwh=t["capacity_kwh"],
                          soc_min=t["soc_min"], soc_max=t["soc_max"], soc_init=s0,
                          soc_desired=sd, p_max_ch_kw=t["p_max_ch_kw"],
                          p_max_dis_kw=t["p_max_dis_kw"], eta_ch=t["eta_ch"],
                          eta_dis=t["eta_dis"], cycle_life=t["cycle_life"],
                          dod=t["dod"], battery_cost=t["battery_cost"],
                          arrival_hour=arr, departure_hour=dep)
            try:
                spec.validate()
            except ValueError as exc:
                problems.append(f"{path}: {exc}")
                continue
            seen_ids.add(ev_id)
            ids.append(ev_id)
            fleet.append(spec)
        aggregators[name] = tuple(ids)
    return fleet, aggregators


def scenario_from_dict(raw: dict) -> Scenario:
    """Build and fully validate a scenario; raises ValidationError with
    every problem found."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ValidationError(["scenario: expected a JSON object"])
    name = str(raw.get("name", "unnamed"))
    horizon = _num(problems, raw, "horizon_hours", "scenario", kind=int, minimum=1)
    seed = _num(problems, raw, "seed", "scenario", default=0, kind=int, minimum=0)
    rate = _num(problems, raw, "forecast_error_rate", "scenario", default=0.015, minimum=0.0)
    if horizon is None:
        raise ValidationError(problems)

    prices = raw.get("prices")
    if not isinstance(prices, dict):
        problems.append("prices: missing or not an object")
        dam = bm = np.zeros(horizon)
    else:
        dam = _price_list(problems, prices.get("dam"), "prices.dam", horizon)
        bm = _price_list(problems, prices.get("bm"), "prices.bm", horizon)

    network = _build_network(problems, raw.get("network"), horizon)
    fleet, aggregators = _build_fleet(problems, raw.get("ev_types"),
                                      raw.get("aggregators"), horizon, network)

    rolling = RollingConfig(**raw.get("rolling", {})) if isinstance(raw.get("rolling", {}), dict) else RollingConfig()
    try:
        rolling.validate()
    except (TypeError, ValueError) as exc:
        problems.append(f"rolling: {exc}")
        rolling = RollingConfig()
    try:
        negotiation = NegotiationConfig(**raw.get("negotiation", {}))
        negotiation.validate()
    except (TypeError, ValueError) as exc:
        problems.append(f"negotiation: {exc}")
        negotiation = NegotiationConfig()
    try:
        flags = RunFlags(**raw.get("flags", {}))
    except TypeError as exc:
        problems.append(f"flags: {exc}")
        flags = RunFlags()

    if problems:
        raise ValidationError(problems)
    return Scenario(name=name, horizon=horizon, seed=seed, forecast_error_rate=rate,
                    dam_prices=dam, bm_prices=bm, network=network, fleet=fleet,
                    aggregators=aggregators, rolling=rolling,
                    negotiation=negotiation, flags=flags)


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}") from exc
    return scenario_from_dict(raw)


def default_scenario() -> Scenario:
    """The bundled suburban-feeder study case."""
    with resources.files("gridroll").joinpath("data/default_scenario.json").open() as fh:
        return scenario_from_dict(json.load(fh))


def bm_price_forecaster(actual: np.ndarray, *, seed: int,
                        error_rate_per_hour: float) -> Callable[[int, Sequence[int]], np.ndarray]:
    """Balancing-price forecaster whose error grows with lead time.

    The relative error of the price for hour h, seen from a window opening
    at hour w, is uniform within +-error_rate_per_hour * (h - w + 1).  The
    draw is keyed on (seed, window, lead), so re-running a scenario gives
    the same forecasts and successive windows revise earlier ones.
    """
    actual = np.asarray(actual, dtype=float)

    def forecast(window_start: int, hours: Sequence[int]) -> np.ndarray:
        out = np.empty(len(hours))
        for k, h in enumerate(hours):
            lead = h - window_start
            bound = error_rate_per_hour * (lead + 1)
            rng = np.random.default_rng([seed, window_start, lead])
            out[k] = actual[h] * (1.0 + rng.uniform(-bound, bound))
        return out

    return forecast


def read_price_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an hour,dam_price,bm_price table covering hours 0..H-1."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read price file {path}: {exc}") from exc
    if not rows or [c.strip().lower() for c in rows[0]] != ["hour", "dam_price", "bm_price"]:
        raise ParseError(f"{path}: header must be hour,dam_price,bm_price")
    seen: dict[int, tuple[float, float]] = {}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ParseError(f"{path}:{i}: expected 3 columns")
        try:
            h, d, b = int(row[0]), float(row[1]), float(row[2])
        except ValueError as exc:
            raise ParseError(f"{path}:{i}: {exc}") from exc
        if h in seen:
            raise ParseError(f"{path}:{i}: duplicate hour {h}")
        seen[h] = (d, b)
    horizon = len(seen)
    missing = sorted(set(range(horizon)) - set(seen))
    if missing:
        raise ParseError(f"{path}: hours must cover 0..{horizon - 1}; missing {missing}")
    dam = np.array([seen[h][0] for h in range(horizon)])
    bm = np.array([seen[h][1] for h in range(horizon)])
    return dam, bm
