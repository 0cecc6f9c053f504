from gridroll.fleet import EvSpec


def make_ev(ev_id="ev1", bus=1, *, capacity=14.0, soc_min=0.2, soc_max=0.9,
            soc_init=0.4, soc_desired=0.9, p_ch=3.7, p_dis=3.7,
            eta_ch=0.9, eta_dis=0.95, cycles=4000.0, dod=0.8,
            battery_cost=22400.0, arrival=18, departure=24) -> EvSpec:
    return EvSpec(
        ev_id=ev_id, bus=bus, capacity_kwh=capacity, soc_min=soc_min,
        soc_max=soc_max, soc_init=soc_init, soc_desired=soc_desired,
        p_max_ch_kw=p_ch, p_max_dis_kw=p_dis, eta_ch=eta_ch, eta_dis=eta_dis,
        cycle_life=cycles, dod=dod, battery_cost=battery_cost,
        arrival_hour=arrival, departure_hour=departure,
    )
