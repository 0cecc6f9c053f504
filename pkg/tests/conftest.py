import pytest

from helpers import make_ev
from gridroll.fleet import EvSpec


@pytest.fixture
def type1_ev() -> EvSpec:
    """14 kWh vehicle with 3.7 kW charger, the small fleet type."""
    return make_ev()


@pytest.fixture
def type2_ev() -> EvSpec:
    """25 kWh vehicle with 5.28 kW charger, the large fleet type."""
    return make_ev("ev2", capacity=25.0, soc_max=0.85, soc_desired=0.85,
                   p_ch=5.28, p_dis=5.28, battery_cost=40000.0)
