import numpy as np
import pytest

from otreg.batteries import (BATTERIES, BatteryRow, C_LAYER, fitted_slope, run_battery,
                             write_battery_csv)
from otreg.errors import DomainError


def test_fitted_slope_recovers_power_law():
    x = np.array([0.1, 0.2, 0.4])
    assert fitted_slope(x, 3 * x**1.5) == pytest.approx(1.5, rel=1e-12)


def test_row_ratio_and_pass():
    assert BatteryRow("a", "q", 0.0, 0.0, True).passed
    assert BatteryRow("a", "q", 0.0, 0.0).ratio == 0.0
    assert not BatteryRow("a", "q", 2.0, 1.0).passed


@pytest.mark.parametrize("name", BATTERIES)
def test_battery_passes(name):
    rows = run_battery(name, seed=0)
    assert rows
    failed = [r for r in rows if not r.passed]
    assert not failed, failed[:3]


def test_corrector_ratios_share_one_constant():
    rows = [r for r in run_battery("corrector") if r.quantity == "energy_vs_r_flux"]
    ratios = np.array([r.value for r in rows])
    assert ratios.max() <= C_LAYER
    assert ratios.max() / ratios.min() < 10


def test_battery_csv_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_battery_csv(run_battery("transport", seed=3), a)
    write_battery_csv(run_battery("transport", seed=3), b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "case_id,quantity,value,bound,ratio,pass"


def test_unknown_battery():
    with pytest.raises(DomainError):
        run_battery("nope")
