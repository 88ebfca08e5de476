"""Closed-form speedup-ratio model."""

import pytest

from specalign.latency import LatencyModel, speedup_ratio


def test_worked_example():
    # 25 / (25 + 6 * 1.5) * 5 = 3.676...
    sr = speedup_ratio(LatencyModel(target_ms=25.0, draft_ms=1.5, depth=6, tau=5.0))
    assert abs(sr - 3.68) <= 0.005


def test_zero_draft_cost_gives_tau():
    sr = speedup_ratio(LatencyModel(target_ms=10.0, draft_ms=0.0, depth=6, tau=4.2))
    assert sr == 4.2


def test_arithmetic_case():
    sr = speedup_ratio(LatencyModel(target_ms=10.0, draft_ms=1.0, depth=5, tau=4.0))
    assert abs(sr - 10.0 / 15.0 * 4.0) < 1e-12


def test_exact_closed_form_no_noise():
    model = LatencyModel(target_ms=7.0, draft_ms=0.3, depth=4, tau=3.5)
    assert speedup_ratio(model) == speedup_ratio(model)
    assert speedup_ratio(model) == 7.0 / (7.0 + 4 * 0.3) * 3.5


@pytest.mark.parametrize("bad", [
    LatencyModel(target_ms=0.0),
    LatencyModel(draft_ms=-1.0),
    LatencyModel(depth=0),
    LatencyModel(tau=0.5),
])
def test_invalid_inputs_rejected(bad):
    with pytest.raises(ValueError):
        speedup_ratio(bad)
