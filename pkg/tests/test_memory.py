import pytest

from splitprec.experiments import memory_table
from splitprec.memory import ledger_report, memory_model, parse_scenario

N = 2_000_000_000


def per_param(scenario, optimizer="sgdm", **kw):
    led = memory_model(N, scenario, optimizer, **kw)
    return sum(led.current.values()) / N, led.peak_total / N


def test_amp_baselines():
    assert per_param("amp", "sgdm") == (14.0, 14.0)
    assert per_param("amp", "adam") == (18.0, 18.0)
    assert per_param("fp32", "sgdm") == (12.0, 12.0)


def test_split_fused_persistent_bytes():
    persistent, peak = per_param("fp16+16+fused", "sgdm", layers=10, grad_precision="fmt")
    assert persistent == 8.0
    assert peak == pytest.approx(8.0 + 2 / 10)


def test_memuse_reduction_in_range():
    rows = memory_table(["amp", "fp16+16+fused"], ["sgdm"], grad_precision="fmt")
    ours = rows[1]
    assert ours["persistent_reduction_pct"] == pytest.approx(100 * 6 / 14)
    assert 40 <= ours["reduction_pct"] <= 60


def test_fused_only_saves_grad_share():
    rows = {r["scenario"]: r for r in memory_table(["amp", "amp+fused"], ["sgdm"], layers=1000)}
    assert rows["amp+fused"]["persistent_reduction_pct"] == pytest.approx(100 * 4 / 14)
    assert rows["amp+fused"]["reduction_pct"] < rows["amp+fused"]["persistent_reduction_pct"]


def test_activations_dilute_reduction():
    plain = memory_table(["amp", "amp+fused"], ["adam"], n_params=10**6)[1]["reduction_pct"]
    heavy = memory_table(["amp", "amp+fused"], ["adam"], n_params=10**6, activation_bytes=50 * 10**6)[1]
    assert heavy["reduction_pct"] < plain


def test_stochastic_flag_bit_counted():
    led = memory_model(64, "fp16+8+rstoc", "sgd")
    assert led.current["param_extra"] == 64 * 9 // 8


def test_empty_model_all_zero():
    led = memory_model(0, "fp16+16+fused", "adam")
    assert all(v == (0, 0) for v in ledger_report(led).values())


@pytest.mark.parametrize("token", ["bogus", "amp+16", "fp16+8+turbo", "fp32+rstoc", "fp16+17", "fp32+4"])
def test_bad_scenarios_rejected(token):
    with pytest.raises(ValueError):
        parse_scenario(token)


def test_bad_optimizer_rejected():
    with pytest.raises(ValueError):
        memory_model(10, "amp", "lion")
