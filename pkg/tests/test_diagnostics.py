import csv
import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avfuse.diagnostics import (REFERENCE_FLOPS, ChannelHealthReport, conv_out, count_flops,
                                detect_dead_channels, estimate_epoch_flops, export_flops, export_report,
                                forward_flops, health_report, inject_abnormal, load_report, n_injected,
                                scan_abnormal_bn)
from avfuse.errors import ContractError
from avfuse.models import Classifier, ModelConfig, MultiModalNet, Encoder, norm_layers, wrap_abri
from avfuse.numerics.nn import Linear, Module


def small_model(channels=(16, 32, 48), shape=(1, 8, 8), seed=0):
    return Classifier(ModelConfig(input_shape=shape, channels=list(channels)), seed=seed)


def probes(n=64, shape=(1, 8, 8), seed=0):
    return np.random.default_rng(seed).standard_normal((n,) + shape)


# ---------------------------------------------------------------- scan

def test_scan_pairwise_rule():
    m = small_model(channels=(4,))
    bn = norm_layers(m)[0][1]
    bn.gamma.data[:] = [1e-12, 0.5, 1e-11, 0.3]
    bn.beta.data[:] = [1e-12, 0.1, 1e-12, 1e-12]
    rep = scan_abnormal_bn(m)
    assert rep.layers[0].abnormal_ids == [0, 2]
    assert rep.layers[0].abnormal_ratio == 0.5


def test_scan_threshold_is_strict():
    m = small_model(channels=(2,))
    bn = norm_layers(m)[0][1]
    bn.gamma.data[:] = [1e-10, 1e-11]
    bn.beta.data[:] = 0.0
    assert scan_abnormal_bn(m, 1e-10).layers[0].abnormal_ids == [1]


def test_scan_injected_fraction_03_over_96_channels():
    sick, prov = inject_abnormal(small_model(), 0.3, seed=4)
    rep = scan_abnormal_bn(sick)
    assert sum(len(p["channels"]) for p in prov) == 30
    assert rep.overall_ratio == pytest.approx(30 / 96, abs=0)
    for layer, p in zip(rep.layers, prov):
        assert layer.abnormal_ids == p["channels"]


def test_scan_abri_uses_original_branch():
    sick, prov = inject_abnormal(small_model(), 0.5, seed=1)
    wrap_abri(sick)
    rep = scan_abnormal_bn(sick)
    assert [l.abnormal_ids for l in rep.layers] == [p["channels"] for p in prov]


def test_scan_without_bn_warns():
    class Bare(Module):
        def __init__(self):
            super().__init__()
            self.lin = Linear(2, 2)

    with pytest.warns(UserWarning):
        rep = scan_abnormal_bn(Bare())
    assert rep.layers == [] and rep.overall_ratio == 0.0


def test_scan_is_pure():
    sick, _ = inject_abnormal(small_model(), 0.25, seed=2)
    assert scan_abnormal_bn(sick).to_json() == scan_abnormal_bn(sick).to_json()


# ---------------------------------------------------------------- dead channels

def test_zero_gamma_zero_beta_is_dead_positive_beta_is_not():
    m = small_model(channels=(4, 8))
    bn = norm_layers(m)[0][1]
    bn.gamma.data[[0, 1]] = 0.0
    bn.beta.data[0] = 0.0
    bn.beta.data[1] = 5.0
    dead = detect_dead_channels(m, probes(), "encoder.blocks.0.norm")
    assert 0 in dead["encoder.blocks.0.norm"] and 1 not in dead["encoder.blocks.0.norm"]


def test_injected_channels_are_dead():
    sick, prov = inject_abnormal(small_model(), 0.5, seed=3)
    dead = detect_dead_channels(sick, probes(256), None, 0.99)
    for p in prov:
        assert set(p["channels"]) <= set(dead[p["layer"]])


def test_injected_channels_only_within_tolerance():
    # (1e-12, -1e-12) leaves tiny positive activations where x_hat > 1
    sick, prov = inject_abnormal(small_model(channels=(8,)), 1.0, seed=0)
    strict = detect_dead_channels(sick, probes(256), None, 0.99, activation_tol=0.0)
    tolerant = detect_dead_channels(sick, probes(256), None, 0.99)
    assert len(tolerant["encoder.blocks.0.norm"]) == 8
    assert len(strict["encoder.blocks.0.norm"]) <= 8


def test_selector_must_match():
    with pytest.raises(ContractError):
        detect_dead_channels(small_model(), probes(), "nope.*")


def test_empty_probe_set_rejected():
    with pytest.raises(ContractError):
        detect_dead_channels(small_model(), probes(0), None)


def test_detection_restores_training_flag():
    m = small_model()
    m.train()
    detect_dead_channels(m, probes(8), None)
    assert m.training and all(b.capture is False for b in m.encoder.blocks)


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_dead_set_monotone_in_threshold(seed, lower):
    sick, _ = inject_abnormal(small_model(channels=(4, 8)), 0.5, seed=seed)
    x = probes(32, seed=seed)
    hi = detect_dead_channels(sick, x, None, 1.0)
    lo = detect_dead_channels(sick, x, None, lower)
    for k in hi:
        assert set(hi[k]) <= set(lo[k])


def test_every_injected_channel_abnormal_and_dead():
    sick, prov = inject_abnormal(small_model(), 0.4, magnitude=1e-13, seed=9)
    rep = health_report(sick, probes(128), threshold=1e-10)
    for layer, p in zip(rep.layers, prov):
        assert set(p["channels"]) <= set(layer.abnormal_ids)
        assert set(p["channels"]) <= set(layer.dead_ids)


def test_health_report_on_multimodal_model():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(input_shape=(1, 8, 8), channels=[4, 8])
    net = MultiModalNet(Encoder(cfg, rng), Encoder(cfg, rng), 6)
    xa, xv = probes(16), probes(16, seed=1)
    from avfuse.numerics import Tensor
    rep = health_report(net, np.arange(16), forward=lambda m, idx: m(Tensor(xa[idx]), Tensor(xv[idx])))
    assert [l.name for l in rep.layers] == [n for n, _ in norm_layers(net)]


# ---------------------------------------------------------------- injection

def test_fraction_zero_is_noop():
    m = small_model()
    sick, prov = inject_abnormal(m, 0.0)
    assert prov == []
    for (_, a), (_, b) in zip(norm_layers(m), norm_layers(sick)):
        np.testing.assert_array_equal(a.gamma.data, b.gamma.data)


def test_fraction_one_flags_everything():
    sick, _ = inject_abnormal(small_model(), 1.0, magnitude=1e-12)
    assert all(l.abnormal_ratio == 1.0 for l in scan_abnormal_bn(sick, 1e-10).layers)


def test_injection_deterministic_and_counted():
    m = small_model(channels=(16,))
    _, p1 = inject_abnormal(m, 0.5, seed=11)
    _, p2 = inject_abnormal(m, 0.5, seed=11)
    assert len(p1[0]["channels"]) == 8 and p1 == p2


def test_injection_does_not_touch_input_model():
    m = small_model()
    before = [bn.gamma.data.copy() for _, bn in norm_layers(m)]
    inject_abnormal(m, 0.7)
    for g, (_, bn) in zip(before, norm_layers(m)):
        np.testing.assert_array_equal(g, bn.gamma.data)


@pytest.mark.parametrize("fraction", [-0.1, 1.5])
def test_fraction_out_of_range(fraction):
    with pytest.raises(ContractError):
        inject_abnormal(small_model(), fraction)


@given(st.floats(0, 1), st.integers(1, 200))
def test_injected_count_is_ceiling(fraction, c):
    k = n_injected(fraction, c)
    assert 0 <= k <= c
    assert k >= fraction * c - 1e-6 and k < fraction * c + 1


def test_positive_beta_injection_is_abnormal_not_dead():
    sick, prov = inject_abnormal(small_model(channels=(8,)), 0.5, sign_of_beta=1, seed=0)
    # outputs are ~1e-12 but strictly positive for most samples
    rep = health_report(sick, probes(64), activation_tol=0.0)
    assert rep.layers[0].abnormal_ids == prov[0]["channels"]
    assert not set(rep.layers[0].dead_ids) & set(prov[0]["channels"])


# ---------------------------------------------------------------- FLOPs

@pytest.mark.parametrize("name,ratio", [("kinetics-sounds", 1.36), ("ave", 1.56), ("ucf-101", 1.40)])
def test_reference_ratios(name, ratio):
    t = REFERENCE_FLOPS[name]
    assert count_flops(t["phases"], t["reference"], t["comparison"]).ratio == pytest.approx(ratio, abs=0.01)


def test_identical_sets_ratio_one():
    led = count_flops({"x": (3.0, 2.0), "y": (5.0, 7.0)}, ["x", "y"], ["x", "y"])
    assert led.ratio == 1.0


def test_flops_reject_non_positive():
    with pytest.raises(ContractError):
        count_flops({"x": (0.0, 2.0)}, ["x"], ["x"])
    with pytest.raises(ContractError):
        count_flops({"x": (1.0, 2.0)}, ["x"], ["missing"])


@given(st.lists(st.tuples(st.floats(1, 1e12), st.floats(1, 500)), min_size=2, max_size=6))
def test_flops_totals_are_sums(entries):
    phases = {f"p{i}": e for i, e in enumerate(entries)}
    names = list(phases)
    led = count_flops(phases, names[:1], names[1:])
    assert led.comparison_total == pytest.approx(sum(f * e for f, e in entries[1:]))
    assert led.ratio > 0


def test_single_pointwise_conv():
    from avfuse.diagnostics import conv_flops
    assert conv_flops(1, 1, 1, conv_out(8, 1, 1, 0), conv_out(8, 1, 1, 0)) == 128


def _brute_force_forward_flops(cfg):
    """Independent count: walk every output position and tally operations one by one."""
    c_in, h, w = cfg.input_shape
    total = 0
    for c_out in cfg.channels:
        ho, wo = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
        for _o in range(c_out):
            for _i in range(ho):
                for _j in range(wo):
                    total += 2 * 3 * 3 * c_in      # multiply-adds
                    total += 4                     # subtract mean, divide, scale, shift
                    total += 1                     # ReLU
        c_in, h, w = c_out, ho, wo
    total += c_in * h * w
    total += cfg.n_classes * (2 * c_in + 1)
    return total


def test_forward_flops_brute_force():
    cfg = ModelConfig(input_shape=(1, 32, 32), channels=[16, 32, 64])
    assert forward_flops(cfg) == _brute_force_forward_flops(cfg)


def test_epoch_flops_linear_in_dataset():
    cfg = ModelConfig(input_shape=(1, 32, 32), channels=[16, 32, 64])
    assert estimate_epoch_flops(cfg, 200) == 2 * estimate_epoch_flops(cfg, 100)
    assert estimate_epoch_flops(cfg, 1) == 3 * forward_flops(cfg)
    assert estimate_epoch_flops(cfg, 10, abri=True) > estimate_epoch_flops(cfg, 10)


# ---------------------------------------------------------------- export

def test_json_round_trip(tmp_path):
    sick, _ = inject_abnormal(small_model(), 0.3)
    rep = health_report(sick, probes(32))
    path = export_report(rep, tmp_path / "r.json")
    back = load_report(path)
    assert back.to_json() == rep.to_json()
    doc = json.loads(path.read_text())
    assert set(doc) >= {"model", "threshold", "layers"}
    assert set(doc["layers"][0]) == {"name", "channels", "abnormal_ratio", "abnormal_ids", "dead_ids"}


def test_csv_one_row_per_layer_in_model_order(tmp_path):
    m = small_model()
    rep = scan_abnormal_bn(m)
    path = export_report(rep, tmp_path / "r.csv", "csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["name", "channels", "abnormal_ratio", "n_dead"]
    assert [r[0] for r in rows[1:]] == [n for n, _ in norm_layers(m)]


def test_empty_report_has_header(tmp_path):
    path = export_report(ChannelHealthReport("empty", 1e-10), tmp_path / "e.csv", "csv")
    assert path.read_text().splitlines() == ["name,channels,abnormal_ratio,n_dead"]
    j = export_report(ChannelHealthReport("empty", 1e-10), tmp_path / "e.json")
    assert json.loads(j.read_text())["layers"] == []


def test_export_unknown_format(tmp_path):
    with pytest.raises(ContractError):
        export_report(ChannelHealthReport("x", 1e-10), tmp_path / "x.txt", "xml")


def test_export_io_error_names_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        export_report(ChannelHealthReport("x", 1e-10), tmp_path / "missing" / "r.json")


def test_flops_csv(tmp_path):
    t = REFERENCE_FLOPS["ave"]
    led = count_flops(t["phases"], t["reference"], t["comparison"])
    rows = list(csv.DictReader(export_flops(led, tmp_path / "f.csv").open()))
    assert [r["phase"] for r in rows] == list(t["phases"])
    assert float(rows[0]["total"]) == pytest.approx(2.36e10 * 50)
