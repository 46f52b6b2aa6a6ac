import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avfuse.data.synthetic import SyntheticSpec, generate_synthetic
from avfuse.errors import ContractError
from avfuse.fusion.ledger import ConfidenceLedger, finalize_ledger
from avfuse.fusion.strategies import stage1_train
from avfuse.fusion.train import OptimConfig
from avfuse.models import Classifier, ModelConfig


def test_single_epoch_mean_is_value():
    led = ConfidenceLedger([3])
    led.record("a", [3], [0.7])
    led.record("v", [3], [0.2])
    finalize_ledger(led)
    assert led.mean("a", 3) == 0.7 and led.mean("v", 3) == 0.2


def test_arithmetic_mean():
    led = ConfidenceLedger([0])
    for c in (0.2, 0.4, 0.9):
        led.record("a", [0], [c])
        led.record("v", [0], [c])
    led.finalize()
    assert led.mean("a", 0) == pytest.approx(0.5, abs=1e-15)


def test_missing_entries_are_listed():
    led = ConfidenceLedger([0, 1, 2])
    led.record("a", [0, 1, 2], [0.5, 0.5, 0.5])
    led.record("v", [0, 2], [0.5, 0.5])
    with pytest.raises(ContractError, match="1/v"):
        led.finalize()


def test_finalized_ledger_is_read_only():
    led = ConfidenceLedger([0])
    led.record("a", [0], [0.5])
    led.record("v", [0], [0.5])
    led.finalize()
    with pytest.raises(ContractError):
        led.record("a", [0], [0.6])


def test_mean_before_finalize_rejected():
    led = ConfidenceLedger([0])
    with pytest.raises(ContractError):
        led.mean("a", 0)


def test_saturated_confidences_stay_open_interval():
    led = ConfidenceLedger([0])
    led.record("a", [0], [1.0])
    led.record("v", [0], [0.0])
    led.finalize()
    assert 0 < led.mean("v", 0) and led.mean("a", 0) < 1


@given(st.lists(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=5), min_size=1, max_size=8))
def test_json_round_trip(histories):
    ids = list(range(len(histories)))
    led = ConfidenceLedger(ids)
    for epoch in range(max(len(h) for h in histories)):
        for i, h in enumerate(histories):
            if epoch < len(h):
                led.record("a", [i], [h[epoch]])
                led.record("v", [i], [1 - h[epoch]])
    led.finalize()
    back = ConfidenceLedger.from_json(led.to_json())
    assert back.finalized and back.to_json() == led.to_json()
    for i, h in enumerate(histories):
        assert back.mean("a", i) == pytest.approx(np.mean(h), abs=1e-15)


def test_json_layout(tmp_path):
    led = ConfidenceLedger([5])
    led.record("a", [5], [0.3])
    led.record("v", [5], [0.6])
    led.finalize()
    led.save(tmp_path / "l.json")
    doc = ConfidenceLedger.load(tmp_path / "l.json").to_json()
    assert doc == {"samples": [{"id": 5, "conf_a": [0.3], "conf_v": [0.6], "mean_a": 0.3, "mean_v": 0.6}]}


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(SyntheticSpec(samples_per_class={"train": 12, "val": 2, "test": 4},
                                            snr_a=3.0, snr_v=0.7, seed=0))


def _stage1(data, modality, epochs, led):
    cfg = ModelConfig(input_shape=data.train.modality(modality).shape[1:], channels=[4, 8], n_classes=6)
    return stage1_train(modality, Classifier(cfg, seed=1), data, epochs, OptimConfig(), 0, led)


def test_two_epochs_record_two_per_sample(tiny):
    n = len(tiny.train)
    led = ConfidenceLedger(tiny.train.ids)
    _stage1(tiny, "a", 2, led)
    _stage1(tiny, "v", 2, led)
    assert led.n_recorded("a") == 2 * n and led.n_recorded("v") == 2 * n
    led.finalize()
    assert len(led.means("a", tiny.train.ids)) == n
    assert all(len(led.history("a", i)) == 2 for i in tiny.train.ids)


def test_stage1_is_deterministic(tiny):
    l1, l2 = ConfidenceLedger(tiny.train.ids), ConfidenceLedger(tiny.train.ids)
    m1 = _stage1(tiny, "a", 2, l1)
    m2 = _stage1(tiny, "a", 2, l2)
    for (_, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert l1.to_json() == l2.to_json()


def test_easy_modality_more_confident():
    gaps = []
    for seed in range(3):
        data = generate_synthetic(SyntheticSpec(snr_a=3.0, snr_v=0.7, seed=seed,
                                                samples_per_class={"train": 30, "val": 2, "test": 4}))
        led = ConfidenceLedger(data.train.ids)
        _stage1(data, "a", 5, led)
        _stage1(data, "v", 5, led)
        led.finalize()
        gaps.append(led.means("a", data.train.ids).mean() - led.means("v", data.train.ids).mean())
    assert np.mean(gaps) > 0
