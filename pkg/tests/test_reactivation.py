import numpy as np
import pytest

from avfuse.batchnorm import ABRiLayer
from avfuse.diagnostics import inject_abnormal
from avfuse.errors import ContractError
from avfuse.models import Classifier, ModelConfig, norm_layers
from avfuse.reactivation import ReactivationSettings, count_dead, prepare_finetune, reactivation_trial


def _base(in_ch=1):
    return Classifier(ModelConfig(input_shape=(in_ch, 8, 8), channels=[4, 8]), seed=0)


def test_prepare_keeps_source_untouched():
    base = _base()
    before = base.head.weight.data.copy()
    m = prepare_finetune(base, (1, 8, 8), 6, seed=1, abri=True)
    assert np.array_equal(base.head.weight.data, before)
    assert all(isinstance(l, ABRiLayer) for _, l in norm_layers(m))
    assert not any(isinstance(l, ABRiLayer) for _, l in norm_layers(base))


def test_new_head_is_seeded():
    a = prepare_finetune(_base(), (1, 8, 8), 6, seed=3)
    b = prepare_finetune(_base(), (1, 8, 8), 6, seed=3)
    assert np.array_equal(a.head.weight.data, b.head.weight.data)


def test_channel_change_needs_cross_modal():
    with pytest.raises(ContractError):
        prepare_finetune(_base(1), (3, 8, 8), 6, seed=0)
    m = prepare_finetune(_base(1), (3, 8, 8), 6, seed=0, cross_modal=True)
    from avfuse.numerics import Tensor
    assert m(Tensor(np.zeros((2, 3, 8, 8)))).shape == (2, 6)


def test_count_dead_sees_injection():
    sick, prov = inject_abnormal(_base(), 1.0)
    probes = np.random.default_rng(0).standard_normal((64, 1, 8, 8))
    assert count_dead(sick, probes) == sum(len(p["channels"]) for p in prov) == 12


def test_tiny_trial_reports_both_arms():
    s = ReactivationSettings(channels=[4, 8], pretrain_epochs=1, finetune_epochs=1, probe_samples=16,
                             samples_per_class={"train": 6, "val": 1, "test": 2})
    out = reactivation_trial(0, s)
    assert set(out) == {"seed", "injected", "vanilla_dead", "vanilla_acc", "abri_dead", "abri_acc"}
    assert out["injected"] == 6
    assert out == reactivation_trial(0, s)
