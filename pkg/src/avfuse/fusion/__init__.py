"""Two-stage Fusion Tuning, its baselines, and linear probing."""
from avfuse.fusion.ledger import ConfidenceLedger, finalize_ledger
from avfuse.fusion.masking import (IMAGE, SPECTROGRAM, MaskingPolicy, apply_mask, mask_rng,
                                   masking_ratio, masking_ratios)
from avfuse.fusion.probe import extract_features, linear_probe
from avfuse.fusion.strategies import (STRATEGIES, StagePlan, StrategyResult, read_metrics,
                                      run_strategy, sample_ratios, stage1_train, stage2_train,
                                      write_metrics)
from avfuse.fusion.train import OptimConfig, evaluate, predict, run_epoch

__all__ = [
    "ConfidenceLedger", "finalize_ledger", "MaskingPolicy", "masking_ratio", "masking_ratios",
    "apply_mask", "mask_rng", "IMAGE", "SPECTROGRAM", "linear_probe", "extract_features",
    "StagePlan", "StrategyResult", "STRATEGIES", "run_strategy", "stage1_train", "stage2_train",
    "sample_ratios", "read_metrics", "write_metrics", "OptimConfig", "run_epoch", "predict", "evaluate",
]
