"""Synthetic paired-modality data and checkpoint persistence."""
from avfuse.data.checkpoint import (Checkpoint, load_checkpoint, model_from_checkpoint,
                                    read_checkpoint, save_checkpoint)
from avfuse.data.export import export_dataset, import_dataset
from avfuse.data.synthetic import (MultiModalDataset, MultiModalSample, Splits, SyntheticSpec,
                                   generate_synthetic, make_sample, split_dataset)

__all__ = [
    "SyntheticSpec", "MultiModalSample", "MultiModalDataset", "Splits", "generate_synthetic",
    "make_sample", "split_dataset", "Checkpoint", "save_checkpoint", "load_checkpoint",
    "read_checkpoint", "model_from_checkpoint", "export_dataset", "import_dataset",
]
