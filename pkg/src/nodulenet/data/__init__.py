from .folds import FoldAssignment, make_folds, validation_size
from .labeling import (
    Consensus,
    NoduleRecord,
    consensus_label,
    exclusion_reason,
    filter_scan,
    scan_exclusion_reason,
)
from .patches import PatchPair, extract_patch_pair, normalize_hu
from .prepare import prepare_dataset
from .storage import (
    Dataset,
    load_dataset,
    read_annotations,
    read_index,
    read_volume,
    write_annotations,
    write_dataset,
    write_volume,
)
from .synthetic import DIMS, boundary_shell_statistic, generate_synthetic, resolve_dims

__all__ = [
    "Consensus",
    "DIMS",
    "Dataset",
    "FoldAssignment",
    "NoduleRecord",
    "PatchPair",
    "boundary_shell_statistic",
    "consensus_label",
    "exclusion_reason",
    "extract_patch_pair",
    "filter_scan",
    "generate_synthetic",
    "load_dataset",
    "make_folds",
    "normalize_hu",
    "prepare_dataset",
    "read_annotations",
    "read_index",
    "read_volume",
    "resolve_dims",
    "scan_exclusion_reason",
    "validation_size",
    "write_annotations",
    "write_dataset",
    "write_volume",
]
