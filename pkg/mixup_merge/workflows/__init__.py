"""mixup_merge workflows."""

from mixup_merge.workflows.evaluators import parse_evaluator
from mixup_merge.workflows.lab import (
    basin_study,
    build_toy_pair,
    compute_pdr,
    load_pdr_table,
    run_sweep,
    scan_path,
)

__all__ = [
    "basin_study",
    "build_toy_pair",
    "compute_pdr",
    "load_pdr_table",
    "parse_evaluator",
    "run_sweep",
    "scan_path",
]
