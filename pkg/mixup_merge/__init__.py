"""mixup_merge: merging fine-tuned checkpoints with randomly interpolated coefficients."""

from pathlib import Path

__version__ = "0.1.0"

DATA_DIR = Path(__file__).parent / "data"

from mixup_merge.workspace import MergeWorkspace  # noqa: E402

__all__ = ["MergeWorkspace"]
