"""Workspace components of mixup_merge."""

from mixup_merge.components.manifest import ArtifactRef, MergeManifest

__all__ = ["ArtifactRef", "MergeManifest"]
