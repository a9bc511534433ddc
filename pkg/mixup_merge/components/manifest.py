"""Merge manifest: the provenance record written next to every produced checkpoint."""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mixup_merge import __version__
from mixup_merge.errors import ManifestSchemaError
from mixup_merge.recipe import M3_METHODS, MergeRecipe, SparsifyConfig
from mixup_merge.sampler import SamplingRecord

__all__ = ["ArtifactRef", "MergeManifest", "SCHEMA_VERSION"]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "mixup-merge-manifest/1"

ManifestMethod = Literal[
    "average",
    "task_arithmetic",
    "ties",
    "m3_average",
    "m3_task_arithmetic",
    "m3_ties",
    "delta",
    "sparsify",
    "apply",
]


class ArtifactRef(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    identity: str = Field(default=..., description="Checkpoint identity string")
    digest: str = Field(
        default=...,
        description="SHA-256 of the checkpoint file bytes, lowercase hex",
        pattern=r"^[0-9a-f]{64}$",
    )


class MergeManifest(BaseModel):
    """Everything needed to replay one merge bit-identically.

    ``sampling`` is present exactly for the M3 methods. ``created`` is left
    empty by the pure merge functions and stamped when the manifest is written.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal["mixup-merge-manifest/1"] = Field(
        default=SCHEMA_VERSION, description="Manifest schema identifier"
    )
    method: ManifestMethod = Field(default=..., description="Operation that produced the output")
    inputs: tuple[ArtifactRef, ...] = Field(
        default=..., description="Input checkpoints in merge order", min_length=1
    )
    base: ArtifactRef | None = Field(
        default=None, description="Pretrained checkpoint of the delta-space methods"
    )
    output: ArtifactRef = Field(default=..., description="Produced checkpoint")
    scaling_term: float | None = Field(default=None, description="Task vector scaling")
    retain_ratio: float | None = Field(default=None, description="TIES retain ratio")
    coefficients: tuple[float, ...] | None = Field(
        default=None, description="Weights of the delta files added to the base"
    )
    dare: SparsifyConfig | None = Field(
        default=None, description="Drop rate and seed of DARE sparsification"
    )
    sampling: SamplingRecord | None = Field(
        default=None, description="alpha, seed and lambda_m of the M3 variants"
    )
    toolkit_version: str = Field(default=__version__, description="mixup_merge version")
    created: datetime | None = Field(default=None, description="Time the manifest was written")

    @model_validator(mode="after")
    def _blocks_match_method(self) -> "MergeManifest":
        m = self.method
        if (m in M3_METHODS) != (self.sampling is not None):
            raise ValueError(
                f"sampling block must be present exactly for the M3 methods, method is '{m}'"
            )
        if m == "delta" and (self.base is None or len(self.inputs) != 1):
            raise ValueError("a delta manifest needs one input and a base")
        if m == "sparsify" and (self.dare is None or len(self.inputs) != 1):
            raise ValueError("a sparsify manifest needs one input and a dare block")
        if (m == "apply") != (self.coefficients is not None):
            raise ValueError("coefficients are recorded exactly for apply manifests")
        if m == "apply" and (self.base is None or len(self.coefficients) != len(self.inputs)):
            raise ValueError("an apply manifest needs a base and one coefficient per input")
        return self

    @property
    def is_merge(self) -> bool:
        return self.method not in ("delta", "sparsify", "apply")

    def to_recipe(self) -> MergeRecipe:
        """Rebuild the recipe of a merge manifest."""
        if not self.is_merge:
            raise ManifestSchemaError(f"A '{self.method}' manifest holds no merge recipe")
        return MergeRecipe.create(
            method=self.method,
            lambda_m=self.sampling.lambda_m if self.sampling else None,
            sampling=self.sampling,
            scaling_term=self.scaling_term,
            retain_ratio=self.retain_ratio,
            dare=self.dare,
        )

    def stamped(self, when: datetime | None = None) -> "MergeManifest":
        return self.model_copy(update={"created": when or datetime.now().astimezone()})

    def canonical(self) -> dict:
        """Content used for determinism checks: everything except ``created``."""
        return self.model_dump(mode="json", exclude={"created"})

    def to_json(self) -> str:
        return self.model_dump_json(indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "MergeManifest":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ManifestSchemaError(f"Manifest is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ManifestSchemaError("Manifest must be a JSON object")
        return MergeManifest.create(data)

    @staticmethod
    def from_file(path: Path | str) -> "MergeManifest":
        return MergeManifest.from_json(Path(path).read_text(encoding="utf-8"))

    @staticmethod
    def create(data: dict) -> "MergeManifest":
        """Validate a manifest dict, reporting every problem with its field path."""
        try:
            return MergeManifest(**data)
        except ValidationError as e:
            invalid: list[str] = []
            unknown: list[str] = []
            for err in e.errors():
                path = ".".join(str(p) for p in err.get("loc", ())) or "<manifest>"
                if err.get("type") == "extra_forbidden":
                    unknown.append(path)
                else:
                    invalid.append(f"{path}: {err.get('msg', '')}")
            msg_lines = []
            if invalid:
                msg_lines.append("Invalid/missing fields:\n  " + "\n  ".join(invalid))
            if unknown:
                msg_lines.append("Unknown fields:\n  " + "\n  ".join(unknown))
            raise ManifestSchemaError("\n\n".join(msg_lines)) from e
