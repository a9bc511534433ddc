"""Merge recipes: method identifiers and their hyperparameters."""

import itertools
from collections.abc import Iterator
from typing import Literal, get_args

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mixup_merge.errors import RecipeError
from mixup_merge.prng import MASK64
from mixup_merge.sampler import SamplingRecord

__all__ = [
    "M3_METHODS",
    "METHODS",
    "RETAIN_GRID",
    "SCALING_GRID",
    "MergeRecipe",
    "MethodName",
    "RecipeTemplate",
    "SparsifyConfig",
    "iter_grid",
]

MethodName = Literal[
    "average",
    "task_arithmetic",
    "ties",
    "m3_average",
    "m3_task_arithmetic",
    "m3_ties",
]
METHODS: tuple[str, ...] = get_args(MethodName)
M3_METHODS = frozenset({"m3_average", "m3_task_arithmetic", "m3_ties"})
DELTA_METHODS = frozenset({"task_arithmetic", "ties", "m3_task_arithmetic", "m3_ties"})

SCALING_GRID: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
RETAIN_GRID: tuple[float, ...] = (0.5, 0.7, 0.9)

_SCALED = frozenset({"task_arithmetic", "ties", "m3_ties"})
_RETAINED = frozenset({"ties", "m3_ties"})


class SparsifyConfig(BaseModel):
    """DARE drop-and-rescale settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    drop_rate: float = Field(
        default=...,
        description="Probability of zeroing each delta element",
        ge=0,
        lt=1,
    )
    seed: int = Field(
        default=0,
        description="64-bit seed of the drop masks",
        ge=0,
        le=MASK64,
    )


class MergeRecipe(BaseModel):
    """Method identifier plus every hyperparameter of one merge.

    Required fields per method: M3 methods need ``lambda_m``;
    ``task_arithmetic`` needs ``scaling_term``; ``ties`` and ``m3_ties`` need
    ``scaling_term`` and ``retain_ratio``. Fields a method does not use must
    be left unset. With ``grid_search`` on, ``scaling_term`` and
    ``retain_ratio`` must come from the search grids.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    method: MethodName = Field(default=..., description="Merging method")
    lambda_m: float | None = Field(
        default=None,
        description="Interpolation coefficient of the M3 variants",
        gt=0,
        lt=1,
    )
    scaling_term: float | None = Field(
        default=None,
        description="Scaling term applied to the merged task vector",
        allow_inf_nan=False,
    )
    retain_ratio: float | None = Field(
        default=None,
        description="Fraction of largest-magnitude delta entries kept per tensor",
        gt=0,
        le=1,
    )
    dare: SparsifyConfig | None = Field(
        default=None, description="Drop-and-rescale applied to each delta first"
    )
    sampling: SamplingRecord | None = Field(
        default=None, description="Provenance of lambda_m"
    )
    grid_search: bool = Field(
        default=False, description="Restrict hyperparameters to the search grids"
    )

    @model_validator(mode="after")
    def _fields_match_method(self) -> "MergeRecipe":
        m = self.method
        problems = []
        if (m in M3_METHODS) != (self.lambda_m is not None):
            problems.append("lambda_m is required by and only by the M3 methods")
        if self.sampling is not None:
            if m not in M3_METHODS:
                problems.append(f"method {m} takes no sampling record")
            elif self.sampling.lambda_m != self.lambda_m:
                problems.append("sampling.lambda_m differs from lambda_m")
        if (m in _SCALED) != (self.scaling_term is not None):
            problems.append(f"scaling_term is {'required' if m in _SCALED else 'unused'}")
        if (m in _RETAINED) != (self.retain_ratio is not None):
            problems.append(
                f"retain_ratio is {'required' if m in _RETAINED else 'unused'}"
            )
        if self.grid_search:
            if self.scaling_term is not None and self.scaling_term not in SCALING_GRID:
                problems.append(f"scaling_term not in grid {SCALING_GRID}")
            if self.retain_ratio is not None and self.retain_ratio not in RETAIN_GRID:
                problems.append(f"retain_ratio not in grid {RETAIN_GRID}")
        if problems:
            raise ValueError(f"recipe for '{m}': " + "; ".join(problems))
        return self

    @property
    def is_m3(self) -> bool:
        return self.method in M3_METHODS

    @property
    def needs_base(self) -> bool:
        return self.method in DELTA_METHODS or self.dare is not None

    @classmethod
    def create(cls, **fields) -> "MergeRecipe":
        """Build a recipe, turning validation failures into one :class:`RecipeError`."""
        try:
            return cls(**fields)
        except ValidationError as e:
            lines = []
            for err in e.errors():
                loc = ".".join(str(p) for p in err.get("loc", ())) or "recipe"
                lines.append(f"{loc}: {err.get('msg', '')}")
            raise RecipeError("Invalid merge recipe:\n  " + "\n  ".join(lines)) from e


class RecipeTemplate(BaseModel):
    """An M3 recipe whose coefficient is filled in per sweep record."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Literal["m3_average", "m3_task_arithmetic", "m3_ties"] = "m3_average"
    scaling_term: float | None = None
    retain_ratio: float | None = None
    dare: SparsifyConfig | None = None

    def instantiate(self, record: SamplingRecord) -> MergeRecipe:
        return MergeRecipe.create(
            method=self.method,
            lambda_m=record.lambda_m,
            sampling=record,
            scaling_term=self.scaling_term,
            retain_ratio=self.retain_ratio,
            dare=self.dare,
        )


def iter_grid(
    method: Literal["task_arithmetic", "ties"], dare: SparsifyConfig | None = None
) -> Iterator[MergeRecipe]:
    """Enumerate the hyperparameter search space of a baseline method."""
    if method == "task_arithmetic":
        for s in SCALING_GRID:
            yield MergeRecipe(method=method, scaling_term=s, dare=dare, grid_search=True)
    elif method == "ties":
        for s, r in itertools.product(SCALING_GRID, RETAIN_GRID):
            yield MergeRecipe(
                method=method, scaling_term=s, retain_ratio=r, dare=dare, grid_search=True
            )
    else:
        raise RecipeError(f"No hyperparameter grid for method '{method}'")
