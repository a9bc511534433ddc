from datetime import datetime, timezone

import pytest

from conftest import random_map
from mixup_merge.components.manifest import SCHEMA_VERSION, MergeManifest
from mixup_merge.errors import ManifestSchemaError, RecipeError
from mixup_merge.methods import merge
from mixup_merge.recipe import (
    RETAIN_GRID,
    SCALING_GRID,
    MergeRecipe,
    RecipeTemplate,
    iter_grid,
)
from mixup_merge.sampler import SamplingRecord, sample_lambda

DIGEST = "0" * 64


def _ref(identity: str = "sha256:0000000000000000") -> dict:
    return {"identity": identity, "digest": DIGEST}


@pytest.fixture
def manifest() -> MergeManifest:
    base, a, b = random_map(0), random_map(1), random_map(2)
    rec = sample_lambda(2.0, 7)
    recipe = MergeRecipe(
        method="m3_ties", lambda_m=rec.lambda_m, sampling=rec, scaling_term=1.0, retain_ratio=0.7
    )
    return merge(recipe, base, [a, b])[1]


# --------------------------------------------------------------------------
# Recipes
# --------------------------------------------------------------------------
@pytest.mark.parametrize(
    ("fields", "match"),
    [
        ({"method": "m3_average"}, "lambda_m is required"),
        ({"method": "average", "lambda_m": 0.5}, "lambda_m is required"),
        ({"method": "task_arithmetic"}, "scaling_term is required"),
        ({"method": "task_arithmetic", "scaling_term": 1.0, "retain_ratio": 0.5}, "unused"),
        ({"method": "ties", "scaling_term": 1.0}, "retain_ratio is required"),
        ({"method": "m3_average", "lambda_m": 1.0}, "less than 1"),
        ({"method": "ties", "scaling_term": 1.0, "retain_ratio": 0.0}, "greater than 0"),
        ({"method": "merge_all"}, "method"),
        (
            {"method": "task_arithmetic", "scaling_term": 0.55, "grid_search": True},
            "not in grid",
        ),
        (
            {
                "method": "m3_average",
                "lambda_m": 0.4,
                "sampling": {"lambda_m": 0.5},
            },
            "differs",
        ),
    ],
)
def test_recipe_validation(fields: dict, match: str):
    with pytest.raises(RecipeError, match="Invalid merge recipe") as excinfo:
        MergeRecipe.create(**fields)
    assert match in str(excinfo.value)


def test_recipe_properties():
    assert MergeRecipe(method="m3_average", lambda_m=0.5).is_m3
    assert not MergeRecipe(method="average").needs_base
    assert MergeRecipe(method="average", dare={"drop_rate": 0.2}).needs_base
    assert MergeRecipe(method="ties", scaling_term=1.0, retain_ratio=0.5).needs_base


def test_search_grids():
    assert len(list(iter_grid("task_arithmetic"))) == len(SCALING_GRID) == 6
    ties = list(iter_grid("ties"))
    assert len(ties) == len(SCALING_GRID) * len(RETAIN_GRID) == 18
    assert all(r.grid_search for r in ties)
    with pytest.raises(RecipeError, match="No hyperparameter grid"):
        list(iter_grid("average"))


def test_template_instantiation():
    template = RecipeTemplate(method="m3_ties", scaling_term=1.0, retain_ratio=0.5)
    rec = sample_lambda(0.5, 3)
    recipe = template.instantiate(rec)
    assert recipe.lambda_m == rec.lambda_m
    assert recipe.sampling == rec
    with pytest.raises(RecipeError, match="scaling_term is unused"):
        RecipeTemplate(method="m3_average", scaling_term=1.0).instantiate(rec)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------
def test_json_round_trip(manifest: MergeManifest):
    stamped = manifest.stamped(datetime(2024, 1, 1, tzinfo=timezone.utc))
    back = MergeManifest.from_json(stamped.to_json())
    assert back == stamped
    assert back.schema_version == SCHEMA_VERSION
    assert back.canonical() == manifest.canonical()
    assert "created" not in manifest.canonical()


def test_manifest_rebuilds_its_recipe(manifest: MergeManifest):
    recipe = manifest.to_recipe()
    assert recipe.method == "m3_ties"
    assert recipe.sampling == manifest.sampling
    assert recipe.retain_ratio == 0.7


def test_sampling_block_follows_the_method():
    with pytest.raises(ManifestSchemaError, match="sampling block"):
        MergeManifest.create({"method": "m3_average", "inputs": [_ref(), _ref()], "output": _ref()})
    with pytest.raises(ManifestSchemaError, match="sampling block"):
        MergeManifest.create(
            {
                "method": "average",
                "inputs": [_ref(), _ref()],
                "output": _ref(),
                "sampling": {"lambda_m": 0.5},
            }
        )


def test_recorded_operations_need_their_blocks():
    with pytest.raises(ManifestSchemaError, match="delta manifest"):
        MergeManifest.create({"method": "delta", "inputs": [_ref()], "output": _ref()})
    with pytest.raises(ManifestSchemaError, match="dare block"):
        MergeManifest.create({"method": "sparsify", "inputs": [_ref()], "output": _ref()})
    with pytest.raises(ManifestSchemaError, match="one coefficient per input"):
        MergeManifest.create(
            {
                "method": "apply",
                "inputs": [_ref(), _ref()],
                "base": _ref(),
                "output": _ref(),
                "coefficients": [1.0],
            }
        )
    with pytest.raises(ManifestSchemaError, match="holds no merge recipe"):
        MergeManifest(method="delta", inputs=[_ref()], base=_ref(), output=_ref()).to_recipe()


def test_schema_errors_list_field_paths():
    with pytest.raises(ManifestSchemaError) as excinfo:
        MergeManifest.create(
            {
                "method": "average",
                "inputs": [{"identity": "x", "digest": "not-hex"}],
                "output": _ref(),
                "comment": "extra",
            }
        )
    msg = str(excinfo.value)
    assert "Invalid/missing fields:" in msg
    assert "inputs.0.digest" in msg
    assert "Unknown fields:" in msg
    assert "comment" in msg


@pytest.mark.parametrize("text", ["{", "[1, 2]"])
def test_manifest_must_be_a_json_object(text: str):
    with pytest.raises(ManifestSchemaError):
        MergeManifest.from_json(text)


def test_explicit_sampling_record_is_valid():
    m = MergeManifest.create(
        {
            "method": "m3_average",
            "inputs": [_ref(), _ref()],
            "output": _ref(),
            "sampling": SamplingRecord(lambda_m=0.5).model_dump(),
        }
    )
    assert not m.sampling.sampled
