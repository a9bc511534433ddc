import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dyadic_map, random_map
from mixup_merge.errors import RecipeError, ReplayError, ShapeMismatchError
from mixup_merge.methods import (
    apply,
    average_merge,
    dare_sparsify,
    m3_average,
    m3_task_arithmetic,
    merge,
    replay,
    sparsify,
    take_delta,
    task_arithmetic,
    ties_m3_merge,
    ties_merge,
    ties_work,
)
from mixup_merge.recipe import MergeRecipe, SparsifyConfig
from mixup_merge.sampler import sample_lambda
from mixup_merge.tensors import DeltaSet, TensorMap, delta


def _ties_oracle(
    base: TensorMap, models: list[TensorMap], retain_ratio: float, scaling: float
) -> dict[str, np.ndarray]:
    """Element-by-element TIES over Python lists."""
    out = {}
    for name in base:
        b = base.as_float64(name).ravel()
        offsets = [m.as_float64(name).ravel() - b for m in models]
        n = b.size
        k = min(n, math.ceil(round(retain_ratio * n, 6)))
        kept = []
        for d in offsets:
            top = sorted(range(n), key=lambda i: (-abs(d[i]), i))[:k]
            t = [0.0] * n
            for i in top:
                t[i] = float(d[i])
            kept.append(t)
        merged = []
        for i in range(n):
            pos = sum(t[i] for t in kept if t[i] > 0)
            neg = sum(-t[i] for t in kept if t[i] < 0)
            if pos == 0 and neg == 0:
                merged.append(0.0)
                continue
            up = pos >= neg
            agree = [t[i] for t in kept if t[i] != 0 and (t[i] > 0) == up]
            merged.append(sum(agree) / len(agree))
        out[name] = (b + scaling * np.array(merged)).reshape(base[name].shape)
    return out


def _ties_m3_oracle(
    base: TensorMap, t1: TensorMap, t2: TensorMap, retain_ratio: float, lam: float
) -> dict[str, np.ndarray]:
    """Element-by-element trim, elect and disjoint interpolation of two tasks."""
    out = {}
    for name in base:
        b = base.as_float64(name).ravel()
        n = b.size
        k = min(n, math.ceil(round(retain_ratio * n, 6)))
        kept = []
        for m in (t1, t2):
            d = m.as_float64(name).ravel() - b
            top = set(sorted(range(n), key=lambda i: (-abs(d[i]), i))[:k])
            kept.append([float(d[i]) if i in top else 0.0 for i in range(n)])
        merged = []
        for i in range(n):
            x, y = kept[0][i], kept[1][i]
            pos = max(x, 0.0) + max(y, 0.0)
            neg = max(-x, 0.0) + max(-y, 0.0)
            if pos == 0 and neg == 0:
                merged.append(0.0)
                continue
            up = pos >= neg
            agree_x = x != 0 and (x > 0) == up
            agree_y = y != 0 and (y > 0) == up
            if agree_x and agree_y:
                merged.append(lam * x + (1.0 - lam) * y)
            elif agree_x:
                merged.append(x)
            elif agree_y:
                merged.append(y)
            else:
                merged.append(0.0)
        out[name] = (b + np.array(merged)).reshape(base[name].shape)
    return out


# --------------------------------------------------------------------------
# Averaging and task arithmetic
# --------------------------------------------------------------------------
def test_average_is_m3_average_at_one_half():
    a, b = random_map(1), random_map(2)
    assert average_merge(a, b) == m3_average(a, b, 0.5)


def test_m3_average_agrees_with_m3_task_arithmetic():
    base, a, b = random_map(0), random_map(1), random_map(2)
    x, y = m3_average(a, b, 0.3), m3_task_arithmetic(base, a, b, 0.3)
    for n in x:
        np.testing.assert_allclose(x[n], y[n], rtol=0, atol=1e-5)


@pytest.mark.parametrize("lam", [0.0, 1.0, 1.5])
def test_m3_coefficient_is_open(lam: float):
    a, b = random_map(1), random_map(2)
    with pytest.raises(RecipeError, match="open interval"):
        m3_average(a, b, lam)


@given(st.floats(min_value=0.01, max_value=0.99))
@settings(max_examples=25, deadline=None)
def test_m3_swap_symmetry(lam: float):
    base, a, b = dyadic_map(0), random_map(1), random_map(2)
    assert m3_average(a, b, lam) == m3_average(b, a, 1.0 - lam)
    assert m3_task_arithmetic(base, a, b, lam) == m3_task_arithmetic(base, b, a, 1.0 - lam)
    assert ties_m3_merge(base, a, b, 0.5, 1.0, lam) == ties_m3_merge(base, b, a, 0.5, 1.0, 1.0 - lam)


def test_m3_accepts_a_sampling_record():
    a, b = random_map(1), random_map(2)
    rec = sample_lambda(2.0, 7)
    assert m3_average(a, b, rec) == m3_average(a, b, rec.lambda_m)


def test_task_arithmetic(base: TensorMap, theta1: TensorMap, theta2: TensorMap):
    assert task_arithmetic(base, [theta1], 1.0) == theta1
    merged = task_arithmetic(base, [theta1, theta2], 0.5)
    for n in base:
        expected = base[n] + 0.5 * ((theta1[n] - base[n]) + (theta2[n] - base[n]))
        np.testing.assert_array_equal(merged[n], expected)


def test_congruence_errors_name_the_tensor(base: TensorMap):
    other = TensorMap({n: np.zeros(1) if n == "head.weight" else base[n] for n in base})
    with pytest.raises(ShapeMismatchError, match="head.weight"):
        task_arithmetic(base, [other], 1.0)


# --------------------------------------------------------------------------
# TIES
# --------------------------------------------------------------------------
@given(
    st.sampled_from([0.1, 0.25, 0.5, 0.7, 0.9, 1.0]),
    st.integers(min_value=0, max_value=1000),
    st.integers(min_value=1, max_value=3),
)
@settings(max_examples=30, deadline=None)
def test_ties_matches_elementwise_oracle(retain_ratio: float, seed: int, n_models: int):
    base = random_map(seed)
    models = [random_map(seed + 1 + i) for i in range(n_models)]
    merged = ties_merge(base, models, retain_ratio, 0.8)
    for name, expected in _ties_oracle(base, models, retain_ratio, 0.8).items():
        np.testing.assert_allclose(merged[name], expected, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("retain_ratio", [0.3, 0.5, 1.0])
def test_ties_oracle_with_tied_magnitudes(retain_ratio: float):
    # dyadic offsets repeat magnitudes, so the trim has to break ties
    base = dyadic_map(10)
    models = [dyadic_map(11), dyadic_map(12), dyadic_map(13)]
    merged = ties_merge(base, models, retain_ratio, 1.0)
    for name, expected in _ties_oracle(base, models, retain_ratio, 1.0).items():
        np.testing.assert_array_equal(merged[name], expected.astype(np.float32))


def test_ties_trim_breaks_ties_by_index():
    base = TensorMap({"w": np.zeros(4)})
    model = TensorMap({"w": [1.0, -1.0, 1.0, 0.5]})
    work = ties_work(base, [model], 0.5)
    np.testing.assert_array_equal(work.masks[0]["w"], [True, True, False, False])
    np.testing.assert_array_equal(work.trimmed[0]["w"], [1.0, -1.0, 0.0, 0.0])


def test_retained_count_rounds_before_ceiling():
    base = TensorMap({"w": np.zeros(10)})
    model = TensorMap({"w": np.arange(1.0, 11.0)})
    work = ties_work(base, [model], 0.7)
    assert int(work.masks[0]["w"].sum()) == 7


def test_ties_sign_election():
    base = TensorMap({"w": np.zeros(4)})
    t1 = TensorMap({"w": [2.0, 1.0, -1.0, 0.0]})
    t2 = TensorMap({"w": [-1.0, -1.0, -3.0, 0.0]})
    work = ties_work(base, [t1, t2], 1.0)
    # equal masses elect +1, no mass elects 0
    np.testing.assert_array_equal(work.signs["w"], [1, 1, -1, 0])
    merged = ties_merge(base, [t1, t2], 1.0, 1.0)
    np.testing.assert_array_equal(merged["w"], [2.0, 1.0, -2.0, 0.0])


def test_ties_single_model_full_retain(base: TensorMap, theta1: TensorMap):
    assert ties_merge(base, [theta1], 1.0, 1.0) == theta1


def test_ties_m3_cases():
    base = TensorMap({"w": np.zeros(4)})
    t1 = TensorMap({"w": [4.0, 2.0, 0.0, 1.0]})
    t2 = TensorMap({"w": [2.0, 0.0, 3.0, -5.0]})
    merged = ties_m3_merge(base, t1, t2, 1.0, 1.0, 0.25)
    # both agree, only task 1, only task 2, sign conflict won by task 2
    np.testing.assert_array_equal(merged["w"], [2.5, 2.0, 3.0, -5.0])


@given(
    st.sampled_from([0.2, 0.5, 0.7, 1.0]),
    st.floats(min_value=0.01, max_value=0.99),
    st.integers(min_value=0, max_value=1000),
)
@settings(max_examples=30, deadline=None)
def test_ties_m3_matches_elementwise_oracle(retain_ratio: float, lam: float, seed: int):
    base, t1, t2 = random_map(seed), random_map(seed + 1), random_map(seed + 2)
    merged = ties_m3_merge(base, t1, t2, retain_ratio, 1.0, lam)
    for name, expected in _ties_m3_oracle(base, t1, t2, retain_ratio, lam).items():
        np.testing.assert_allclose(merged[name], expected, rtol=1e-6, atol=1e-6)


@given(st.sampled_from([0.3, 0.7, 1.0]), st.integers(min_value=0, max_value=1000))
@settings(max_examples=20, deadline=None)
def test_ties_m3_at_one_half_is_ties(retain_ratio: float, seed: int):
    base, t1, t2 = random_map(seed), random_map(seed + 1), random_map(seed + 2)
    assert ties_m3_merge(base, t1, t2, retain_ratio, 0.9, 0.5) == ties_merge(
        base, [t1, t2], retain_ratio, 0.9
    )


def test_ties_rejects_bad_retain_ratio(base: TensorMap, theta1: TensorMap):
    with pytest.raises(RecipeError, match="retain_ratio"):
        ties_merge(base, [theta1], 0.0, 1.0)


# --------------------------------------------------------------------------
# DARE
# --------------------------------------------------------------------------
def test_dare_drop_rate_zero_is_identity(base: TensorMap, theta1: TensorMap):
    d = delta(theta1, base)
    assert dare_sparsify(d, SparsifyConfig(drop_rate=0.0, seed=3)) == d


def test_dare_statistics():
    n, p = 1_000_000, 0.2
    d = DeltaSet("base", TensorMap({"w": np.ones(n)}))
    out = dare_sparsify(d, SparsifyConfig(drop_rate=p, seed=9))["w"]
    assert set(np.unique(out).tolist()) == {0.0, 1.25}
    # kept fraction and rescaled mean within three standard deviations
    sigma_kept = np.sqrt(p * (1.0 - p) / n)
    assert abs(np.mean(out != 0.0) - (1.0 - p)) <= 3.0 * sigma_kept
    assert abs(out.mean() - 1.0) <= 3.0 * sigma_kept / (1.0 - p)


def test_dare_expectation_over_seeds():
    d = DeltaSet("base", TensorMap({"w": [0.5, -2.0, 3.0]}))
    runs = [dare_sparsify(d, SparsifyConfig(drop_rate=0.5, seed=s))["w"] for s in range(4000)]
    np.testing.assert_allclose(np.mean(runs, axis=0), [0.5, -2.0, 3.0], rtol=0.08)


def test_dare_masks_do_not_depend_on_other_tensors():
    cfg = SparsifyConfig(drop_rate=0.5, seed=1)
    w = np.arange(1.0, 101.0)
    alone = dare_sparsify(DeltaSet("b", TensorMap({"w": w})), cfg)
    with_others = dare_sparsify(DeltaSet("b", TensorMap({"a": w, "w": w, "z": w})), cfg)
    np.testing.assert_array_equal(alone["w"], with_others["w"])
    assert not np.array_equal(with_others["a"], with_others["w"])


# --------------------------------------------------------------------------
# Dispatch, manifests and replay
# --------------------------------------------------------------------------
@pytest.mark.parametrize(
    "fields",
    [
        {"method": "task_arithmetic", "scaling_term": 0.7},
        {"method": "ties", "scaling_term": 1.0, "retain_ratio": 0.5},
        {"method": "m3_task_arithmetic", "lambda_m": 0.4},
        {"method": "m3_ties", "lambda_m": 0.4, "scaling_term": 1.0, "retain_ratio": 0.7},
    ],
)
def test_dare_with_zero_drop_rate_leaves_merges_unchanged(
    fields: dict, base: TensorMap, theta1: TensorMap, theta2: TensorMap
):
    plain, _ = merge(MergeRecipe(**fields), base, [theta1, theta2])
    dare = SparsifyConfig(drop_rate=0.0, seed=5)
    sparse, manifest = merge(MergeRecipe(**fields, dare=dare), base, [theta1, theta2])
    assert sparse == plain
    assert manifest.dare == dare


def test_dare_merge_is_swap_symmetric(base: TensorMap):
    a, b = random_map(1), random_map(2)
    dare = SparsifyConfig(drop_rate=0.2, seed=4)
    lam = 0.3
    x, _ = merge(MergeRecipe(method="m3_task_arithmetic", lambda_m=lam, dare=dare), base, [a, b])
    y, _ = merge(
        MergeRecipe(method="m3_task_arithmetic", lambda_m=1.0 - lam, dare=dare), base, [b, a]
    )
    assert x == y


def test_merge_records_sampling(theta1: TensorMap, theta2: TensorMap):
    rec = sample_lambda(2.0, 7)
    recipe = MergeRecipe(method="m3_average", lambda_m=rec.lambda_m, sampling=rec)
    merged, manifest = merge(recipe, None, [theta1, theta2])
    assert manifest.sampling == rec
    assert manifest.base is None
    assert manifest.created is None
    assert [r.identity for r in manifest.inputs] == [theta1.identity, theta2.identity]
    assert manifest.output.identity == merged.identity


def test_merge_with_explicit_coefficient(theta1: TensorMap, theta2: TensorMap):
    _, manifest = merge(MergeRecipe(method="m3_average", lambda_m=0.5), None, [theta1, theta2])
    assert manifest.sampling.lambda_m == 0.5
    assert not manifest.sampling.sampled


def test_merge_preconditions(base: TensorMap, theta1: TensorMap, theta2: TensorMap):
    with pytest.raises(RecipeError, match="At least one"):
        merge(MergeRecipe(method="average"), None, [])
    with pytest.raises(RecipeError, match="needs a base"):
        merge(MergeRecipe(method="task_arithmetic", scaling_term=1.0), None, [theta1])
    with pytest.raises(RecipeError, match="exactly two"):
        merge(MergeRecipe(method="m3_average", lambda_m=0.5), None, [theta1, theta2, base])


@pytest.mark.parametrize(
    "fields",
    [
        {"method": "average"},
        {"method": "ties", "scaling_term": 0.5, "retain_ratio": 0.5},
        {
            "method": "m3_ties",
            "lambda_m": 0.3,
            "scaling_term": 1.0,
            "retain_ratio": 0.7,
            "dare": {"drop_rate": 0.2, "seed": 1},
        },
    ],
)
def test_replay_reproduces_merges(
    fields: dict, base: TensorMap, theta1: TensorMap, theta2: TensorMap
):
    recipe = MergeRecipe(**fields)
    merged, manifest = merge(recipe, base if recipe.needs_base else None, [theta1, theta2])
    again = replay(manifest, [theta1, theta2], base if recipe.needs_base else None)
    assert again == merged


def test_replay_detects_changed_inputs(base: TensorMap, theta1: TensorMap, theta2: TensorMap):
    _, manifest = merge(MergeRecipe(method="average"), None, [theta1, theta2])
    with pytest.raises(ReplayError, match="Input 1"):
        replay(manifest, [theta1, base])
    with pytest.raises(ReplayError, match="2 input"):
        replay(manifest, [theta1])
    with pytest.raises(ReplayError, match="Base"):
        replay(manifest, [theta1, theta2], base)


def test_recorded_operations_replay(base: TensorMap, theta1: TensorMap, theta2: TensorMap):
    d1, m_delta = take_delta(theta1, base)
    assert replay(m_delta, [theta1], base) == d1

    cfg = SparsifyConfig(drop_rate=0.3, seed=2)
    sparse, m_sparse = sparsify(d1, cfg)
    assert replay(m_sparse, [d1]) == sparse
    assert m_sparse.dare == cfg

    d2 = delta(theta2, base)
    merged, m_apply = apply(base, [(0.5, d1), (0.5, d2)])
    assert m_apply.coefficients == (0.5, 0.5)
    assert replay(m_apply, [d1, d2], base) == merged


def test_apply_reproduces_the_fine_tuned_model(base: TensorMap, theta1: TensorMap):
    d, _ = take_delta(theta1, base)
    out, manifest = apply(base, [(1.0, d)])
    assert out == theta1
    assert manifest.output.digest == merge(
        MergeRecipe(method="task_arithmetic", scaling_term=1.0), base, [theta1]
    )[1].output.digest


def test_apply_needs_deltas(base: TensorMap):
    with pytest.raises(RecipeError, match="at least one"):
        apply(base, [])
