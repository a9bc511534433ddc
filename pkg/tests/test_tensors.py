import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dyadic_map, random_map
from mixup_merge.errors import (
    BaseIdentityError,
    MixupMergeError,
    NameSetMismatchError,
    NonFiniteError,
    ShapeMismatchError,
)
from mixup_merge.tensors import (
    DeltaSet,
    TensorMap,
    apply_deltas,
    check_congruent,
    conflict_profile,
    delta,
    interpolation_weights,
    lerp,
)


def test_tensor_map_is_sorted_float32_and_read_only():
    t = TensorMap({"b": [1.0, 2.0], "a": np.ones((2, 2), dtype=np.float64)})
    assert list(t) == ["a", "b"]
    assert all(t[n].dtype == np.float32 for n in t)
    assert t.shapes == {"a": (2, 2), "b": (2,)}
    assert t.n_parameters == 6
    with pytest.raises(ValueError, match="read-only"):
        t["a"][0, 0] = 3.0


def test_tensor_map_rejects_non_finite_values():
    with pytest.raises(NonFiniteError, match="'w' contains 2 non-finite"):
        TensorMap({"w": [1.0, np.nan, np.inf]})


@pytest.mark.parametrize("name", ["", "__metadata__"])
def test_tensor_map_rejects_reserved_names(name: str):
    with pytest.raises(MixupMergeError, match="Invalid tensor name"):
        TensorMap({name: [1.0]})


def test_content_identity():
    a = dyadic_map(3)
    b = TensorMap({n: a[n].copy() for n in a})
    assert a == b
    assert a.identity == b.identity
    assert a.identity.startswith("sha256:")
    assert dyadic_map(4).identity != a.identity
    named = a.with_identity("model-a")
    assert named.identity == "model-a"
    assert named == a


def test_check_congruent_reports_names_and_shapes():
    a = TensorMap({"x": [1.0], "y": [1.0]})
    with pytest.raises(NameSetMismatchError, match=r"Only in left: \['y'\]"):
        check_congruent(a, TensorMap({"x": [1.0], "z": [1.0]}))
    with pytest.raises(ShapeMismatchError, match="'y'"):
        check_congruent(a, TensorMap({"x": [1.0], "y": [1.0, 2.0]}))


# --------------------------------------------------------------------------
# Interpolation
# --------------------------------------------------------------------------
@given(st.floats(min_value=0.0, max_value=1.0))
def test_interpolation_weights_are_complementary(lam: float):
    w1, w2 = interpolation_weights(lam)
    assert w1 + w2 == 1.0
    assert interpolation_weights(1.0 - lam) == (w2, w1)


@pytest.mark.parametrize("lam", [-0.1, 1.5, float("nan")])
def test_interpolation_weights_out_of_range(lam: float):
    with pytest.raises(MixupMergeError, match="Interpolation coefficient"):
        interpolation_weights(lam)


def test_lerp_endpoints_are_exact():
    a, b = random_map(1), random_map(2)
    assert lerp(a, b, 1.0) == a
    assert lerp(a, b, 0.0) == b


def test_lerp_endpoints_keep_negative_zero():
    a = TensorMap({"w": [-0.0, 1.0]})
    b = TensorMap({"w": [2.0, -0.0]})
    assert lerp(a, b, 1.0)["w"].tobytes() == a["w"].tobytes()
    assert lerp(a, b, 0.0)["w"].tobytes() == b["w"].tobytes()
    assert np.signbit(lerp(a, b, 1.0)["w"][0])


@given(st.integers(min_value=0, max_value=2**32), st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=1000, deadline=None)
def test_lerp_swap_symmetry(seed: int, lam: float):
    a, b = random_map(seed), random_map(seed + 1)
    assert lerp(a, b, lam) == lerp(b, a, 1.0 - lam)


@given(st.integers(min_value=0, max_value=2**32), st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=1000, deadline=None)
def test_lerp_equals_interpolated_deltas(seed: int, lam: float):
    base, a, b = random_map(seed), random_map(seed + 1), random_map(seed + 2)
    w1, w2 = interpolation_weights(lam)
    expected = apply_deltas(base, [(w1, delta(a, base)), (w2, delta(b, base))])
    merged = lerp(a, b, lam)
    for name in merged:
        np.testing.assert_allclose(merged[name], expected[name], rtol=0, atol=1e-5)


def test_lerp_rejects_incongruent_maps():
    with pytest.raises(ShapeMismatchError):
        lerp(TensorMap({"w": [1.0]}), TensorMap({"w": [1.0, 2.0]}), 0.5)


# --------------------------------------------------------------------------
# Deltas
# --------------------------------------------------------------------------
def test_delta_apply_round_trip(base: TensorMap, theta1: TensorMap):
    d = delta(theta1, base)
    assert d.base_id == base.identity
    assert apply_deltas(base, [(1.0, d)]) == theta1
    assert apply_deltas(base, []) is base


def test_apply_deltas_order_of_two_terms(base: TensorMap, theta1: TensorMap, theta2: TensorMap):
    d1, d2 = delta(theta1, base), delta(theta2, base)
    assert apply_deltas(base, [(0.3, d1), (0.7, d2)]) == apply_deltas(base, [(0.7, d2), (0.3, d1)])


def test_apply_deltas_checks_the_base(base: TensorMap, theta1: TensorMap, theta2: TensorMap):
    d = delta(theta1, theta2)
    with pytest.raises(BaseIdentityError, match=base.identity):
        apply_deltas(base, [(1.0, d)])


def test_conflict_profile():
    d1 = DeltaSet("base", TensorMap({"w": [1.0, -2.0, 0.0, 3.0]}))
    d2 = DeltaSet("base", TensorMap({"w": [-3.0, -1.0, 2.0, -1.0]}))
    profile = conflict_profile(d1, d2)
    assert profile.records["index"].tolist() == [0, 3]
    np.testing.assert_allclose(profile.records["lambda_star"], [0.75, 0.25])
    np.testing.assert_allclose(profile.residuals(), 0.0, atol=1e-12)
    assert profile.conflict_fraction == 0.5
    assert profile.summary()["conflicts"] == 2.0


def test_conflict_profile_without_conflicts():
    d = DeltaSet("base", TensorMap({"w": [1.0, 2.0]}))
    profile = conflict_profile(d, d)
    assert profile.records.empty
    assert profile.conflict_fraction == 0.0


def test_conflict_profile_needs_a_shared_base():
    with pytest.raises(BaseIdentityError):
        conflict_profile(
            DeltaSet("one", TensorMap({"w": [1.0]})), DeltaSet("two", TensorMap({"w": [1.0]}))
        )


@given(st.integers(min_value=0, max_value=2**32))
@settings(max_examples=50, deadline=None)
def test_conflicts_cancel_at_their_coefficient(seed: int):
    rng = np.random.default_rng(seed)
    d1 = DeltaSet("base", TensorMap({"w": rng.normal(size=1000)}))
    d2 = DeltaSet("base", TensorMap({"w": rng.normal(size=1000)}))
    profile = conflict_profile(d1, d2)
    assert len(profile.records) > 0
    assert np.all(np.abs(profile.residuals()) < 1e-6)
