"""Merging procedures and their compositions with random interpolation and DARE.

Every procedure is a pure function of its input checkpoints. Arithmetic is
carried out in float64 on the offsets from the base (or on the parameters for
the averaging methods) and rounded to float32 once, when the merged
:class:`~mixup_merge.tensors.TensorMap` is built.

TIES works per tensor: each task offset is trimmed to its
``ceil(retain_ratio * n)`` largest magnitudes (ties at the cut go to the lower
flat index), a sign is elected per parameter from the trimmed offsets (positive
mass against negative mass, a tie elects +1, no mass elects 0) and only the
retained offsets agreeing with the elected sign are combined.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from mixup_merge.checkpoint import digest
from mixup_merge.components.manifest import ArtifactRef, MergeManifest
from mixup_merge.errors import RecipeError, ReplayError
from mixup_merge.prng import name_seed, uniform_array
from mixup_merge.recipe import MergeRecipe, SparsifyConfig
from mixup_merge.sampler import SamplingRecord
from mixup_merge.tensors import (
    DeltaSet,
    TensorMap,
    apply_deltas,
    check_congruent,
    delta,
    interpolation_weights,
    lerp,
)

__all__ = [
    "TiesWork",
    "apply",
    "average_merge",
    "dare_sparsify",
    "m3_average",
    "m3_task_arithmetic",
    "merge",
    "replay",
    "sparsify",
    "take_delta",
    "task_arithmetic",
    "ties_m3_merge",
    "ties_merge",
    "ties_work",
]

logger = logging.getLogger(__name__)

Arrays = dict[str, np.ndarray]


def _lambda_of(rec: SamplingRecord | float) -> float:
    lam = rec.lambda_m if isinstance(rec, SamplingRecord) else float(rec)
    if not 0.0 < lam < 1.0:
        raise RecipeError(f"lambda_m must lie in the open interval (0, 1), got {lam}")
    return lam


def _check_all(reference: TensorMap, models: Sequence[TensorMap]) -> None:
    if not models:
        raise RecipeError("At least one model is required")
    for m in models:
        check_congruent(reference, m)


def _offsets(base: TensorMap, models: Sequence[TensorMap]) -> list[Arrays]:
    _check_all(base, models)
    return [{n: m.as_float64(n) - base.as_float64(n) for n in base} for m in models]


def _apply(base: TensorMap, merged: Arrays, scaling: float = 1.0) -> TensorMap:
    return TensorMap({n: base.as_float64(n) + scaling * merged[n] for n in base})


def _sum_offsets(deltas: Sequence[Arrays], base: TensorMap) -> Arrays:
    out = {}
    for n in base:
        acc = np.zeros(base[n].shape, dtype=np.float64)
        for d in deltas:
            acc = acc + d[n]
        out[n] = acc
    return out


def _interpolate_offsets(d1: Arrays, d2: Arrays, lam: float) -> Arrays:
    w1, w2 = interpolation_weights(lam)
    return {n: w1 * d1[n] + w2 * d2[n] for n in d1}


def average_merge(theta1: TensorMap, theta2: TensorMap) -> TensorMap:
    """Elementwise mean of two checkpoints."""
    return lerp(theta1, theta2, 0.5)


def task_arithmetic(
    base: TensorMap, models: Sequence[TensorMap], scaling: float
) -> TensorMap:
    """``base + scaling * sum(theta_i - base)``."""
    deltas = _offsets(base, models)
    return _apply(base, _sum_offsets(deltas, base), float(scaling))


def m3_average(
    theta1: TensorMap, theta2: TensorMap, rec: SamplingRecord | float
) -> TensorMap:
    """``lambda_m * theta1 + (1 - lambda_m) * theta2`` with ``0 < lambda_m < 1``."""
    return lerp(theta1, theta2, _lambda_of(rec))


def m3_task_arithmetic(
    base: TensorMap, theta1: TensorMap, theta2: TensorMap, rec: SamplingRecord | float
) -> TensorMap:
    """``base + lambda_m * delta1 + (1 - lambda_m) * delta2``.

    Equal to :func:`m3_average` on the same checkpoints up to float32 rounding.
    """
    lam = _lambda_of(rec)
    d1, d2 = _offsets(base, [theta1, theta2])
    return _apply(base, _interpolate_offsets(d1, d2, lam))


def _drop_and_rescale(name: str, values: np.ndarray, cfg: SparsifyConfig) -> np.ndarray:
    p = cfg.drop_rate
    if p == 0.0:
        return values
    u = uniform_array(name_seed(cfg.seed, name), values.size).reshape(values.shape)
    return np.where(u >= p, values * (1.0 / (1.0 - p)), 0.0)


def dare_sparsify(d: DeltaSet, cfg: SparsifyConfig) -> DeltaSet:
    """Drop each offset with probability ``cfg.drop_rate`` and rescale the survivors.

    Element ``i`` of tensor ``name`` is kept when the ``i``-th uniform of the
    substream ``name_seed(cfg.seed, name)`` is at least the drop rate, so the
    masks do not depend on tensor order. Survivors are multiplied by
    ``1 / (1 - drop_rate)``.

    Parameters
    ----------
    d : DeltaSet
        Offsets to sparsify.
    cfg : SparsifyConfig
        Drop rate in [0, 1) and 64-bit seed.

    Returns
    -------
    DeltaSet
        Sparsified offsets against the same base.
    """
    tensors = TensorMap(
        {n: _drop_and_rescale(n, d.tensors.as_float64(n), cfg) for n in d.tensors}
    )
    if cfg.drop_rate > 0:
        kept = sum(int(np.count_nonzero(tensors[n])) for n in tensors)
        logger.debug(f"DARE p={cfg.drop_rate}: {kept} of {d.n_parameters} offsets nonzero")
    return DeltaSet(base_id=d.base_id, tensors=tensors)


@dataclass(frozen=True)
class TiesWork:
    """Intermediates of the TIES trim and sign election.

    Attributes
    ----------
    trimmed : list of dict
        Per task, the offsets with everything outside the top-k zeroed.
    signs : dict
        Elected sign per parameter, values in {-1, 0, +1}.
    masks : list of dict
        Per task, True where the trim kept the entry.
    """

    trimmed: list[Arrays]
    signs: dict[str, np.ndarray]
    masks: list[dict[str, np.ndarray]]

    def agreeing(self, task: int, name: str) -> np.ndarray:
        """Entries of ``task`` that survive the trim and match the elected sign."""
        t = self.trimmed[task][name]
        s = self.signs[name]
        return (s != 0) & (np.sign(t) == s)


def _retained_count(retain_ratio: float, n: int) -> int:
    # rounding first keeps e.g. 0.7 * 10 from becoming 8
    return min(n, math.ceil(round(retain_ratio * n, 6)))


def _trim(values: np.ndarray, retain_ratio: float) -> tuple[np.ndarray, np.ndarray]:
    flat = values.ravel()
    k = _retained_count(retain_ratio, flat.size)
    order = np.lexsort((np.arange(flat.size), -np.abs(flat)))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return np.where(mask, flat, 0.0).reshape(values.shape), mask.reshape(values.shape)


def _elect(trimmed: Sequence[np.ndarray]) -> np.ndarray:
    pos = np.zeros(trimmed[0].shape, dtype=np.float64)
    neg = np.zeros(trimmed[0].shape, dtype=np.float64)
    for t in trimmed:
        pos = pos + np.where(t > 0, t, 0.0)
        neg = neg + np.where(t < 0, -t, 0.0)
    signs = np.where(pos >= neg, 1, -1).astype(np.int8)
    signs[(pos == 0) & (neg == 0)] = 0
    return signs


def _ties_from_offsets(deltas: Sequence[Arrays], retain_ratio: float) -> TiesWork:
    if not 0.0 < retain_ratio <= 1.0:
        raise RecipeError(f"retain_ratio must lie in (0, 1], got {retain_ratio}")
    trimmed: list[Arrays] = [{} for _ in deltas]
    masks: list[dict[str, np.ndarray]] = [{} for _ in deltas]
    signs = {}
    for name in deltas[0]:
        for i, d in enumerate(deltas):
            trimmed[i][name], masks[i][name] = _trim(d[name], retain_ratio)
        signs[name] = _elect([t[name] for t in trimmed])
    return TiesWork(trimmed=trimmed, signs=signs, masks=masks)


def ties_work(
    base: TensorMap, models: Sequence[TensorMap], retain_ratio: float
) -> TiesWork:
    """Run the TIES trim and sign election and return the intermediates."""
    return _ties_from_offsets(_offsets(base, models), retain_ratio)


def _disjoint_mean(work: TiesWork) -> Arrays:
    merged = {}
    for name, signs in work.signs.items():
        total = np.zeros(signs.shape, dtype=np.float64)
        count = np.zeros(signs.shape, dtype=np.int64)
        for i, trimmed in enumerate(work.trimmed):
            agree = work.agreeing(i, name)
            total = total + np.where(agree, trimmed[name], 0.0)
            count += agree
        merged[name] = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return merged


def _disjoint_interpolate(work: TiesWork, lam: float) -> Arrays:
    w1, w2 = interpolation_weights(lam)
    merged = {}
    for name in work.signs:
        t1, t2 = work.trimmed[0][name], work.trimmed[1][name]
        a1, a2 = work.agreeing(0, name), work.agreeing(1, name)
        both = w1 * t1 + w2 * t2
        merged[name] = np.where(
            a1 & a2, both, np.where(a1, t1, np.where(a2, t2, 0.0))
        )
    return merged


def ties_merge(
    base: TensorMap, models: Sequence[TensorMap], retain_ratio: float, scaling: float
) -> TensorMap:
    """TIES: trim, elect signs, average the agreeing offsets, scale and add to base.

    Parameters
    ----------
    base : TensorMap
        Pretrained checkpoint the models were fine-tuned from.
    models : sequence of TensorMap
        One or more fine-tuned checkpoints.
    retain_ratio : float
        Fraction in (0, 1] of largest-magnitude offsets kept per tensor and task.
    scaling : float
        Multiplier of the merged offsets.
    """
    work = ties_work(base, models, retain_ratio)
    return _apply(base, _disjoint_mean(work), float(scaling))


def ties_m3_merge(
    base: TensorMap,
    theta1: TensorMap,
    theta2: TensorMap,
    retain_ratio: float,
    scaling: float,
    rec: SamplingRecord | float,
) -> TensorMap:
    """TIES with the disjoint mean replaced by interpolation.

    Where both tasks keep an agreeing offset the merged offset is
    ``lambda_m * delta1 + (1 - lambda_m) * delta2``; where only one task keeps
    it, that offset is used unchanged.
    """
    lam = _lambda_of(rec)
    work = ties_work(base, [theta1, theta2], retain_ratio)
    return _apply(base, _disjoint_interpolate(work, lam), float(scaling))


def _merge_offsets(recipe: MergeRecipe, base: TensorMap, deltas: list[Arrays]) -> TensorMap:
    m = recipe.method
    if m == "average":
        return _apply(base, _interpolate_offsets(deltas[0], deltas[1], 0.5))
    if m in ("m3_average", "m3_task_arithmetic"):
        return _apply(base, _interpolate_offsets(deltas[0], deltas[1], recipe.lambda_m))
    if m == "task_arithmetic":
        return _apply(base, _sum_offsets(deltas, base), recipe.scaling_term)
    work = _ties_from_offsets(deltas, recipe.retain_ratio)
    if m == "ties":
        return _apply(base, _disjoint_mean(work), recipe.scaling_term)
    return _apply(base, _disjoint_interpolate(work, recipe.lambda_m), recipe.scaling_term)


def _merge_checkpoints(
    recipe: MergeRecipe, base: TensorMap | None, models: Sequence[TensorMap]
) -> TensorMap:
    m = recipe.method
    if m == "average":
        return average_merge(*models)
    if m == "m3_average":
        return m3_average(models[0], models[1], recipe.lambda_m)
    if m == "task_arithmetic":
        return task_arithmetic(base, models, recipe.scaling_term)
    if m == "ties":
        return ties_merge(base, models, recipe.retain_ratio, recipe.scaling_term)
    if m == "m3_task_arithmetic":
        return m3_task_arithmetic(base, models[0], models[1], recipe.lambda_m)
    return ties_m3_merge(
        base, models[0], models[1], recipe.retain_ratio, recipe.scaling_term, recipe.lambda_m
    )


def _ref(t: TensorMap | DeltaSet) -> ArtifactRef:
    return ArtifactRef(identity=t.identity, digest=digest(t))


def merge(
    recipe: MergeRecipe, base: TensorMap | None, models: Sequence[TensorMap]
) -> tuple[TensorMap, MergeManifest]:
    """Dispatch a recipe and record its provenance.

    When ``recipe.dare`` is set, every model's offsets from ``base`` are
    sparsified before the method combines them. The drop masks of each model
    are drawn from ``name_seed(dare.seed, model.identity)``, so the masks of
    two different models are independent and do not depend on their order.

    Parameters
    ----------
    recipe : MergeRecipe
        Method and hyperparameters.
    base : TensorMap or None
        Pretrained checkpoint, required by the offset-space methods and by DARE.
    models : sequence of TensorMap
        Fine-tuned checkpoints; exactly two for the averaging and M3 methods.

    Returns
    -------
    tuple of (TensorMap, MergeManifest)
        The merged checkpoint (with a content-derived identity) and its
        manifest, whose ``created`` field is left empty.
    """
    models = list(models)
    if not models:
        raise RecipeError("At least one model is required")
    if recipe.needs_base and base is None:
        raise RecipeError(f"Method '{recipe.method}' needs a base checkpoint")
    if (recipe.is_m3 or recipe.method == "average") and len(models) != 2:
        raise RecipeError(f"Method '{recipe.method}' merges exactly two models")
    _check_all(base if base is not None else models[0], models)

    if recipe.dare is None:
        merged = _merge_checkpoints(recipe, base, models)
    else:
        deltas = []
        for model, offsets in zip(models, _offsets(base, models), strict=True):
            cfg = SparsifyConfig(
                drop_rate=recipe.dare.drop_rate,
                seed=name_seed(recipe.dare.seed, model.identity),
            )
            deltas.append({n: _drop_and_rescale(n, v, cfg) for n, v in offsets.items()})
        merged = _merge_offsets(recipe, base, deltas)

    sampling = None
    if recipe.is_m3:
        sampling = recipe.sampling or SamplingRecord(lambda_m=recipe.lambda_m)
    manifest = MergeManifest(
        method=recipe.method,
        inputs=tuple(_ref(m) for m in models),
        base=_ref(base) if base is not None else None,
        output=_ref(merged),
        scaling_term=recipe.scaling_term,
        retain_ratio=recipe.retain_ratio,
        dare=recipe.dare,
        sampling=sampling,
    )
    logger.debug(f"Merged {len(models)} checkpoints with '{recipe.method}' -> {merged.identity}")
    return merged, manifest


def take_delta(fine: TensorMap, base: TensorMap) -> tuple[DeltaSet, MergeManifest]:
    """:func:`~mixup_merge.tensors.delta` plus its manifest."""
    d = delta(fine, base)
    manifest = MergeManifest(
        method="delta", inputs=(_ref(fine),), base=_ref(base), output=_ref(d)
    )
    return d, manifest


def sparsify(d: DeltaSet, cfg: SparsifyConfig) -> tuple[DeltaSet, MergeManifest]:
    """:func:`dare_sparsify` plus its manifest."""
    out = dare_sparsify(d, cfg)
    manifest = MergeManifest(method="sparsify", inputs=(_ref(d),), dare=cfg, output=_ref(out))
    return out, manifest


def apply(
    base: TensorMap, weighted: Sequence[tuple[float, DeltaSet]]
) -> tuple[TensorMap, MergeManifest]:
    """:func:`~mixup_merge.tensors.apply_deltas` plus its manifest."""
    if not weighted:
        raise RecipeError("Applying needs at least one delta file")
    out = apply_deltas(base, weighted)
    manifest = MergeManifest(
        method="apply",
        inputs=tuple(_ref(d) for _, d in weighted),
        base=_ref(base),
        coefficients=tuple(float(c) for c, _ in weighted),
        output=_ref(out),
    )
    return out, manifest


def replay(
    manifest: MergeManifest,
    inputs: Sequence[TensorMap | DeltaSet],
    base: TensorMap | None = None,
) -> TensorMap | DeltaSet:
    """Re-run a manifest and check every input and output digest.

    Raises
    ------
    ReplayError
        If an input differs from the recorded one or the output digest is not
        reproduced.
    """
    if len(inputs) != len(manifest.inputs):
        raise ReplayError(
            f"Manifest records {len(manifest.inputs)} input(s), got {len(inputs)}"
        )
    for i, (x, ref) in enumerate(zip(inputs, manifest.inputs, strict=True)):
        if digest(x) != ref.digest:
            raise ReplayError(f"Input {i} ({x.identity}) does not match digest {ref.digest}")
    if (manifest.base is None) != (base is None):
        raise ReplayError("Base checkpoint given for a manifest without one, or missing")
    if base is not None and digest(base) != manifest.base.digest:
        raise ReplayError(f"Base {base.identity} does not match digest {manifest.base.digest}")

    out: TensorMap | DeltaSet
    if manifest.method == "delta":
        out = delta(inputs[0], base)
    elif manifest.method == "apply":
        if not all(isinstance(x, DeltaSet) for x in inputs):
            raise ReplayError("An apply manifest replays against delta files")
        out = apply_deltas(base, list(zip(manifest.coefficients, inputs, strict=True)))
    elif manifest.method == "sparsify":
        if not isinstance(inputs[0], DeltaSet):
            raise ReplayError("A sparsify manifest replays against a delta file")
        out = dare_sparsify(inputs[0], manifest.dare)
    else:
        if any(isinstance(x, DeltaSet) for x in inputs):
            raise ReplayError("Merge manifests replay against full checkpoints")
        out, _ = merge(manifest.to_recipe(), base, inputs)

    if digest(out) != manifest.output.digest:
        raise ReplayError(
            f"Replay produced digest {digest(out)}, manifest records {manifest.output.digest}"
        )
    logger.info(f"Replayed '{manifest.method}' manifest, output digest matches")
    return out
