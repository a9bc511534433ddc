"""Shape-checked arithmetic over named tensor collections.

Storage precision is 32-bit float. Every operation accumulates in 64-bit and rounds
once when the result is wrapped in a new :class:`TensorMap`; the constructor is
also where finiteness is enforced, so no operation can hand out NaN or Inf.
"""

import hashlib
import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from mixup_merge.errors import (
    BaseIdentityError,
    MixupMergeError,
    NameSetMismatchError,
    NonFiniteError,
    ShapeMismatchError,
)

__all__ = [
    "ELEMENT_KIND",
    "ConflictProfile",
    "DeltaSet",
    "TensorMap",
    "apply_deltas",
    "check_congruent",
    "conflict_profile",
    "delta",
    "interpolation_weights",
    "lerp",
]

logger = logging.getLogger(__name__)

ELEMENT_KIND = "F32"
METADATA_KEY = "__metadata__"


class TensorMap(Mapping[str, np.ndarray]):
    """Immutable, ordered collection of named float32 tensors.

    Names iterate in lexicographic order. Arrays handed out are read-only views.

    Parameters
    ----------
    tensors : Mapping[str, ArrayLike]
        Tensor name to array. Values are rounded to float32.
    identity : str, optional
        Checkpoint identity. When omitted a content-derived identity is used,
        so independently built but equal collections share an identity.
    """

    __slots__ = ("_tensors", "_identity")

    element_kind: str = ELEMENT_KIND

    def __init__(self, tensors: Mapping[str, ArrayLike], identity: str | None = None):
        arrays: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name or name == METADATA_KEY:
                raise MixupMergeError(f"Invalid tensor name: {name!r}")
            arr = np.array(tensors[name], dtype=np.float32, order="C")
            bad = ~np.isfinite(arr)
            if bad.any():
                raise NonFiniteError(name, int(bad.sum()))
            arr.flags.writeable = False
            arrays[name] = arr
        self._tensors = arrays
        self._identity = identity

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other: object) -> bool:
        # content equality at the bit level; identity is compared separately
        if not isinstance(other, TensorMap):
            return NotImplemented
        if list(self) != list(other):
            return False
        return all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes()
            for n in self
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (
            f"TensorMap(identity={self.identity!r}, tensors={len(self)}, "
            f"parameters={self.n_parameters})"
        )

    @property
    def identity(self) -> str:
        if self._identity is None:
            self._identity = content_identity(self._tensors)
        return self._identity

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._tensors.items()}

    @property
    def n_parameters(self) -> int:
        return int(sum(arr.size for arr in self._tensors.values()))

    def with_identity(self, identity: str) -> "TensorMap":
        """Return the same tensors under another checkpoint identity."""
        return TensorMap(self._tensors, identity=identity)

    def as_float64(self, name: str) -> np.ndarray:
        return self._tensors[name].astype(np.float64)


@dataclass(frozen=True)
class DeltaSet:
    """Parameter offsets relative to the checkpoint named by ``base_id``."""

    base_id: str
    tensors: TensorMap

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def identity(self) -> str:
        return self.tensors.identity

    @property
    def n_parameters(self) -> int:
        return self.tensors.n_parameters


@dataclass(frozen=True)
class ConflictProfile:
    """Sign conflicts between two DeltaSets and their cancellation points.

    ``records`` holds one row per conflicting parameter with columns
    ``tensor``, ``index`` (flat index), ``delta1``, ``delta2`` and
    ``lambda_star``; parameters without a conflict have no row.
    """

    records: pd.DataFrame
    n_parameters: int

    @property
    def conflict_fraction(self) -> float:
        if self.n_parameters == 0:
            return 0.0
        return len(self.records) / self.n_parameters

    def residuals(self) -> np.ndarray:
        """Evaluate ``lambda* * delta1 + (1 - lambda*) * delta2`` for every record."""
        lam = self.records["lambda_star"].to_numpy(dtype=np.float64)
        d1 = self.records["delta1"].to_numpy(dtype=np.float64)
        d2 = self.records["delta2"].to_numpy(dtype=np.float64)
        return lam * d1 + (1.0 - lam) * d2

    def summary(self) -> dict[str, float]:
        lam = self.records["lambda_star"]
        return {
            "conflicts": float(len(self.records)),
            "conflict_fraction": self.conflict_fraction,
            "lambda_star_mean": float(lam.mean()) if len(lam) else float("nan"),
            "lambda_star_median": float(lam.median()) if len(lam) else float("nan"),
            "share_above_half": float((lam > 0.5).mean()) if len(lam) else float("nan"),
        }


def content_identity(tensors: Mapping[str, np.ndarray]) -> str:
    """Content-derived identity: hash of names, shapes and little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name]
        h.update(name.encode("utf-8"))
        h.update(repr(tuple(arr.shape)).encode("ascii"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return f"sha256:{h.hexdigest()[:16]}"


def check_congruent(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    """Raise unless ``a`` and ``b`` share names and shapes."""
    names_a, names_b = set(a), set(b)
    if names_a != names_b:
        raise NameSetMismatchError(names_a - names_b, names_b - names_a)
    for name in sorted(names_a):
        if a[name].shape != b[name].shape:
            raise ShapeMismatchError(name, a[name].shape, b[name].shape)


def interpolation_weights(lam: float) -> tuple[float, float]:
    """Return ``(lam, 1 - lam)`` as an exactly complementary float pair.

    The larger weight is taken as given and the smaller one is its exact
    complement. Swapping the models and passing ``1 - lam`` therefore yields
    the same pair in reverse order.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise MixupMergeError(f"Interpolation coefficient must lie in [0, 1], got {lam}")
    if lam >= 0.5:
        return lam, 1.0 - lam
    w2 = 1.0 - lam
    return 1.0 - w2, w2


def lerp(a: TensorMap, b: TensorMap, lam: float) -> TensorMap:
    """Elementwise ``lam * a + (1 - lam) * b``.

    Parameters
    ----------
    a, b : TensorMap
        Congruent checkpoints.
    lam : float
        Interpolation coefficient in [0, 1]; 1 returns ``a`` and 0 returns ``b``
        exactly.

    Raises
    ------
    NameSetMismatchError, ShapeMismatchError
        If the checkpoints are not congruent.
    """
    check_congruent(a, b)
    w1, w2 = interpolation_weights(lam)
    if w2 == 0.0:
        return a
    if w1 == 0.0:
        return b
    return TensorMap({n: w1 * a.as_float64(n) + w2 * b.as_float64(n) for n in a})


def delta(fine: TensorMap, base: TensorMap) -> DeltaSet:
    """Offsets ``fine - base`` tagged with the identity of ``base``."""
    check_congruent(fine, base)
    tensors = TensorMap({n: fine.as_float64(n) - base.as_float64(n) for n in fine})
    return DeltaSet(base_id=base.identity, tensors=tensors)


def apply_deltas(
    base: TensorMap, weighted: Sequence[tuple[float, DeltaSet]]
) -> TensorMap:
    """Return ``base + sum(coefficient_j * delta_j)``.

    The weighted sum is accumulated first and added to the base once, so the
    order of two terms does not change the result.

    Raises
    ------
    BaseIdentityError
        If a DeltaSet was computed against a checkpoint other than ``base``.
    """
    if not weighted:
        return base
    for _, d in weighted:
        if d.base_id != base.identity:
            raise BaseIdentityError(
                f"DeltaSet {d.identity} was computed against '{d.base_id}', "
                f"not against '{base.identity}'"
            )
        check_congruent(base, d.tensors)

    out = {}
    for name in base:
        acc = None
        for coef, d in weighted:
            term = float(coef) * d.tensors.as_float64(name)
            acc = term if acc is None else acc + term
        out[name] = base.as_float64(name) + acc
    return TensorMap(out)


def conflict_profile(d1: DeltaSet, d2: DeltaSet) -> ConflictProfile:
    """Locate sign conflicts and their exact cancellation coefficients.

    For every parameter where both deltas are nonzero and of opposite sign the
    profile records ``lambda* = |delta2| / (|delta1| + |delta2|)``, the
    coefficient at which ``lambda * delta1 + (1 - lambda) * delta2`` vanishes.
    """
    if d1.base_id != d2.base_id:
        raise BaseIdentityError(
            f"DeltaSets refer to different bases: '{d1.base_id}' and '{d2.base_id}'"
        )
    check_congruent(d1.tensors, d2.tensors)

    frames = []
    for name in d1.tensors:
        a = d1.tensors.as_float64(name).ravel()
        b = d2.tensors.as_float64(name).ravel()
        idx = np.flatnonzero(np.sign(a) * np.sign(b) < 0)
        if idx.size == 0:
            continue
        abs_a, abs_b = np.abs(a[idx]), np.abs(b[idx])
        frames.append(
            pd.DataFrame(
                {
                    "tensor": name,
                    "index": idx,
                    "delta1": a[idx],
                    "delta2": b[idx],
                    "lambda_star": abs_b / (abs_a + abs_b),
                }
            )
        )
    if frames:
        records = pd.concat(frames, ignore_index=True)
    else:
        records = pd.DataFrame(
            {
                "tensor": pd.Series(dtype=str),
                "index": pd.Series(dtype=np.int64),
                "delta1": pd.Series(dtype=np.float64),
                "delta2": pd.Series(dtype=np.float64),
                "lambda_star": pd.Series(dtype=np.float64),
            }
        )
    profile = ConflictProfile(records=records, n_parameters=d1.n_parameters)
    logger.debug(f"Conflict profile: {len(records)} of {d1.n_parameters} parameters")
    return profile
