"""Beta(alpha, alpha) sampling of the interpolation coefficient and alpha sweeps.

A coefficient is a deterministic function of ``(alpha, seed)``: two Gamma(alpha, 1)
variates X and Y are drawn from the counter stream ``mix_seed(seed, attempt)`` with
the Marsaglia-Tsang method (shape boosted by one for alpha < 1) and combined as
``X / (X + Y)`` in log space. Draws that round to exactly 0 or 1 are discarded and
the next attempt, i.e. the next substream, is used.
"""

import itertools
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special, stats

from mixup_merge.errors import MixupMergeError
from mixup_merge.prng import MASK64, CounterStream, mix_seed

__all__ = [
    "DEFAULT_ALPHAS",
    "BetaShape",
    "SamplingRecord",
    "SweepSchedule",
    "beta_pdf",
    "draw_lambdas",
    "gamma_log_variate",
    "make_sweep",
    "sample_lambda",
    "sampling_summary",
]

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS: tuple[float, ...] = (0.2, 0.4, 0.5, 1.0, 2.0, 3.0, 5.0)


class BetaShape(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(
        default=...,
        description="Shared shape parameter of the symmetric Beta distribution",
        gt=0,
        allow_inf_nan=False,
    )


class SamplingRecord(BaseModel):
    """Provenance of one interpolation coefficient.

    ``alpha`` and ``seed`` are both absent when ``lambda_m`` was supplied
    explicitly instead of sampled.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float | None = Field(
        default=None,
        description="Beta shape parameter the coefficient was drawn with",
        gt=0,
        allow_inf_nan=False,
    )
    seed: int | None = Field(
        default=None,
        description="64-bit seed of the draw",
        ge=0,
        le=MASK64,
    )
    lambda_m: float = Field(
        default=...,
        description="Interpolation coefficient (weight of the first model)",
        gt=0,
        lt=1,
    )

    @model_validator(mode="after")
    def _alpha_and_seed_together(self) -> "SamplingRecord":
        if (self.alpha is None) != (self.seed is None):
            raise ValueError("alpha and seed must be given together")
        return self

    @property
    def sampled(self) -> bool:
        return self.alpha is not None

    def is_reproducible(self) -> bool:
        """True when ``(alpha, seed)`` regenerate ``lambda_m`` exactly."""
        if self.alpha is None or self.seed is None:
            return False
        return _draw(self.alpha, self.seed) == self.lambda_m


class SweepSchedule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    alphas: tuple[float, ...] = Field(
        default=DEFAULT_ALPHAS,
        description="Beta shape parameters, one coefficient is drawn per value",
    )
    base_seed: int = Field(
        default=0,
        description="Seed the per-alpha seeds are derived from",
        ge=0,
        le=MASK64,
    )


def gamma_log_variate(alpha: float, stream: CounterStream) -> float:
    """Logarithm of a Gamma(alpha, 1) variate (Marsaglia-Tsang).

    For ``alpha < 1`` the variate is ``Gamma(alpha + 1) * U ** (1 / alpha)``; the
    logarithm keeps the small-shape case free of underflow.
    """
    if alpha < 1.0:
        boost = math.log(stream.open_uniform()) / alpha
        return gamma_log_variate(alpha + 1.0, stream) + boost

    d = alpha - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = stream.normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = stream.open_uniform()
        if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
            return math.log(d) + math.log(v)


def _draw(alpha: float, seed: int) -> float:
    for attempt in itertools.count():
        stream = CounterStream(mix_seed(seed, attempt))
        log_x = gamma_log_variate(alpha, stream)
        log_y = gamma_log_variate(alpha, stream)
        lam = float(special.expit(log_x - log_y))
        if 0.0 < lam < 1.0:
            return lam
        logger.debug(f"Rejected endpoint draw {lam} (alpha={alpha}, seed={seed})")
    raise AssertionError("unreachable")


def _as_shape(shape: BetaShape | float) -> BetaShape:
    if isinstance(shape, BetaShape):
        return shape
    try:
        return BetaShape(alpha=shape)
    except ValueError as e:
        raise MixupMergeError(f"Beta shape must be a positive real, got {shape}") from e


def sample_lambda(shape: BetaShape | float, seed: int) -> SamplingRecord:
    """Draw ``lambda_m ~ Beta(alpha, alpha)`` reproducibly from ``seed``.

    Parameters
    ----------
    shape : BetaShape or float
        Shape parameter alpha > 0.
    seed : int
        64-bit unsigned seed.

    Returns
    -------
    SamplingRecord
        ``(alpha, seed, lambda_m)`` with ``0 < lambda_m < 1``.
    """
    shape = _as_shape(shape)
    if not 0 <= seed <= MASK64:
        raise MixupMergeError(f"Seed must be a 64-bit unsigned integer, got {seed}")
    lam = _draw(shape.alpha, seed)
    return SamplingRecord(alpha=shape.alpha, seed=seed, lambda_m=lam)


def draw_lambdas(shape: BetaShape | float, n: int, seed: int = 0) -> np.ndarray:
    """Draw ``n`` coefficients using the seeds ``mix_seed(seed, i)``."""
    alpha = _as_shape(shape).alpha
    return np.array([_draw(alpha, mix_seed(seed, i)) for i in range(n)])


def beta_pdf(shape: BetaShape | float, x: float | np.ndarray) -> float | np.ndarray:
    """Density of Beta(alpha, alpha) on the open interval (0, 1)."""
    alpha = _as_shape(shape).alpha
    xs = np.asarray(x, dtype=np.float64)
    if not np.all((xs > 0.0) & (xs < 1.0)):
        raise MixupMergeError("Beta density is evaluated on the open interval (0, 1)")
    pdf = stats.beta.pdf(xs, alpha, alpha)
    return float(pdf) if np.ndim(pdf) == 0 else pdf


def make_sweep(schedule: SweepSchedule | None = None) -> list[SamplingRecord]:
    """Draw one coefficient per alpha of the schedule.

    The seed of position ``i`` is ``mix_seed(base_seed, i)``, so two sweeps
    with the same base seed produce identical records.
    """
    schedule = schedule or SweepSchedule()
    if not schedule.alphas:
        raise MixupMergeError("A sweep needs at least one alpha")
    records = [
        sample_lambda(alpha, mix_seed(schedule.base_seed, i))
        for i, alpha in enumerate(schedule.alphas)
    ]
    for rec in records:
        logger.debug(f"alpha={rec.alpha:g} seed={rec.seed} lambda_m={rec.lambda_m:.6f}")
    return records


def sampling_summary(shape: BetaShape | float, n: int = 10_000, seed: int = 0) -> dict:
    """Empirical moments and spread of ``n`` draws next to the analytic values."""
    alpha = _as_shape(shape).alpha
    lam = draw_lambdas(alpha, n, seed)
    q1, q3 = np.quantile(lam, [0.25, 0.75])
    return {
        "alpha": alpha,
        "mean": float(lam.mean()),
        "variance": float(lam.var()),
        "variance_expected": 1.0 / (4.0 * (2.0 * alpha + 1.0)),
        "iqr": float(q3 - q1),
        "mass_mid": float(np.mean((lam > 0.4) & (lam < 0.6))),
    }
