"""Two-hidden-layer tanh network and the synthetic regression tasks of the lab.

All training arithmetic is float64; parameters are handed out as float32
:class:`~mixup_merge.tensors.TensorMap` checkpoints.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from mixup_merge.errors import MixupMergeError, TrainingDivergedError
from mixup_merge.tensors import TensorMap

__all__ = [
    "TASK_IDS",
    "ToyTasks",
    "finite_difference_check",
    "init_params",
    "loss_and_grad",
    "make_tasks",
    "mse",
    "predict",
    "train",
]

logger = logging.getLogger(__name__)

TASK_IDS = ("task1", "task2")
LAYERS = ("layer1", "layer2", "head")

Params = dict[str, np.ndarray]


def _shared(x: np.ndarray) -> np.ndarray:
    return np.sin(np.pi * x[:, 0]) * np.cos(0.5 * np.pi * x[:, 1]) + 0.5 * x[:, 2] * x[:, 3]


def _task1(x: np.ndarray) -> np.ndarray:
    return 0.8 * np.cos(2.0 * x[:, 3] + x[:, 0])


def _task2(x: np.ndarray) -> np.ndarray:
    return 0.6 * np.tanh(2.0 * x[:, 1] - x[:, 3]) + 0.3 * x[:, 0] ** 2


@dataclass(frozen=True)
class ToyTasks:
    """Inputs and targets of the pretext objective and both tasks.

    Every target shares the ``pretext`` component; the tasks add distinct
    smooth functions of the same inputs.
    """

    seed: int
    x_train: np.ndarray
    x_test: np.ndarray
    y_train: Mapping[str, np.ndarray]
    y_test: Mapping[str, np.ndarray]

    def variance(self, task: str) -> float:
        return float(np.var(self.y_test[task]))


def make_tasks(seed: int, n_inputs: int = 4, n_train: int = 256, n_test: int = 256) -> ToyTasks:
    """Draw the inputs of one lab instance; targets are fixed functions of them."""
    if n_inputs < 4:
        raise MixupMergeError(f"The synthetic targets need at least 4 inputs, got {n_inputs}")
    rng = np.random.default_rng([seed, 0])
    x_train = rng.uniform(-1.0, 1.0, size=(n_train, n_inputs))
    x_test = rng.uniform(-1.0, 1.0, size=(n_test, n_inputs))

    def targets(x: np.ndarray) -> dict[str, np.ndarray]:
        shared = _shared(x)
        return {"pretext": shared, "task1": shared + _task1(x), "task2": shared + _task2(x)}

    return ToyTasks(
        seed=seed,
        x_train=x_train,
        x_test=x_test,
        y_train=targets(x_train),
        y_test=targets(x_test),
    )


def init_params(seed: int, n_inputs: int, hidden: tuple[int, int]) -> Params:
    """Scaled normal weights and zero biases."""
    rng = np.random.default_rng([seed, 1])
    widths = (n_inputs, *hidden, 1)
    params = {}
    for layer, fan_in, fan_out in zip(LAYERS, widths[:-1], widths[1:], strict=True):
        params[f"{layer}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        params[f"{layer}.bias"] = np.zeros(fan_out)
    return params


def _forward(params: Mapping[str, np.ndarray], x: np.ndarray) -> tuple[np.ndarray, ...]:
    h1 = np.tanh(x @ params["layer1.weight"].T + params["layer1.bias"])
    h2 = np.tanh(h1 @ params["layer2.weight"].T + params["layer2.bias"])
    y = h2 @ params["head.weight"].T + params["head.bias"]
    return h1, h2, y[:, 0]


def predict(params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    if isinstance(params, TensorMap):
        params = {n: params.as_float64(n) for n in params}
    return _forward(params, x)[2]


def mse(params: Mapping[str, np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((predict(params, x) - y) ** 2))


def loss_and_grad(params: Params, x: np.ndarray, y: np.ndarray) -> tuple[float, Params]:
    """Mean squared error and its analytic gradient."""
    h1, h2, out = _forward(params, x)
    err = out - y
    loss = float(np.mean(err**2))

    g_out = (2.0 / len(y)) * err[:, None]
    g_a2 = (g_out @ params["head.weight"]) * (1.0 - h2**2)
    g_a1 = (g_a2 @ params["layer2.weight"]) * (1.0 - h1**2)
    grads = {
        "head.weight": g_out.T @ h2,
        "head.bias": g_out.sum(axis=0),
        "layer2.weight": g_a2.T @ h1,
        "layer2.bias": g_a2.sum(axis=0),
        "layer1.weight": g_a1.T @ x,
        "layer1.bias": g_a1.sum(axis=0),
    }
    return loss, grads


def train(
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    learning_rate: float,
    *,
    seed: int,
    phase: str,
) -> Params:
    """Full-batch gradient descent; a non-finite loss aborts with the seed reported."""
    params = {n: v.copy() for n, v in params.items()}
    loss = float("nan")
    for step in range(steps):
        loss, grads = loss_and_grad(params, x, y)
        if not np.isfinite(loss):
            raise TrainingDivergedError(seed, phase, step)
        for n in params:
            params[n] -= learning_rate * grads[n]
    logger.debug(f"seed {seed} {phase}: training loss {loss:.5f} after {steps} steps")
    return params


def finite_difference_check(
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    n_coords: int = 100,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Parameters
    ----------
    params : dict
        Float64 parameters.
    x, y : numpy.ndarray
        Batch the loss is evaluated on.
    n_coords : int
        Number of randomly chosen coordinates compared.
    eps : float
        Half-width of the central difference.
    seed : int
        Seed of the coordinate choice.

    Returns
    -------
    float
        ``max |a - n| / max(|a| + |n|, 1e-6)`` over the chosen coordinates.
    """
    _, grads = loss_and_grad(params, x, y)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    rng = np.random.default_rng([seed, 2])
    flat_idx = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for k in flat_idx:
        t = int(np.searchsorted(bounds, k, side="right"))
        name = names[t]
        i = int(k - (bounds[t] - sizes[t]))
        shifted = {n: v.copy() for n, v in params.items()}
        flat = shifted[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_and_grad(shifted, x, y)[0]
        flat[i] = orig - eps
        down = loss_and_grad(shifted, x, y)[0]
        numeric = (up - down) / (2.0 * eps)
        analytic = float(grads[name].reshape(-1)[i])
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst
