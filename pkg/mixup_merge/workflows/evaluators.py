"""Scoring merged checkpoints per task.

An evaluator turns a checkpoint and a task id into a score between 0 and 100.
Two kinds exist: the built-in lab evaluator (``lab:<seed>``) and an external
command (``cmd:<command>``) that is run as
``<command> <checkpoint path> <task id>`` and must print one number.
"""

import logging
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from mixup_merge.checkpoint import dumps
from mixup_merge.components.config import LabConfig
from mixup_merge.errors import EvaluatorError
from mixup_merge.tensors import TensorMap
from mixup_merge.workflows.toy import TASK_IDS, ToyTasks, make_tasks, mse

__all__ = ["Evaluator", "ExternalEvaluator", "LabEvaluator", "parse_evaluator"]

logger = logging.getLogger(__name__)


@runtime_checkable
class Evaluator(Protocol):
    task_ids: tuple[str, ...]

    @property
    def spec(self) -> str: ...

    def score(self, checkpoint: TensorMap, task_id: str) -> float: ...


class LabEvaluator:
    """Held-out score ``100 * max(0, 1 - mse / var(y))`` on the lab tasks of a seed."""

    task_ids = TASK_IDS

    def __init__(
        self, seed: int, config: LabConfig | None = None, tasks: ToyTasks | None = None
    ):
        self.seed = seed
        self.config = config or LabConfig()
        self._tasks = tasks

    @property
    def spec(self) -> str:
        return f"lab:{self.seed}"

    @property
    def tasks(self) -> ToyTasks:
        if self._tasks is None:
            c = self.config
            self._tasks = make_tasks(self.seed, c.n_inputs, c.n_train, c.n_test)
        return self._tasks

    def loss(self, checkpoint: TensorMap, task_id: str) -> float:
        if task_id not in self.task_ids:
            raise EvaluatorError(f"Unknown task '{task_id}', select from {self.task_ids}")
        try:
            return mse(checkpoint, self.tasks.x_test, self.tasks.y_test[task_id])
        except (KeyError, ValueError) as e:
            raise EvaluatorError(
                f"Checkpoint {checkpoint.identity} does not fit the lab network: {e}"
            ) from e

    def score(self, checkpoint: TensorMap, task_id: str) -> float:
        loss = self.loss(checkpoint, task_id)
        return 100.0 * max(0.0, 1.0 - loss / self.tasks.variance(task_id))


class ExternalEvaluator:
    """Child-process evaluator: receives a checkpoint path and a task id."""

    def __init__(
        self,
        command: str,
        task_ids: tuple[str, ...] = TASK_IDS,
        timeout: float | None = None,
    ):
        if not command.strip():
            raise EvaluatorError("External evaluator command is empty")
        self.command = command
        self.task_ids = tuple(task_ids)
        self.timeout = timeout

    @property
    def spec(self) -> str:
        return f"cmd:{self.command}"

    def score(self, checkpoint: TensorMap, task_id: str) -> float:
        with tempfile.TemporaryDirectory(prefix="mixup-merge-") as tmp:
            path = Path(tmp) / "candidate.ckpt"
            path.write_bytes(dumps(checkpoint))
            args = [*shlex.split(self.command), str(path), task_id]
            try:
                proc = subprocess.run(
                    args, capture_output=True, text=True, timeout=self.timeout, check=False
                )
            except (OSError, subprocess.TimeoutExpired) as e:
                raise EvaluatorError(f"Evaluator '{self.command}' failed to run: {e}") from e
        if proc.returncode != 0:
            raise EvaluatorError(
                f"Evaluator '{self.command}' exited with {proc.returncode} on {task_id}: "
                f"{proc.stderr.strip()}"
            )
        try:
            value = float(proc.stdout.strip())
        except ValueError as e:
            raise EvaluatorError(
                f"Evaluator '{self.command}' printed {proc.stdout.strip()!r}, expected one number"
            ) from e
        if not np.isfinite(value) or not 0.0 <= value <= 100.0:
            raise EvaluatorError(f"Evaluator score {value} on {task_id} is outside [0, 100]")
        return value


def parse_evaluator(
    spec: str, task_ids: tuple[str, ...] = TASK_IDS, lab: LabConfig | None = None
) -> Evaluator:
    """Build an evaluator from ``lab:<seed>`` or ``cmd:<command>``."""
    kind, sep, value = spec.partition(":")
    if not sep:
        raise EvaluatorError(f"Evaluator spec '{spec}' must look like lab:<seed> or cmd:<command>")
    if kind == "lab":
        try:
            seed = int(value)
        except ValueError as e:
            raise EvaluatorError(f"Lab evaluator needs an integer seed, got '{value}'") from e
        return LabEvaluator(seed, lab)
    if kind == "cmd":
        return ExternalEvaluator(value, task_ids=task_ids)
    raise EvaluatorError(f"Unknown evaluator kind '{kind}', select from ['lab', 'cmd']")
