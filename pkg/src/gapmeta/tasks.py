"""Sinusoid few-shot regression tasks and the fixed-seed evaluation protocol.

A task is one sinusoid y(x) = A sin(w x + b) with A in [0.1, 5.0],
w in [0.8, 1.2] and b in [0, pi]; inputs are drawn uniformly from
[-5, 5].  Episode generation is a pure function of (task, sizes, rng), and
the evaluation protocol derives one rng per task from (seed, task_index), so
results are independent of worker count and evaluation order.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError

Array = np.ndarray

AMPLITUDE_RANGE = (0.1, 5.0)
FREQUENCY_RANGE = (0.8, 1.2)
PHASE_RANGE = (0.0, float(np.pi))
INPUT_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class SinusoidTask:
    amplitude: float
    frequency: float
    phase: float

    def y(self, x: Array) -> Array:
        return self.amplitude * np.sin(self.frequency * x + self.phase)


@dataclass(frozen=True)
class Episode:
    """Support points for adaptation, query points for evaluation."""

    support_x: Array
    support_y: Array
    query_x: Array
    query_y: Array


def sample_task(rng: np.random.Generator) -> SinusoidTask:
    return SinusoidTask(
        amplitude=float(rng.uniform(*AMPLITUDE_RANGE)),
        frequency=float(rng.uniform(*FREQUENCY_RANGE)),
        phase=float(rng.uniform(*PHASE_RANGE)),
    )


def make_episode(
    task: SinusoidTask, shots: int, query_size: int, rng: np.random.Generator
) -> Episode:
    """Independent uniform draws for support and query; y from the closed form."""
    if shots < 1:
        raise DomainError("make_episode: shots must be >= 1")
    if query_size < 1:
        raise DomainError("make_episode: query_size must be >= 1")
    sx = rng.uniform(*INPUT_RANGE, size=(shots, 1))
    qx = rng.uniform(*INPUT_RANGE, size=(query_size, 1))
    return Episode(
        support_x=sx, support_y=task.y(sx), query_x=qx, query_y=task.y(qx)
    )


def episode_for_index(
    seed: int, task_index: int, shots: int, query_size: int
) -> tuple[SinusoidTask, Episode]:
    """Task + episode from the derived seed (seed, task_index)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, task_index)))
    task = sample_task(rng)
    return task, make_episode(task, shots, query_size, rng)


def training_source(cfg) -> Callable[[int], list[Episode]]:
    """Fresh batch per outer iteration, seeds derived as (seed, iteration, slot)."""
    shots = cfg.shots
    qsize = cfg.effective_train_query()

    def source(iteration: int) -> list[Episode]:
        batch = []
        for slot in range(cfg.batch_size):
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, iteration, slot))
            )
            task = sample_task(rng)
            batch.append(make_episode(task, shots, qsize, rng))
        return batch

    return source


@dataclass(frozen=True)
class EvalResult:
    mean_mse: float
    ci95: float
    rows: tuple[tuple[int, float, float, float, float], ...]
    """(task_index, amplitude, frequency, phase, mse) per task."""


def _eval_chunk(payload) -> list[tuple[int, float, float, float, float]]:
    from .metaloop import meta_test

    state, alpha, k_steps, shots, query_size, seed, indices = payload
    rows = []
    for i in indices:
        task, ep = episode_for_index(seed, i, shots, query_size)
        mse = float(meta_test(state, [ep], alpha, k_steps)[0])
        rows.append((i, task.amplitude, task.frequency, task.phase, mse))
    return rows


def evaluate_protocol(
    state,
    n_tasks: int,
    shots: int,
    seed: int,
    *,
    alpha: float,
    k_steps_test: int,
    query_size: int = 100,
    workers: int = 1,
) -> EvalResult:
    """Mean query MSE over n_tasks fixed-seed tasks with a normal-approximation
    95% confidence interval (1.96 * sample std / sqrt(n))."""
    if n_tasks < 2:
        raise DomainError("evaluate_protocol: n_tasks must be >= 2")
    indices = list(range(n_tasks))
    if workers > 1:
        chunks = [indices[i::workers] for i in range(workers)]
        payloads = [
            (state, alpha, k_steps_test, shots, query_size, seed, chunk)
            for chunk in chunks
            if chunk
        ]
        rows = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_eval_chunk, payloads):
                rows.extend(part)
        rows.sort(key=lambda r: r[0])  # fixed reduction order
    else:
        rows = _eval_chunk((state, alpha, k_steps_test, shots, query_size, seed, indices))

    mses = np.array([r[4] for r in rows])
    mean = float(mses.mean())
    if n_tasks > 1:
        ci = float(1.96 * mses.std(ddof=1) / np.sqrt(n_tasks))
    else:
        ci = 0.0
    return EvalResult(mean_mse=mean, ci95=ci, rows=tuple(rows))
