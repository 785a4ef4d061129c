"""Curriculum stages, seeded K->N pattern sampling and the cosine LR schedule."""

import itertools
import math
from functools import lru_cache

import numpy as np

from .config import STAGES, ConfigValidationError, CurriculumSchedule
from .types import ContractError, K2NTask, task_from_indices

UNIFORM = "uniform"


def stage_of(epoch: int, sched: CurriculumSchedule) -> str:
    if not (0 <= epoch < sched.total_epochs):
        raise ContractError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    for name, end in zip(STAGES, sched.boundaries()):
        if epoch < end:
            return name
    return STAGES[-1]


def pattern_rng(seed, epoch, batch, rank=0):
    return np.random.default_rng([int(seed), int(epoch), int(batch), int(rank)])


@lru_cache(maxsize=16)
def _all_disjoint_patterns(M):
    out = []
    idx = range(M)
    for k in range(1, M):
        for ins in itertools.combinations(idx, k):
            rest = [j for j in idx if j not in ins]
            for n in range(1, len(rest) + 1):
                for outs in itertools.combinations(rest, n):
                    out.append((ins, outs))
    return tuple(out)


def _subset(rng, pool, size):
    return sorted(int(x) for x in rng.choice(pool, size=size, replace=False))


def sample_pattern(stage: str, schema, seed: int, epoch: int, batch: int, rank: int = 0) -> K2NTask:
    """Draw the K->N task for one batch; a pure function of its arguments.

    easy: 1->1 without identity; medium: k->1 (k>=2); hard: 1->k (k>=2, input
    never among targets); expert: k->t with disjoint sets; ``uniform`` picks
    any disjoint pattern with equal probability.
    """
    M = len(schema)
    if M < 2:
        raise ConfigValidationError("data.modalities", "curriculum sampling needs at least 2 modalities")
    if stage in ("medium", "hard") and M < 3:
        raise ConfigValidationError("data.modalities", f"stage {stage!r} needs at least 3 modalities")
    rng = pattern_rng(seed, epoch, batch, rank)
    everything = np.arange(M)
    if stage == "easy":
        i = int(rng.integers(M))
        j = int(rng.choice([x for x in range(M) if x != i]))
        ins, outs = [i], [j]
    elif stage == "medium":
        k = int(rng.integers(2, M))
        ins = _subset(rng, everything, k)
        outs = [int(rng.choice([x for x in range(M) if x not in ins]))]
    elif stage == "hard":
        i = int(rng.integers(M))
        rest = np.array([x for x in range(M) if x != i])
        n = int(rng.integers(2, M))
        ins, outs = [i], _subset(rng, rest, n)
    elif stage == "expert":
        k = int(rng.integers(1, M))
        ins = _subset(rng, everything, k)
        rest = np.array([x for x in range(M) if x not in ins])
        n = int(rng.integers(1, len(rest) + 1))
        outs = _subset(rng, rest, n)
    elif stage == UNIFORM:
        patterns = _all_disjoint_patterns(M)
        ins, outs = patterns[int(rng.integers(len(patterns)))]
    else:
        raise ContractError(f"unknown curriculum stage {stage!r}")
    return task_from_indices(ins, outs, schema)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    if not (0 <= step <= total_steps):
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def stage_loss_mask(stage: str):
    """(causal on, metric on) for a curriculum stage."""
    k = STAGES.index(stage)
    return (k >= 1, k >= 2)
