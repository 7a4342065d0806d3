"""Random and exhaustive search over tree architectures."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .arch import Architecture, NetworkShape, enumerate_architectures
from .nn import Batch, WeightStore
from .search import (SearchConfig, SearchContext, draw_valid, mean_reward,
                     train_architecture)


@dataclass
class BaselineEntry:
    index: int
    arch: Architecture
    reward: float
    best_reward: float
    elapsed_ms: float
    monitor_reward: float | None = None


@dataclass
class BaselineTrace:
    method: str
    entries: list = field(default_factory=list)

    def append(self, entry: BaselineEntry) -> None:
        if self.entries and entry.best_reward < self.entries[-1].best_reward:
            raise ValueError("best-so-far reward must not decrease")
        self.entries.append(entry)

    def to_jsonl(self, include_timing: bool = True) -> str:
        lines = []
        for e in self.entries:
            d = {"method": self.method, "round": e.index, "layer": None,
                 "rewards": [e.reward], "chosen_parents": [list(p) for p in e.arch.parents],
                 "mean_reward": e.best_reward,
                 "elapsed_ms": round(e.elapsed_ms, 3) if include_timing else None,
                 "candidates": e.index + 1}
            if e.monitor_reward is not None:
                d["monitor_reward"] = e.monitor_reward
            lines.append(json.dumps(d) + "\n")
        return "".join(lines)


def _sample(shape: NetworkShape, rng: np.random.Generator) -> Architecture:
    bc = shape.block_counts
    return Architecture(bc, tuple(tuple(int(p) for p in rng.integers(0, bc[k], size=bc[k + 1]))
                                  for k in range(len(bc) - 1)))


def random_search(shape: NetworkShape, data, store: WeightStore, cfg: SearchConfig,
                  budget: int, *, ctx: SearchContext | None = None,
                  monitor: Batch | None = None) -> tuple[Architecture, BaselineTrace]:
    """Sample ``budget`` architectures uniformly and keep the best validation score.

    Each sample is trained for ``cfg.train_iters_per_candidate`` steps on the
    shared store before scoring, so its cost matches one GNAS candidate. The
    learning rate decays on the same schedule as GNAS: once per block of
    candidates the size of one GNAS round.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    ctx = ctx or SearchContext.create(data, cfg)
    per_round = max(1, sum(shape.block_counts[k] for k in shape.searchable_layers()))
    trace = BaselineTrace("random")
    best, best_r = None, -np.inf
    for c in range(budget):
        arch = _sample(shape, ctx.arch_rng)
        train_architecture(shape, arch, store, ctx.train, cfg.train_iters_per_candidate,
                           ctx.lr, cfg)
        r = mean_reward(shape, arch, store, draw_valid(data.valid, cfg, ctx.valid_rng),
                        cfg.workers)
        ctx.candidates += 1
        if r > best_r:
            best, best_r = arch, r
        mon = None if monitor is None else mean_reward(shape, best, store, [monitor])
        trace.append(BaselineEntry(c, arch, r, best_r, ctx.elapsed_ms(), mon))
        if (c + 1) % per_round == 0:
            ctx.lr *= cfg.lr_decay_per_round
    return best, trace


def exhaustive_search(shape: NetworkShape, data, store: WeightStore, cfg: SearchConfig,
                      *, limit: int = 10**4, workers: int | None = None
                      ) -> tuple[Architecture, float]:
    """Exact argmax of mean validation accuracy over every architecture (frozen store).

    Uses the whole validation split. Ties go to the lexicographically smallest
    parent lists.
    """
    archs = list(enumerate_architectures(shape, limit))
    for a in archs:
        store.ensure(a)
    valid = [data.valid]
    workers = cfg.workers if workers is None else workers
    if workers:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rewards = list(ex.map(lambda a: mean_reward(shape, a, store, valid), archs))
    else:
        rewards = [mean_reward(shape, a, store, valid) for a in archs]
    i = int(np.argmax(rewards))
    return archs[i], float(rewards[i])
