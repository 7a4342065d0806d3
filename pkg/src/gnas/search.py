"""Greedy layer-wise architecture search with shared weights.

One round sweeps the searchable connection layers from the top down. For a
layer with ``B`` candidate parents it evaluates exactly ``B`` candidate
architectures: candidate ``b`` wires every child block to parent ``b``,
trains the shared weights for a few minibatches, and measures per-attribute
validation accuracy. Because the network is a tree, the accuracy of the
attributes below child ``j`` credits the connection ``b -> j``, and each
child independently keeps its best parent.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .arch import (Architecture, DescendantIndex, NetworkShape, descendants,
                   random_architecture, set_layer_uniform_parent)
from .errors import BudgetExhausted, EmptyDescendants
from .nn import Batch, WeightStore, correct_counts, train_step

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    train_iters_per_candidate: int = 50
    valid_batches: int | None = 5  # None evaluates on the whole validation split
    lr_decay_per_round: float = 0.96
    convergence_patience: int = 3
    max_rounds: int = 30
    rng_seed: int = 0
    max_seconds: float | None = None
    dtype: str = "float64"
    workers: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.valid_batches is not None and self.valid_batches < 1:
            raise ValueError("valid_batches must be >= 1 (or None for the full split)")
        if self.convergence_patience < 1:
            raise ValueError("convergence_patience must be >= 1")
        if self.batch_size < 1 or self.train_iters_per_candidate < 0 or self.max_rounds < 1:
            raise ValueError("batch_size and max_rounds must be >= 1, "
                             "train_iters_per_candidate >= 0")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")


class BatchStream:
    """Endless minibatches from one split; reshuffled every epoch."""

    def __init__(self, batch: Batch, batch_size: int, rng: np.random.Generator):
        self.batch, self.batch_size, self.rng = batch, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> Batch:
        n = len(self.batch)
        if self._pos + min(self.batch_size, n) > len(self._order):
            self._order = self.rng.permutation(n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += len(idx)
        return Batch(self.batch.features[idx], self.batch.labels[idx])


def draw_valid(valid: Batch, cfg: SearchConfig, rng: np.random.Generator) -> list[Batch]:
    """``cfg.valid_batches`` shuffled validation minibatches (whole split if None)."""
    if cfg.valid_batches is None:
        return [valid]
    n = len(valid)
    order = rng.permutation(n)[:cfg.valid_batches * cfg.batch_size]
    return [Batch(valid.features[order[s:s + cfg.batch_size]],
                  valid.labels[order[s:s + cfg.batch_size]])
            for s in range(0, len(order), cfg.batch_size)]


@dataclass
class SearchContext:
    """Mutable run state: seeded streams, current learning rate, candidate counter."""

    data: object
    cfg: SearchConfig
    train: BatchStream
    valid_rng: np.random.Generator
    arch_rng: np.random.Generator
    arch_seed: int
    store_seed: int
    lr: float
    candidates: int = 0
    started: float = field(default_factory=time.perf_counter)

    @classmethod
    def create(cls, data, cfg: SearchConfig) -> "SearchContext":
        kids = np.random.SeedSequence(cfg.rng_seed).spawn(5)
        arch_seed = int(kids[0].generate_state(1)[0])
        store_seed = int(kids[1].generate_state(1)[0])
        train = BatchStream(data.train, cfg.batch_size, np.random.default_rng(kids[2]))
        return cls(data, cfg, train, np.random.default_rng(kids[3]),
                   np.random.default_rng(kids[4]), arch_seed, store_seed, cfg.lr)

    def new_store(self, shape: NetworkShape) -> WeightStore:
        return WeightStore(shape, seed=self.store_seed, dtype=np.dtype(self.cfg.dtype))

    def elapsed_ms(self) -> float:
        return (time.perf_counter() - self.started) * 1000.0


@dataclass
class RewardTable:
    """Rewards for one layer update.

    ``rewards[b, j]`` is the reward of connection ``b -> j``; NaN marks child
    blocks without descendant attributes. ``accuracies[b]`` holds the
    per-attribute validation accuracy of candidate ``b``.
    """

    layer: int
    rewards: np.ndarray
    accuracies: np.ndarray
    chosen_parents: tuple


@dataclass
class RoundRecord:
    round: int
    layer: int
    rewards: list
    chosen_parents: list
    mean_reward: float
    elapsed_ms: float
    candidates: int
    lr: float
    monitor_reward: float | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {"method": "gnas", "round": self.round, "layer": self.layer,
             "rewards": self.rewards, "chosen_parents": self.chosen_parents,
             "mean_reward": self.mean_reward,
             "elapsed_ms": round(self.elapsed_ms, 3) if include_timing else None,
             "candidates": self.candidates, "lr": self.lr}
        if self.monitor_reward is not None:
            d["monitor_reward"] = self.monitor_reward
        return d


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    num_candidates: int = 0

    def append(self, record: RoundRecord) -> None:
        self.records.append(record)

    def to_jsonl(self, include_timing: bool = True) -> str:
        return "".join(json.dumps(r.to_dict(include_timing)) + "\n" for r in self.records)


def block_reward(acc: Sequence[float], desc: DescendantIndex, layer: int, block: int) -> float:
    """Mean accuracy of the attributes below ``block`` of ``layer``."""
    members = desc.of(layer, block)
    if not members:
        raise EmptyDescendants(f"block {block} of layer {layer} has no descendant attributes")
    return float(sum(acc[n] for n in sorted(members)) / len(members))


def mean_reward(shape, arch, store, batches: Sequence[Batch], workers: int = 0) -> float:
    counts, total = correct_counts(shape, arch, store, batches, workers)
    return float(counts.sum() / (len(counts) * total))


def train_architecture(shape, arch, store, stream: BatchStream, iters: int, lr: float,
                       cfg: SearchConfig) -> list[float]:
    return [train_step(shape, arch, store, stream.next(), lr, cfg.momentum, cfg.weight_decay)
            for _ in range(iters)]


def _candidate_counts(shape, arch, store, layer, parent, cfg, ctx, valid):
    cand = set_layer_uniform_parent(arch, layer, parent)
    train_architecture(shape, cand, store, ctx.train, cfg.train_iters_per_candidate, ctx.lr, cfg)
    ctx.candidates += 1
    return correct_counts(shape, cand, store, valid, cfg.workers)


def evaluate_parent_candidate(shape, arch, store, layer: int, parent: int, data,
                              cfg: SearchConfig, ctx: SearchContext | None = None,
                              valid: Sequence[Batch] | None = None) -> np.ndarray:
    """Train and score the candidate that hangs all of ``layer + 1`` off ``parent``."""
    ctx = ctx or SearchContext.create(data, cfg)
    if valid is None:
        valid = draw_valid(data.valid, cfg, ctx.valid_rng)
    counts, total = _candidate_counts(shape, arch, store, layer, parent, cfg, ctx, valid)
    return counts / total


def update_layer(shape: NetworkShape, arch: Architecture, store: WeightStore, layer: int,
                 data, cfg: SearchConfig, ctx: SearchContext | None = None,
                 valid: Sequence[Batch] | None = None) -> tuple[Architecture, RewardTable]:
    """Re-choose every parent in connection layer ``layer``.

    All candidates are scored on the same validation batches. Ties go to the
    lowest parent index; children without descendants keep their parent.
    """
    n_parents = shape.block_counts[layer]
    if n_parents < 2:
        raise ValueError(f"layer {layer} has a single block; nothing to search")
    ctx = ctx or SearchContext.create(data, cfg)
    if valid is None:
        valid = draw_valid(data.valid, cfg, ctx.valid_rng)
    desc = descendants(shape, arch)
    children = desc.sets[layer + 1]
    n_children = len(children)

    accs = np.zeros((n_parents, shape.num_attributes))
    sums = np.zeros((n_parents, n_children), dtype=np.int64)
    total = 0
    for b in range(n_parents):
        counts, total = _candidate_counts(shape, arch, store, layer, b, cfg, ctx, valid)
        accs[b] = counts / total
        for j, members in enumerate(children):
            if members:
                sums[b, j] = counts[sorted(members)].sum()

    sizes = np.array([len(m) for m in children], dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        rewards = sums / (sizes * total)
    rewards[:, sizes == 0] = np.nan

    # integer sums share a denominator per child, so argmax on them is exact
    parents = list(arch.parents[layer])
    for j in range(n_children):
        if sizes[j]:
            parents[j] = int(np.argmax(sums[:, j]))
    new_arch = arch.with_layer(layer, parents)
    return new_arch, RewardTable(layer, rewards, accs, tuple(parents))


def run_search(shape: NetworkShape, data, cfg: SearchConfig, *,
               ctx: SearchContext | None = None, store: WeightStore | None = None,
               arch: Architecture | None = None, monitor: Batch | None = None,
               on_record: Callable[[RoundRecord], None] | None = None):
    """Alternate shared-weight training and greedy layer updates until stable.

    Stops once a full round leaves the architecture unchanged for
    ``cfg.convergence_patience`` consecutive rounds, or after ``cfg.max_rounds``
    rounds (``trace.converged`` is then False). Exceeding ``cfg.max_seconds``
    raises BudgetExhausted with the current state attached.
    Returns ``(arch, store, trace)``.
    """
    ctx = ctx or SearchContext.create(data, cfg)
    if arch is None:
        arch = random_architecture(shape, ctx.arch_seed)
    if store is None:
        store = ctx.new_store(shape)
    trace = SearchTrace()
    layers = sorted(shape.searchable_layers(), reverse=True)
    if not layers:
        trace.converged = True
        return arch, store, trace

    stable = 0
    for rnd in range(cfg.max_rounds):
        changed = False
        for layer in layers:
            valid = draw_valid(data.valid, cfg, ctx.valid_rng)
            new_arch, table = update_layer(shape, arch, store, layer, data, cfg, ctx, valid)
            changed |= new_arch != arch
            arch = new_arch
            rec = RoundRecord(
                round=rnd, layer=layer,
                rewards=[[None if np.isnan(v) else float(v) for v in row] for row in table.rewards],
                chosen_parents=list(table.chosen_parents),
                mean_reward=mean_reward(shape, arch, store, valid, cfg.workers),
                elapsed_ms=ctx.elapsed_ms(), candidates=ctx.candidates, lr=ctx.lr,
                monitor_reward=None if monitor is None else mean_reward(shape, arch, store, [monitor]))
            trace.append(rec)
            trace.num_candidates = ctx.candidates
            if on_record:
                on_record(rec)
            log.debug("round %d layer %d R=%.4f parents=%s", rnd, layer,
                      rec.mean_reward, rec.chosen_parents)
            if cfg.max_seconds is not None and ctx.elapsed_ms() > cfg.max_seconds * 1000:
                raise BudgetExhausted(f"search exceeded {cfg.max_seconds} s",
                                      arch=arch, store=store, trace=trace)
        ctx.lr *= cfg.lr_decay_per_round
        stable = 0 if changed else stable + 1
        if stable >= cfg.convergence_patience:
            trace.converged = True
            break
    return arch, store, trace


def finetune(shape, arch, store, train_plus_valid: Batch, cfg: SearchConfig, iters: int,
             lr: float | None = None, rng_seed: int | None = None,
             losses: list | None = None) -> WeightStore:
    """Train the fixed architecture ``arch`` on the merged train+valid rows.

    Per-step training losses are appended to ``losses`` when it is given.
    """
    seed = cfg.rng_seed if rng_seed is None else rng_seed
    stream = BatchStream(train_plus_valid, cfg.batch_size,
                         np.random.default_rng([seed, 7]))
    history = train_architecture(shape, arch, store, stream, iters,
                                 cfg.lr if lr is None else lr, cfg)
    if losses is not None:
        losses.extend(history)
    return store
