"""Tree-structured architectures over a fixed grid of blocks.

Layers and blocks are 0-indexed. Layer 0 holds the single input block and the
last layer holds one block per attribute. An architecture stores, for every
layer ``k >= 1``, the parent index (in layer ``k - 1``) of each block. Since
every block has exactly one parent, the tree constraint cannot be violated.

``parents[k]`` describes the connections from layer ``k`` to layer ``k + 1``,
so "connection layer" ``k`` chooses among ``block_counts[k]`` parents.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ParentOutOfRange, ShapeMismatch, SpaceTooLarge


@dataclass(frozen=True)
class NetworkShape:
    """Block counts and channel widths of the predefined graph."""

    block_counts: tuple[int, ...]
    channel_widths: tuple[int, ...]
    head_width: int = 16

    def __post_init__(self):
        bc = tuple(int(b) for b in self.block_counts)
        cw = tuple(int(w) for w in self.channel_widths)
        object.__setattr__(self, "block_counts", bc)
        object.__setattr__(self, "channel_widths", cw)
        if len(bc) < 2:
            raise ShapeMismatch(f"need at least 2 layers, got block_counts={bc}")
        if bc[0] != 1:
            raise ShapeMismatch(f"first layer must hold a single block, got {bc[0]}")
        if any(b < 1 for b in bc):
            raise ShapeMismatch(f"block counts must be positive: {bc}")
        if len(cw) != len(bc):
            raise ShapeMismatch(
                f"channel_widths has {len(cw)} entries for {len(bc)} layers")
        if any(w < 1 for w in cw) or self.head_width < 1:
            raise ShapeMismatch(f"widths must be positive: {cw}, head={self.head_width}")

    @property
    def num_layers(self) -> int:
        return len(self.block_counts)

    @property
    def num_attributes(self) -> int:
        return self.block_counts[-1]

    @property
    def input_dim(self) -> int:
        return self.channel_widths[0]

    def searchable_layers(self) -> list[int]:
        """Connection layers with an actual choice of parent (``B_k > 1``)."""
        return [k for k in range(self.num_layers - 1) if self.block_counts[k] > 1]

    def to_dict(self) -> dict:
        return {"block_counts": list(self.block_counts),
                "channel_widths": list(self.channel_widths),
                "head_width": self.head_width}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkShape":
        return cls(tuple(d["block_counts"]), tuple(d["channel_widths"]),
                   int(d.get("head_width", 16)))


@dataclass(frozen=True)
class Architecture:
    block_counts: tuple[int, ...]
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        object.__setattr__(self, "parents",
                           tuple(tuple(int(p) for p in layer) for layer in self.parents))

    def parent(self, layer: int, child: int) -> int:
        """Parent (in ``layer``) of block ``child`` of ``layer + 1``."""
        return self.parents[layer][child]

    def connections(self) -> Iterator[tuple[int, int, int]]:
        for k, layer in enumerate(self.parents):
            for j, i in enumerate(layer):
                yield (k, i, j)

    def adjacency(self) -> list[np.ndarray]:
        """Binary matrices ``A[k][i, j] = 1`` iff block i of layer k feeds block j."""
        mats = []
        for k, layer in enumerate(self.parents):
            a = np.zeros((self.block_counts[k], self.block_counts[k + 1]), dtype=np.int64)
            a[list(layer), np.arange(len(layer))] = 1
            mats.append(a)
        return mats

    def with_layer(self, layer: int, new_parents: Sequence[int]) -> "Architecture":
        parents = list(self.parents)
        parents[layer] = tuple(int(p) for p in new_parents)
        return Architecture(self.block_counts, tuple(parents))

    def to_json(self) -> str:
        return json.dumps({"block_counts": list(self.block_counts),
                           "parents": [list(p) for p in self.parents]})

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        d = json.loads(text)
        if not isinstance(d, dict) or "block_counts" not in d or "parents" not in d:
            raise ShapeMismatch("architecture JSON needs 'block_counts' and 'parents'")
        arch = cls(tuple(d["block_counts"]), tuple(tuple(p) for p in d["parents"]))
        _check(arch.block_counts, arch)
        return arch


@dataclass(frozen=True)
class DescendantIndex:
    """``sets[k][i]``: attributes (0-based) reachable from block i of layer k."""

    sets: tuple[tuple[frozenset, ...], ...] = field(default_factory=tuple)

    def of(self, layer: int, block: int) -> frozenset:
        return self.sets[layer][block]

    def live(self, layer: int, block: int) -> bool:
        return bool(self.sets[layer][block])


def _counts(shape) -> tuple[int, ...]:
    if isinstance(shape, NetworkShape):
        return shape.block_counts
    return tuple(int(b) for b in shape)


def _check(bc: Sequence[int], arch: Architecture) -> None:
    if tuple(arch.block_counts) != tuple(bc):
        raise ShapeMismatch(
            f"architecture block counts {arch.block_counts} != shape {tuple(bc)}")
    if len(arch.parents) != len(bc) - 1:
        raise ShapeMismatch(
            f"expected {len(bc) - 1} parent lists, got {len(arch.parents)}")
    for k, layer in enumerate(arch.parents):
        if len(layer) != bc[k + 1]:
            raise ShapeMismatch(
                f"layer {k + 1} has {bc[k + 1]} blocks but {len(layer)} parents")
        for j, p in enumerate(layer):
            if not 0 <= p < bc[k]:
                raise ParentOutOfRange(
                    f"block {j} of layer {k + 1} has parent {p}, "
                    f"layer {k} has {bc[k]} blocks")


def validate(shape: NetworkShape, arch: Architecture) -> None:
    """Raise ShapeMismatch / ParentOutOfRange unless ``arch`` fits ``shape``."""
    _check(_counts(shape), arch)


def make_architecture(shape, parents: Sequence[Sequence[int]]) -> Architecture:
    arch = Architecture(_counts(shape), tuple(tuple(p) for p in parents))
    _check(_counts(shape), arch)
    return arch


def random_architecture(shape, rng_seed: int) -> Architecture:
    """Draw every parent uniformly and independently."""
    bc = _counts(shape)
    rng = np.random.default_rng(rng_seed)
    parents = tuple(tuple(int(p) for p in rng.integers(0, bc[k], size=bc[k + 1]))
                    for k in range(len(bc) - 1))
    return Architecture(bc, parents)


def descendants(shape, arch: Architecture) -> DescendantIndex:
    bc = _counts(shape)
    _check(bc, arch)
    m = len(bc)
    sets: list[list[frozenset]] = [[] for _ in range(m)]
    sets[m - 1] = [frozenset([j]) for j in range(bc[m - 1])]
    for k in range(m - 2, -1, -1):
        acc: list[set] = [set() for _ in range(bc[k])]
        for j, i in enumerate(arch.parents[k]):
            acc[i] |= sets[k + 1][j]
        sets[k] = [frozenset(s) for s in acc]
    return DescendantIndex(tuple(tuple(s) for s in sets))


def count_architectures(shape) -> float:
    """log10 of the number of tree architectures, ``sum_k B_{k+1} log10 B_k``."""
    bc = _counts(shape)
    return math.fsum(bc[k + 1] * math.log10(bc[k]) for k in range(len(bc) - 1))


def count_architectures_exact(shape) -> int:
    bc = _counts(shape)
    return math.prod(bc[k] ** bc[k + 1] for k in range(len(bc) - 1))


def enumerate_architectures(shape, limit: int = 10**4) -> Iterator[Architecture]:
    """Yield every architecture once, in lexicographic order of the flattened parents."""
    bc = _counts(shape)
    if count_architectures(bc) > math.log10(limit) + 1e-12:
        raise SpaceTooLarge(
            f"search space of 10^{count_architectures(bc):.2f} exceeds limit {limit}")
    slots = [range(bc[k]) for k in range(len(bc) - 1) for _ in range(bc[k + 1])]
    bounds = list(itertools.accumulate([0] + [bc[k + 1] for k in range(len(bc) - 1)]))
    for flat in itertools.product(*slots):
        parents = tuple(flat[bounds[k]:bounds[k + 1]] for k in range(len(bc) - 1))
        yield Architecture(bc, parents)


def enumerate_layer(shape, arch: Architecture, layer: int,
                    limit: int = 10**4) -> Iterator[Architecture]:
    """Every configuration of one connection layer, other layers fixed."""
    bc = _counts(shape)
    n_parents, n_children = bc[layer], bc[layer + 1]
    if n_children * math.log10(n_parents) > math.log10(limit) + 1e-12:
        raise SpaceTooLarge(f"layer {layer} has {n_parents}^{n_children} configurations")
    for cfg in itertools.product(range(n_parents), repeat=n_children):
        yield arch.with_layer(layer, cfg)


def set_layer_uniform_parent(arch: Architecture, layer: int, parent: int) -> Architecture:
    """Copy of ``arch`` where every block of ``layer + 1`` hangs off ``parent``."""
    if not 0 <= parent < arch.block_counts[layer]:
        raise ParentOutOfRange(
            f"parent {parent} out of range for layer {layer} "
            f"with {arch.block_counts[layer]} blocks")
    return arch.with_layer(layer, [parent] * arch.block_counts[layer + 1])


def ancestor_at(arch: Architecture, layer: int, leaf: int) -> int:
    """Index of the block in ``layer`` on the path from the root to ``leaf``."""
    block = leaf
    for k in range(len(arch.parents) - 1, layer - 1, -1):
        block = arch.parents[k][block]
    return block
