"""Dense tree network with a connection-keyed, lazily populated weight store.

Block ``j`` of layer ``k + 1`` computes ``relu(W h + b)`` from the activation
``h`` of its parent block in layer ``k``. Layer 0 is the raw feature vector.
Each attribute ``n`` owns a head on leaf block ``n``: one ReLU hidden layer
followed by a single logit.

Only *live* blocks (blocks with at least one descendant attribute) are
computed and trained. Connections into dead blocks are left untouched, which
keeps their stored weights available for later architectures.

Checkpoint layout (all integers and floats little-endian)::

    magic           8 bytes   b"GNASWST\\0"
    version         u32       1
    dtype           u8        0 = float64, 1 = float32
    reserved        3 bytes   zero
    seed            u64       initializer seed for lazily created keys
    num_layers      u32       M
    block_counts    M x u32
    channel_widths  M x u32
    head_width      u32
    head arrays     hidden_w (N,H,w_M), hidden_b (N,H), out_w (N,H), out_b (N,),
                    then their four velocity arrays in the same order
    num_records     u32
    records         layer u32, parent u32, child u32,
                    weight (w_out,w_in), bias (w_out,), v_weight, v_bias

Arrays are stored C-contiguous in the header's dtype. Records are sorted by
key, so equal stores serialize to equal bytes.
"""

from __future__ import annotations

import functools
import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .arch import Architecture, NetworkShape, descendants
from .errors import DimensionMismatch, NonFiniteLoss, ParseError, ShapeMismatch

MAGIC = b"GNASWST\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class ConnectionKey(NamedTuple):
    layer: int
    parent: int
    child: int


@dataclass
class ConnectionParams:
    weight: np.ndarray
    bias: np.ndarray
    v_weight: np.ndarray
    v_bias: np.ndarray

    def arrays(self):
        return (self.weight, self.bias, self.v_weight, self.v_bias)


@dataclass
class HeadParams:
    hidden_w: np.ndarray  # (N, H, w_leaf)
    hidden_b: np.ndarray  # (N, H)
    out_w: np.ndarray     # (N, H)
    out_b: np.ndarray     # (N,)
    v_hidden_w: np.ndarray
    v_hidden_b: np.ndarray
    v_out_w: np.ndarray
    v_out_b: np.ndarray

    PARAMS = ("hidden_w", "hidden_b", "out_w", "out_b")

    def arrays(self):
        return (self.hidden_w, self.hidden_b, self.out_w, self.out_b,
                self.v_hidden_w, self.v_hidden_b, self.v_out_w, self.v_out_b)


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DimensionMismatch(
                f"{len(self.features)} feature rows vs {len(self.labels)} label rows")

    def __len__(self):
        return len(self.features)


def _glorot(rng, fan_out, fan_in, size, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=size).astype(dtype)


class WeightStore:
    """Parameters and momentum state for every connection ever used.

    Keys are created on first access with a Glorot-uniform draw seeded by
    ``(seed, key)``, so a key's initial value does not depend on when it is
    first touched. Existing keys are never re-initialized.
    """

    def __init__(self, shape: NetworkShape, seed: int = 0, dtype=np.float64):
        self.shape = shape
        self.seed = int(seed)
        if self.seed < 0:
            raise ValueError("store seed must be non-negative")
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float64, np.float32):
            raise ValueError(f"unsupported dtype {self.dtype}")
        self.connections: dict[ConnectionKey, ConnectionParams] = {}
        self.head = self._init_head()

    def _init_head(self) -> HeadParams:
        n, h, w = self.shape.num_attributes, self.shape.head_width, self.shape.channel_widths[-1]
        rng = np.random.default_rng([self.seed, 2])
        hw = _glorot(rng, h, w, (n, h, w), self.dtype)
        ow = _glorot(rng, 1, h, (n, h), self.dtype)
        zeros = functools.partial(np.zeros, dtype=self.dtype)
        return HeadParams(hw, zeros((n, h)), ow, zeros(n),
                          zeros((n, h, w)), zeros((n, h)), zeros((n, h)), zeros(n))

    def _check_key(self, key: ConnectionKey) -> None:
        bc = self.shape.block_counts
        if not (0 <= key.layer < len(bc) - 1 and 0 <= key.parent < bc[key.layer]
                and 0 <= key.child < bc[key.layer + 1]):
            raise ShapeMismatch(f"connection {tuple(key)} outside shape {bc}")

    def get(self, key) -> ConnectionParams:
        key = ConnectionKey(*key)
        p = self.connections.get(key)
        if p is None:
            self._check_key(key)
            w_in = self.shape.channel_widths[key.layer]
            w_out = self.shape.channel_widths[key.layer + 1]
            rng = np.random.default_rng([self.seed, 1, *key])
            weight = _glorot(rng, w_out, w_in, (w_out, w_in), self.dtype)
            p = ConnectionParams(weight, np.zeros(w_out, self.dtype),
                                 np.zeros_like(weight), np.zeros(w_out, self.dtype))
            self.connections[key] = p
        return p

    def __contains__(self, key) -> bool:
        return ConnectionKey(*key) in self.connections

    def ensure(self, arch: Architecture) -> None:
        """Materialize every live connection of ``arch`` (makes forward read-only)."""
        for key in live_connections(self.shape, arch):
            self.get(key)

    def copy(self) -> "WeightStore":
        new = WeightStore.__new__(WeightStore)
        new.shape, new.seed, new.dtype = self.shape, self.seed, self.dtype
        new.connections = {k: ConnectionParams(*(a.copy() for a in p.arrays()))
                           for k, p in self.connections.items()}
        new.head = HeadParams(*(a.copy() for a in self.head.arrays()))
        return new

    def checksum(self, keys: Iterable | None = None, include_head: bool = True) -> str:
        h = hashlib.sha256()
        chosen = sorted(self.connections) if keys is None else sorted(ConnectionKey(*k) for k in keys)
        for k in chosen:
            h.update(struct.pack("<3I", *k))
            p = self.connections.get(k)
            if p is None:
                h.update(b"absent")
                continue
            for a in p.arrays():
                h.update(np.ascontiguousarray(a).tobytes())
        if include_head:
            for a in self.head.arrays():
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    # -- checkpoint ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        dt = _DTYPES[0] if self.dtype == np.float64 else _DTYPES[1]
        code = 0 if self.dtype == np.float64 else 1
        s = self.shape
        parts = [MAGIC, struct.pack("<IB3xQI", VERSION, code, self.seed, s.num_layers),
                 struct.pack(f"<{s.num_layers}I", *s.block_counts),
                 struct.pack(f"<{s.num_layers}I", *s.channel_widths),
                 struct.pack("<I", s.head_width)]
        parts += [np.ascontiguousarray(a, dtype=dt).tobytes() for a in self.head.arrays()]
        parts.append(struct.pack("<I", len(self.connections)))
        for k in sorted(self.connections):
            parts.append(struct.pack("<3I", *k))
            parts += [np.ascontiguousarray(a, dtype=dt).tobytes()
                      for a in self.connections[k].arrays()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WeightStore":
        view = memoryview(buf)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise ParseError(f"truncated checkpoint at byte {pos}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(8)) != MAGIC:
            raise ParseError("not a weight-store checkpoint (bad magic)")
        version, code, seed, m = struct.unpack("<IB3xQI", take(20))
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        if code not in _DTYPES:
            raise ParseError(f"unknown dtype code {code}")
        dt = _DTYPES[code]
        bc = struct.unpack(f"<{m}I", take(4 * m))
        cw = struct.unpack(f"<{m}I", take(4 * m))
        (hw,) = struct.unpack("<I", take(4))
        shape = NetworkShape(bc, cw, hw)

        def arr(shp):
            n = int(np.prod(shp))
            return np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shp).astype(dt.newbyteorder("="))

        store = cls.__new__(cls)
        store.shape, store.seed = shape, seed
        store.dtype = np.dtype(np.float64 if code == 0 else np.float32)
        n, w = shape.num_attributes, cw[-1]
        shapes = [(n, hw, w), (n, hw), (n, hw), (n,)]
        store.head = HeadParams(*[arr(sh) for sh in shapes + shapes])
        (count,) = struct.unpack("<I", take(4))
        store.connections = {}
        for _ in range(count):
            key = ConnectionKey(*struct.unpack("<3I", take(12)))
            store._check_key(key)
            w_in, w_out = cw[key.layer], cw[key.layer + 1]
            sh = [(w_out, w_in), (w_out,)]
            store.connections[key] = ConnectionParams(*[arr(x) for x in sh + sh])
        if pos != len(view):
            raise ParseError(f"{len(view) - pos} trailing bytes in checkpoint")
        return store

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@functools.lru_cache(maxsize=4096)
def _live_blocks(block_counts: tuple, arch: Architecture) -> tuple:
    desc = descendants(block_counts, arch)
    return tuple(tuple(bool(s) for s in layer) for layer in desc.sets)


def live_connections(shape: NetworkShape, arch: Architecture) -> list[ConnectionKey]:
    """Connections of ``arch`` that lead to at least one attribute."""
    live = _live_blocks(shape.block_counts, arch)
    return [ConnectionKey(k, i, j) for k, i, j in arch.connections() if live[k + 1][j]]


@dataclass
class ForwardCache:
    acts: list
    pres: list
    leaf: np.ndarray
    hid_pre: np.ndarray
    hid: np.ndarray


def forward(shape: NetworkShape, arch: Architecture, store: WeightStore, features):
    """Logits ``(batch, N)`` and the activations needed for backprop."""
    x = np.asarray(features, dtype=store.dtype)
    if x.ndim != 2 or x.shape[1] != shape.input_dim:
        raise DimensionMismatch(
            f"features of shape {x.shape}, expected (batch, {shape.input_dim})")
    if arch.block_counts != shape.block_counts:
        raise ShapeMismatch(f"architecture {arch.block_counts} vs shape {shape.block_counts}")
    live = _live_blocks(shape.block_counts, arch)
    bc = shape.block_counts
    acts = [[None] * b for b in bc]
    pres = [[None] * b for b in bc]
    acts[0][0] = x
    for k, layer in enumerate(arch.parents):
        for j, i in enumerate(layer):
            if not live[k + 1][j]:
                continue
            p = store.get((k, i, j))
            pre = acts[k][i] @ p.weight.T + p.bias
            pres[k + 1][j] = pre
            acts[k + 1][j] = np.maximum(pre, 0)
    hd = store.head
    leaf = np.stack(acts[-1])                                       # (N, b, w)
    hid_pre = leaf @ hd.hidden_w.transpose(0, 2, 1) + hd.hidden_b[:, None, :]
    hid = np.maximum(hid_pre, 0)                                    # (N, b, H)
    logits = np.einsum("nbh,nh->bn", hid, hd.out_w) + hd.out_b
    return logits, ForwardCache(acts, pres, leaf, hid_pre, hid)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_loss(logits, labels):
    """Mean binary cross-entropy over batch and attributes, and its logit gradient."""
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype)
    if z.shape != y.shape:
        raise DimensionMismatch(f"logits {z.shape} vs labels {y.shape}")
    loss = float(np.mean(np.logaddexp(0, z) - y * z))
    grad = (_sigmoid(z) - y) / z.size
    return loss, grad


@dataclass
class Gradients:
    connections: dict  # ConnectionKey -> (d_weight, d_bias)
    head: tuple        # d of HeadParams.PARAMS, same order


def backward(shape: NetworkShape, arch: Architecture, store: WeightStore,
             cache: ForwardCache, d_logits) -> Gradients:
    hd = store.head
    d_out_b = d_logits.sum(0)
    d_out_w = np.einsum("bn,nbh->nh", d_logits, cache.hid)
    d_hid = d_logits.T[:, :, None] * hd.out_w[:, None, :]
    d_hid_pre = d_hid * (cache.hid_pre > 0)
    d_hidden_w = d_hid_pre.transpose(0, 2, 1) @ cache.leaf
    d_hidden_b = d_hid_pre.sum(1)
    d_leaf = d_hid_pre @ hd.hidden_w

    bc = shape.block_counts
    d_acts = [[None] * b for b in bc]
    d_acts[-1] = list(d_leaf)
    grads = {}
    for k in range(len(bc) - 2, -1, -1):
        for j, i in enumerate(arch.parents[k]):
            d_act = d_acts[k + 1][j]
            if d_act is None:
                continue
            d_pre = d_act * (cache.pres[k + 1][j] > 0)
            p = store.connections[ConnectionKey(k, i, j)]
            grads[ConnectionKey(k, i, j)] = (d_pre.T @ cache.acts[k][i], d_pre.sum(0))
            if k > 0:
                d_in = d_pre @ p.weight
                if d_acts[k][i] is None:
                    d_acts[k][i] = d_in
                else:
                    d_acts[k][i] = d_acts[k][i] + d_in
    return Gradients(grads, (d_hidden_w, d_hidden_b, d_out_w, d_out_b))


def loss_and_grads(shape, arch, store, batch: Batch):
    logits, cache = forward(shape, arch, store, batch.features)
    if batch.labels.shape != logits.shape:
        raise DimensionMismatch(f"labels {batch.labels.shape} vs logits {logits.shape}")
    loss, d_logits = bce_loss(logits, batch.labels)
    return loss, backward(shape, arch, store, cache, d_logits)


def _nesterov(theta, v, g, lr, mu, wd):
    step = g + wd * theta if wd else g
    v *= mu
    v -= lr * step
    theta += mu * v - lr * step


def train_step(shape, arch, store, batch: Batch, lr: float, momentum: float,
               weight_decay: float) -> float:
    """One Nesterov-SGD step on the live connections of ``arch`` and all heads.

    A zero learning rate leaves the store untouched (momentum included).
    """
    loss, grads = loss_and_grads(shape, arch, store, batch)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}; reduce the learning rate")
    if lr == 0:
        return loss
    for key, (gw, gb) in grads.connections.items():
        p = store.connections[key]
        _nesterov(p.weight, p.v_weight, gw, lr, momentum, weight_decay)
        _nesterov(p.bias, p.v_bias, gb, lr, momentum, weight_decay)
    hd = store.head
    params = (hd.hidden_w, hd.hidden_b, hd.out_w, hd.out_b)
    vels = (hd.v_hidden_w, hd.v_hidden_b, hd.v_out_w, hd.v_out_b)
    for theta, v, g in zip(params, vels, grads.head):
        _nesterov(theta, v, g, lr, momentum, weight_decay)
    return loss


def correct_counts(shape, arch, store, batches: Sequence[Batch], workers: int = 0):
    """Per-attribute number of correct predictions and the number of samples."""
    if not batches:
        raise ValueError("need at least one batch")
    store.ensure(arch)

    def one(batch):
        logits, _ = forward(shape, arch, store, batch.features)
        return ((logits > 0) == (np.asarray(batch.labels) > 0.5)).sum(0)

    if workers and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(one, batches))
    else:
        parts = [one(b) for b in batches]
    total = sum(len(b) for b in batches)
    return np.sum(parts, axis=0).astype(np.int64), total


def accuracy_per_attribute(shape, arch, store, batches: Sequence[Batch],
                           workers: int = 0) -> np.ndarray:
    counts, total = correct_counts(shape, arch, store, batches, workers)
    return counts / total


def _param_pairs(store, grads: Gradients):
    pairs = []
    for key in sorted(grads.connections):
        p = store.connections[key]
        gw, gb = grads.connections[key]
        pairs += [(p.weight, gw), (p.bias, gb)]
    hd = store.head
    pairs += list(zip((hd.hidden_w, hd.hidden_b, hd.out_w, hd.out_b), grads.head))
    return pairs


def _relu_pattern(cache: ForwardCache) -> bytes:
    masks = [pre > 0 for layer in cache.pres for pre in layer if pre is not None]
    masks.append(cache.hid_pre > 0)
    return b"".join(np.packbits(m).tobytes() for m in masks)


def gradient_check(shape, arch, store, batch: Batch, epsilon: float = 1e-5,
                   n_coords: int = 200, seed: int = 0,
                   grads: Gradients | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled from every parameter array in proportion to its
    size (all coordinates when there are fewer than ``n_coords``). Pass
    ``grads`` to check a precomputed (possibly corrupted) gradient instead.
    The relative error is ``|a - n| / max(|a|, |n|, floor)`` where ``floor``
    is 1e-3 of the largest gradient magnitude in the same array, so
    coordinates whose true gradient is round-off sized do not dominate.

    A coordinate is skipped when nudging it by ``epsilon`` flips any ReLU
    on or off: the loss has a kink inside the difference window there, so
    the central difference does not estimate the gradient. Zero-initialised
    biases make this common (an all-zero activation vector puts the next
    pre-activation exactly on the kink). The skip count is stored in
    ``gradient_check.last_skipped``.
    """
    store.ensure(arch)
    if grads is None:
        _, grads = loss_and_grads(shape, arch, store, batch)
    pairs = _param_pairs(store, grads)
    total = sum(a.size for a, _ in pairs)
    rng = np.random.default_rng(seed)

    def probe():
        logits, cache = forward(shape, arch, store, batch.features)
        return bce_loss(logits, batch.labels)[0], _relu_pattern(cache)

    _, base = probe()
    worst = 0.0
    skipped = 0
    for theta, g in pairs:
        if total <= n_coords:
            idx = np.arange(theta.size)
        else:
            quota = min(theta.size, max(4, int(np.ceil(n_coords * theta.size / total))))
            idx = rng.choice(theta.size, size=quota, replace=False)
        flat, gflat = theta.reshape(-1), np.asarray(g).reshape(-1)
        floor = max(1e-3 * float(np.abs(gflat).max()), 1e-12)
        for c in idx:
            orig = flat[c]
            flat[c] = orig + epsilon
            f_plus, pat_plus = probe()
            flat[c] = orig - epsilon
            f_minus, pat_minus = probe()
            flat[c] = orig
            if pat_plus != base or pat_minus != base:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * epsilon)
            denom = max(abs(gflat[c]), abs(numeric), floor)
            worst = max(worst, abs(gflat[c] - numeric) / denom)
    gradient_check.last_skipped = skipped
    return worst


gradient_check.last_skipped = 0
