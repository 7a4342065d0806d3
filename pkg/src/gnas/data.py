"""Multi-attribute datasets: synthetic generation with planted groups, CSV I/O, splitting.

Synthetic inputs are standard normal vectors. Each attribute group reads a
private set of orthonormal input directions (its latent subspace), and each
attribute is a noisy linear threshold of its group's latent coordinates, so
attributes in one group are correlated and attributes in different groups
are independent.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySplit, InfeasibleBaseRate, NonBinaryLabel, ParseError
from .nn import Batch

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    attrs_per_group: tuple[int, ...] = (4, 4, 4)
    input_dim: int = 16
    latent_dim_per_group: int = 2
    label_noise: float = 0.05
    samples: tuple[int, int, int] = (2000, 1000, 1000)
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attrs_per_group", tuple(int(a) for a in self.attrs_per_group))
        object.__setattr__(self, "samples", tuple(int(s) for s in self.samples))
        if not self.attrs_per_group or any(a < 1 for a in self.attrs_per_group):
            raise ValueError(f"attrs_per_group must be positive: {self.attrs_per_group}")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        if self.latent_dim_per_group < 1:
            raise ValueError("latent_dim_per_group must be >= 1")
        if self.num_groups * self.latent_dim_per_group > self.input_dim:
            raise ValueError(
                f"{self.num_groups} groups x {self.latent_dim_per_group} latent dims "
                f"do not fit in input_dim={self.input_dim}")
        if len(self.samples) != 3 or any(s < 1 for s in self.samples):
            raise ValueError(f"samples must be three positive split sizes: {self.samples}")

    @property
    def num_groups(self) -> int:
        return len(self.attrs_per_group)

    @property
    def num_attributes(self) -> int:
        return sum(self.attrs_per_group)


@dataclass
class Dataset:
    splits: dict  # name -> Batch
    attribute_names: list
    group_labels: list | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def train(self) -> Batch:
        return self.splits["train"]

    @property
    def valid(self) -> Batch:
        return self.splits["valid"]

    @property
    def test(self) -> Batch:
        return self.splits["test"]

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    @property
    def input_dim(self) -> int:
        return next(iter(self.splits.values())).features.shape[1]

    def merged(self, names: Sequence[str]) -> Batch:
        parts = [self.splits[n] for n in names if n in self.splits]
        return Batch(np.concatenate([p.features for p in parts]),
                     np.concatenate([p.labels for p in parts]))


def _orthonormal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.rng_seed)
    d, k = spec.input_dim, spec.latent_dim_per_group
    basis = _orthonormal(rng, d)
    n_total = sum(spec.samples)
    x = rng.standard_normal((n_total, d))

    groups = [g for g, size in enumerate(spec.attrs_per_group) for _ in range(size)]
    n_attr = len(groups)
    weights = np.zeros((n_attr, k))
    offsets = np.zeros(n_attr)
    clean = np.zeros((n_total, n_attr), dtype=np.int8)
    base_rates = []
    for n, g in enumerate(groups):
        z = x @ basis[:, g * k:(g + 1) * k]
        for _ in range(1000):
            w = rng.standard_normal(k)
            w /= np.linalg.norm(w)
            b = rng.standard_normal()
            y = (z @ w + b > 0)
            rate = float(y.mean())
            if 0.3 <= rate <= 0.7:
                break
        else:
            raise InfeasibleBaseRate(f"attribute {n}: no base rate in [0.3, 0.7] after 1000 draws")
        weights[n], offsets[n] = w, b
        clean[:, n] = y
        base_rates.append(rate)

    flips = rng.random((n_total, n_attr)) < spec.label_noise
    labels = np.where(flips, 1 - clean, clean).astype(np.int8)

    bounds = np.cumsum((0,) + spec.samples)
    splits = {name: Batch(x[bounds[s]:bounds[s + 1]], labels[bounds[s]:bounds[s + 1]])
              for s, name in enumerate(SPLITS)}
    clean_test = clean[bounds[2]:bounds[3]]
    meta = {
        "spec": asdict(spec),
        "base_rates": base_rates,
        "probe_accuracies": _probe(x, splits, clean_test, groups, basis, k),
        "group_labels": groups,
    }
    names = [f"g{g}_a{n}" for n, g in enumerate(groups)]
    return Dataset(splits, names, groups, meta)


def _probe(x, splits, clean_test, groups, basis, k):
    """Logistic probe on the true latent coordinates, scored against clean test labels."""
    from sklearn.linear_model import LogisticRegression

    accs = []
    for n, g in enumerate(groups):
        proj = basis[:, g * k:(g + 1) * k]
        y_train = splits["train"].labels[:, n]
        if y_train.min() == y_train.max():
            accs.append(float(np.mean(clean_test[:, n] == y_train[0])))
            continue
        clf = LogisticRegression().fit(splits["train"].features @ proj, y_train)
        pred = clf.predict(splits["test"].features @ proj)
        accs.append(float(np.mean(pred == clean_test[:, n])))
    return accs


def split(data: Dataset, fractions: Sequence[float], rng_seed: int) -> Dataset:
    """Seeded shuffle of all rows, then contiguous train/valid/test slices."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1: {fractions}")
    rows = data.merged(list(data.splits))
    n = len(rows)
    sizes = [int(round(f * n)) for f in fractions[:2]]
    sizes.append(n - sum(sizes))
    if min(sizes) < 1:
        raise EmptySplit(f"fractions {tuple(fractions)} over {n} rows give split sizes {sizes}")
    order = np.random.default_rng(rng_seed).permutation(n)
    bounds = np.cumsum([0] + sizes)
    splits = {}
    for s, name in enumerate(SPLITS):
        idx = order[bounds[s]:bounds[s + 1]]
        splits[name] = Batch(rows.features[idx], rows.labels[idx])
    return Dataset(splits, list(data.attribute_names), data.group_labels, dict(data.metadata))


def save_csv(batch: Batch, path, attribute_names: Sequence[str] | None = None) -> None:
    """Write ``f0..f{d-1}`` feature columns then one 0/1 column per attribute.

    Attribute columns are named ``a0..`` unless ``attribute_names`` is given.
    Features use ``repr`` so a reload is bit-exact.
    """
    d = batch.features.shape[1]
    n = batch.labels.shape[1]
    names = list(attribute_names) if attribute_names is not None else [f"a{i}" for i in range(n)]
    if len(names) != n:
        raise ValueError(f"{len(names)} attribute names for {n} label columns")
    header = [f"f{i}" for i in range(d)] + names
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for xs, ys in zip(batch.features, batch.labels):
            w.writerow([repr(float(v)) for v in xs] + [str(int(v)) for v in ys])


def load_csv(path, n_feature_cols: int | None = None, n_attr_cols: int | None = None) -> Dataset:
    """Read ``f0..f{d-1},a0..a{N-1}`` rows into a dataset with a single ``all`` split.

    By default the leading ``f<digits>`` header columns are features and the
    rest are attributes.
    Row numbers in errors are 1-based file lines (the header is line 1).
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path}: empty file, expected a header row", row=1)
        if n_feature_cols is None:
            n_feature_cols = 0
            while (n_feature_cols < len(header)
                   and re.fullmatch(r"f\d+", header[n_feature_cols].strip())):
                n_feature_cols += 1
        if n_attr_cols is None:
            n_attr_cols = len(header) - n_feature_cols
        width = n_feature_cols + n_attr_cols
        if len(header) != width or n_attr_cols < 1:
            raise ParseError(
                f"{path}: header has {len(header)} columns, expected "
                f"{n_feature_cols} features + {n_attr_cols} attributes", row=1)
        feats, labels = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}: expected {width} fields, got {len(row)}", row=line)
            xs = []
            for c in range(n_feature_cols):
                try:
                    xs.append(float(row[c]))
                except ValueError:
                    raise ParseError(f"{path}: cannot parse {row[c]!r} as a number",
                                     row=line, column=c + 1) from None
            ys = []
            for c in range(n_feature_cols, width):
                v = row[c].strip()
                if v not in ("0", "1"):
                    raise NonBinaryLabel(f"{path}: label {v!r} is not 0 or 1",
                                         row=line, column=c + 1)
                ys.append(int(v))
            feats.append(xs)
            labels.append(ys)
    if not feats:
        raise ParseError(f"{path}: no data rows")
    batch = Batch(np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int8))
    names = [h.strip() for h in header[n_feature_cols:]]
    return Dataset({"all": batch}, names)


def save_dataset(data: Dataset, out_dir) -> dict:
    """Write one CSV per split plus a metadata sidecar; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, batch in data.splits.items():
        p = out / f"{name}.csv"
        save_csv(batch, p, data.attribute_names)
        paths[name] = str(p)
    meta = dict(data.metadata)
    meta.setdefault("group_labels", data.group_labels)
    meta["attribute_names"] = list(data.attribute_names)
    p = out / "metadata.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths["metadata"] = str(p)
    return paths
